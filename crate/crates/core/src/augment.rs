//! Online augmentation: right-angle rotation and landslide-region cutmix.
//!
//! Rotations are counter-clockwise (`k = 1` maps `[[1, 2], [3, 4]]` to `[[2, 4], [1, 3]]`).
//! Cutmix pastes whole 8-connected landslide components of a donor at their own
//! coordinates, copying every band and the mask.

use std::collections::VecDeque;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BandStack, GroundTruthMask, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_enabled: bool,
    pub cutmix_enabled: bool,
    pub max_donors: usize,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_enabled: true,
            cutmix_enabled: true,
            max_donors: 2,
            rng_seed: 42,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation_enabled: false,
            cutmix_enabled: false,
            ..Default::default()
        }
    }
}

/// Seedable deterministic generator. Equal seeds give equal draw sequences.
#[derive(Debug, Clone)]
pub struct RngState(ChaCha8Rng);

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        RngState(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from `seed` and a stream number.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState(rng)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

fn rotate_view<'a, A, D>(mut v: ndarray::ArrayView<'a, A, D>, k: u8) -> ndarray::ArrayView<'a, A, D>
where
    D: ndarray::Dimension,
{
    match k % 4 {
        0 => {}
        1 => {
            v.swap_axes(0, 1);
            v.invert_axis(Axis(0));
        }
        2 => {
            v.invert_axis(Axis(0));
            v.invert_axis(Axis(1));
        }
        _ => {
            v.swap_axes(0, 1);
            v.invert_axis(Axis(1));
        }
    }
    v
}

/// Rotates a 2-D array counter-clockwise by `k`·90°.
pub fn rotate_plane<A: Clone>(plane: ArrayView2<'_, A>, k: u8) -> Array2<A> {
    rotate_view(plane, k).as_standard_layout().into_owned()
}

/// Rotates image and mask together by `k`·90° counter-clockwise.
pub fn rotate_k(sample: &Sample, k: u8) -> Sample {
    let image = &sample.image;
    let pixels = rotate_view(image.pixels().view(), k).as_standard_layout().into_owned();
    let labels = rotate_plane(sample.mask.labels().view(), k);
    Sample {
        image: BandStack::new(pixels, image.band_meta().to_vec(), image.patch_id())
            .expect("rotation preserves band metadata"),
        mask: GroundTruthMask::new(labels, sample.mask.patch_id()).expect("rotation preserves labels"),
    }
}

/// Rotates by 90, 180 or 270 degrees, chosen uniformly.
pub fn random_rotate(sample: &Sample, rng: &mut RngState) -> Sample {
    let k = rng.random_range(1..=3u8);
    rotate_k(sample, k)
}

/// 8-connected components of the landslide pixels, each listed in raster order.
/// Components are ordered by their first pixel in raster order.
pub fn landslide_regions(labels: &Array2<u8>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = labels.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if labels[[y, x]] != 1 || seen[[y, x]] {
                continue;
            }
            let mut region = Vec::new();
            seen[[y, x]] = true;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                region.push((cy, cx));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if labels[[ny, nx]] == 1 && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            region.sort_unstable();
            regions.push(region);
        }
    }
    regions
}

fn check_donor(sample: &Sample, donor: &Sample) -> Result<()> {
    if donor.image.pixels().dim() != sample.image.pixels().dim() {
        return Err(Error::shape(sample.image.pixels().dim(), donor.image.pixels().dim()));
    }
    if donor.mask.positive_count() == 0 {
        return Err(Error::InvalidDonor(donor.id().to_string()));
    }
    Ok(())
}

/// Copies every band and the mask value of `donor` at the region's coordinates onto `target`.
pub fn paste_region(target: &mut Sample, donor: &Sample, region: &[(usize, usize)]) -> Result<()> {
    if donor.image.pixels().dim() != target.image.pixels().dim() {
        return Err(Error::shape(target.image.pixels().dim(), donor.image.pixels().dim()));
    }
    let src = donor.image.pixels();
    let src_labels = donor.mask.labels();
    let dst = target.image.pixels_mut();
    for &(y, x) in region {
        dst.slice_mut(s![y, x, ..]).assign(&src.slice(s![y, x, ..]));
    }
    let dst_labels = target.mask.labels_mut();
    for &(y, x) in region {
        dst_labels[[y, x]] = src_labels[[y, x]];
    }
    Ok(())
}

/// Pastes exactly `n` donor regions; donors are drawn with replacement.
pub fn cutmix_n(sample: &Sample, donor_pool: &[Sample], rng: &mut RngState, n: usize) -> Result<Sample> {
    let mut out = sample.clone();
    if n == 0 {
        return Ok(out);
    }
    if donor_pool.is_empty() {
        return Err(Error::EmptyDonorPool);
    }
    for _ in 0..n {
        let donor = &donor_pool[rng.random_range(0..donor_pool.len())];
        check_donor(sample, donor)?;
        let regions = landslide_regions(donor.mask.labels());
        let region = &regions[rng.random_range(0..regions.len())];
        paste_region(&mut out, donor, region)?;
    }
    Ok(out)
}

/// Pastes a uniformly drawn number (0..=max_donors) of donor regions.
pub fn cutmix(sample: &Sample, donor_pool: &[Sample], rng: &mut RngState, max_donors: usize) -> Result<Sample> {
    if max_donors > 0 && donor_pool.is_empty() {
        return Err(Error::EmptyDonorPool);
    }
    let n = rng.random_range(0..=max_donors);
    cutmix_n(sample, donor_pool, rng, n)
}

/// Rotation then cutmix on each sample, in batch order.
pub fn augment_batch(batch: &[Sample], pool: &[Sample], cfg: &AugmentConfig, rng: &mut RngState) -> Result<Vec<Sample>> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("augmentation batch is empty".into()));
    }
    batch
        .iter()
        .map(|s| {
            let rotated = if cfg.rotation_enabled {
                random_rotate(s, rng)
            } else {
                s.clone()
            };
            if cfg.cutmix_enabled {
                cutmix(&rotated, pool, rng, cfg.max_donors)
            } else {
                Ok(rotated)
            }
        })
        .collect()
}
