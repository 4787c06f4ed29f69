//! Seeded synthetic patches for tests, benchmarks and smoke runs.
//!
//! Background pixels are noisy reflectances. Landslide pixels sit inside random
//! ellipses where the visible bands brighten, near infrared drops and slope rises,
//! which is roughly what fresh scarps look like and is easy to learn.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_image_h5, write_mask, BandStack, GroundTruthMask, MaskFormat, Sample, ORIGINAL_BANDS, PATCH_SIZE};
use crate::error::{Error, Result};

/// Per-band shift applied inside landslide regions (B1..B14).
const LANDSLIDE_SHIFT: [f32; ORIGINAL_BANDS] = [
    0.10, 0.35, 0.35, 0.40, 0.20, 0.05, -0.05, -0.35, -0.10, 0.0, 0.15, 0.20, 0.45, 0.0,
];

/// One synthetic sample. With `with_landslide` the mask holds one to three ellipses.
pub fn synthetic_sample(id: &str, seed: u64, with_landslide: bool) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = PATCH_SIZE;
    let base: Vec<f32> = (0..ORIGINAL_BANDS).map(|_| rng.random_range(0.15..0.45)).collect();
    let mut labels = Array2::<u8>::zeros((n, n));
    if with_landslide {
        for _ in 0..rng.random_range(1..=3) {
            let cy = rng.random_range(16.0..(n as f32 - 16.0));
            let cx = rng.random_range(16.0..(n as f32 - 16.0));
            let ry = rng.random_range(5.0f32..16.0);
            let rx = rng.random_range(5.0f32..16.0);
            labels.indexed_iter_mut().for_each(|((y, x), v)| {
                let dy = (y as f32 - cy) / ry;
                let dx = (x as f32 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    *v = 1;
                }
            });
        }
    }
    let pixels = Array3::from_shape_fn((n, n, ORIGINAL_BANDS), |(y, x, b)| {
        let noise = rng.random_range(-0.08f32..0.08);
        let shift = if labels[[y, x]] == 1 { LANDSLIDE_SHIFT[b] } else { 0.0 };
        (base[b] + noise + shift).max(0.01)
    });
    let image = BandStack::original(pixels, id).expect("synthetic stack is valid");
    let mask = GroundTruthMask::new(labels, id).expect("synthetic mask is binary");
    Sample::new(image, mask).expect("image and mask agree")
}

/// `n` samples with ids `1..=n`. Every `landslide_every`-th sample (starting with the
/// first) contains landslides; 1 makes all of them positive, 0 none.
pub fn synthetic_samples(n: usize, seed: u64, landslide_every: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let with = landslide_every > 0 && i % landslide_every == 0;
            synthetic_sample(&(i + 1).to_string(), seed.wrapping_add(i as u64 * 7919), with)
        })
        .collect()
}

/// Writes samples in the paired HDF5 layout (`img/image_<id>.h5`, `mask/mask_<id>.h5`).
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for dir in ["img", "mask"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        write_image_h5(&root.join("img").join(format!("image_{}.h5", s.id())), s.image().pixels())?;
        write_mask(
            s.mask().labels().view(),
            &root.join("mask").join(format!("mask_{}.h5", s.id())),
            MaskFormat::H5,
        )?;
    }
    Ok(())
}
