use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{h5, BandStack, GroundTruthMask, Sample, ORIGINAL_BANDS, PATCH_SIZE};
use crate::error::{Error, Result};

/// Supported on-disk arrangements of a dataset root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetLayout {
    /// `img/image_<N>.h5` (dataset `img`) paired with `mask/mask_<N>.h5` (dataset `mask`).
    #[default]
    PairedH5,
}

/// Every discoverable sample under a dataset root, ordered lexicographically by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    root_path: PathBuf,
    sample_ids: Vec<String>,
    landslide_ids: Vec<String>,
}

impl DatasetIndex {
    pub fn root_path(&self) -> &Path {
        &self.root_path
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    /// Ids whose mask holds at least one landslide pixel.
    pub fn landslide_ids(&self) -> &[String] {
        &self.landslide_ids
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.sample_ids.binary_search_by(|s| s.as_str().cmp(id)).is_ok()
    }

    pub fn is_landslide(&self, id: &str) -> bool {
        self.landslide_ids.binary_search_by(|s| s.as_str().cmp(id)).is_ok()
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        image_path(&self.root_path, id)
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        mask_path(&self.root_path, id)
    }
}

pub(crate) fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("img").join(format!("image_{id}.h5"))
}

pub(crate) fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("mask").join(format!("mask_{id}.h5"))
}

/// Extracts `N` from `<prefix>_<N>.h5`; `N` must be a positive integer without zero padding.
fn parse_numbered(name: &str, prefix: &str) -> Option<String> {
    let n = name.strip_prefix(prefix)?.strip_prefix('_')?.strip_suffix(".h5")?;
    let valid = !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) && !n.starts_with('0');
    valid.then(|| n.to_string())
}

fn list_ids(dir: &Path, prefix: &str) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(id) = entry.file_name().to_str().and_then(|n| parse_numbered(n, prefix)) {
            ids.push(id);
        }
    }
    ids.sort();
    Ok(ids)
}

/// Scans `root` and indexes every image/mask pair.
pub fn load_dataset(root: &Path, layout: DatasetLayout) -> Result<DatasetIndex> {
    let DatasetLayout::PairedH5 = layout;
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let sample_ids = list_ids(&root.join("img"), "image")?;
    let mask_ids = list_ids(&root.join("mask"), "mask")?;
    if sample_ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut landslide_ids = Vec::new();
    for id in &sample_ids {
        if mask_ids.binary_search(id).is_err() {
            return Err(Error::MissingMask(id.clone()));
        }
        let values = h5::read_mask_values(&mask_path(root, id))?;
        if values.iter().any(|v| *v > 0.0) {
            landslide_ids.push(id.clone());
        }
    }
    let orphans = mask_ids.iter().filter(|m| sample_ids.binary_search(m).is_err()).count();
    if orphans > 0 {
        log::warn!("{orphans} mask files under {} have no image", root.display());
    }
    Ok(DatasetIndex {
        root_path: root.to_path_buf(),
        sample_ids,
        landslide_ids,
    })
}

pub(crate) fn read_mask_checked(path: &Path, id: &str) -> Result<GroundTruthMask> {
    let raw = h5::read_mask_values(path)?;
    if raw.dim() != (PATCH_SIZE, PATCH_SIZE) {
        return Err(Error::shape((PATCH_SIZE, PATCH_SIZE), raw.dim()));
    }
    if let Some(v) = raw.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::NonBinaryMask {
            id: id.to_string(),
            value: *v,
        });
    }
    GroundTruthMask::new(raw.mapv(|v| v as u8), id)
}

/// Reads and validates the ground-truth mask of one sample.
pub fn read_ground_truth(index: &DatasetIndex, id: &str) -> Result<GroundTruthMask> {
    if !index.contains(id) {
        return Err(Error::UnknownId(id.to_string()));
    }
    read_mask_checked(&index.mask_path(id), id)
}

/// Reads and validates one 14-band sample.
pub fn read_sample(index: &DatasetIndex, id: &str) -> Result<Sample> {
    if !index.contains(id) {
        return Err(Error::UnknownId(id.to_string()));
    }
    let pixels = h5::read_image_h5(&index.image_path(id))?;
    let expected = (PATCH_SIZE, PATCH_SIZE, ORIGINAL_BANDS);
    if pixels.dim() != expected {
        return Err(Error::shape(expected, pixels.dim()));
    }
    let image = BandStack::original(pixels, id)?;
    let mask = read_mask_checked(&index.mask_path(id), id)?;
    Sample::new(image, mask)
}

/// Class-balance summary of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    /// Landslide pixels over all pixels.
    pub pixel_positive_rate: f64,
    /// Min and max per-image landslide fraction over images with at least one landslide
    /// pixel; `None` when no image has any.
    pub per_image_positive_rate_range: Option<(f64, f64)>,
    pub images: usize,
    pub images_with_landslides: usize,
}

pub fn dataset_stats(index: &DatasetIndex) -> Result<DatasetStats> {
    if index.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let masks = index
        .sample_ids()
        .iter()
        .map(|id| h5::read_mask_values(&index.mask_path(id)));
    stats_from_masks(masks)
}

pub(crate) fn stats_from_masks<I>(masks: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = Result<Array2<f64>>>,
{
    let (mut positives, mut total, mut images) = (0u64, 0u64, 0usize);
    let mut range: Option<(f64, f64)> = None;
    let mut with_ls = 0usize;
    for mask in masks {
        let mask = mask?;
        let pos = mask.iter().filter(|v| **v > 0.0).count() as u64;
        let n = mask.len() as u64;
        positives += pos;
        total += n;
        images += 1;
        if pos > 0 {
            with_ls += 1;
            let rate = pos as f64 / n as f64;
            range = Some(match range {
                None => (rate, rate),
                Some((lo, hi)) => (lo.min(rate), hi.max(rate)),
            });
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(DatasetStats {
        pixel_positive_rate: positives as f64 / total as f64,
        per_image_positive_rate_range: range,
        images,
        images_with_landslides: with_ls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_names() {
        assert_eq!(parse_numbered("image_12.h5", "image").as_deref(), Some("12"));
        assert_eq!(parse_numbered("image_012.h5", "image"), None);
        assert_eq!(parse_numbered("image_0.h5", "image"), None);
        assert_eq!(parse_numbered("image_.h5", "image"), None);
        assert_eq!(parse_numbered("mask_3.h5", "image"), None);
        assert_eq!(parse_numbered("image_3.h5.bak", "image"), None);
    }

    #[test]
    fn zero_and_one_masks_give_half_rate() {
        let masks = vec![Ok(Array2::zeros((4, 4))), Ok(Array2::ones((4, 4)))];
        let s = stats_from_masks(masks).unwrap();
        assert_eq!(s.pixel_positive_rate, 0.5);
        assert_eq!(s.per_image_positive_rate_range, Some((1.0, 1.0)));
        assert_eq!(s.images_with_landslides, 1);
    }

    #[test]
    fn single_pixel_rate() {
        let mut m = Array2::<f64>::zeros((128, 128));
        m[[5, 5]] = 1.0;
        let s = stats_from_masks(vec![Ok(m)]).unwrap();
        let (lo, _) = s.per_image_positive_rate_range.unwrap();
        assert!((lo - 1.0 / 16384.0).abs() < 1e-12);
        assert!((lo - 0.000061).abs() < 1e-6);
    }
}
