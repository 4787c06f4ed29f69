//! Sample data model: band stacks, ground-truth masks and the on-disk dataset index.
//!
//! Pixel data is held height × width × channels (`[H, W, C]`), the layout of the
//! distributed patch files. Band order is assumed to follow B1..B14 as listed for the
//! Sentinel-2 bands plus slope (B13) and DEM (B14); the files carry no band names.

mod dataset;
pub(crate) mod h5;
mod mask_io;

use std::fmt;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    dataset_stats, load_dataset, read_ground_truth, read_sample, DatasetIndex, DatasetLayout, DatasetStats,
};
pub use h5::{read_image_h5, write_image_h5};
pub use mask_io::{read_mask, write_mask, MaskFormat};

/// Spatial size of every dataset patch.
pub const PATCH_SIZE: usize = 128;
/// Number of bands distributed with each patch.
pub const ORIGINAL_BANDS: usize = 14;
/// Upper bound on bands after feature engineering.
pub const MAX_BANDS: usize = 26;

/// Identifier of a band, `B1` through `B26`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BandId(u8);

impl BandId {
    pub const B2: BandId = BandId(2);
    pub const B3: BandId = BandId(3);
    pub const B4: BandId = BandId(4);
    pub const B8: BandId = BandId(8);
    pub const B11: BandId = BandId(11);
    pub const B12: BandId = BandId(12);
    /// First engineered band.
    pub const B15: BandId = BandId(15);

    pub const fn new(number: u8) -> Option<Self> {
        if number >= 1 && number as usize <= MAX_BANDS {
            Some(BandId(number))
        } else {
            None
        }
    }

    pub const fn number(self) -> u8 {
        self.0
    }

    pub fn is_original(self) -> bool {
        (self.0 as usize) <= ORIGINAL_BANDS
    }

    /// `B1..=B14` in storage order.
    pub fn originals() -> Vec<BandId> {
        (1..=ORIGINAL_BANDS as u8).map(BandId).collect()
    }

    pub(crate) fn offset(self, by: usize) -> Option<BandId> {
        BandId::new(self.0.checked_add(u8::try_from(by).ok()?)?)
    }
}

impl TryFrom<u8> for BandId {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        BandId::new(value).ok_or_else(|| format!("band number {value} outside 1..={MAX_BANDS}"))
    }
}

impl From<BandId> for u8 {
    fn from(id: BandId) -> u8 {
        id.0
    }
}

impl fmt::Display for BandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}", self.0)
    }
}

/// An `[H, W, C]` float32 image patch with its band metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack {
    pixels: Array3<f32>,
    band_meta: Vec<BandId>,
    patch_id: String,
}

impl BandStack {
    /// Validates band metadata and pixel finiteness.
    pub fn new(pixels: Array3<f32>, band_meta: Vec<BandId>, patch_id: impl Into<String>) -> Result<Self> {
        let patch_id = patch_id.into();
        let channels = pixels.dim().2;
        if band_meta.len() != channels {
            return Err(Error::InvalidBands(format!(
                "{} band ids for {} channels",
                band_meta.len(),
                channels
            )));
        }
        if !(ORIGINAL_BANDS..=MAX_BANDS).contains(&channels) {
            return Err(Error::InvalidBands(format!(
                "channel count {channels} outside {ORIGINAL_BANDS}..={MAX_BANDS}"
            )));
        }
        if band_meta[..ORIGINAL_BANDS] != BandId::originals()[..] {
            return Err(Error::InvalidBands("stack must begin with B1..B14 in order".into()));
        }
        let mut seen = [false; MAX_BANDS + 1];
        for id in &band_meta {
            if std::mem::replace(&mut seen[id.number() as usize], true) {
                return Err(Error::InvalidBands(format!("duplicate band {id}")));
            }
        }
        for (band, plane) in pixels.axis_iter(Axis(2)).enumerate() {
            if plane.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePixel {
                    id: patch_id,
                    band,
                });
            }
        }
        Ok(BandStack {
            pixels,
            band_meta,
            patch_id,
        })
    }

    /// Stack holding exactly the 14 distributed bands.
    pub fn original(pixels: Array3<f32>, patch_id: impl Into<String>) -> Result<Self> {
        Self::new(pixels, BandId::originals(), patch_id)
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut Array3<f32> {
        &mut self.pixels
    }

    pub fn band_meta(&self) -> &[BandId] {
        &self.band_meta
    }

    pub fn patch_id(&self) -> &str {
        &self.patch_id
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    /// View of one band, if the stack carries it.
    pub fn band(&self, id: BandId) -> Option<ArrayView2<'_, f32>> {
        let pos = self.band_meta.iter().position(|b| *b == id)?;
        Some(self.pixels.index_axis(Axis(2), pos))
    }

    pub fn into_parts(self) -> (Array3<f32>, Vec<BandId>, String) {
        (self.pixels, self.band_meta, self.patch_id)
    }
}

/// Binary `[H, W]` label image; 1 marks a landslide pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    labels: Array2<u8>,
    patch_id: String,
}

impl GroundTruthMask {
    pub fn new(labels: Array2<u8>, patch_id: impl Into<String>) -> Result<Self> {
        let patch_id = patch_id.into();
        if let Some(v) = labels.iter().find(|v| **v > 1) {
            return Err(Error::NonBinaryMask {
                id: patch_id,
                value: *v as f64,
            });
        }
        Ok(GroundTruthMask { labels, patch_id })
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut Array2<u8> {
        &mut self.labels
    }

    pub fn patch_id(&self) -> &str {
        &self.patch_id
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|v| **v == 1).count()
    }
}

/// An image paired with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub(crate) image: BandStack,
    pub(crate) mask: GroundTruthMask,
}

impl Sample {
    pub fn new(image: BandStack, mask: GroundTruthMask) -> Result<Self> {
        if image.patch_id() != mask.patch_id() {
            return Err(Error::InvalidBands(format!(
                "image id {} does not match mask id {}",
                image.patch_id(),
                mask.patch_id()
            )));
        }
        let spatial = (image.height(), image.width());
        if spatial != mask.labels().dim() {
            return Err(Error::shape(spatial, mask.labels().dim()));
        }
        Ok(Sample { image, mask })
    }

    pub fn image(&self) -> &BandStack {
        &self.image
    }

    pub fn mask(&self) -> &GroundTruthMask {
        &self.mask
    }

    pub fn id(&self) -> &str {
        self.image.patch_id()
    }

    pub fn into_parts(self) -> (BandStack, GroundTruthMask) {
        (self.image, self.mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_stack_rejects_bad_metadata() {
        let px = Array3::<f32>::zeros((4, 4, 14));
        assert!(BandStack::original(px.clone(), "1").is_ok());
        let mut meta = BandId::originals();
        meta.swap(0, 1);
        assert!(matches!(
            BandStack::new(px.clone(), meta, "1"),
            Err(Error::InvalidBands(_))
        ));
        assert!(BandStack::new(Array3::zeros((4, 4, 13)), BandId::originals()[..13].to_vec(), "1").is_err());
    }

    #[test]
    fn band_stack_rejects_nan() {
        let mut px = Array3::<f32>::zeros((4, 4, 14));
        px[[1, 2, 5]] = f32::NAN;
        assert!(matches!(
            BandStack::original(px, "7"),
            Err(Error::NonFinitePixel { band: 5, .. })
        ));
    }

    #[test]
    fn mask_must_be_binary() {
        let mut labels = Array2::<u8>::zeros((3, 3));
        labels[[0, 0]] = 2;
        assert!(matches!(
            GroundTruthMask::new(labels, "x"),
            Err(Error::NonBinaryMask { value, .. }) if value == 2.0
        ));
    }

    #[test]
    fn sample_checks_pairing() {
        let img = BandStack::original(Array3::zeros((4, 4, 14)), "1").unwrap();
        let m_other = GroundTruthMask::new(Array2::zeros((4, 4)), "2").unwrap();
        assert!(Sample::new(img.clone(), m_other).is_err());
        let m_small = GroundTruthMask::new(Array2::zeros((3, 4)), "1").unwrap();
        assert!(matches!(Sample::new(img, m_small), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn band_id_bounds() {
        assert!(BandId::new(0).is_none());
        assert!(BandId::new(27).is_none());
        assert_eq!(BandId::new(26).unwrap().to_string(), "B26");
        assert!(BandId::B12.is_original());
        assert!(!BandId::B15.is_original());
    }
}
