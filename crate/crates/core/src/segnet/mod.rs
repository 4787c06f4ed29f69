//! The U-Net family: plain double-conv baseline, Res-Conv blocks, SE / CBAM /
//! Pro-Att attention, and one or three output heads.

mod checkpoint;
mod config;
pub mod layers;
mod unet;

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};

pub use checkpoint::Checkpoint;
pub use config::{AttentionKind, BlockKind, FeatureMapShape, HeadLayout, ModelConfig, BASELINE_CHANNELS, BEST_CHANNELS};
pub use unet::{batch_to_nchw, count_parameters, ForwardVars, Model, UNet};

use crate::data::PATCH_SIZE;
use crate::tensor::kernels::resize_bilinear;

/// Per-resolution class probabilities, NHWC with `[.., 0]` background and `[.., 1]`
/// landslide.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub probs_64: Option<Array4<f32>>,
    pub probs_128: Array4<f32>,
    pub probs_256: Option<Array4<f32>>,
}

impl HeadOutputs {
    /// `(resolution, map)` for every present head, coarsest first.
    pub fn maps(&self) -> Vec<(usize, &Array4<f32>)> {
        let mut v = Vec::with_capacity(3);
        v.extend(self.probs_64.as_ref().map(|p| (64, p)));
        v.push((128, &self.probs_128));
        v.extend(self.probs_256.as_ref().map(|p| (256, p)));
        v
    }

    pub fn batch_size(&self) -> usize {
        self.probs_128.dim().0
    }

    /// The heads of batch element `i` as a batch of one.
    pub fn select(&self, i: usize) -> HeadOutputs {
        let pick = |a: &Array4<f32>| a.slice_axis(Axis(0), (i..i + 1).into()).to_owned();
        HeadOutputs {
            probs_64: self.probs_64.as_ref().map(pick),
            probs_128: pick(&self.probs_128),
            probs_256: self.probs_256.as_ref().map(pick),
        }
    }
}

fn resample_probs(p: &Array4<f32>, size: usize) -> Array4<f32> {
    let nchw = p.view().permuted_axes([0, 3, 1, 2]);
    let r = resize_bilinear(nchw, size, size);
    let mut out = r.permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned();
    for mut px in out.lanes_mut(Axis(3)) {
        let s: f32 = px.sum();
        if s > 0.0 {
            px /= s;
        }
    }
    out
}

/// Brings every head to 128×128 (bilinear, renormalized per pixel) and averages them
/// with equal weight. A single head is returned unchanged.
pub fn ensemble_average(h: &HeadOutputs) -> Array4<f32> {
    let maps = h.maps();
    if maps.len() == 1 {
        return h.probs_128.clone();
    }
    let mut acc = Array4::<f32>::zeros(h.probs_128.raw_dim());
    for (size, p) in &maps {
        if *size == PATCH_SIZE {
            acc += *p;
        } else {
            acc += &resample_probs(p, PATCH_SIZE);
        }
    }
    acc / maps.len() as f32
}

/// Per-pixel argmax of a `[H, W, 2]` map; an exact tie is background.
pub fn predict_mask(p: ArrayView3<'_, f32>) -> Array2<u8> {
    p.map_axis(Axis(2), |px| u8::from(px[1] > px[0]))
}

/// [`predict_mask`] over an NHWC batch.
pub fn predict_masks(p: ArrayView4<'_, f32>) -> Array3<u8> {
    p.map_axis(Axis(3), |px| u8::from(px[1] > px[0]))
}
