//! Segmentation losses over two-class probability maps.
//!
//! Probabilities carry the class on the last axis (`[.., 2]`, index 1 = landslide)
//! and targets have the same shape minus that axis. Every loss returns its value
//! together with the analytic gradient with respect to the probabilities.

use ndarray::{Array4, ArrayD, ArrayView2, ArrayView3, ArrayViewD, Axis, IxDyn, Zip};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::HeadOutputs;
use crate::tensor::kernels::resize_nearest_labels;

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Focal,
    Iou,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedWeights {
    pub w_focal: f64,
    pub w_iou: f64,
}

impl Default for CombinedWeights {
    fn default() -> Self {
        CombinedWeights { w_focal: 1.0, w_iou: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub iou_epsilon: f64,
    pub combined_weights: CombinedWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Combined,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            iou_epsilon: 1e-6,
            combined_weights: CombinedWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.combined_weights;
        if self.focal_gamma.is_nan() || self.focal_gamma < 0.0 {
            return Err(Error::InvalidConfig(format!("focal_gamma must be >= 0, got {}", self.focal_gamma)));
        }
        if self.iou_epsilon.is_nan() || self.iou_epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!("iou_epsilon must be > 0, got {}", self.iou_epsilon)));
        }
        if !(w.w_focal >= 0.0 && w.w_iou >= 0.0) {
            return Err(Error::InvalidConfig("combined weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::InvalidConfig(format!("focal_alpha must lie in [0, 1], got {}", self.focal_alpha)));
        }
        Ok(())
    }
}

/// Loss value and gradient with respect to the probabilities.
#[derive(Debug, Clone)]
pub struct LossGrad<F> {
    pub value: F,
    pub grad: ArrayD<F>,
}

fn check_shapes<F>(probs: &ArrayViewD<'_, F>, target: &ArrayViewD<'_, u8>) -> Result<()> {
    let ps = probs.shape();
    let ok = ps.last() == Some(&2) && &ps[..ps.len() - 1] == target.shape();
    if ok {
        Ok(())
    } else {
        let mut expected = target.shape().to_vec();
        expected.push(2);
        Err(Error::shape(expected, ps))
    }
}

fn c<F: Float>(v: f64) -> F {
    F::from(v).expect("representable constant")
}

/// Shared body of CE and focal: per-pixel `-a_t (1-p_t)^g log p_t`, averaged.
fn focal_impl<F: Float>(probs: ArrayViewD<'_, F>, target: ArrayViewD<'_, u8>, gamma: F, alpha: Option<F>) -> Result<LossGrad<F>> {
    check_shapes(&probs, &target)?;
    let m = target.len();
    let mut grad = ArrayD::<F>::zeros(probs.raw_dim());
    if m == 0 {
        return Ok(LossGrad { value: F::zero(), grad });
    }
    let inv_m = F::one() / F::from(m).expect("pixel count");
    let floor = c::<F>(PROB_FLOOR);
    let mut total = F::zero();
    let probs2 = probs.to_shape((m, 2)).expect("contiguous probabilities");
    let mut grad2 = grad.view_mut().into_shape_with_order((m, 2)).expect("fresh array");
    for ((p, mut g), &t) in probs2.outer_iter().zip(grad2.outer_iter_mut()).zip(target.iter()) {
        let t = usize::from(t != 0);
        let pt_raw = p[t];
        let pt = pt_raw.max(floor).min(F::one());
        let a = match alpha {
            None => F::one(),
            Some(a) if t == 1 => a,
            Some(a) => F::one() - a,
        };
        let q = F::one() - pt;
        let log_p = pt.ln();
        let mod_factor = if gamma == F::zero() { F::one() } else { q.powf(gamma) };
        total = total - a * mod_factor * log_p;
        // d/dp_t; zero where the clamp is active
        if pt_raw > floor && pt_raw <= F::one() {
            let d_mod = if gamma == F::zero() || q == F::zero() {
                F::zero()
            } else {
                gamma * q.powf(gamma - F::one()) * log_p
            };
            g[t] = a * (d_mod - mod_factor / pt) * inv_m;
        }
    }
    Ok(LossGrad { value: total * inv_m, grad })
}

/// Mean of `-log p_true` with probabilities clamped at [`PROB_FLOOR`].
pub fn cross_entropy_with_grad<F: Float>(probs: ArrayViewD<'_, F>, target: ArrayViewD<'_, u8>) -> Result<LossGrad<F>> {
    focal_impl(probs, target, F::zero(), None)
}

pub fn cross_entropy<F: Float>(probs: ArrayViewD<'_, F>, target: ArrayViewD<'_, u8>) -> Result<F> {
    cross_entropy_with_grad(probs, target).map(|l| l.value)
}

/// Mean of `-a_t (1-p_t)^gamma log p_t`. `alpha = None` weights both classes by 1;
/// otherwise positives get `alpha` and negatives `1 - alpha`.
pub fn focal_loss_with_grad<F: Float>(
    probs: ArrayViewD<'_, F>,
    target: ArrayViewD<'_, u8>,
    gamma: F,
    alpha: Option<F>,
) -> Result<LossGrad<F>> {
    focal_impl(probs, target, gamma, alpha)
}

pub fn focal_loss<F: Float>(probs: ArrayViewD<'_, F>, target: ArrayViewD<'_, u8>, gamma: F, alpha: Option<F>) -> Result<F> {
    focal_loss_with_grad(probs, target, gamma, alpha).map(|l| l.value)
}

/// Soft IoU loss on the landslide channel, pooled over every pixel given.
pub fn iou_loss_with_grad<F: Float>(probs: ArrayViewD<'_, F>, target: ArrayViewD<'_, u8>, epsilon: F) -> Result<LossGrad<F>> {
    check_shapes(&probs, &target)?;
    let p1 = probs.index_axis(Axis(probs.ndim() - 1), 1);
    let (mut inter, mut sum_p, mut sum_y) = (F::zero(), F::zero(), F::zero());
    Zip::from(&p1).and(&target).for_each(|&p, &t| {
        let y = if t != 0 { F::one() } else { F::zero() };
        inter = inter + p * y;
        sum_p = sum_p + p;
        sum_y = sum_y + y;
    });
    let union = sum_p + sum_y - inter;
    let (num, den) = (inter + epsilon, union + epsilon);
    let value = F::one() - num / den;
    let mut grad = ArrayD::<F>::zeros(probs.raw_dim());
    let last = grad.ndim() - 1;
    Zip::from(grad.index_axis_mut(Axis(last), 1)).and(&target).for_each(|g, &t| {
        let y = if t != 0 { F::one() } else { F::zero() };
        // dI/dp = y, dU/dp = 1 - y
        *g = -(y * den - num * (F::one() - y)) / (den * den);
    });
    Ok(LossGrad { value, grad })
}

pub fn iou_loss<F: Float>(probs: ArrayViewD<'_, F>, target: ArrayViewD<'_, u8>, epsilon: F) -> Result<F> {
    iou_loss_with_grad(probs, target, epsilon).map(|l| l.value)
}

/// `w_focal * focal + w_iou * iou`.
pub fn combined_loss_with_grad<F: Float>(probs: ArrayViewD<'_, F>, target: ArrayViewD<'_, u8>, cfg: &LossConfig) -> Result<LossGrad<F>> {
    let w = cfg.combined_weights;
    let f = focal_impl(probs.view(), target.view(), c(cfg.focal_gamma), Some(c(cfg.focal_alpha)))?;
    let i = iou_loss_with_grad(probs, target, c(cfg.iou_epsilon))?;
    let (wf, wi) = (c::<F>(w.w_focal), c::<F>(w.w_iou));
    let grad = f.grad.mapv(|g| g * wf) + i.grad.mapv(|g| g * wi);
    Ok(LossGrad { value: wf * f.value + wi * i.value, grad })
}

pub fn combined_loss<F: Float>(probs: ArrayViewD<'_, F>, target: ArrayViewD<'_, u8>, cfg: &LossConfig) -> Result<F> {
    combined_loss_with_grad(probs, target, cfg).map(|l| l.value)
}

/// Dispatches on `cfg.kind`.
pub fn loss_with_grad<F: Float>(probs: ArrayViewD<'_, F>, target: ArrayViewD<'_, u8>, cfg: &LossConfig) -> Result<LossGrad<F>> {
    match cfg.kind {
        LossKind::Ce => cross_entropy_with_grad(probs, target),
        LossKind::Focal => focal_loss_with_grad(probs, target, c(cfg.focal_gamma), Some(c(cfg.focal_alpha))),
        LossKind::Iou => iou_loss_with_grad(probs, target, c(cfg.iou_epsilon)),
        LossKind::Combined => combined_loss_with_grad(probs, target, cfg),
    }
}

/// Nearest-neighbour resampling of a `[N, H, W]` label batch.
pub fn resample_targets(targets: ArrayView3<'_, u8>, size: usize) -> ndarray::Array3<u8> {
    let (n, h, w) = targets.dim();
    if h == size && w == size {
        return targets.to_owned();
    }
    let mut out = ndarray::Array3::<u8>::zeros((n, size, size));
    for (mut o, t) in out.outer_iter_mut().zip(targets.outer_iter()) {
        o.assign(&resize_nearest_labels(t, size, size));
    }
    out
}

/// Loss of every configured head and its gradient, NHWC like the heads.
#[derive(Debug, Clone)]
pub struct MultiHeadLoss {
    pub value: f64,
    pub per_head: Vec<(usize, f64)>,
    pub grads: Vec<(usize, Array4<f32>)>,
}

/// Mean of the configured loss over every head, each compared against the targets
/// resampled to that head's resolution.
pub fn multi_head_loss_with_grad(heads: &HeadOutputs, targets: ArrayView3<'_, u8>, cfg: &LossConfig) -> Result<MultiHeadLoss> {
    let list = heads.maps();
    let k = list.len() as f64;
    let mut value = 0.0;
    let mut per_head = Vec::with_capacity(list.len());
    let mut grads = Vec::with_capacity(list.len());
    for (size, probs) in list {
        if probs.dim().0 != targets.dim().0 {
            return Err(Error::shape((targets.dim().0, size, size, 2), probs.dim()));
        }
        let t = resample_targets(targets, size);
        let p64 = probs.mapv(f64::from).into_dyn();
        let l = loss_with_grad(p64.view(), t.view().into_dyn(), cfg)?;
        value += l.value / k;
        per_head.push((size, l.value));
        let g = l.grad.mapv(|v| (v / k) as f32).into_dimensionality().expect("rank-4 gradient");
        grads.push((size, g));
    }
    Ok(MultiHeadLoss { value, per_head, grads })
}

pub fn multi_head_loss(heads: &HeadOutputs, targets: ArrayView3<'_, u8>, cfg: &LossConfig) -> Result<f64> {
    multi_head_loss_with_grad(heads, targets, cfg).map(|l| l.value)
}

/// Single-image convenience over [`multi_head_loss`].
pub fn multi_head_loss_single(heads: &HeadOutputs, target: ArrayView2<'_, u8>, cfg: &LossConfig) -> Result<f64> {
    multi_head_loss(heads, target.insert_axis(Axis(0)), cfg)
}

/// Central finite-difference gradient of `f` at `x`, used to audit analytic gradients.
pub fn numeric_gradient(x: &ArrayD<f64>, h: f64, mut f: impl FnMut(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
    let mut probe = x.clone();
    let mut out = ArrayD::<f64>::zeros(IxDyn(x.shape()));
    for (k, o) in out.iter_mut().enumerate() {
        let orig = x.as_slice().expect("contiguous")[k];
        probe.as_slice_mut().expect("contiguous")[k] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().expect("contiguous")[k] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().expect("contiguous")[k] = orig;
        *o = (up - down) / (2.0 * h);
    }
    out
}
