use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array1, Array3, ArrayView1, ArrayView2, ArrayView4, Axis, Ix1, Ix3, Ix4, IxDyn, Slice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, Padding};
use super::{ParamId, ParamStore, Tensor};

/// Node handle inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, active dropout.
    Train,
    /// Running statistics, dropout disabled.
    Eval,
}

/// Parameter handles for one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

enum Op {
    Constant,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: Padding },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f32>, batch_stats: bool },
    LeakyRelu { x: Var, slope: f32 },
    Sigmoid { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Resize { x: Var },
    Concat { parts: Vec<(Var, usize)>, axis: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Softmax { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Max { x: Var, axis: usize, argmax: Vec<u32> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Dropout { x: Var, mask: Tensor },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::Add { a, b } | Op::Mul { a, b } | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::MaxPool2 { x, .. }
            | Op::Resize { x }
            | Op::Scale { x, .. }
            | Op::Softmax { x, .. }
            | Op::Mean { x, .. }
            | Op::Max { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Store<'p> {
    Shared(&'p ParamStore),
    Exclusive(&'p mut ParamStore),
}

impl Store<'_> {
    fn get(&self) -> &ParamStore {
        match self {
            Store::Shared(p) => p,
            Store::Exclusive(p) => p,
        }
    }

    fn get_mut(&mut self) -> &mut ParamStore {
        match self {
            Store::Shared(_) => unreachable!("inference graphs never mutate parameters"),
            Store::Exclusive(p) => p,
        }
    }
}

/// Define-by-run tape. Every op appends a node; [`Graph::backward`] walks the
/// tape in reverse and accumulates parameter gradients into the [`ParamStore`].
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Store<'p>,
    mode: Mode,
    record: bool,
    rng: ChaCha8Rng,
}

fn view4(t: &Tensor) -> ArrayView4<'_, f32> {
    t.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

fn view1(t: &Tensor) -> ArrayView1<'_, f32> {
    t.view().into_dimensionality::<Ix1>().expect("rank-1 tensor")
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Sums `g` over the axes that were broadcast from size 1 in `shape`.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    assert_eq!(g.ndim(), shape.len(), "broadcast requires equal rank");
    let mut r = g;
    for (ax, &n) in shape.iter().enumerate() {
        if n == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    r
}

/// `(outer, len, inner)` factorization of a standard-layout shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn keepdim_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

fn rows(t: &Tensor) -> ArrayView2<'_, f32> {
    let last = *t.shape().last().expect("non-scalar");
    t.view().into_shape_with_order((t.len() / last, last)).expect("standard layout")
}

fn matmul_batched(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Array3<f32> {
    let a = a.view().into_dimensionality::<Ix3>().expect("rank-3");
    let b = b.view().into_dimensionality::<Ix3>().expect("rank-3");
    let a = if ta { a.permuted_axes([0, 2, 1]) } else { a };
    let b = if tb { b.permuted_axes([0, 2, 1]) } else { b };
    let (n, m, k) = a.dim();
    let (nb, kb, p) = b.dim();
    assert_eq!((n, k), (nb, kb), "batched matmul shapes");
    let mut out = Array3::<f32>::zeros((n, m, p));
    for i in 0..n {
        general_mat_mul(1.0, &a.index_axis(Axis(0), i), &b.index_axis(Axis(0), i), 0.0, &mut out.index_axis_mut(Axis(0), i));
    }
    out
}

impl<'p> Graph<'p> {
    /// Recording graph; call [`Graph::backward`] after building the loss inputs.
    pub fn new(params: &'p mut ParamStore, mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Store::Exclusive(params),
            mode,
            record: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Evaluation-mode graph that keeps no backward state.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Store::Shared(params),
            mode: Mode::Eval,
            record: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        self.params.get()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_shared(Arc::new(standard(value)), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op) -> Var {
        let (op, requires_grad) = if !self.record {
            (Op::Constant, false)
        } else {
            let rg = match &op {
                Op::Constant => false,
                Op::Param(id) => self.params.get().is_trainable(*id),
                other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
            };
            (op, rg)
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get().shared(id);
        self.push_shared(value, Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding) -> Var {
        let out = kernels::conv2d(view4(self.value(x)), view4(self.value(w)), b.map(|b| view1(self.value(b))), pad);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, pad })
    }

    /// Batch norm over `[N, C, H, W]`. Train mode normalizes with batch statistics and
    /// updates the running averages; eval mode uses the running averages.
    pub fn batch_norm(&mut self, x: Var, ids: &BatchNormIds) -> Var {
        let gamma = self.param(ids.gamma);
        let beta = self.param(ids.beta);
        let xv = Arc::clone(&self.nodes[x.0].value);
        let (n, c, h, w) = view4(&xv).dim();
        let hw = h * w;
        let m = n * hw;
        let xs = xv.as_slice().expect("standard layout");
        let batch_stats = self.mode == Mode::Train;
        let (mean, var): (Vec<f32>, Vec<f32>) = if batch_stats {
            let mut mean = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let plane = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    mean[ch] += plane.iter().map(|v| *v as f64).sum::<f64>();
                }
            }
            for v in mean.iter_mut() {
                *v /= m as f64;
            }
            for b in 0..n {
                for ch in 0..c {
                    let plane = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    sq[ch] += plane.iter().map(|v| (*v as f64 - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / m as f64).collect();
            let rm = self.params.get_mut().value_mut(ids.running_mean);
            for (r, mu) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * *mu as f32;
            }
            let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let rv = self.params.get_mut().value_mut(ids.running_var);
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (*v * unbias) as f32;
            }
            (mean.iter().map(|v| *v as f32).collect(), var.iter().map(|v| *v as f32).collect())
        } else {
            (
                self.params().value(ids.running_mean).iter().copied().collect(),
                self.params().value(ids.running_var).iter().copied().collect(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).as_slice().expect("contiguous").to_vec();
        let bt = self.value(beta).as_slice().expect("contiguous").to_vec();
        let mut xhat = vec![0.0f32; xs.len()];
        let mut out = vec![0.0f32; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for ((xh, o), xi) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xs[r]) {
                    *xh = (xi - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *xh + bt[ch];
                }
            }
        }
        let shape = IxDyn(&[n, c, h, w]);
        let xhat = if self.record {
            Tensor::from_shape_vec(shape.clone(), xhat).expect("shape")
        } else {
            Tensor::zeros(IxDyn(&[0]))
        };
        let out = Tensor::from_shape_vec(shape, out).expect("shape");
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, argmax) = kernels::max_pool2(view4(self.value(x)));
        let argmax = if self.record { argmax } else { Vec::new() };
        self.push(out.into_dyn(), Op::MaxPool2 { x, argmax })
    }

    /// Bilinear resample of the two trailing axes of a `[N, C, H, W]` tensor.
    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = kernels::resize_bilinear(view4(self.value(x)), h, w);
        self.push(out.into_dyn(), Op::Resize { x })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shapes agree");
        let parts = parts.iter().map(|p| (*p, self.shape(*p)[axis])).collect();
        self.push(out, Op::Concat { parts, axis })
    }

    /// Elementwise sum with broadcasting of size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add { a, b })
    }

    /// Elementwise product with broadcasting of size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale { x, c })
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w).view().into_dimensionality::<ndarray::Ix2>().expect("rank-2 weight");
        let mut y = rows(xv).dot(&wv);
        if let Some(b) = b {
            y += &view1(self.value(b));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = wv.dim().1;
        let out = standard(y.into_dyn()).into_shape_with_order(IxDyn(&shape)).expect("shape");
        self.push(out, Op::Linear { x, w, b })
    }

    /// `a[B, M, K] · b[B, K, N]`, or `a · bᵀ` with `b[B, N, K]` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let out = matmul_batched(self.value(a), self.value(b), false, transpose_b);
        self.push(out.into_dyn(), Op::BatchMatMul { a, b, transpose_b })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let xs = xv.as_slice().expect("standard layout");
        let mut out = vec![0.0f32; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| xs[at(k)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for k in 0..len {
                    let e = (xs[at(k)] - mx).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        let out = Tensor::from_shape_vec(xv.raw_dim(), out).expect("shape");
        self.push(out, Op::Softmax { x, axis })
    }

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let out = xv.mean_axis(Axis(axis)).expect("non-empty axis").insert_axis(Axis(axis));
        self.push(out, Op::Mean { x, axis })
    }

    /// Maximum over `axis`, keeping it with size 1. Ties go to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let xs = xv.as_slice().expect("standard layout");
        let mut out = vec![0.0f32; outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for k in 1..len {
                    if xs[(o * len + k) * inner + i] > xs[(o * len + best) * inner + i] {
                        best = k;
                    }
                }
                out[o * inner + i] = xs[(o * len + best) * inner + i];
                argmax[o * inner + i] = best as u32;
            }
        }
        let out = Tensor::from_shape_vec(keepdim_shape(xv.shape(), axis), out).expect("shape");
        self.push(out, Op::Max { x, axis, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().into_shape_with_order(IxDyn(shape)).expect("reshape preserves size");
        self.push(out, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = self.value(x).view().permuted_axes(IxDyn(perm)).as_standard_layout().into_owned();
        self.push(out, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let shape = self.value(x).raw_dim();
        let rng = &mut self.rng;
        let mask = Tensor::from_shape_simple_fn(shape, || if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 });
        let out = self.value(x) * &mask;
        self.push(out, Op::Dropout { x, mask })
    }

    /// Backpropagates from `seeds` (each a node and the gradient of the objective with
    /// respect to it) and accumulates into the parameter store.
    pub fn backward(&mut self, seeds: Vec<(Var, Tensor)>) {
        assert!(self.record, "backward on an inference graph");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed gradient shape");
            accumulate(&mut grads[v.0], standard(g));
        }
        let Graph { nodes, params, .. } = self;
        let nodes = &*nodes;
        let params = params.get_mut();
        let val = |v: &Var| &*nodes[v.0].value;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let g = standard(g);
            if !nodes[i].requires_grad {
                continue;
            }
            let mut send = |v: &Var, t: Tensor| {
                if wants(v) {
                    accumulate(&mut grads[v.0], t);
                }
            };
            match &nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => params.accumulate_grad(*id, g),
                Op::Conv2d { x, w, b, pad } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(view4(val(x)), view4(val(w)), view4(&g), *pad, wants(x));
                    if let Some(gx) = gx {
                        send(x, gx.into_dyn());
                    }
                    send(w, gw.into_dyn());
                    if let Some(b) = b {
                        send(b, gb.into_dyn());
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let (nb, c, h, w) = view4(&g).dim();
                    let hw = h * w;
                    let m = (nb * hw) as f32;
                    let gs = g.as_slice().expect("standard layout");
                    let xh = xhat.as_slice().expect("standard layout");
                    let mut sum_g = vec![0.0f32; c];
                    let mut sum_gx = vec![0.0f32; c];
                    for b in 0..nb {
                        for ch in 0..c {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            for (gv, xv) in gs[r.clone()].iter().zip(&xh[r]) {
                                sum_g[ch] += gv;
                                sum_gx[ch] += gv * xv;
                            }
                        }
                    }
                    if wants(x) {
                        let gam = val(gamma).as_slice().expect("contiguous");
                        let mut gx = vec![0.0f32; gs.len()];
                        for b in 0..nb {
                            for ch in 0..c {
                                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                                let k = gam[ch] * inv_std[ch];
                                for ((o, gv), xv) in gx[r.clone()].iter_mut().zip(&gs[r.clone()]).zip(&xh[r]) {
                                    *o = if *batch_stats {
                                        k / m * (m * gv - sum_g[ch] - xv * sum_gx[ch])
                                    } else {
                                        k * gv
                                    };
                                }
                            }
                        }
                        send(x, Tensor::from_shape_vec(g.raw_dim(), gx).expect("shape"));
                    }
                    send(gamma, Array1::from(sum_gx).into_dyn());
                    send(beta, Array1::from(sum_g).into_dyn());
                }
                Op::LeakyRelu { x, slope } => {
                    let mut gx = g;
                    gx.zip_mut_with(val(x), |gv, xv| {
                        if *xv <= 0.0 {
                            *gv *= slope;
                        }
                    });
                    send(x, gx);
                }
                Op::Sigmoid { x } => {
                    let mut gx = g;
                    gx.zip_mut_with(&nodes[i].value, |gv, y| *gv *= y * (1.0 - y));
                    send(x, gx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let gx = kernels::max_pool2_backward(view4(val(x)).dim(), argmax, view4(&g));
                    send(x, gx.into_dyn());
                }
                Op::Resize { x } => {
                    let gx = kernels::resize_bilinear_backward(view4(val(x)).dim(), view4(&g));
                    send(x, gx.into_dyn());
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for (p, len) in parts {
                        let piece = g.slice_axis(Axis(*axis), Slice::from(start..start + len));
                        send(p, piece.as_standard_layout().into_owned());
                        start += len;
                    }
                }
                Op::Add { a, b } => {
                    if wants(a) {
                        send(a, reduce_to(g.clone(), val(a).shape()));
                    }
                    send(b, reduce_to(g, val(b).shape()));
                }
                Op::Mul { a, b } => {
                    if wants(a) {
                        send(a, standard(reduce_to(&g * val(b), val(a).shape())));
                    }
                    if wants(b) {
                        send(b, standard(reduce_to(&g * val(a), val(b).shape())));
                    }
                }
                Op::Scale { x, c } => send(x, g * *c),
                Op::Linear { x, w, b } => {
                    let g2 = rows(&g);
                    let wv = val(w).view().into_dimensionality::<ndarray::Ix2>().expect("rank-2");
                    if wants(x) {
                        let gx = standard(g2.dot(&wv.t()).into_dyn());
                        send(x, gx.into_shape_with_order(val(x).raw_dim()).expect("shape"));
                    }
                    send(w, rows(val(x)).t().dot(&g2).into_dyn());
                    if let Some(b) = b {
                        send(b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::BatchMatMul { a, b, transpose_b } => {
                    if wants(a) {
                        // dA = G·B (b stored transposed) or G·Bᵀ
                        send(a, matmul_batched(&g, val(b), false, !transpose_b).into_dyn());
                    }
                    if wants(b) {
                        let gb = if *transpose_b {
                            matmul_batched(&g, val(a), true, false)
                        } else {
                            matmul_batched(val(a), &g, true, false)
                        };
                        send(b, gb.into_dyn());
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = &nodes[i].value;
                    let (outer, len, inner) = split_axis(y.shape(), *axis);
                    let ys = y.as_slice().expect("standard layout");
                    let gs = g.as_slice().expect("standard layout");
                    let mut gx = vec![0.0f32; ys.len()];
                    for o in 0..outer {
                        for c in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + c;
                            let dot: f32 = (0..len).map(|k| gs[at(k)] * ys[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] = ys[at(k)] * (gs[at(k)] - dot);
                            }
                        }
                    }
                    send(x, Tensor::from_shape_vec(y.raw_dim(), gx).expect("shape"));
                }
                Op::Mean { x, axis } => {
                    let n = val(x).shape()[*axis] as f32;
                    let gx = g.broadcast(val(x).raw_dim()).expect("keepdim broadcast").mapv(|v| v / n);
                    send(x, gx);
                }
                Op::Max { x, axis, argmax } => {
                    let (outer, len, inner) = split_axis(val(x).shape(), *axis);
                    let gs = g.as_slice().expect("standard layout");
                    let mut gx = vec![0.0f32; outer * len * inner];
                    for o in 0..outer {
                        for c in 0..inner {
                            let k = argmax[o * inner + c] as usize;
                            gx[(o * len + k) * inner + c] = gs[o * inner + c];
                        }
                    }
                    send(x, Tensor::from_shape_vec(val(x).raw_dim(), gx).expect("shape"));
                }
                Op::Reshape { x } => send(x, g.into_shape_with_order(val(x).raw_dim()).expect("shape")),
                Op::Permute { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (k, p) in perm.iter().enumerate() {
                        inv[*p] = k;
                    }
                    send(x, g.permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned());
                }
                Op::Dropout { x, mask } => send(x, g * mask),
            }
        }
    }
}
