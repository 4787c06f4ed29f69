//! Layer definitions. Each layer owns [`ParamId`]s into a shared [`ParamStore`] and
//! applies itself to a [`Graph`] node holding an NCHW feature map.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BatchNormIds, Graph, Padding, ParamId, ParamStore, Tensor, Var};

/// Creates named, deterministically initialized parameters.
pub struct LayerBuilder<'a> {
    params: &'a mut ParamStore,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl<'a> LayerBuilder<'a> {
    pub fn new(params: &'a mut ParamStore, seed: u64) -> Self {
        LayerBuilder {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
        }
    }

    /// Runs `f` with `name` pushed onto the parameter-name prefix.
    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..=bound))
    }

    fn add(&mut self, leaf: &str, value: Tensor, trainable: bool) -> ParamId {
        let name = self.full_name(leaf);
        self.params.add(name, value, trainable)
    }

    /// He-uniform weights, zero bias.
    pub fn conv(&mut self, leaf: &str, c_in: usize, c_out: usize, kh: usize, kw: usize, bias: bool) -> Conv {
        let fan_in = (c_in * kh * kw) as f32;
        let w = self.uniform(&[c_out, c_in, kh, kw], (6.0 / fan_in).sqrt());
        self.scoped(leaf, |b| Conv {
            w: b.add("w", w, true),
            b: bias.then(|| b.add("b", Tensor::zeros(IxDyn(&[c_out])), true)),
            pad: Padding::same(kh, kw),
        })
    }

    pub fn batch_norm(&mut self, leaf: &str, c: usize) -> BatchNormIds {
        self.scoped(leaf, |b| BatchNormIds {
            gamma: b.add("gamma", Tensor::ones(IxDyn(&[c])), true),
            beta: b.add("beta", Tensor::zeros(IxDyn(&[c])), true),
            running_mean: b.add("running_mean", Tensor::zeros(IxDyn(&[c])), false),
            running_var: b.add("running_var", Tensor::ones(IxDyn(&[c])), false),
        })
    }

    /// Glorot-uniform weights `[in, out]`, zero bias.
    pub fn linear(&mut self, leaf: &str, d_in: usize, d_out: usize) -> Linear {
        let w = self.uniform(&[d_in, d_out], (6.0 / (d_in + d_out) as f32).sqrt());
        self.scoped(leaf, |b| Linear {
            w: b.add("w", w, true),
            b: b.add("b", Tensor::zeros(IxDyn(&[d_out])), true),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub pad: Padding,
}

impl Conv {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }
}

/// conv → batch norm → LeakyReLU.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv,
    pub bn: BatchNormIds,
    pub slope: f32,
}

impl ConvUnit {
    pub fn new(b: &mut LayerBuilder, name: &str, c_in: usize, c_out: usize, k: usize, slope: f32) -> Self {
        b.scoped(name, |b| ConvUnit {
            conv: b.conv("conv", c_in, c_out, k, k, true),
            bn: b.batch_norm("bn", c_out),
            slope,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv.apply(g, x);
        let y = g.batch_norm(y, &self.bn);
        g.leaky_relu(y, self.slope)
    }
}

#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub first: ConvUnit,
    pub second: ConvUnit,
}

impl DoubleConv {
    pub fn new(b: &mut LayerBuilder, c_in: usize, c_out: usize, slope: f32) -> Self {
        DoubleConv {
            first: ConvUnit::new(b, "unit1", c_in, c_out, 3, slope),
            second: ConvUnit::new(b, "unit2", c_out, c_out, 3, slope),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.first.apply(g, x);
        self.second.apply(g, y)
    }
}

/// `X2 = u2×2(X1) + u3×3(X1)`, `X3 = u3×3'(X2)`, output `X3 + proj(X1)` with `proj`
/// the identity when widths agree and a 1×1 conv otherwise.
#[derive(Debug, Clone)]
pub struct ResConv {
    pub branch2: ConvUnit,
    pub branch3: ConvUnit,
    pub merge: ConvUnit,
    pub proj: Option<Conv>,
}

impl ResConv {
    pub fn new(b: &mut LayerBuilder, c_in: usize, c_out: usize, slope: f32) -> Self {
        ResConv {
            branch2: ConvUnit::new(b, "branch2", c_in, c_out, 2, slope),
            branch3: ConvUnit::new(b, "branch3", c_in, c_out, 3, slope),
            merge: ConvUnit::new(b, "merge", c_out, c_out, 3, slope),
            proj: (c_in != c_out).then(|| b.conv("proj", c_in, c_out, 1, 1, true)),
        }
    }

    pub fn apply(&self, g: &mut Graph, x1: Var) -> Var {
        let a = self.branch2.apply(g, x1);
        let b = self.branch3.apply(g, x1);
        let x2 = g.add(a, b);
        let x3 = self.merge.apply(g, x2);
        let skip = match &self.proj {
            Some(p) => p.apply(g, x1),
            None => x1,
        };
        g.add(x3, skip)
    }
}

#[derive(Debug, Clone)]
pub enum ConvBlock {
    Double(DoubleConv),
    Res(ResConv),
}

impl ConvBlock {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            ConvBlock::Double(d) => d.apply(g, x),
            ConvBlock::Res(r) => r.apply(g, x),
        }
    }
}

fn hidden_width(c: usize, reduction: usize) -> usize {
    (c / reduction).max(1)
}

/// Global average pool → bottleneck MLP → sigmoid channel gate.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SqueezeExcite {
    pub fn new(b: &mut LayerBuilder, c: usize, reduction: usize) -> Self {
        let h = hidden_width(c, reduction);
        SqueezeExcite {
            fc1: b.linear("fc1", c, h),
            fc2: b.linear("fc2", h, c),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let [n, c, _, _] = dims4(g, x);
        let s = global_pool(g, x, Pool::Mean);
        let s = g.reshape(s, &[n, c]);
        let s = self.fc1.apply(g, s);
        let s = g.relu(s);
        let s = self.fc2.apply(g, s);
        let s = g.sigmoid(s);
        let s = g.reshape(s, &[n, c, 1, 1]);
        g.mul(x, s)
    }
}

/// Channel gate from average- and max-pooled descriptors through a shared MLP,
/// followed by a 7×7 spatial gate over channel-pooled maps.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv,
}

impl Cbam {
    pub fn new(b: &mut LayerBuilder, c: usize, reduction: usize) -> Self {
        let h = hidden_width(c, reduction);
        Cbam {
            fc1: b.linear("fc1", c, h),
            fc2: b.linear("fc2", h, c),
            spatial: b.conv("spatial", 2, 1, 7, 7, true),
        }
    }

    fn mlp(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.apply(g, x);
        let h = g.relu(h);
        self.fc2.apply(g, h)
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let [n, c, _, _] = dims4(g, x);
        let avg = global_pool(g, x, Pool::Mean);
        let avg = g.reshape(avg, &[n, c]);
        let mx = global_pool(g, x, Pool::Max);
        let mx = g.reshape(mx, &[n, c]);
        let a = self.mlp(g, avg);
        let m = self.mlp(g, mx);
        let s = g.add(a, m);
        let s = g.sigmoid(s);
        let s = g.reshape(s, &[n, c, 1, 1]);
        let y = g.mul(x, s);

        let avg_c = g.mean_axis(y, 1);
        let max_c = g.max_axis(y, 1);
        let both = g.concat(&[avg_c, max_c], 1);
        let s = self.spatial.apply(g, both);
        let s = g.sigmoid(s);
        g.mul(y, s)
    }
}

/// Scaled dot-product multi-head self-attention over `[B, L, E]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut LayerBuilder, embed: usize, heads: usize) -> Self {
        assert!(heads > 0 && embed % heads == 0, "{heads} heads do not divide embedding {embed}");
        MultiHeadAttention {
            q: b.linear("q", embed, embed),
            k: b.linear("k", embed, embed),
            v: b.linear("v", embed, embed),
            out: b.linear("out", embed, embed),
            heads,
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var, bsz: usize, len: usize, d: usize) -> Var {
        let x = g.reshape(x, &[bsz, len, self.heads, d]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[bsz * self.heads, len, d])
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (bsz, len, embed) = match *g.shape(x) {
            [b, l, e] => (b, l, e),
            ref s => panic!("attention expects [B, L, E], got {s:?}"),
        };
        let d = embed / self.heads;
        let q = self.q.apply(g, x);
        let k = self.k.apply(g, x);
        let v = self.v.apply(g, x);
        let q = self.split_heads(g, q, bsz, len, d);
        let k = self.split_heads(g, k, bsz, len, d);
        let v = self.split_heads(g, v, bsz, len, d);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (d as f32).sqrt());
        let attn = g.softmax(scores, 2);
        let ctx = g.bmm(attn, v, false);
        let ctx = g.reshape(ctx, &[bsz, self.heads, len, d]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[bsz, len, embed]);
        self.out.apply(g, ctx)
    }
}

/// Axis-pooled attention. The map is max- and average-pooled along W, H and C;
/// each pair of pooled 2-D maps goes through one shared multi-head attention
/// (tokens along the first remaining axis, embedding along the spatial one), the
/// two results are summed and squashed by a sigmoid, and the three gates are
/// broadcast-multiplied onto the input.
#[derive(Debug, Clone)]
pub struct ProAtt {
    /// Over `[C, H]` maps (W pooled).
    pub ch: MultiHeadAttention,
    /// Over `[C, W]` maps (H pooled).
    pub cw: MultiHeadAttention,
    /// Over `[H, W]` maps (C pooled).
    pub hw: MultiHeadAttention,
}

impl ProAtt {
    pub fn new(b: &mut LayerBuilder, height: usize, width: usize, heads: usize) -> Self {
        ProAtt {
            ch: b.scoped("ch", |b| MultiHeadAttention::new(b, height, heads)),
            cw: b.scoped("cw", |b| MultiHeadAttention::new(b, width, heads)),
            hw: b.scoped("hw", |b| MultiHeadAttention::new(b, width, heads)),
        }
    }

    /// Sigmoid gate for the map pooled over `axis`, reshaped back for broadcasting.
    fn gate(g: &mut Graph, x: Var, axis: usize, mha: &MultiHeadAttention) -> Var {
        let mut keep = g.shape(x).to_vec();
        keep[axis] = 1;
        let flat: Vec<usize> = keep.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, s)| *s).collect();
        let mx = g.max_axis(x, axis);
        let mx = g.reshape(mx, &flat);
        let avg = g.mean_axis(x, axis);
        let avg = g.reshape(avg, &flat);
        let a = mha.apply(g, mx);
        let b = mha.apply(g, avg);
        let s = g.add(a, b);
        let s = g.sigmoid(s);
        g.reshape(s, &keep)
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let a_ch = Self::gate(g, x, 3, &self.ch);
        let a_cw = Self::gate(g, x, 2, &self.cw);
        let a_hw = Self::gate(g, x, 1, &self.hw);
        let y = g.mul(x, a_ch);
        let y = g.mul(y, a_cw);
        g.mul(y, a_hw)
    }
}

#[derive(Debug, Clone)]
pub enum Attention {
    None,
    Se(SqueezeExcite),
    Cbam(Cbam),
    ProAtt(ProAtt),
}

impl Attention {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            Attention::None => x,
            Attention::Se(l) => l.apply(g, x),
            Attention::Cbam(l) => l.apply(g, x),
            Attention::ProAtt(l) => l.apply(g, x),
        }
    }
}

#[derive(Clone, Copy)]
enum Pool {
    Mean,
    Max,
}

/// Pools H and W down to `[N, C, 1, 1]`.
fn global_pool(g: &mut Graph, x: Var, pool: Pool) -> Var {
    match pool {
        Pool::Mean => {
            let y = g.mean_axis(x, 3);
            g.mean_axis(y, 2)
        }
        Pool::Max => {
            let y = g.max_axis(x, 3);
            g.max_axis(y, 2)
        }
    }
}

fn dims4(g: &Graph, x: Var) -> [usize; 4] {
    match *g.shape(x) {
        [n, c, h, w] => [n, c, h, w],
        ref s => panic!("expected an NCHW map, got {s:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use ndarray::Array4;

    fn input(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Array4::from_shape_fn((n, c, h, w), |(a, b, y, x)| ((a * 13 + b * 7 + y * 3 + x) as f32 * 0.37).sin()).into_dyn()
    }

    #[test]
    fn single_conv_parameter_count() {
        let mut ps = ParamStore::new();
        let mut b = LayerBuilder::new(&mut ps, 0);
        b.conv("c", 1, 1, 3, 3, true);
        assert_eq!(ps.trainable_count(), 10);
    }

    #[test]
    fn res_conv_is_identity_with_zero_convs() {
        let mut ps = ParamStore::new();
        let layer = ResConv::new(&mut LayerBuilder::new(&mut ps, 1), 32, 32, 0.01);
        for id in ps.ids().collect::<Vec<_>>() {
            let name = ps.name(id).to_string();
            if name.ends_with("conv.w") || name.ends_with("conv.b") {
                ps.value_mut(id).fill(0.0);
            }
        }
        let x = input(1, 32, 16, 16);
        let mut g = Graph::inference(&ps);
        let xv = g.input(x.clone());
        let y = layer.apply(&mut g, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn res_conv_projects_width() {
        let mut ps = ParamStore::new();
        let layer = ResConv::new(&mut LayerBuilder::new(&mut ps, 2), 32, 64, 0.01);
        let mut g = Graph::new(&mut ps, Mode::Train, 0);
        let x = g.input(input(2, 32, 16, 16));
        let y = layer.apply(&mut g, x);
        assert_eq!(g.shape(y), &[2, 64, 16, 16]);
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn se_with_saturated_gate_is_identity() {
        let mut ps = ParamStore::new();
        let layer = SqueezeExcite::new(&mut LayerBuilder::new(&mut ps, 3), 32, 16);
        ps.value_mut(layer.fc2.w).fill(0.0);
        ps.value_mut(layer.fc2.b).fill(100.0);
        let x = input(1, 32, 16, 16);
        let mut g = Graph::inference(&ps);
        let xv = g.input(x.clone());
        let y = layer.apply(&mut g, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn attention_preserves_shape_and_bounds() {
        let mut ps = ParamStore::new();
        let mut b = LayerBuilder::new(&mut ps, 4);
        let layers = [
            Attention::None,
            Attention::Se(b.scoped("se", |b| SqueezeExcite::new(b, 32, 16))),
            Attention::Cbam(b.scoped("cbam", |b| Cbam::new(b, 32, 16))),
            Attention::ProAtt(b.scoped("pro", |b| ProAtt::new(b, 16, 16, 4))),
        ];
        let x = input(2, 32, 16, 16);
        for layer in &layers {
            let mut g = Graph::inference(&ps);
            let xv = g.input(x.clone());
            let y = layer.apply(&mut g, xv);
            assert_eq!(g.shape(y), x.shape());
            if let Attention::None = layer {
                assert_eq!(y, xv);
            }
            if let Attention::ProAtt(_) = layer {
                // |y| <= |x| elementwise, same sign
                for (a, b) in g.value(y).iter().zip(x.iter()) {
                    assert!(a.abs() <= b.abs() + 1e-7 && a * b >= 0.0);
                }
            }
        }
    }
}
