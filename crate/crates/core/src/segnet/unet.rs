use ndarray::{Array4, ArrayView4};

use super::config::{AttentionKind, BlockKind, FeatureMapShape, HeadLayout, ModelConfig};
use super::layers::{Attention, Cbam, Conv, ConvBlock, DoubleConv, LayerBuilder, ProAtt, ResConv, SqueezeExcite};
use super::HeadOutputs;
use crate::data::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// One conv block plus its attention layer.
#[derive(Debug, Clone)]
struct Stage {
    block: ConvBlock,
    attention: Attention,
}

impl Stage {
    fn new(b: &mut LayerBuilder, cfg: &ModelConfig, c_in: usize, c_out: usize, size: usize) -> Self {
        let block = match cfg.block_kind {
            BlockKind::DoubleConv => ConvBlock::Double(DoubleConv::new(b, c_in, c_out, cfg.leaky_slope)),
            BlockKind::ResConv => ConvBlock::Res(ResConv::new(b, c_in, c_out, cfg.leaky_slope)),
        };
        let attention = b.scoped("att", |b| match cfg.attention_kind {
            AttentionKind::None => Attention::None,
            AttentionKind::Se => Attention::Se(SqueezeExcite::new(b, c_out, cfg.se_reduction)),
            AttentionKind::Cbam => Attention::Cbam(Cbam::new(b, c_out, cfg.se_reduction)),
            AttentionKind::ProAtt => Attention::ProAtt(ProAtt::new(b, size, size, cfg.attention_heads)),
        });
        Stage { block, attention }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.block.apply(g, x);
        self.attention.apply(g, y)
    }
}

/// Graph nodes produced by one forward pass. Head maps are NCHW softmax outputs.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub probs_64: Option<Var>,
    pub probs_128: Var,
    pub probs_256: Option<Var>,
    /// Encoder outputs (after pooling for all but the deepest level), then decoder outputs.
    pub stages: Vec<FeatureMapShape>,
}

impl ForwardVars {
    pub fn heads(&self) -> Vec<(usize, Var)> {
        let mut v = Vec::with_capacity(3);
        v.extend(self.probs_64.map(|p| (64, p)));
        v.push((128, self.probs_128));
        v.extend(self.probs_256.map(|p| (256, p)));
        v
    }
}

/// Layer structure of the network; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: ModelConfig,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    head_128: Conv,
    head_64: Option<Conv>,
    head_256: Option<Conv>,
}

fn nhwc(t: &Tensor) -> Array4<f32> {
    let v = t.view().into_dimensionality::<ndarray::Ix4>().expect("rank-4 head");
    v.permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned()
}

fn shape_of(g: &Graph, v: Var) -> FeatureMapShape {
    let s = g.shape(v);
    FeatureMapShape::new(s[2], s[3], s[1])
}

impl UNet {
    pub fn build(cfg: &ModelConfig, params: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = LayerBuilder::new(params, seed);
        let ch = &cfg.encoder_channels;
        let levels = ch.len();
        let mut encoder = Vec::with_capacity(levels);
        let mut c_in = cfg.input_channels;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(b.scoped(format!("enc{i}"), |b| Stage::new(b, cfg, c_in, c, cfg.level_size(i))));
            c_in = c;
        }
        let mut decoder = Vec::with_capacity(levels - 1);
        for (j, i) in (0..levels - 1).rev().enumerate() {
            let c_out = ch[i];
            decoder.push(b.scoped(format!("dec{j}"), |b| Stage::new(b, cfg, c_in + c_out, c_out, cfg.level_size(i))));
            c_in = c_out;
        }
        let triple = cfg.heads == HeadLayout::Triple64_128_256;
        let head_128 = b.conv("head128", ch[0], 2, 1, 1, true);
        let head_64 = triple.then(|| b.conv("head64", ch[1], 2, 1, 1, true));
        let head_256 = triple.then(|| b.conv("head256", ch[0], 2, 3, 3, true));
        Ok(UNet {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head_128,
            head_64,
            head_256,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Runs the network on an NCHW input node.
    pub fn forward(&self, g: &mut Graph, x: Var) -> ForwardVars {
        let mut stages = Vec::new();
        let mut skips = Vec::new();
        let mut h = x;
        let last = self.encoder.len() - 1;
        for (i, stage) in self.encoder.iter().enumerate() {
            h = stage.apply(g, h);
            if i < last {
                skips.push(h);
                h = g.max_pool2(h);
            }
            stages.push(shape_of(g, h));
        }
        let mut penultimate = None;
        for (j, stage) in self.decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per decoder stage");
            let s = g.shape(skip).to_vec();
            let up = g.resize_bilinear(h, s[2], s[3]);
            let cat = g.concat(&[up, skip], 1);
            h = stage.apply(g, cat);
            stages.push(shape_of(g, h));
            if j + 2 == self.decoder.len() {
                penultimate = Some(h);
            }
        }
        let p = self.cfg.dropout;
        let head = |g: &mut Graph, conv: &Conv, src: Var| {
            let d = g.dropout(src, p);
            let logits = conv.apply(g, d);
            g.softmax(logits, 1)
        };
        let probs_128 = head(g, &self.head_128, h);
        let probs_64 = self.head_64.as_ref().map(|c| {
            let src = penultimate.expect("validated: three-head networks have >= 3 levels");
            head(g, c, src)
        });
        let probs_256 = self.head_256.as_ref().map(|c| {
            let up = g.resize_bilinear(h, 2 * PATCH_SIZE, 2 * PATCH_SIZE);
            head(g, c, up)
        });
        ForwardVars {
            probs_64,
            probs_128,
            probs_256,
            stages,
        }
    }

    pub fn head_outputs(g: &Graph, vars: &ForwardVars) -> HeadOutputs {
        HeadOutputs {
            probs_64: vars.probs_64.map(|v| nhwc(g.value(v))),
            probs_128: nhwc(g.value(vars.probs_128)),
            probs_256: vars.probs_256.map(|v| nhwc(g.value(v))),
        }
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    net: UNet,
    params: ParamStore,
}

/// NHWC batch to NCHW tensor, validating `[N, 128, 128, c_in]`.
pub fn batch_to_nchw(batch: ArrayView4<'_, f32>, c_in: usize) -> Result<Tensor> {
    let (n, h, w, c) = batch.dim();
    if h != PATCH_SIZE || w != PATCH_SIZE || c != c_in || n == 0 {
        return Err(Error::shape(("N>0", PATCH_SIZE, PATCH_SIZE, c_in), batch.dim()));
    }
    Ok(batch.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned().into_dyn())
}

impl Model {
    /// Builds the network with weights drawn from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = UNet::build(cfg, &mut params, seed)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Split borrow for building a training graph.
    pub fn parts_mut(&mut self) -> (&UNet, &mut ParamStore) {
        (&self.net, &mut self.params)
    }

    pub(crate) fn from_parts(net: UNet, params: ParamStore) -> Self {
        Model { net, params }
    }

    /// Evaluation-mode forward pass on an NHWC batch `[N, 128, 128, C_in]`.
    pub fn forward(&self, batch: ArrayView4<'_, f32>) -> Result<HeadOutputs> {
        self.forward_traced(batch).map(|(h, _)| h)
    }

    /// As [`Model::forward`], also returning every encoder and decoder stage shape.
    pub fn forward_traced(&self, batch: ArrayView4<'_, f32>) -> Result<(HeadOutputs, Vec<FeatureMapShape>)> {
        let x = batch_to_nchw(batch, self.config().input_channels)?;
        let mut g = Graph::inference(&self.params);
        let xv = g.input(x);
        let vars = self.net.forward(&mut g, xv);
        Ok((UNet::head_outputs(&g, &vars), vars.stages))
    }
}

/// Trainable scalar count.
pub fn count_parameters(model: &Model) -> u64 {
    model.params().trainable_count() as u64
}
