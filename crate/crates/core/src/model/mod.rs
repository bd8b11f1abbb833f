//! The dual-branch segmentation network.
//!
//! A shallow spatial branch keeps detail at 1/8 resolution; a context branch
//! runs a mobile backbone to 1/16, refines it with reduced global attention
//! and local attention, and squeezes it through a bottleneck before both
//! branches meet in the feature fusion module.

mod config;

pub(crate) use config::nest;
pub use config::{mobile_small_backbone, toy_backbone, ModelConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::Activation;
use crate::nn::{
    flatten_positions, spp_pyramid, Backend, Conv, ConvBnAct, DsConv, Forward, GhostConv, Init, InvertedResidual,
    ParamStore, SppConfig,
};
use crate::tensor::{Element, Shape, Tensor};

/// Logits produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<V> {
    /// Full-resolution class scores.
    pub primary: V,
    /// Head on the global attention output (1/16 resolution), training only.
    pub aux_ga: Option<V>,
    /// Head on the local attention output (1/16 resolution), training only.
    pub aux_la: Option<V>,
}

#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub stem: ConvBnAct,
    pub down1: DsConv,
    pub down2: DsConv,
    pub project: ConvBnAct,
}

impl SpatialBranch {
    pub fn build<T: Element>(init: &mut Init<T>, name: &str, in_channels: usize, c: [usize; 4]) -> Result<Self> {
        let relu = Some(Activation::Relu);
        Ok(SpatialBranch {
            stem: ConvBnAct::build(init, &format!("{name}.conv1"), in_channels, c[0], 7, 2, 1, relu)?,
            down1: DsConv::build(init, &format!("{name}.conv2"), c[0], c[1], 3, 2)?,
            down2: DsConv::build(init, &format!("{name}.conv3"), c[1], c[2], 3, 2)?,
            project: ConvBnAct::build(init, &format!("{name}.conv4"), c[2], c[3], 1, 1, 1, relu)?,
        })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let s = b.shape(x);
        if s.h() % 8 != 0 || s.w() % 8 != 0 {
            return Err(Error::shape(format!(
                "spatial branch needs extents divisible by 8, got {}x{}",
                s.h(),
                s.w()
            )));
        }
        let y = self.stem.forward(b, x)?;
        let y = self.down1.forward(b, y)?;
        let y = self.down2.forward(b, y)?;
        self.project.forward(b, y)
    }
}

/// Attention whose keys and values are pyramid-pooled summaries of the
/// input, so the affinity is `A x M` instead of `A x A`.
#[derive(Clone, Debug)]
pub struct ReducedGlobalAttention {
    pub name: String,
    pub channels: usize,
    pub embed: usize,
    pub value: usize,
    pub groups: usize,
    pub spp: SppConfig,
    pub query: GhostConv,
    pub key: GhostConv,
    pub value_conv: GhostConv,
    /// Zero-initialized so the block starts as the identity.
    pub project: Conv,
}

impl ReducedGlobalAttention {
    pub fn build<T: Element>(init: &mut Init<T>, name: &str, channels: usize, cfg: &ModelConfig) -> Result<Self> {
        let (e, v) = (cfg.ga_embed_channels, cfg.ga_value_channels);
        let ga = ReducedGlobalAttention {
            name: name.to_string(),
            channels,
            embed: e,
            value: v,
            groups: cfg.ga_groups,
            spp: cfg.spp.clone(),
            query: GhostConv::build(init, &format!("{name}.query"), channels, cfg.ghost.with_out(e))?,
            key: GhostConv::build(init, &format!("{name}.key"), channels, cfg.ghost.with_out(e))?,
            value_conv: GhostConv::build(init, &format!("{name}.value"), channels, cfg.ghost.with_out(v))?,
            project: Conv::build(init, &format!("{name}.project"), v, channels, 1, 1, 1, false)?,
        };
        let w = init.store.get_mut(&ga.project.weight_name()).expect("just built");
        w.data_mut().iter_mut().for_each(|x| *x = T::zero());
        Ok(ga)
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let [n, _, h, w] = b.shape(x).dims();
        let a = h * w;
        let g = self.groups;
        let (eg, vg) = (self.embed / g, self.value / g);

        let q = self.query.forward(b, x)?;
        let pyramid = spp_pyramid(b, x, &self.spp)?;
        let mut keys = Vec::with_capacity(pyramid.len());
        let mut values = Vec::with_capacity(pyramid.len());
        for &level in &pyramid {
            keys.push(self.key.forward(b, level)?);
            values.push(self.value_conv.forward(b, level)?);
        }
        b.enter(&self.name);
        let k = flatten_positions(b, &keys)?;
        let v = flatten_positions(b, &values)?;
        let m = b.shape(k).w();

        let q = b.reshape(q, Shape::new(n, g, eg, a))?;
        let q = b.transpose_hw(q);
        let k = b.reshape(k, Shape::new(n, g, eg, m))?;
        let v = b.reshape(v, Shape::new(n, g, vg, m))?;
        let v = b.transpose_hw(v);

        let logits = b.matmul(q, k)?;
        let affinity = b.softmax(logits)?;
        let agg = b.matmul(affinity, v)?;
        let agg = b.transpose_hw(agg);
        let agg = b.reshape(agg, Shape::new(n, self.value, h, w))?;
        b.exit();

        let proj = self.project.forward(b, agg)?;
        b.enter(&self.name);
        let out = b.add(x, proj);
        b.exit();
        out
    }
}

/// Three depthwise convolutions predicting a per-position sigmoid gate;
/// `out = x + x * gate`.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    pub name: String,
    pub dw1: ConvBnAct,
    pub dw2: ConvBnAct,
    pub dw3: Conv,
}

impl LocalAttention {
    pub fn build<T: Element>(init: &mut Init<T>, name: &str, channels: usize) -> Result<Self> {
        let relu = Some(Activation::Relu);
        let c = channels;
        Ok(LocalAttention {
            name: name.to_string(),
            dw1: ConvBnAct::build(init, &format!("{name}.dw1"), c, c, 3, 1, c, relu)?,
            dw2: ConvBnAct::build(init, &format!("{name}.dw2"), c, c, 3, 1, c, relu)?,
            dw3: Conv::build(init, &format!("{name}.dw3"), c, c, 3, 1, c, true)?,
        })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let y = self.dw1.forward(b, x)?;
        let y = self.dw2.forward(b, y)?;
        let y = self.dw3.forward(b, y)?;
        b.enter(&self.name);
        let gate = b.activation(y, Activation::Sigmoid);
        let gated = b.mul(x, gate)?;
        let out = b.add(x, gated);
        b.exit();
        out
    }
}

/// Context branch outputs.
#[derive(Clone, Copy, Debug)]
pub struct ContextFeatures<V> {
    /// Bottlenecked features upsampled to 1/8 resolution.
    pub context: V,
    pub ga: V,
    pub la: V,
}

#[derive(Clone, Debug)]
pub struct ContextBranch {
    pub name: String,
    pub stem: ConvBnAct,
    pub blocks: Vec<InvertedResidual>,
    pub ga: ReducedGlobalAttention,
    pub la: LocalAttention,
    pub bottleneck: ConvBnAct,
}

impl ContextBranch {
    pub fn build<T: Element>(init: &mut Init<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let stem = ConvBnAct::build(
            init,
            &format!("{name}.stem"),
            cfg.input_channels,
            cfg.stem_channels(),
            3,
            2,
            1,
            Some(Activation::HardSwish),
        )?;
        let blocks = cfg
            .backbone
            .iter()
            .enumerate()
            .map(|(i, bc)| InvertedResidual::build(init, &format!("{name}.backbone.{i}"), *bc))
            .collect::<Result<Vec<_>>>()?;
        let c = cfg.backbone_out_channels();
        Ok(ContextBranch {
            name: name.to_string(),
            stem,
            blocks,
            ga: ReducedGlobalAttention::build(init, &format!("{name}.ga"), c, cfg)?,
            la: LocalAttention::build(init, &format!("{name}.la"), c)?,
            bottleneck: ConvBnAct::build(
                init,
                &format!("{name}.bottleneck"),
                c,
                cfg.context_out_channels,
                1,
                1,
                1,
                Some(Activation::Relu),
            )?,
        })
    }

    /// Backbone output at 1/16 resolution.
    pub fn backbone<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let mut y = self.stem.forward(b, x)?;
        for block in &self.blocks {
            y = block.forward(b, y)?;
        }
        Ok(y)
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<ContextFeatures<B::Value>> {
        let s = b.shape(x);
        if s.h() % 16 != 0 || s.w() % 16 != 0 {
            return Err(Error::shape(format!(
                "context branch needs extents divisible by 16, got {}x{}",
                s.h(),
                s.w()
            )));
        }
        let y = self.backbone(b, x)?;
        let ga = self.ga.forward(b, y)?;
        let la = self.la.forward(b, ga)?;
        let z = self.bottleneck.forward(b, la)?;
        let zs = b.shape(z);
        b.enter(&self.name);
        let context = b.bilinear(z, zs.h() * 2, zs.w() * 2)?;
        b.exit();
        Ok(ContextFeatures { context, ga, la })
    }
}

/// Concatenation, channel bottleneck, channel-wise attention and expansion.
#[derive(Clone, Debug)]
pub struct FeatureFusion {
    pub name: String,
    pub reduce: ConvBnAct,
    pub att1: Conv,
    pub att2: Conv,
    pub expand: ConvBnAct,
}

impl FeatureFusion {
    pub fn build<T: Element>(
        init: &mut Init<T>,
        name: &str,
        in_channels: usize,
        mid: usize,
        out: usize,
    ) -> Result<Self> {
        let relu = Some(Activation::Relu);
        Ok(FeatureFusion {
            name: name.to_string(),
            reduce: ConvBnAct::build(init, &format!("{name}.reduce"), in_channels, mid, 1, 1, 1, relu)?,
            att1: Conv::build(init, &format!("{name}.att1"), mid, mid, 1, 1, 1, true)?,
            att2: Conv::build(init, &format!("{name}.att2"), mid, mid, 1, 1, 1, true)?,
            expand: ConvBnAct::build(init, &format!("{name}.expand"), mid, out, 1, 1, 1, relu)?,
        })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, spatial: B::Value, context: B::Value) -> Result<B::Value> {
        let (s, c) = (b.shape(spatial), b.shape(context));
        if (s.n(), s.h(), s.w()) != (c.n(), c.h(), c.w()) {
            return Err(Error::shape(format!(
                "fusion inputs disagree: spatial {s} vs context {c}"
            )));
        }
        b.enter(&self.name);
        let cat = b.concat_channels(&[spatial, context])?;
        b.exit();
        let f = self.reduce.forward(b, cat)?;
        b.enter(&self.name);
        let pooled = b.global_avg_pool(f);
        b.exit();
        let a = self.att1.forward(b, pooled)?;
        b.enter(&self.att1.name);
        let a = b.activation(a, Activation::Relu);
        b.exit();
        let a = self.att2.forward(b, a)?;
        b.enter(&self.name);
        let gate = b.activation(a, Activation::Sigmoid);
        let weighted = b.mul_channel(f, gate)?;
        let f = b.add(f, weighted)?;
        b.exit();
        self.expand.forward(b, f)
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub name: String,
    pub refine: DsConv,
    pub score: Conv,
}

impl Classifier {
    pub fn build<T: Element>(init: &mut Init<T>, name: &str, channels: usize, classes: usize) -> Result<Self> {
        Ok(Classifier {
            name: name.to_string(),
            refine: DsConv::build(init, &format!("{name}.refine"), channels, channels, 3, 1)?,
            score: Conv::build_score(init, &format!("{name}.score"), channels, classes)?,
        })
    }

    /// Scores at the input resolution (8x the fused map).
    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let y = self.refine.forward(b, x)?;
        let y = self.score.forward(b, y)?;
        let s = b.shape(y);
        b.enter(&self.name);
        let out = b.bilinear(y, s.h() * 8, s.w() * 8);
        b.exit();
        out
    }
}

/// Layer structure of the full network.
#[derive(Clone, Debug)]
pub struct CanLayers {
    pub spatial: SpatialBranch,
    pub context: ContextBranch,
    pub ffm: FeatureFusion,
    pub head: Classifier,
    pub aux_ga: Conv,
    pub aux_la: Conv,
}

impl CanLayers {
    pub fn build<T: Element>(init: &mut Init<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.backbone_out_channels();
        let k = cfg.num_classes;
        Ok(CanLayers {
            spatial: SpatialBranch::build(init, "spatial", cfg.input_channels, cfg.spatial_channels)?,
            context: ContextBranch::build(init, "context", cfg)?,
            ffm: FeatureFusion::build(
                init,
                "ffm",
                cfg.ffm_in_channels(),
                cfg.ffm_mid_channels,
                cfg.ffm_out_channels,
            )?,
            head: Classifier::build(init, "head", cfg.ffm_out_channels, k)?,
            aux_ga: Conv::build_score(init, "aux_ga", c, k)?,
            aux_la: Conv::build_score(init, "aux_la", c, k)?,
        })
    }

    /// Auxiliary heads are evaluated iff the backend is in training mode.
    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<ForwardOutput<B::Value>> {
        let s = b.shape(x);
        if s.h() % 16 != 0 || s.w() % 16 != 0 || s.h() == 0 || s.w() == 0 {
            return Err(Error::shape(format!(
                "input extents must be positive multiples of 16, got {}x{}",
                s.h(),
                s.w()
            )));
        }
        let spatial = self.spatial.forward(b, x)?;
        let ctx = self.context.forward(b, x)?;
        let fused = self.ffm.forward(b, spatial, ctx.context)?;
        let primary = self.head.forward(b, fused)?;
        let (aux_ga, aux_la) = if b.is_training() {
            (
                Some(self.aux_ga.forward(b, ctx.ga)?),
                Some(self.aux_la.forward(b, ctx.la)?),
            )
        } else {
            (None, None)
        };
        Ok(ForwardOutput {
            primary,
            aux_ga,
            aux_la,
        })
    }
}

/// A configured network with its parameters.
#[derive(Clone, Debug)]
pub struct CanModel {
    pub config: ModelConfig,
    pub layers: CanLayers,
    pub params: ParamStore<f32>,
}

impl CanModel {
    /// Builds the network with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = CanLayers::build(&mut Init::new(&mut params, &mut rng), &config)?;
        Ok(CanModel { config, layers, params })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.params.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Inference-mode logits `[N, K, H, W]`.
    pub fn infer(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &self.params, false, false);
        let xv = fw.input(x.clone());
        let out = self.layers.forward(&mut fw, xv)?;
        Ok(g.value(out.primary).clone())
    }

    /// Inference-mode per-pixel argmax labels, one `Vec` of `H * W` per image.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<Vec<u8>>> {
        Ok(argmax_labels(&self.infer(x)?))
    }

    /// Runs on an arbitrary graph; returns the output and the parameter
    /// leaves that were created.
    pub fn forward_graph<'a, T: Element>(
        &self,
        g: &'a mut Graph<T>,
        params: &'a ParamStore<T>,
        x: Var,
        train: bool,
    ) -> Result<(ForwardOutput<Var>, Forward<'a, T>)> {
        let mut fw = Forward::new(g, params, train, true);
        let out = self.layers.forward(&mut fw, x)?;
        Ok((out, fw))
    }
}

/// Channel argmax of `[N, K, H, W]` scores; first maximum wins ties.
pub fn argmax_labels<T: Element>(scores: &Tensor<T>) -> Vec<Vec<u8>> {
    let [n, k, h, w] = scores.shape().dims();
    let plane = h * w;
    (0..n)
        .map(|b| {
            let base = b * k * plane;
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    let mut best_v = scores.data()[base + p];
                    for c in 1..k {
                        let v = scores.data()[base + c * plane + p];
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}
