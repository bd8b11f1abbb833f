//! Per-block gradient checks over every layer type and the full network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{check_module, grad_check, jitter_params, random_tensor, randomize_params, GradCheckOptions, ModuleCheck};
use crate::autograd::{Graph, OpKind};
use crate::error::Result;
use crate::kernels::Activation;
use crate::label::LabelMap;
use crate::loss::{ohem_ce, OhemConfig};
use crate::model::{
    CanLayers, Classifier, ContextBranch, FeatureFusion, LocalAttention, ModelConfig, ReducedGlobalAttention,
    SpatialBranch,
};
use crate::nn::{
    spp_flatten, Backend, Conv, ConvBnAct, DsConv, Forward, GhostConv, GhostConvConfig, Init, InvertedResidual,
    InvertedResidualConfig, ParamStore, SeBlock, SppConfig,
};
use crate::tensor::{Shape, Tensor};

/// Pass threshold on the maximum relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the suite. Central differences through batch norm
/// carry roundoff near 1e-7 at step 1e-5, which against the default floor
/// turns structurally zero gradients (a bias feeding another normalization)
/// into relative errors near 1.
pub const SUITE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub fault: Option<OpKind>,
    /// Coordinates probed per tensor for the network-sized checks.
    pub model_coords: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            fault: None,
            model_coords: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub block: String,
    pub max_rel_error: f64,
    /// Tensor holding the worst coordinate, or the error that stopped the check.
    pub worst: String,
    pub coords: usize,
    pub kinks: usize,
    pub passed: bool,
}

impl SuiteEntry {
    fn from_check(block: &str, check: Result<ModuleCheck>) -> SuiteEntry {
        match check {
            Ok(c) => SuiteEntry {
                block: block.to_string(),
                max_rel_error: c.report.max_rel_error,
                worst: c.worst_name().to_string(),
                coords: c.report.coords_checked,
                kinks: c.report.kinks,
                passed: c.report.max_rel_error < SUITE_TOLERANCE,
            },
            Err(e) => SuiteEntry {
                block: block.to_string(),
                max_rel_error: f64::INFINITY,
                worst: e.to_string(),
                coords: 0,
                kinks: 0,
                passed: false,
            },
        }
    }
}

/// Configuration of the end-to-end check: the toy network with a pyramid
/// that fits the 2 x 2 attention grid of a 32 x 32 input.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        spp: SppConfig::new(vec![1, 2]),
        ..ModelConfig::toy()
    }
}

type Builder = fn(&mut Init<f64>) -> Result<Box<dyn Block>>;

trait Block {
    fn input_shapes(&self) -> Vec<Shape>;
    fn run(&self, fw: &mut Forward<'_, f64>, inputs: &[crate::autograd::Var]) -> Result<crate::autograd::Var>;
    /// Network-sized blocks probe a sample of coordinates, starting from
    /// their own initialization with a small jitter.
    fn sampled(&self) -> bool {
        false
    }
    /// Normalize with batch statistics. The deep checks use running
    /// statistics: at 1 x 3 x 32 x 32 the late stages normalize over four
    /// values per channel, and stacked layers of that kind leave curvature
    /// too steep for a 1e-5 step.
    fn train(&self) -> bool {
        true
    }
}

macro_rules! unary_block {
    ($ty:ty, $shape:expr) => {
        impl Block for $ty {
            fn input_shapes(&self) -> Vec<Shape> {
                vec![$shape]
            }
            fn run(&self, fw: &mut Forward<'_, f64>, v: &[crate::autograd::Var]) -> Result<crate::autograd::Var> {
                self.forward(fw, v[0])
            }
        }
    };
}

unary_block!(Conv, Shape::new(2, 4, 6, 6));
unary_block!(ConvBnAct, Shape::new(2, 4, 6, 6));
unary_block!(DsConv, Shape::new(2, 4, 6, 6));
unary_block!(SeBlock, Shape::new(2, 6, 4, 4));
unary_block!(GhostConv, Shape::new(2, 4, 5, 5));
unary_block!(InvertedResidual, Shape::new(2, 4, 6, 6));
unary_block!(LocalAttention, Shape::new(2, 4, 5, 5));
unary_block!(Classifier, Shape::new(1, 6, 2, 2));

struct Ga(ReducedGlobalAttention);
struct Spp;
struct Spatial(SpatialBranch);
struct Context(ContextBranch);
struct Ffm(FeatureFusion);
struct Network(CanLayers);

impl Block for Ga {
    fn input_shapes(&self) -> Vec<Shape> {
        vec![Shape::new(2, 6, 4, 4)]
    }
    fn run(&self, fw: &mut Forward<'_, f64>, v: &[crate::autograd::Var]) -> Result<crate::autograd::Var> {
        self.0.forward(fw, v[0])
    }
}

impl Block for Spp {
    fn input_shapes(&self) -> Vec<Shape> {
        vec![Shape::new(1, 3, 6, 7)]
    }
    fn run(&self, fw: &mut Forward<'_, f64>, v: &[crate::autograd::Var]) -> Result<crate::autograd::Var> {
        spp_flatten(fw, v[0], &SppConfig::new(vec![1, 2, 3]))
    }
}

impl Block for Spatial {
    fn input_shapes(&self) -> Vec<Shape> {
        vec![Shape::new(1, 3, 16, 16)]
    }
    fn run(&self, fw: &mut Forward<'_, f64>, v: &[crate::autograd::Var]) -> Result<crate::autograd::Var> {
        self.0.forward(fw, v[0])
    }
    fn sampled(&self) -> bool {
        true
    }
}

impl Block for Context {
    fn input_shapes(&self) -> Vec<Shape> {
        vec![Shape::new(1, 3, 32, 32)]
    }
    fn run(&self, fw: &mut Forward<'_, f64>, v: &[crate::autograd::Var]) -> Result<crate::autograd::Var> {
        let f = self.0.forward(fw, v[0])?;
        flatten_join(fw, &[f.context, f.ga, f.la])
    }
    fn sampled(&self) -> bool {
        true
    }
    fn train(&self) -> bool {
        false
    }
}

impl Block for Ffm {
    fn input_shapes(&self) -> Vec<Shape> {
        vec![Shape::new(1, 4, 4, 4), Shape::new(1, 6, 4, 4)]
    }
    fn run(&self, fw: &mut Forward<'_, f64>, v: &[crate::autograd::Var]) -> Result<crate::autograd::Var> {
        self.0.forward(fw, v[0], v[1])
    }
}

impl Block for Network {
    fn input_shapes(&self) -> Vec<Shape> {
        vec![Shape::new(1, 3, 32, 32)]
    }
    fn run(&self, fw: &mut Forward<'_, f64>, v: &[crate::autograd::Var]) -> Result<crate::autograd::Var> {
        let out = self.0.forward(fw, v[0])?;
        let mut parts = vec![out.primary];
        parts.extend(out.aux_ga);
        parts.extend(out.aux_la);
        flatten_join(fw, &parts)
    }
    fn sampled(&self) -> bool {
        true
    }
    fn train(&self) -> bool {
        false
    }
}

/// Joins several outputs into one `[1, 1, 1, total]` row.
fn flatten_join(fw: &mut Forward<'_, f64>, parts: &[crate::autograd::Var]) -> Result<crate::autograd::Var> {
    let flat = parts
        .iter()
        .map(|&p| {
            let n = fw.shape(p).numel();
            fw.reshape(p, Shape::new(1, 1, 1, n))
        })
        .collect::<Result<Vec<_>>>()?;
    fw.concat_width(&flat)
}

fn blocks() -> Vec<(&'static str, Builder)> {
    vec![
        ("conv", |i| Ok(Box::new(Conv::build(i, "conv", 4, 6, 3, 2, 2, true)?))),
        ("conv_bn_act", |i| {
            Ok(Box::new(ConvBnAct::build(
                i,
                "cba",
                4,
                6,
                3,
                1,
                1,
                Some(Activation::HardSwish),
            )?))
        }),
        ("ds_conv", |i| Ok(Box::new(DsConv::build(i, "ds", 4, 6, 3, 2)?))),
        ("se_block", |i| Ok(Box::new(SeBlock::build(i, "se", 6)?))),
        ("ghost_conv", |i| {
            let cfg = GhostConvConfig {
                ratio: 3,
                ..GhostConvConfig::new(7)
            };
            Ok(Box::new(GhostConv::build(i, "ghost", 4, cfg)?))
        }),
        ("inverted_residual", |i| {
            let cfg = InvertedResidualConfig::new(4, 12, 4, 3, 1, true, Activation::HardSwish);
            Ok(Box::new(InvertedResidual::build(i, "ir", cfg)?))
        }),
        ("spp_flatten", |_| Ok(Box::new(Spp))),
        ("reduced_global_attention", |i| {
            let cfg = ModelConfig {
                ga_embed_channels: 4,
                ga_value_channels: 6,
                spp: SppConfig::new(vec![1, 2, 3]),
                ..ModelConfig::toy()
            };
            Ok(Box::new(Ga(ReducedGlobalAttention::build(i, "ga", 6, &cfg)?)))
        }),
        ("local_attention", |i| Ok(Box::new(LocalAttention::build(i, "la", 4)?))),
        ("spatial_branch", |i| {
            Ok(Box::new(Spatial(SpatialBranch::build(i, "spatial", 3, [4, 6, 6, 8])?)))
        }),
        ("context_branch", |i| {
            Ok(Box::new(Context(ContextBranch::build(
                i,
                "context",
                &gradcheck_model_config(),
            )?)))
        }),
        ("feature_fusion", |i| {
            Ok(Box::new(Ffm(FeatureFusion::build(i, "ffm", 10, 6, 8)?)))
        }),
        ("classifier", |i| Ok(Box::new(Classifier::build(i, "head", 6, 4)?))),
        ("model", |i| {
            Ok(Box::new(Network(CanLayers::build(i, &gradcheck_model_config())?)))
        }),
    ]
}

fn check_block(name: &str, build: Builder, opts: &SuiteOptions, index: u64) -> SuiteEntry {
    let seed = opts.seed.wrapping_mul(1000).wrapping_add(index);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = match build(&mut Init::new(&mut store, &mut rng)) {
        Ok(b) => b,
        Err(e) => return SuiteEntry::from_check(name, Err(e)),
    };
    if block.sampled() {
        jitter_params(&mut store, 0.1, seed ^ 0xa5a5);
    } else {
        randomize_params(&mut store, 0.5, seed ^ 0xa5a5);
    }
    let inputs: Vec<Tensor<f64>> = block
        .input_shapes()
        .into_iter()
        .map(|s| random_tensor(s, 1.0, &mut rng))
        .collect();
    let gopts = GradCheckOptions {
        seed,
        fault: opts.fault,
        max_coords: block.sampled().then_some(opts.model_coords),
        floor: SUITE_FLOOR,
        kink_retry: Some(SUITE_TOLERANCE),
        ..Default::default()
    };
    let check = check_module(&store, &inputs, block.train(), &gopts, |fw, v| block.run(fw, v));
    SuiteEntry::from_check(name, check)
}

/// OHEM cross entropy in its smooth regime (every valid pixel kept).
fn check_loss(opts: &SuiteOptions) -> SuiteEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1055);
    let logits = random_tensor(Shape::new(2, 4, 3, 3), 2.0, &mut rng);
    let data: Vec<u8> = (0..18)
        .map(|i| if i % 7 == 3 { 255 } else { (i * 5 % 4) as u8 })
        .collect();
    let labels = LabelMap::new(2, 3, 3, data).expect("18 labels");
    let cfg = OhemConfig {
        prob_threshold: 1.0,
        min_kept: Some(18),
        ..Default::default()
    };
    let gopts = GradCheckOptions {
        seed: opts.seed,
        fault: opts.fault,
        floor: SUITE_FLOOR,
        kink_retry: Some(SUITE_TOLERANCE),
        ..Default::default()
    };
    let check = grad_check(&[logits], &gopts, |g: &mut Graph<f64>, v| {
        Ok(ohem_ce(g, v[0], &labels, &cfg)?.loss)
    })
    .map(|report| ModuleCheck {
        report,
        names: vec!["logits".into()],
    });
    SuiteEntry::from_check("ohem_ce", check)
}

/// Runs every block check in a fixed order.
pub fn run_suite(opts: &SuiteOptions) -> Vec<SuiteEntry> {
    let mut out: Vec<SuiteEntry> = blocks()
        .into_iter()
        .enumerate()
        .map(|(i, (name, build))| check_block(name, build, opts, i as u64))
        .collect();
    out.push(check_loss(opts));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let entries = run_suite(&SuiteOptions::default());
        for e in &entries {
            assert!(e.passed, "{e:?}");
        }
        assert!(entries.iter().any(|e| e.block == "model"));
    }

    #[test]
    fn corrupted_rule_is_named() {
        let opts = SuiteOptions {
            fault: Some(OpKind::MulChannel),
            ..Default::default()
        };
        let entries = run_suite(&opts);
        let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.block.as_str()).collect();
        assert!(failed.contains(&"se_block"), "{failed:?}");
        assert!(failed.contains(&"feature_fusion"), "{failed:?}");
        assert!(!failed.contains(&"conv"), "{failed:?}");
    }
}
