use serde::{Deserialize, Serialize};

use super::{Backend, Init, Role};
use crate::error::{Error, Result};
use crate::kernels::{Activation, BnSpec, ConvSpec};
use crate::tensor::{Element, Shape};

/// Pyramid grid sizes used to subsample attention keys and values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SppConfig {
    pub scales: Vec<usize>,
}

impl Default for SppConfig {
    fn default() -> Self {
        SppConfig {
            scales: vec![1, 3, 6, 8],
        }
    }
}

impl SppConfig {
    pub fn new(scales: impl Into<Vec<usize>>) -> Self {
        SppConfig { scales: scales.into() }
    }

    /// Number of pooled positions, the sum of squared scales.
    pub fn positions(&self) -> usize {
        self.scales.iter().map(|n| n * n).sum()
    }

    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config(format!(
                "spp scales must be a non-empty list of positive ints, got {:?}",
                self.scales
            )));
        }
        Ok(())
    }

    /// Rejects inputs smaller than the largest pyramid grid.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        match self.scales.iter().find(|&&n| n > height || n > width) {
            Some(&scale) => Err(Error::SppScale { scale, height, width }),
            None => Ok(()),
        }
    }
}

/// Kernel sizes and ratio shared by every ghost convolution in a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhostKernels {
    pub ratio: usize,
    pub primary_kernel: usize,
    pub cheap_kernel: usize,
}

impl Default for GhostKernels {
    fn default() -> Self {
        GhostKernels {
            ratio: 2,
            primary_kernel: 1,
            cheap_kernel: 3,
        }
    }
}

impl GhostKernels {
    pub fn with_out(self, out_channels: usize) -> GhostConvConfig {
        GhostConvConfig {
            out_channels,
            ratio: self.ratio,
            primary_kernel: self.primary_kernel,
            cheap_kernel: self.cheap_kernel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhostConvConfig {
    pub out_channels: usize,
    pub ratio: usize,
    pub primary_kernel: usize,
    pub cheap_kernel: usize,
}

impl GhostConvConfig {
    pub fn new(out_channels: usize) -> Self {
        GhostKernels::default().with_out(out_channels)
    }

    /// Channels produced by the primary convolution, `ceil(out / ratio)`.
    pub fn primary_channels(&self) -> usize {
        self.out_channels.div_ceil(self.ratio)
    }

    pub fn cheap_channels(&self) -> usize {
        self.out_channels - self.primary_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.ratio == 0 {
            return Err(Error::Config("ghost conv needs positive out_channels and ratio".into()));
        }
        if self.ratio > self.out_channels {
            return Err(Error::Config(format!(
                "ghost ratio {} exceeds out_channels {}",
                self.ratio, self.out_channels
            )));
        }
        for k in [self.primary_kernel, self.cheap_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("ghost kernel sizes must be odd, got {k}")));
            }
        }
        Ok(())
    }

    pub fn param_count(&self, in_channels: usize) -> usize {
        let p = self.primary_channels();
        in_channels * p * self.primary_kernel.pow(2) + self.cheap_channels() * self.cheap_kernel.pow(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertedResidualConfig {
    #[serde(rename = "in")]
    pub in_channels: usize,
    #[serde(rename = "expand")]
    pub expand_channels: usize,
    #[serde(rename = "out")]
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub use_se: bool,
    pub activation: Activation,
}

impl InvertedResidualConfig {
    pub const fn new(
        in_channels: usize,
        expand_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        use_se: bool,
        activation: Activation,
    ) -> Self {
        InvertedResidualConfig {
            in_channels,
            expand_channels,
            out_channels,
            kernel,
            stride,
            use_se,
            activation,
        }
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.expand_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "inverted residual channel counts must be positive".into(),
            ));
        }
        if !matches!(self.kernel, 3 | 5) {
            return Err(Error::Config(format!(
                "inverted residual kernel must be 3 or 5, got {}",
                self.kernel
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!(
                "inverted residual stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if !matches!(self.activation, Activation::Relu | Activation::HardSwish) {
            return Err(Error::Config(format!(
                "inverted residual activation must be relu or hard_swish, got {}",
                self.activation.name()
            )));
        }
        Ok(())
    }
}

/// Square convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element>(
        init: &mut Init<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "`{name}`: groups {groups} must divide {in_channels} -> {out_channels}"
            )));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("`{name}`: kernel must be odd, got {kernel}")));
        }
        let conv = Conv {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            spec: ConvSpec::same(kernel, stride, groups),
            bias,
        };
        init.kaiming(&conv.weight_name(), conv.weight_shape())?;
        if bias {
            init.constant(&conv.bias_name(), Shape::vector(out_channels), 0.0, Role::Trainable)?;
        }
        Ok(conv)
    }

    /// 1x1 scoring convolution with bias; weights drawn from N(0, 0.01^2) so
    /// initial logits stay near zero.
    pub fn build_score<T: Element>(init: &mut Init<T>, name: &str, in_channels: usize, classes: usize) -> Result<Self> {
        let conv = Conv {
            name: name.to_string(),
            in_channels,
            out_channels: classes,
            kernel: 1,
            spec: ConvSpec::same(1, 1, 1),
            bias: true,
        };
        init.normal(&conv.weight_name(), conv.weight_shape(), 0.01)?;
        init.constant(&conv.bias_name(), Shape::vector(classes), 0.0, Role::Trainable)?;
        Ok(conv)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.spec.groups,
            self.kernel,
            self.kernel,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let w = b.param(&self.weight_name())?;
        let bias = if self.bias {
            Some(b.param(&self.bias_name())?)
        } else {
            None
        };
        b.enter(&self.name);
        let y = b.conv2d(x, w, bias, self.spec);
        b.exit();
        y
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub spec: BnSpec,
}

impl BatchNorm {
    pub fn build<T: Element>(init: &mut Init<T>, name: &str, channels: usize) -> Result<Self> {
        let c = Shape::vector(channels);
        init.constant(&format!("{name}.weight"), c, 1.0, Role::Trainable)?;
        init.constant(&format!("{name}.bias"), c, 0.0, Role::Trainable)?;
        init.constant(&format!("{name}.running_mean"), c, 0.0, Role::Buffer)?;
        init.constant(&format!("{name}.running_var"), c, 1.0, Role::Buffer)?;
        Ok(BatchNorm {
            name: name.to_string(),
            channels,
            spec: BnSpec::default(),
        })
    }

    /// Gamma, beta and the two running buffers.
    pub fn param_count(&self) -> usize {
        4 * self.channels
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        b.enter(&self.name);
        let y = b.batch_norm(&self.name, x, &self.spec);
        b.exit();
        y
    }
}

/// Bias-free convolution, batch norm and an optional activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element>(
        init: &mut Init<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: Option<Activation>,
    ) -> Result<Self> {
        Ok(ConvBnAct {
            conv: Conv::build(
                init,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                groups,
                false,
            )?,
            bn: BatchNorm::build(init, &format!("{name}.bn"), out_channels)?,
            act,
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let y = self.conv.forward(b, x)?;
        let y = self.bn.forward(b, y)?;
        Ok(match self.act {
            Some(a) => {
                b.enter(&self.bn.name);
                let y = b.activation(y, a);
                b.exit();
                y
            }
            None => y,
        })
    }
}

/// Depthwise conv-BN-ReLU followed by pointwise conv-BN-ReLU.
#[derive(Clone, Debug)]
pub struct DsConv {
    pub depthwise: ConvBnAct,
    pub pointwise: ConvBnAct,
}

impl DsConv {
    pub fn build<T: Element>(
        init: &mut Init<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let relu = Some(Activation::Relu);
        Ok(DsConv {
            depthwise: ConvBnAct::build(
                init,
                &format!("{name}.dw"),
                in_channels,
                in_channels,
                kernel,
                stride,
                in_channels,
                relu,
            )?,
            pointwise: ConvBnAct::build(init, &format!("{name}.pw"), in_channels, out_channels, 1, 1, 1, relu)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let y = self.depthwise.forward(b, x)?;
        self.pointwise.forward(b, y)
    }
}

/// Squeeze-and-excitation channel gate with a hard-sigmoid output.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub name: String,
    pub reduce: Conv,
    pub expand: Conv,
}

pub const SE_REDUCTION: usize = 4;

impl SeBlock {
    pub fn build<T: Element>(init: &mut Init<T>, name: &str, channels: usize) -> Result<Self> {
        let mid = channels.div_ceil(SE_REDUCTION);
        Ok(SeBlock {
            name: name.to_string(),
            reduce: Conv::build(init, &format!("{name}.fc1"), channels, mid, 1, 1, 1, true)?,
            expand: Conv::build(init, &format!("{name}.fc2"), mid, channels, 1, 1, 1, true)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        b.enter(&self.name);
        let s = b.global_avg_pool(x);
        b.exit();
        let s = self.reduce.forward(b, s)?;
        b.enter(&self.reduce.name);
        let s = b.activation(s, Activation::Relu);
        b.exit();
        let s = self.expand.forward(b, s)?;
        b.enter(&self.name);
        let gate = b.activation(s, Activation::HardSigmoid);
        let y = b.mul_channel(x, gate);
        b.exit();
        y
    }
}

/// A narrow primary convolution widened by cheap depthwise transforms of its
/// own output.
#[derive(Clone, Debug)]
pub struct GhostConv {
    pub name: String,
    pub config: GhostConvConfig,
    pub primary: Conv,
    /// Primary channel feeding each cheap output channel.
    pub cheap_sources: Vec<usize>,
    pub cheap: Option<Conv>,
}

impl GhostConv {
    pub fn build<T: Element>(
        init: &mut Init<T>,
        name: &str,
        in_channels: usize,
        config: GhostConvConfig,
    ) -> Result<Self> {
        config.validate()?;
        let p = config.primary_channels();
        let r = config.cheap_channels();
        let primary = Conv::build(
            init,
            &format!("{name}.primary"),
            in_channels,
            p,
            config.primary_kernel,
            1,
            1,
            false,
        )?;
        let cheap = if r > 0 {
            Some(Conv::build(
                init,
                &format!("{name}.cheap"),
                r,
                r,
                config.cheap_kernel,
                1,
                r,
                false,
            )?)
        } else {
            None
        };
        Ok(GhostConv {
            name: name.to_string(),
            config,
            primary,
            cheap_sources: (0..r).map(|j| j % p).collect(),
            cheap,
        })
    }

    pub fn param_count(&self) -> usize {
        self.primary.param_count() + self.cheap.as_ref().map_or(0, Conv::param_count)
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let y = self.primary.forward(b, x)?;
        let Some(cheap) = &self.cheap else {
            return Ok(y);
        };
        b.enter(&self.name);
        let src = b.select_channels(y, &self.cheap_sources)?;
        b.exit();
        let z = cheap.forward(b, src)?;
        b.enter(&self.name);
        let out = b.concat_channels(&[y, z]);
        b.exit();
        out
    }
}

/// MobileNet-style inverted residual: expand, depthwise, optional SE, linear
/// projection, and a skip when shapes allow.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub name: String,
    pub config: InvertedResidualConfig,
    pub expand: ConvBnAct,
    pub depthwise: ConvBnAct,
    pub se: Option<SeBlock>,
    pub project: ConvBnAct,
}

impl InvertedResidual {
    pub fn build<T: Element>(init: &mut Init<T>, name: &str, config: InvertedResidualConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let act = Some(c.activation);
        Ok(InvertedResidual {
            name: name.to_string(),
            config,
            expand: ConvBnAct::build(
                init,
                &format!("{name}.expand"),
                c.in_channels,
                c.expand_channels,
                1,
                1,
                1,
                act,
            )?,
            depthwise: ConvBnAct::build(
                init,
                &format!("{name}.dw"),
                c.expand_channels,
                c.expand_channels,
                c.kernel,
                c.stride,
                c.expand_channels,
                act,
            )?,
            se: if c.use_se {
                Some(SeBlock::build(init, &format!("{name}.se"), c.expand_channels)?)
            } else {
                None
            },
            project: ConvBnAct::build(
                init,
                &format!("{name}.project"),
                c.expand_channels,
                c.out_channels,
                1,
                1,
                1,
                None,
            )?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count()
            + self.depthwise.param_count()
            + self.se.as_ref().map_or(0, SeBlock::param_count)
            + self.project.param_count()
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: B::Value) -> Result<B::Value> {
        let y = self.expand.forward(b, x)?;
        let mut y = self.depthwise.forward(b, y)?;
        if let Some(se) = &self.se {
            y = se.forward(b, y)?;
        }
        let y = self.project.forward(b, y)?;
        if self.config.has_skip() {
            b.enter(&self.name);
            let out = b.add(x, y);
            b.exit();
            out
        } else {
            Ok(y)
        }
    }
}

/// Adaptive max pooling at every pyramid scale, one `[N, C, n, n]` map per
/// scale.
pub fn spp_pyramid<B: Backend>(b: &mut B, x: B::Value, cfg: &SppConfig) -> Result<Vec<B::Value>> {
    let s = b.shape(x);
    cfg.check_extent(s.h(), s.w())?;
    cfg.scales.iter().map(|&n| b.adaptive_max_pool(x, n, n)).collect()
}

/// Flattens and joins pyramid maps into `[N, C, 1, M]`.
pub fn flatten_positions<B: Backend>(b: &mut B, maps: &[B::Value]) -> Result<B::Value> {
    let flat = maps
        .iter()
        .map(|&m| {
            let [n, c, h, w] = b.shape(m).dims();
            b.reshape(m, Shape::new(n, c, 1, h * w))
        })
        .collect::<Result<Vec<_>>>()?;
    if flat.len() == 1 {
        return Ok(flat[0]);
    }
    b.concat_width(&flat)
}

/// Pyramid max pooling flattened to `[N, C, 1, M]` with `M = Σ n²`.
pub fn spp_flatten<B: Backend>(b: &mut B, x: B::Value, cfg: &SppConfig) -> Result<B::Value> {
    let maps = spp_pyramid(b, x, cfg)?;
    flatten_positions(b, &maps)
}
