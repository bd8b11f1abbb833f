use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Activation;
use crate::nn::{GhostKernels, InvertedResidualConfig, SppConfig};

/// Every architectural hyperparameter of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_channels: usize,
    pub spatial_channels: [usize; 4],
    /// Inverted residual schedule after the stride-2 stem; the stem width is
    /// the first block's input width.
    pub backbone: Vec<InvertedResidualConfig>,
    pub ga_embed_channels: usize,
    pub ga_value_channels: usize,
    /// Channel groups in the global attention block; 1 is ungrouped.
    pub ga_groups: usize,
    pub spp: SppConfig,
    pub ghost: GhostKernels,
    pub context_out_channels: usize,
    pub ffm_mid_channels: usize,
    pub ffm_out_channels: usize,
    /// Whether auxiliary heads are part of the default execution mode.
    pub train_mode: bool,
}

const RE: Activation = Activation::Relu;
const HS: Activation = Activation::HardSwish;

fn ir(i: usize, e: usize, o: usize, k: usize, s: usize, se: bool, a: Activation) -> InvertedResidualConfig {
    InvertedResidualConfig::new(i, e, o, k, s, se, a)
}

/// Eight-block schedule ending at 1/16 resolution with 96 channels.
pub fn toy_backbone() -> Vec<InvertedResidualConfig> {
    vec![
        ir(16, 16, 16, 3, 2, true, RE),
        ir(16, 72, 24, 3, 2, false, RE),
        ir(24, 88, 24, 3, 1, false, RE),
        ir(24, 96, 40, 5, 2, true, HS),
        ir(40, 240, 40, 5, 1, true, HS),
        ir(40, 120, 48, 5, 1, true, HS),
        ir(48, 144, 48, 5, 1, true, HS),
        ir(48, 288, 96, 5, 1, true, HS),
    ]
}

/// The eleven-block small mobile schedule, with the last downsampling block
/// kept at stride 1 so the output stays at 1/16, plus two more 96-wide
/// blocks at the end.
pub fn mobile_small_backbone() -> Vec<InvertedResidualConfig> {
    vec![
        ir(16, 16, 16, 3, 2, true, RE),
        ir(16, 72, 24, 3, 2, false, RE),
        ir(24, 88, 24, 3, 1, false, RE),
        ir(24, 96, 40, 5, 2, true, HS),
        ir(40, 240, 40, 5, 1, true, HS),
        ir(40, 240, 40, 5, 1, true, HS),
        ir(40, 120, 48, 5, 1, true, HS),
        ir(48, 144, 48, 5, 1, true, HS),
        ir(48, 288, 96, 5, 1, true, HS),
        ir(96, 576, 96, 5, 1, true, HS),
        ir(96, 576, 96, 5, 1, true, HS),
        ir(96, 576, 96, 5, 1, true, HS),
        ir(96, 576, 96, 5, 1, true, HS),
    ]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 19,
            input_channels: 3,
            spatial_channels: [32, 48, 64, 64],
            backbone: toy_backbone(),
            ga_embed_channels: 32,
            ga_value_channels: 96,
            ga_groups: 1,
            spp: SppConfig::default(),
            ghost: GhostKernels::default(),
            context_out_channels: 64,
            ffm_mid_channels: 64,
            ffm_out_channels: 128,
            train_mode: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration trained on 64 x 64 synthetic images, whose
    /// 4 x 4 attention grid admits pyramid scales up to 4.
    pub fn toy() -> Self {
        ModelConfig {
            num_classes: 4,
            spp: SppConfig::new(vec![1, 2, 3]),
            train_mode: true,
            ..Default::default()
        }
    }

    /// Wider configuration sized for full-resolution street scenes.
    pub fn paper_scale() -> Self {
        ModelConfig {
            num_classes: 19,
            spatial_channels: [32, 64, 64, 128],
            backbone: mobile_small_backbone(),
            ga_embed_channels: 64,
            ga_value_channels: 96,
            context_out_channels: 128,
            ffm_mid_channels: 128,
            ffm_out_channels: 192,
            ..Default::default()
        }
    }

    pub fn backbone_out_channels(&self) -> usize {
        self.backbone.last().map_or(0, |b| b.out_channels)
    }

    pub fn stem_channels(&self) -> usize {
        self.backbone.first().map_or(0, |b| b.in_channels)
    }

    /// Total stride of the backbone including the stem.
    pub fn backbone_stride(&self) -> usize {
        self.backbone.iter().fold(2, |acc, b| acc * b.stride)
    }

    /// Concatenated FFM input width.
    pub fn ffm_in_channels(&self) -> usize {
        self.spatial_channels[3] + self.context_out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return cfg_err(format!("model.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 {
            return cfg_err("model.input_channels must be positive".into());
        }
        if self.spatial_channels.contains(&0) {
            return cfg_err("model.spatial_channels must be positive".into());
        }
        for (name, v) in [
            ("ga_embed_channels", self.ga_embed_channels),
            ("ga_value_channels", self.ga_value_channels),
            ("ga_groups", self.ga_groups),
            ("context_out_channels", self.context_out_channels),
            ("ffm_mid_channels", self.ffm_mid_channels),
            ("ffm_out_channels", self.ffm_out_channels),
        ] {
            if v == 0 {
                return cfg_err(format!("model.{name} must be positive"));
            }
        }
        if !self.ga_embed_channels.is_multiple_of(self.ga_groups)
            || !self.ga_value_channels.is_multiple_of(self.ga_groups)
        {
            return cfg_err(format!(
                "model.ga_groups {} must divide ga_embed_channels {} and ga_value_channels {}",
                self.ga_groups, self.ga_embed_channels, self.ga_value_channels
            ));
        }
        if self.backbone.is_empty() {
            return cfg_err("model.backbone must contain at least one block".into());
        }
        for (i, b) in self.backbone.iter().enumerate() {
            b.validate().map_err(|e| nest(&format!("model.backbone[{i}]"), e))?;
            if i > 0 && b.in_channels != self.backbone[i - 1].out_channels {
                return cfg_err(format!(
                    "model.backbone[{i}].in is {} but the previous block emits {}",
                    b.in_channels,
                    self.backbone[i - 1].out_channels
                ));
            }
        }
        if self.backbone_stride() != 16 {
            return cfg_err(format!(
                "model.backbone must downsample by 16 in total (stem included), got {}",
                self.backbone_stride()
            ));
        }
        self.spp.validate().map_err(|e| nest("model.spp", e))?;
        let g = self.ghost.with_out(self.ga_embed_channels.min(self.ga_value_channels));
        g.validate().map_err(|e| nest("model.ghost", e))?;
        Ok(())
    }
}

/// Prefixes a config error with the field path it came from.
pub(crate) fn nest(path: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{path}: {m}")),
        other => Error::Config(format!("{path}: {other}")),
    }
}
