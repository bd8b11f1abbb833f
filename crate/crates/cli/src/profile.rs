use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use canseg_core::complexity::{attention_cost_ratio, profile, AttentionCost, ComplexityReport};
use canseg_core::model::CanModel;
use canseg_core::Shape;
use clap::Args;
use serde::Serialize;

use crate::{config_error, load_config};

#[derive(Args)]
pub struct ProfileArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    height: usize,
    #[arg(long, default_value_t = 2048)]
    width: usize,
    /// Include the auxiliary heads (training-mode graph).
    #[arg(long)]
    train: bool,
    /// Treat height and width as the attention input and report only the
    /// attention cost.
    #[arg(long)]
    attention_only: bool,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct ProfileOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<ComplexityReport>,
    attention: AttentionCost,
}

pub fn run(args: ProfileArgs) -> Result<ExitCode> {
    let cfg = load_config(args.config.as_deref())?;
    let (h, w) = (args.height, args.width);
    if h == 0 || w == 0 {
        return Err(config_error("--height and --width must be positive"));
    }
    let spp = &cfg.model.spp;
    let embed = cfg.model.ga_embed_channels;
    let out = if args.attention_only {
        ProfileOutput {
            report: None,
            attention: attention_cost_ratio(h, w, embed, spp)?,
        }
    } else {
        let model = CanModel::new(cfg.model.clone(), cfg.train.seed)?;
        let report = profile(&model.layers, &model.params, Shape::new(1, 3, h, w), args.train)?;
        let stride = cfg.model.backbone_stride();
        ProfileOutput {
            report: Some(report),
            attention: attention_cost_ratio(h / stride, w / stride, embed, spp)?,
        }
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        if let Some(r) = &out.report {
            print!("{}", r.to_text());
            println!();
        }
        print!("{}", out.attention.to_text());
    }
    Ok(ExitCode::SUCCESS)
}
