use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use canseg_core::io::load_weights;
use canseg_core::model::CanModel;
use canseg_core::Tensor;
use clap::Args;
use serde::Serialize;

use crate::{config_error, load_config, read_file};

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained weights; freshly initialized parameters are timed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 1024)]
    width: usize,
    /// Timed forward passes.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Untimed passes before measuring.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub iters: usize,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

/// Median (mean of the middle pair for even counts) and nearest-rank p95.
fn summarize(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    let rank = (0.95 * n as f64).ceil() as usize;
    (median, s[rank.clamp(1, n) - 1])
}

pub fn run(args: BenchArgs) -> Result<ExitCode> {
    let cfg = load_config(args.config.as_deref())?;
    if args.iters == 0 {
        return Err(config_error("--iters must be at least 1"));
    }
    let model = match &args.weights {
        Some(p) => load_weights(&read_file(p)?, &cfg.model)?,
        None => CanModel::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let x = Tensor::<f32>::full([1, 3, args.height, args.width], 0.5);
    for _ in 0..args.warmup {
        model.infer(&x)?;
    }
    let mut samples = Vec::with_capacity(args.iters);
    for _ in 0..args.iters {
        let t = Instant::now();
        model.infer(&x)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (median, p95) = summarize(&samples);
    let report = BenchReport {
        height: args.height,
        width: args.width,
        iters: args.iters,
        samples_ms: samples,
        median_ms: median,
        p95_ms: p95,
        fps: 1000.0 / median,
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("machine-dependent timing, not reproducible across hosts");
        println!(
            "input 1x3x{}x{}, {} warmup, {} timed passes",
            report.height, report.width, args.warmup, report.iters
        );
        println!(
            "median {:.3} ms, p95 {:.3} ms, {:.2} FPS",
            report.median_ms, report.p95_ms, report.fps
        );
    }
    Ok(ExitCode::SUCCESS)
}
