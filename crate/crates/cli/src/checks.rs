use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use canseg_core::gradcheck::{run_suite, SuiteOptions, SUITE_TOLERANCE};
use canseg_core::selftest::run_selftest;
use canseg_core::OpKind;
use clap::Args;

use crate::config_error;

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per tensor in the network-sized checks.
    #[arg(long, default_value_t = 4)]
    coords: usize,
    /// Test hook: perturb the backward rule of this op (e.g. `mul_channel`).
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long)]
    json: bool,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let fault = match &args.corrupt {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::BACKWARD_OPS.iter().map(|o| o.name()).collect();
            config_error(format!("--corrupt: unknown op {name:?}; one of {}", known.join(", ")))
        })?),
        None => None,
    };
    if args.coords == 0 {
        return Err(config_error("--coords must be at least 1"));
    }
    let start = Instant::now();
    let entries = run_suite(&SuiteOptions {
        seed: args.seed,
        fault,
        model_coords: args.coords,
    });
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.block.as_str()).collect();
    if args.json {
        println!("{}", serde_json::to_string_pretty(&entries)?);
    } else {
        println!(
            "{:<26} {:>12} {:>7} {:>6}  {:<4}  worst tensor",
            "block", "max rel err", "coords", "kinks", ""
        );
        for e in &entries {
            println!(
                "{:<26} {:>12.3e} {:>7} {:>6}  {:<4}  {}",
                e.block,
                e.max_rel_error,
                e.coords,
                e.kinks,
                if e.passed { "PASS" } else { "FAIL" },
                e.worst
            );
        }
        println!(
            "seed {}, tolerance {SUITE_TOLERANCE:e}, {:.1}s",
            args.seed,
            start.elapsed().as_secs_f64()
        );
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

#[derive(Args)]
pub struct SelftestArgs {
    #[arg(long)]
    json: bool,
}

pub fn selftest(args: SelftestArgs) -> Result<ExitCode> {
    let checks = run_selftest();
    if args.json {
        println!("{}", serde_json::to_string_pretty(&checks)?);
    } else {
        for c in &checks {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    let failures = checks.iter().filter(|c| !c.passed).count();
    Ok(ExitCode::from(failures.min(125) as u8))
}
