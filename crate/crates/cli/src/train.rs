use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use canseg_core::io::{load_checkpoint, save_checkpoint, save_weights};
use canseg_core::train::{evaluate, validation_set, Trainer};
use clap::Args;

use crate::{config_error, load_config, read_file, write_file};

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output weights; overrides io.weights.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from and rewrite; overrides io.checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides train.schedule.max_iter.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.max_iter {
        cfg.train.schedule.max_iter = n;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let out = args
        .out
        .or(cfg.io.weights.clone())
        .ok_or_else(|| config_error("io.weights: no output path (set it or pass --out)"))?;
    let checkpoint = args.checkpoint.or(cfg.io.checkpoint.clone());

    let mut trainer = match checkpoint.as_ref().filter(|p| p.exists()) {
        Some(p) => {
            let ck = load_checkpoint(&read_file(p)?, &cfg.model)?;
            println!("resuming from {} at iteration {}", p.display(), ck.iter);
            Trainer::resume(cfg.model.clone(), cfg.train.clone(), ck)?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    let classes = trainer.model.num_classes();
    let val = validation_set(&cfg.train, classes)?;
    let batch = cfg.train.batch_size;
    let max_iter = cfg.train.schedule.max_iter;
    println!(
        "training {} parameters for iterations {}..{max_iter}, batch {batch}, seed {}",
        trainer.model.trainable_count(),
        trainer.iter,
        cfg.train.seed
    );

    let save_ck = |t: &Trainer| -> Result<()> {
        if let Some(p) = &checkpoint {
            write_file(p, &save_checkpoint(&t.checkpoint())?)?;
        }
        Ok(())
    };
    let start = Instant::now();
    let mut stepped = false;
    while !trainer.done() {
        let r = trainer.step()?;
        let done = r.iter + 1;
        let l = &r.loss;
        if cfg.io.log_every > 0 && (done % cfg.io.log_every == 0 || done == max_iter) {
            println!(
                "iter {done} lr {:.6} loss {:.4} (primary {:.4}, aux_ga {:.4}, aux_la {:.4}) {:.1}s",
                r.lr,
                l.total,
                l.l_p,
                l.l_c1,
                l.l_c2,
                start.elapsed().as_secs_f64()
            );
        }
        if cfg.train.val_every > 0 && done % cfg.train.val_every == 0 && done != max_iter {
            println!(
                "val iter {done} mIoU {:.4}",
                evaluate(&trainer.model, &val, batch)?.mean
            );
        }
        if cfg.io.checkpoint_every > 0 && done % cfg.io.checkpoint_every == 0 {
            save_ck(&trainer)?;
        }
        stepped = true;
    }
    if stepped && !val.is_empty() {
        let report = evaluate(&trainer.model, &val, batch)?;
        let per_class: Vec<String> = report
            .per_class
            .iter()
            .map(|v| v.map_or("-".to_string(), |v| format!("{v:.4}")))
            .collect();
        println!(
            "final iter {} mIoU {:.4} per class [{}]",
            trainer.iter,
            report.mean,
            per_class.join(", ")
        );
    }
    save_ck(&trainer)?;
    write_file(&out, &save_weights(&trainer.model)?)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}
