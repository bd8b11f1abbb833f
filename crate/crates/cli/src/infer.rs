use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use canseg_core::infer::segment;
use canseg_core::io::{
    color_map, load_weights, palette, read_pgm, read_ppm, synth_sample, write_label_pgm, write_ppm, GrayImage, RgbImage,
};
use canseg_core::metrics::miou;
use canseg_core::model::CanModel;
use clap::Args;

use crate::{load_config, read_file, thread_limit, write_file};

#[derive(Args)]
pub struct InferArgs {
    /// Run configuration describing the model the weights belong to.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// Output prefix: writes `<prefix>.pgm` (labels) and `<prefix>.ppm`
    /// (colors); with several images, `<prefix>-<stem>.*`.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth label PGM for a single image; prints mIoU against it.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Binary PPM (P6) inputs of any size.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

fn output_prefix(out: &Path, image: &Path, many: bool) -> PathBuf {
    if !many {
        return out.to_path_buf();
    }
    let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy());
    let mut p = out.as_os_str().to_owned();
    p.push(format!("-{stem}"));
    PathBuf::from(p)
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(format!(".{ext}"));
    PathBuf::from(p)
}

fn write_outputs(prefix: &Path, labels: &GrayImage, classes: usize) -> Result<()> {
    let (w, h) = (labels.width, labels.height);
    write_file(&with_ext(prefix, "pgm"), &write_label_pgm(&labels.data, w, h)?)?;
    let colors = color_map(&labels.data, w, h, &palette(classes))?;
    write_file(&with_ext(prefix, "ppm"), &write_ppm(&colors))
}

pub fn run(args: InferArgs) -> Result<ExitCode> {
    let cfg = load_config(args.config.as_deref())?;
    let model = load_weights(&read_file(&args.weights)?, &cfg.model)?;
    if args.labels.is_some() && args.images.len() != 1 {
        bail!("--labels needs exactly one image");
    }
    let images: Vec<RgbImage> = args
        .images
        .iter()
        .map(|p| read_ppm(&read_file(p)?).map_err(|e| anyhow::anyhow!("{}: {e}", p.display())))
        .collect::<Result<_>>()?;

    let results = segment_all(&model, &images, thread_limit()?)?;
    let many = images.len() > 1;
    for ((path, img), labels) in args.images.iter().zip(&images).zip(&results) {
        let prefix = output_prefix(&args.out, path, many);
        write_outputs(&prefix, labels, model.num_classes())?;
        println!(
            "{} ({}x{}) -> {}.pgm, {}.ppm",
            path.display(),
            img.width,
            img.height,
            prefix.display(),
            prefix.display()
        );
    }
    if let Some(gt_path) = &args.labels {
        let gt = read_pgm(&read_file(gt_path)?)?;
        let pred = &results[0];
        if (gt.width, gt.height) != (pred.width, pred.height) {
            bail!(
                "labels are {}x{} but the image is {}x{}",
                gt.width,
                gt.height,
                pred.width,
                pred.height
            );
        }
        let r = miou(&pred.data, &gt.data, model.num_classes(), cfg.train.ohem.ignore_index)?;
        println!("mIoU {:.4}", r.mean);
    }
    Ok(ExitCode::SUCCESS)
}

/// Segments `images` on up to `threads` workers sharing the model.
fn segment_all(model: &CanModel, images: &[RgbImage], threads: usize) -> Result<Vec<GrayImage>> {
    let chunk = images.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|img| segment(model, img)).collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for h in handles {
            for r in h.join().expect("inference worker panicked") {
                out.push(r?);
            }
        }
        Ok(out)
    })
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Index into the validation stream.
    #[arg(long, default_value_t = 0)]
    index: u64,
    /// Writes `<prefix>.ppm` (image) and `<prefix>.pgm` (labels).
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(args: SynthArgs) -> Result<ExitCode> {
    let cfg = load_config(args.config.as_deref())?;
    let sample = synth_sample(&cfg.train.val_synth(cfg.model.num_classes), args.index)?;
    let img = RgbImage::from_tensor(&sample.image)?;
    let l = &sample.label;
    write_file(&with_ext(&args.out, "ppm"), &write_ppm(&img))?;
    write_file(&with_ext(&args.out, "pgm"), &write_label_pgm(&l.data, l.w, l.h)?)?;
    println!(
        "wrote {}.ppm and {}.pgm ({}x{})",
        args.out.display(),
        args.out.display(),
        l.w,
        l.h
    );
    Ok(ExitCode::SUCCESS)
}
