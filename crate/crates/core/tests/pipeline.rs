//! Public-API round trip: train, checkpoint, resume, save weights, segment.

use canseg_core::infer::segment;
use canseg_core::io::{load_checkpoint, load_weights, save_checkpoint, save_weights, RgbImage};
use canseg_core::model::ModelConfig;
use canseg_core::run_config::RunConfig;
use canseg_core::train::{evaluate, validation_set, Trainer};

fn small_run() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::toy(),
        ..Default::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.schedule.max_iter = 4;
    cfg.train.data.val_samples = 2;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn train_checkpoint_resume_and_segment() {
    let cfg = small_run();
    let mut straight = Trainer::new(cfg.model.clone(), cfg.train.clone()).unwrap();
    while !straight.done() {
        let r = straight.step().unwrap();
        assert!(r.loss.total.is_finite());
    }

    let mut first = Trainer::new(cfg.model.clone(), cfg.train.clone()).unwrap();
    first.step().unwrap();
    first.step().unwrap();
    let bytes = save_checkpoint(&first.checkpoint()).unwrap();
    let ck = load_checkpoint(&bytes, &cfg.model).unwrap();
    let mut resumed = Trainer::resume(cfg.model.clone(), cfg.train.clone(), ck).unwrap();
    assert_eq!(resumed.iter, 2);
    while !resumed.done() {
        resumed.step().unwrap();
    }
    let weights = save_weights(&straight.model).unwrap();
    assert!(weights == save_weights(&resumed.model).unwrap());

    let model = load_weights(&weights, &cfg.model).unwrap();
    let val = validation_set(&cfg.train, model.num_classes()).unwrap();
    let report = evaluate(&model, &val, 2).unwrap();
    assert!((0.0..=1.0).contains(&report.mean));
    assert_eq!(report.per_class.len(), model.num_classes());

    for (w, h) in [(64, 64), (50, 37)] {
        let img = RgbImage::new(w, h, (0..w * h * 3).map(|i| (i * 29 % 256) as u8).collect()).unwrap();
        let labels = segment(&model, &img).unwrap();
        assert_eq!((labels.width, labels.height), (w, h));
        assert!(labels.data.iter().all(|&l| (l as usize) < model.num_classes()));
    }
}
