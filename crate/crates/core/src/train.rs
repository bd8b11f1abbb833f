//! Training on the synthetic dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::io::{collate, synth_sample, Checkpoint, SynthConfig, SynthSample};
use crate::loss::{joint_loss, LossReport, OhemConfig};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::model::{CanModel, ModelConfig};
use crate::nn::{apply_bn_stats, Role};
use crate::optim::{poly_lr, Sgd, TrainSchedule};
use crate::tensor::Tensor;

/// Validation images come from a stream seeded with `seed ^ VAL_SEED_SALT`,
/// disjoint from the training stream.
pub const VAL_SEED_SALT: u64 = 0x5641_4c5f_5345_4544;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub augment: bool,
    pub val_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 64,
            width: 64,
            augment: true,
            val_samples: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds both initialization and the training stream.
    pub seed: u64,
    pub batch_size: usize,
    pub bn_momentum: f64,
    pub schedule: TrainSchedule,
    pub ohem: OhemConfig,
    pub data: DataConfig,
    /// Validate every this many iterations; 0 disables periodic validation.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 8,
            bn_momentum: 0.1,
            schedule: TrainSchedule::default(),
            ohem: OhemConfig::default(),
            data: DataConfig::default(),
            val_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "train.bn_momentum must be in [0, 1], got {}",
                self.bn_momentum
            )));
        }
        self.schedule
            .validate()
            .map_err(|e| crate::model::nest("train.schedule", e))?;
        self.ohem.validate().map_err(|e| crate::model::nest("train.ohem", e))?;
        self.synth(2)
            .validate()
            .map_err(|e| crate::model::nest("train.data", e))?;
        Ok(())
    }

    pub fn synth(&self, classes: usize) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            height: self.data.height,
            width: self.data.width,
            classes,
            augment: self.data.augment,
        }
    }

    pub fn val_synth(&self, classes: usize) -> SynthConfig {
        SynthConfig {
            seed: self.seed ^ VAL_SEED_SALT,
            augment: false,
            ..self.synth(classes)
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepReport {
    /// Zero-based index of the iteration just run.
    pub iter: usize,
    pub lr: f64,
    pub loss: LossReport,
}

/// Held-out images for validation.
pub fn validation_set(cfg: &TrainConfig, classes: usize) -> Result<Vec<SynthSample>> {
    let synth = cfg.val_synth(classes);
    (0..cfg.data.val_samples as u64)
        .map(|i| synth_sample(&synth, i))
        .collect()
}

/// Dataset-level IoU of `model` on `samples`, predicting `batch` images at a time.
pub fn evaluate(model: &CanModel, samples: &[SynthSample], batch: usize) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for chunk in samples.chunks(batch.max(1)) {
        let (x, labels) = collate(chunk)?;
        for (b, pred) in model.predict(&x)?.iter().enumerate() {
            cm.add(pred, labels.item(b), 255)?;
        }
    }
    Ok(cm.iou())
}

pub struct Trainer {
    pub model: CanModel,
    pub optimizer: Sgd<f32>,
    /// Completed iterations.
    pub iter: usize,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model: CanModel::new(model_cfg, cfg.seed)?,
            optimizer: Sgd::new(),
            iter: 0,
            config: cfg,
        })
    }

    pub fn resume(model_cfg: ModelConfig, cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(model_cfg, cfg)?;
        t.model.params = ck.params;
        t.optimizer = ck.optimizer;
        t.iter = usize::try_from(ck.iter).map_err(|_| Error::invalid("checkpoint iteration overflows"))?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iter: self.iter as u64,
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn done(&self) -> bool {
        self.iter >= self.config.schedule.max_iter
    }

    /// Training batch of iteration `iter`: stream indices `iter * B .. (iter + 1) * B`.
    pub fn batch(&self, iter: usize) -> Result<Vec<SynthSample>> {
        let synth = self.config.synth(self.model.num_classes());
        let b = self.config.batch_size as u64;
        (iter as u64 * b..(iter as u64 + 1) * b)
            .map(|i| synth_sample(&synth, i))
            .collect()
    }

    /// One SGD step on the next batch.
    pub fn step(&mut self) -> Result<StepReport> {
        let iter = self.iter;
        let (x, labels) = collate(&self.batch(iter)?)?;
        let lr = poly_lr(iter, &self.config.schedule);

        let mut g: Graph<f32> = Graph::new();
        let xv = g.leaf(x, false);
        let (out, mut fw) = self.model.forward_graph(&mut g, &self.model.params, xv, true)?;
        let vars = fw.param_vars().clone();
        let stats = fw.take_bn_stats();
        drop(fw);
        let (total, report) = joint_loss(&mut g, &out, &labels, &self.config.ohem)?;
        if !report.total.is_finite() {
            return Err(Error::invalid(format!(
                "loss became {} at iteration {iter}",
                report.total
            )));
        }
        g.backward(total)?;

        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, v) in vars {
            if self.model.params.role(&name) == Some(Role::Trainable) {
                if let Some(gr) = g.take_grad(v) {
                    grads.insert(name, gr);
                }
            }
        }
        drop(g);
        let s = &self.config.schedule;
        self.optimizer
            .step(&mut self.model.params, &grads, lr, s.momentum, s.weight_decay)?;
        apply_bn_stats(&mut self.model.params, &stats, self.config.bn_momentum)?;
        self.iter += 1;
        Ok(StepReport { iter, lr, loss: report })
    }
}
