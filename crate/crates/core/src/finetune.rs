//! Mini-batch SGD with a warm-up plus step-decay learning-rate schedule.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SkeletonSample;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{cross_entropy, SkeletonModel};

pub const HISTORY_CSV_HEADER: &str = "epoch,lr,train_loss,test_top1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub milestones: Vec<usize>,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale training recipe for the default toy model.
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            decay_factor: 0.1,
            milestones: vec![20, 27],
            warmup_epochs: 0,
            epochs: 30,
            batch_size: 32,
            momentum: 0.0,
            seed: 11,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning recipe derived from a training config: a tenth of the base
    /// rate, 50 epochs, decay at 5, 15, 25 and 40.
    pub fn finetune_from(train: &TrainConfig) -> Self {
        Self {
            base_lr: train.base_lr / 10.0,
            decay_factor: 0.1,
            milestones: vec![5, 15, 25, 40],
            warmup_epochs: 0,
            epochs: 50,
            ..train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        if self.milestones.first().is_some_and(|&m| m < self.warmup_epochs) {
            return bad("milestones must not fall inside the warm-up".into());
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: a linear ramp `(epoch + 1) / warmup · base`
/// during warm-up, then `base · decay^n` where `n` counts milestones `<= epoch`.
///
/// The decay is applied as a division by `(1 / decay)^n`; with `decay = 0.1`
/// this lands on the decimal values (0.0025 → 0.00025 → …) bit for bit.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(cfg.base_lr / cfg.decay_factor.recip().powi(passed as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_top1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Earliest epoch reaching the highest test accuracy.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.test_top1 >= r.test_top1 => Some(b),
            _ => Some(r),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_CSV_HEADER}\n");
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.test_top1).expect("string write");
        }
        out
    }
}

/// SGD with optional heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Matrix], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.data().len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    (1..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

/// Fraction of samples whose highest logit (lowest index on ties) is the label.
pub fn evaluate(m: &SkeletonModel, test: &[SkeletonSample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let logits = m.forward(test)?;
    Ok(top1(&logits, test.iter().map(|s| s.label)))
}

pub fn top1(logits: &Matrix, labels: impl IntoIterator<Item = usize>) -> f64 {
    let correct = labels.into_iter().enumerate().filter(|&(i, label)| argmax(logits.row(i)) == label).count();
    correct as f64 / logits.rows() as f64
}

fn check_split(m: &SkeletonModel, split: &[SkeletonSample], name: &str) -> Result<()> {
    if split.is_empty() {
        return Err(Error::Config(format!("{name} set is empty")));
    }
    let c = &m.config;
    for (i, s) in split.iter().enumerate() {
        if s.frames != c.frames || s.joints != c.joints {
            return Err(Error::Shape {
                op: "train",
                detail: format!(
                    "{name} sample {i} is {}x{}, model expects {}x{}",
                    s.frames, s.joints, c.frames, c.joints
                ),
            });
        }
        if s.label >= c.classes {
            return Err(Error::LabelOutOfRange { label: s.label, classes: c.classes });
        }
    }
    Ok(())
}

/// Trains a copy of `m`; the epoch-`e` shuffle is seeded with `seed + e`.
/// Test accuracy is recorded after every epoch.
pub fn train(
    m: &SkeletonModel,
    train_set: &[SkeletonSample],
    test_set: &[SkeletonSample],
    cfg: &TrainConfig,
) -> Result<(SkeletonModel, TrainHistory)> {
    train_with(m, train_set, test_set, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    m: &SkeletonModel,
    train_set: &[SkeletonSample],
    test_set: &[SkeletonSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(SkeletonModel, TrainHistory)> {
    cfg.validate()?;
    check_split(m, train_set, "train")?;
    check_split(m, test_set, "test")?;

    let mut model = m.clone();
    let mut opt = Sgd::new(cfg.momentum);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SkeletonSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let (logits, mut tape) = model.forward_taped(&batch)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            loss_sum += loss * batch.len() as f64;
            let grads = model.backward(&mut tape, &grad)?;
            opt.step(model.params_mut(), &grads, lr);
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            test_top1: evaluate(&model, test_set)?,
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok((model, history))
}
