//! BCE-Dice objective, Dice metric, Adam with cosine annealing, and the
//! best-on-validation training loop.

mod checkpoint;
mod eval;
mod losses;
mod optim;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, SlicePair};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, MANIFEST};
pub use eval::{evaluate, evaluate_masks, predict_slices, CaseScores, EvalReport, RegionScores};
pub use losses::{bce_dice_loss, bce_loss, channel, dice_loss, dice_score, loss_value, DiceCounts, DEFAULT_SMOOTH_EPS};
pub use optim::{adam_step, cosine_lr, AdamState, ADAM_EPS, BETA1, BETA2};

/// Prediction threshold on per-region sigmoids.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smooth_eps: f64,
    /// Paired random augmentation of each training sample.
    pub augment: bool,
    /// Where the best checkpoint is written whenever validation improves.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr0: 1e-4, epochs: 40, batch_size: 64, seed: 0, smooth_eps: DEFAULT_SMOOTH_EPS, augment: true, checkpoint_dir: None }
    }
}

impl TrainConfig {
    /// Single-CPU batch size.
    pub fn desk() -> Self {
        TrainConfig { batch_size: 8, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.smooth_eps > 0.0) {
            return Err(Error::Config(format!("smooth_eps must be positive, got {}", self.smooth_eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss.
    pub train_loss: f64,
    pub val: RegionScores,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Stacks images and masks into `[N,3,H,W]` batches.
pub fn stack(pairs: &[&SlicePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = pairs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut x = Vec::with_capacity(pairs.len() * 3 * h * w);
    let mut y = Vec::with_capacity(pairs.len() * 3 * h * w);
    for p in pairs {
        if p.image.shape() != [3, h, w] || (p.mask.height, p.mask.width) != (h, w) {
            return Err(Error::Data(format!("slice {}_{} is not 3x{h}x{w}", p.case_id, p.slice)));
        }
        x.extend_from_slice(p.image.data());
        y.extend(p.mask.planes().iter().flat_map(|pl| pl.iter().map(|&v| v as f32)));
    }
    Ok((Tensor::new(vec![pairs.len(), 3, h, w], x)?, Tensor::new(vec![pairs.len(), 3, h, w], y)?))
}

/// Runs the epoch loop and returns the best-on-validation weights.
///
/// Epoch `e` uses `cosine_lr(e, epochs)`; minibatch order and augmentation
/// draw from streams derived from `cfg.seed`, so a run is reproducible.
pub fn train(
    model: Model<f32>,
    train_set: &[SlicePair],
    val_set: &[SlicePair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut model = model;
    let mut adam = AdamState::new(&model.params);
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let n = train_set.len();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut crate::rng::stream(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<SlicePair> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let seed = crate::rng::derive_seed(cfg.seed, "augment", (epoch * n + i) as u64);
                        augment(&train_set[i], seed)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&SlicePair> = samples.iter().collect();
            let (x, y) = stack(&refs)?;
            let mut f = model.forward_graph(x, true)?;
            let loss = bce_dice_loss(&mut f.graph, f.logits, &y, cfg.smooth_eps)?;
            let value = f.graph.value(loss).item() as f64;
            if !value.is_finite() {
                let ids: Vec<String> = samples.iter().map(|s| format!("{}_{}", s.case_id, s.slice)).collect();
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch} batch {b} (slices {})", ids.join(", "))));
            }
            f.graph.backward(loss).map_err(|e| Error::Numeric(format!("epoch {epoch} batch {b}: {e}")))?;
            let mut grads = BTreeMap::new();
            for (name, &v) in &f.params {
                let g = f.graph.grad(v).ok_or_else(|| Error::Numeric(format!("no gradient for {name}")))?;
                grads.insert(name.clone(), g.clone());
            }
            adam_step(&mut model.params, &grads, &mut adam, lr).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} batch {b}: {m}")),
                other => other,
            })?;
            loss_sum += value;
            batches += 1;
        }
        let report = evaluate(&model, val_set, cfg.batch_size)?;
        let improved = best.as_ref().is_none_or(|b| report.mean.mean > b.best_val_dice);
        if improved {
            let ck = Checkpoint { model: model.clone(), epoch, best_val_dice: report.mean.mean, train: Some(cfg.clone()), adam: None };
            if let Some(dir) = &cfg.checkpoint_dir {
                ck.save(dir)?;
            }
            best = Some(ck);
        }
        let rec = EpochRecord { epoch, lr, train_loss: loss_sum / batches as f64, val: report.mean, improved };
        on_epoch(&rec);
        history.push(rec);
    }
    let best = best.expect("at least one epoch");
    let last_val = history.last().map_or(0.0, |r| r.val.mean);
    let last = Checkpoint { model, epoch: cfg.epochs - 1, best_val_dice: last_val, train: Some(cfg.clone()), adam: Some(adam) };
    Ok(TrainOutcome { best, last, history })
}
