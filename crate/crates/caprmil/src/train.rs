//! Training loop: cross-entropy objective, AdamW with decoupled weight
//! decay, cosine learning-rate schedule with linear warm-up, and early
//! stopping on validation loss.
//!
//! The optimizer works on whole bags: batch size is one bag per forward,
//! with gradient accumulation over `grad_accum_bags` bags per step.

use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{forward, name_tag, ModelState, TAU_MIN};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy, Tensor};

/// Recipe hyperparameters. Defaults are the published values: AdamW at a
/// base rate of 2e-4 with weight decay 1e-5, a 6-epoch linear warm-up from
/// 1e-5, cosine annealing down to 1e-7, and early stopping with patience 20
/// at a minimum improvement of 1e-4.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub seed: u64,
    pub grad_accum_bags: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            base_lr: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 6,
            warmup_start_lr: 1e-5,
            min_lr: 1e-7,
            early_stop_patience: 20,
            early_stop_min_delta: 1e-4,
            seed: 0,
            grad_accum_bags: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be < max_epochs ({})",
                self.warmup_epochs, self.max_epochs
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("warmup_start_lr", self.warmup_start_lr),
            ("min_lr", self.min_lr),
            ("eps", self.eps),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.min_lr <= self.warmup_start_lr && self.warmup_start_lr <= self.base_lr) {
            return Err(Error::config(format!(
                "need min_lr ≤ warmup_start_lr ≤ base_lr, got {} / {} / {}",
                self.min_lr, self.warmup_start_lr, self.base_lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 <= b && b < 1.0) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config("early_stop_patience must be at least 1"));
        }
        if !(self.early_stop_min_delta >= 0.0) {
            return Err(Error::config("early_stop_min_delta must be nonnegative"));
        }
        if self.grad_accum_bags == 0 {
            return Err(Error::config("grad_accum_bags must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based): linear ramp from `warmup_start_lr`
/// to `base_lr` over `warmup_epochs`, then cosine annealing to `min_lr`,
/// hitting it exactly on the final epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(epoch < cfg.max_epochs);
    if epoch < cfg.warmup_epochs {
        let t = epoch as f64 / cfg.warmup_epochs as f64;
        cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * t
    } else if epoch + 1 >= cfg.max_epochs {
        cfg.min_lr
    } else {
        let span = (cfg.max_epochs - 1 - cfg.warmup_epochs) as f64;
        let t = (epoch - cfg.warmup_epochs) as f64 / span;
        // Written as a convex combination so t = 0 yields base_lr exactly.
        let w = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        w * cfg.base_lr + (1.0 - w) * cfg.min_lr
    }
}

/// AdamW moment buffers, one pair per parameter in canonical order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new<T: Scalar>(model: &ModelState<T>, cfg: &TrainConfig) -> Self {
        let mut moments = Vec::new();
        model.for_each_param(|name, t| {
            moments.push((name.to_string(), vec![0.0; t.len()], vec![0.0; t.len()]));
        });
        OptimizerState {
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update from the gradients currently accumulated on the model's
/// parameters (a missing gradient counts as zero). Weight decay is decoupled:
/// applied directly to the weight, scaled by `lr`, outside the moment
/// machinery. Temperatures (`attn.tau`) are clamped to ≥ [`TAU_MIN`] after
/// the update. Every parameter is replaced by a fresh leaf, so old gradients
/// are dropped as a side effect.
pub fn adamw_step<T: Scalar>(model: &mut ModelState<T>, opt: &mut OptimizerState, lr: f64) {
    opt.step += 1;
    let (beta1, beta2, eps, wd) = (opt.beta1, opt.beta2, opt.eps, opt.weight_decay);
    let bc1 = 1.0 - beta1.powi(opt.step as i32);
    let bc2 = 1.0 - beta2.powi(opt.step as i32);
    let moments = &mut opt.moments;
    let mut idx = 0;
    model.for_each_param_mut(|name, t| {
        let (m_name, m, v) = &mut moments[idx];
        idx += 1;
        debug_assert_eq!(m_name, name, "optimizer/model parameter order diverged");
        let grad = t.grad();
        let clamp_tau = name.ends_with("attn.tau");
        *t = t.leaf_map(|data| {
            for (i, w) in data.iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64());
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let x = w.to_f64();
                let mut updated = x - lr * (m_hat / (v_hat.sqrt() + eps) + wd * x);
                if clamp_tau {
                    updated = updated.max(TAU_MIN);
                }
                *w = T::from_f64(updated);
            }
        });
    });
    debug_assert_eq!(idx, moments.len());
}

/// A bag with its label, ready for the trainer: features are an `[N, D_in]`
/// tensor.
#[derive(Debug, Clone)]
pub struct LabeledBag<T: Scalar> {
    pub features: Tensor<T>,
    pub label: usize,
}

/// Where the trainer gets its bags. Implemented by in-memory collections and
/// by the data module's disk-backed source, so large benchmarks (the hard
/// preset is several gigabytes of features) never have to fit in RAM at
/// once.
pub trait BagSource<T: Scalar> {
    fn len(&self) -> usize;
    fn get(&self, idx: usize) -> Result<LabeledBag<T>>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> BagSource<T> for [LabeledBag<T>] {
    fn len(&self) -> usize {
        <[LabeledBag<T>]>::len(self)
    }

    fn get(&self, idx: usize) -> Result<LabeledBag<T>> {
        Ok(self[idx].clone())
    }
}

impl<T: Scalar> BagSource<T> for Vec<LabeledBag<T>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, idx: usize) -> Result<LabeledBag<T>> {
        Ok(self[idx].clone())
    }
}

/// Per-epoch bookkeeping; `tsv_line` renders the stable six-column log
/// format (epoch, lr, train loss, val loss, val metric, seconds).
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.8e}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.val_metric, self.seconds
        )
    }
}

/// Outcome of a training run: the per-epoch history plus which epoch's
/// weights were kept.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mean eval-mode loss and plain accuracy (argmax == label) over a split.
pub fn evaluate_split<T: Scalar, S: BagSource<T> + ?Sized>(
    model: &ModelState<T>,
    split: &S,
) -> Result<(f64, f64)> {
    let mut rng = Rng::stream(0, 0); // unused in eval mode
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for idx in 0..split.len() {
        let bag = split.get(idx)?;
        let (logits, _) = forward(model, &bag.features, &mut rng, false, false)?;
        loss_sum += cross_entropy(&logits, &[bag.label])?.item().to_f64();
        let row = logits.data();
        let pred = (0..row.len())
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("NaN logit"))
            .expect("empty logits");
        if pred == bag.label {
            correct += 1;
        }
    }
    let n = split.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Run the full recipe and return the best-validation-loss weights with the
/// epoch history. Each epoch reshuffles the training set deterministically
/// from `cfg.seed`, accumulates gradients over `grad_accum_bags` bags per
/// optimizer step, then scores the validation split in eval mode. Training
/// halts once validation loss has not improved by more than
/// `early_stop_min_delta` for `early_stop_patience` consecutive epochs.
///
/// `log`, when given, receives one [`EpochRecord::tsv_line`] per epoch.
pub fn train<T: Scalar, St: BagSource<T> + ?Sized, Sv: BagSource<T> + ?Sized>(
    mut model: ModelState<T>,
    train_set: &St,
    val_set: &Sv,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(ModelState<T>, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::config("validation split is empty"));
    }

    let mut opt = OptimizerState::new(&model, cfg);
    let mut best_state = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut bad_epochs = 0usize;
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, cfg);

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::stream(cfg.seed, name_tag(&format!("train.shuffle.{epoch}"))).shuffle(&mut order);
        let mut dropout_rng = Rng::stream(cfg.seed, name_tag(&format!("train.dropout.{epoch}")));

        let mut loss_sum = 0.0;
        for group in order.chunks(cfg.grad_accum_bags) {
            let scale = T::from_f64(1.0 / group.len() as f64);
            for &i in group {
                let bag = train_set.get(i)?;
                let (logits, _) = forward(&model, &bag.features, &mut dropout_rng, true, false)?;
                let loss = cross_entropy(&logits, &[bag.label])?;
                loss_sum += loss.item().to_f64();
                loss.scale(scale).backward()?;
            }
            adamw_step(&mut model, &mut opt, lr);
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let (val_loss, val_metric) = evaluate_split(&model, val_set)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_metric,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", record.tsv_line())
                .map_err(|e| Error::io("<train log>", e))?;
        }
        history.push(record);

        if best_val - val_loss > cfg.early_stop_min_delta {
            best_val = val_loss;
            best_epoch = epoch;
            best_state = model.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok((
        best_state,
        TrainReport {
            history,
            best_epoch,
            best_val_loss: best_val,
            stopped_early,
        },
    ))
}
