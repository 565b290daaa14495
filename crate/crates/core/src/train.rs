//! Adam training with warmup / linear decay, gradient accumulation over
//! token-bucketed micro-batches, global-norm clipping and early stopping on
//! dev perplexity.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, Tape};
use crate::data::{make_batch, plan_batches, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::{Batch, Mode, Seq2Seq};
use crate::peft::PeftMethod;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub max_tokens_per_batch: usize,
    /// Micro-batches accumulated per optimizer step.
    pub update_frequency: usize,
    pub patience_epochs: usize,
    /// Hard cap on passes over the training set, on top of `total_steps`.
    pub max_epochs: Option<usize>,
    pub clip_norm: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-4,
            warmup_steps: 2500,
            total_steps: 5000,
            label_smoothing: 0.2,
            dropout: 0.1,
            max_tokens_per_batch: 512,
            update_frequency: 2,
            patience_epochs: 10,
            max_epochs: None,
            clip_norm: 1.0,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            total_steps: 100_000,
            dropout: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be at least 1".into());
        }
        if self.update_frequency == 0 {
            return bad("update_frequency must be at least 1".into());
        }
        if self.max_tokens_per_batch == 0 {
            return bad("max_tokens_per_batch must be at least 1".into());
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return bad(format!("max_lr must be finite and non-negative, got {}", self.max_lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} not in [0,1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0,1)", self.dropout));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        Ok(())
    }
}

/// Linear warmup to `max_lr` over `warmup_steps`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        cfg.max_lr * step as f64 / w as f64
    } else if step >= t {
        if t == w && step == t {
            cfg.max_lr
        } else {
            0.0
        }
    } else {
        cfg.max_lr * (t - step) as f64 / (t - w) as f64
    }
}

/// Adam moments, kept only for trainable parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    params: Vec<usize>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Seq2Seq) -> Self {
        let store = model.store();
        let params: Vec<usize> = (0..store.len()).filter(|&i| store.by_index(i).1.trainable).collect();
        let zeros = || {
            params
                .iter()
                .map(|&i| vec![0.0; store.by_index(i).1.value.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
            params,
        }
    }

    /// Store indices of the parameters this optimizer updates.
    pub fn params(&self) -> &[usize] {
        &self.params
    }

    fn update(&mut self, model: &mut Seq2Seq, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, &index) in self.params.iter().enumerate() {
            let g = &grads.values[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = model.store_mut().by_index_mut(index).value.data_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Token-weighted mean gradient over a group of micro-batches, aligned with
/// [`OptimizerState::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    /// Token-weighted mean of the (smoothed) micro-batch losses.
    pub loss: f64,
    pub tokens: usize,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.values.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    fn scale(&mut self, c: f64) {
        self.values.iter_mut().flatten().for_each(|g| *g *= c);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Optimizer plus the dropout stream of one run.
pub struct Trainer {
    cfg: TrainConfig,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &Seq2Seq, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            optimizer: OptimizerState::new(model),
            cfg,
            rng,
            epoch: 0,
        })
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn steps(&self) -> usize {
        self.optimizer.step
    }

    /// Forward and backward over `micro`, summing gradients weighted by each
    /// micro-batch's token count, divided by the total token count. This
    /// equals the gradient of the token-mean loss over the concatenation.
    pub fn accumulate(&mut self, model: &Seq2Seq, micro: &[Batch]) -> Result<Gradients> {
        let params = self.optimizer.params.clone();
        let mut values: Vec<Vec<f64>> = params
            .iter()
            .map(|&i| vec![0.0; model.store().by_index(i).1.value.numel()])
            .collect();
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for batch in micro {
            let mut tape = Tape::with_precision(self.cfg.precision);
            let (loss, binding) =
                model.loss_on_tape(&mut tape, batch, self.cfg.label_smoothing, Mode::Train(&mut self.rng))?;
            let l = tape.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: l,
                    step: self.optimizer.step,
                    epoch: self.epoch,
                });
            }
            tape.backward(loss)?;
            let n = batch.target_tokens();
            for (k, &index) in params.iter().enumerate() {
                let Some(g) = binding.var(index).and_then(|v| tape.grad(v)) else {
                    continue;
                };
                for (acc, x) in values[k].iter_mut().zip(g) {
                    *acc += n as f64 * x;
                }
            }
            loss_sum += n as f64 * l;
            tokens += n;
        }
        if tokens == 0 {
            return Err(Error::EmptyDataset("no target tokens in micro-batches".into()));
        }
        let mut grads = Gradients {
            params,
            values,
            loss: loss_sum / tokens as f64,
            tokens,
        };
        grads.scale(1.0 / tokens as f64);
        Ok(grads)
    }

    /// One optimizer step over the micro-batches of one accumulation group.
    pub fn step(&mut self, model: &mut Seq2Seq, micro: &[Batch]) -> Result<StepStats> {
        let mut grads = self.accumulate(model, micro)?;
        let grad_norm = grads.norm();
        if grad_norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / grad_norm);
        }
        let lr = lr_at(self.optimizer.step + 1, &self.cfg);
        self.optimizer.update(model, &grads, lr);
        Ok(StepStats {
            step: self.optimizer.step,
            loss: grads.loss,
            tokens: grads.tokens,
            grad_norm,
            lr,
        })
    }
}

/// `exp` of the mean unsmoothed token NLL over `data`, pads excluded.
pub fn perplexity(model: &Seq2Seq, data: &ParallelCorpus, max_tokens: usize, precision: Precision) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("perplexity of an empty dataset".into()));
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for idx in plan_batches(&data.pairs, max_tokens, 0)? {
        let (s, n) = model.nll(&make_batch(&data.pairs, &idx)?, precision)?;
        nll += s;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub train_loss: f64,
    pub dev_ppl: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StopReason {
    /// Nothing to train.
    NoTrainableParameters,
    TotalSteps,
    MaxEpochs,
    Patience,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// Dev perplexity before the first update.
    pub initial_dev_ppl: f64,
    pub best_dev_ppl: f64,
    /// `None` when no epoch beat the initial model.
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,train_loss,dev_ppl,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6e}", e.epoch, e.step, e.train_loss, e.dev_ppl, e.lr);
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn snapshot(model: &Seq2Seq, params: &[usize]) -> Vec<Tensor> {
    params.iter().map(|&i| model.store().by_index(i).1.value.clone()).collect()
}

fn restore(model: &mut Seq2Seq, params: &[usize], values: Vec<Tensor>) {
    for (&i, v) in params.iter().zip(values) {
        model.store_mut().by_index_mut(i).value = v;
    }
}

/// Trains the trainable parameters of `model` and leaves it holding the
/// parameters with the lowest dev perplexity seen (the initial ones count).
pub fn train(model: &mut Seq2Seq, train: &ParallelCorpus, dev: &ParallelCorpus, cfg: &TrainConfig) -> Result<TrainingHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::EmptyDataset("dev set is empty".into()));
    }
    let max_tokens = cfg.max_tokens_per_batch;
    let initial = perplexity(model, dev, max_tokens, cfg.precision)?;
    let mut history = TrainingHistory {
        epochs: Vec::new(),
        steps: 0,
        initial_dev_ppl: initial,
        best_dev_ppl: initial,
        best_epoch: None,
        stop: StopReason::NoTrainableParameters,
    };
    if model.store().trainable_count() == 0 {
        if model.method() != Some(&PeftMethod::NoFt) {
            return Err(Error::EmptyMask(
                model.method().map(|m| m.to_string()).unwrap_or_else(|| "none".into()),
            ));
        }
        return Ok(history);
    }
    model.set_dropout(cfg.dropout)?;

    let mut trainer = Trainer::new(model, cfg.clone())?;
    let params = trainer.optimizer.params.clone();
    let mut best = snapshot(model, &params);
    let mut stale = 0;
    let mut epoch = 0;
    history.stop = loop {
        if trainer.steps() >= cfg.total_steps {
            break StopReason::TotalSteps;
        }
        if cfg.max_epochs.is_some_and(|m| epoch >= m) {
            break StopReason::MaxEpochs;
        }
        epoch += 1;
        trainer.epoch = epoch;
        let plan = plan_batches(&train.pairs, max_tokens, cfg.seed.wrapping_add(epoch as u64))?;
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for group in plan.chunks(cfg.update_frequency) {
            if trainer.steps() >= cfg.total_steps {
                break;
            }
            let micro = group
                .iter()
                .map(|idx| make_batch(&train.pairs, idx))
                .collect::<Result<Vec<_>>>()?;
            let stats = trainer.step(model, &micro)?;
            loss_sum += stats.loss * stats.tokens as f64;
            tokens += stats.tokens;
        }
        let dev_ppl = perplexity(model, dev, max_tokens, cfg.precision)?;
        history.epochs.push(EpochRecord {
            epoch,
            step: trainer.steps(),
            train_loss: loss_sum / tokens.max(1) as f64,
            dev_ppl,
            lr: lr_at(trainer.steps(), cfg),
        });
        if dev_ppl < history.best_dev_ppl {
            history.best_dev_ppl = dev_ppl;
            history.best_epoch = Some(epoch);
            best = snapshot(model, &params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience_epochs {
                break StopReason::Patience;
            }
        }
    };
    history.steps = trainer.steps();
    restore(model, &params, best);
    Ok(history)
}

#[cfg(test)]
mod tests;
