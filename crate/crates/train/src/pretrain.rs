//! Supervised pre-training on (f_s, f_ref) pairs.

use std::path::PathBuf;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use silo_model::{Adam, Example, Model, ScheduleConfig, StepStats};

use crate::data::{step_rng, Dataset, Stream};
use crate::run::{MetricsRow, RunDir, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub factor: f64,
    pub warmup: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Held-out entries scored at each evaluation (0 = all).
    pub heldout_limit: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 8000,
            batch: 32,
            factor: 1.0,
            warmup: 2000,
            eval_every: 500,
            checkpoint_every: 1000,
            seed: 1,
            heldout_limit: 0,
        }
    }
}

impl PretrainConfig {
    pub fn schedule(&self, model_dim: usize) -> ScheduleConfig {
        ScheduleConfig { warmup: self.warmup, ..ScheduleConfig::new(self.factor, model_dim) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    /// Mean batch loss since the previous point.
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub token_accuracy: f64,
    /// Fraction of held-out targets reproduced exactly. Every teacher-forced
    /// argmax being right is the same event as greedy decoding emitting the
    /// target, so this is the greedy exact-match rate.
    pub exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub points: Vec<EvalPoint>,
    pub checkpoints: Vec<PathBuf>,
}

impl PretrainReport {
    pub fn last(&self) -> Option<&EvalPoint> {
        self.points.last()
    }
}

/// Teacher-forced statistics over (up to `limit`) entries.
pub fn heldout_stats(model: &Model<f32>, data: &Dataset, limit: usize) -> Result<StepStats, TrainError> {
    let n = if limit == 0 { data.len() } else { limit.min(data.len()) };
    let mut total = StepStats::default();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(32) {
        let ex: Vec<Example> = chunk.iter().map(|&i| Example::xent(&data.src[i], &data.tgt[i])).collect();
        total.merge(&model.evaluate(&ex)?);
    }
    Ok(total)
}

fn point(step: u64, train_loss: f64, s: &StepStats) -> EvalPoint {
    EvalPoint {
        step,
        train_loss,
        heldout_loss: s.nll / s.tokens.max(1) as f64,
        token_accuracy: s.token_accuracy(),
        exact_match: s.exact as f64 / s.sequences.max(1) as f64,
    }
}

/// Trains from `model.step` up to `cfg.steps`. Each step's batch and dropout
/// depend only on `(cfg.seed, step)`, so resuming from a checkpoint with its
/// optimizer state replays the same trajectory.
pub fn pretrain(
    model: &mut Model<f32>,
    adam: &mut Adam,
    train: &Dataset,
    heldout: &Dataset,
    cfg: &PretrainConfig,
    run: Option<&RunDir>,
    progress: &mut dyn FnMut(&EvalPoint),
) -> Result<PretrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut report = PretrainReport { points: Vec::new(), checkpoints: Vec::new() };
    let mut last_good: Option<PathBuf> = None;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    while model.step < cfg.steps {
        let step = model.step + 1;
        let mut rng = step_rng(cfg.seed, Stream::Learn, step);
        let idx = sample(&mut rng, train.len(), cfg.batch.min(train.len()));
        let ex: Vec<Example> = idx.iter().map(|i| Example::xent(&train.src[i], &train.tgt[i])).collect();
        let (stats, g) = model.loss_and_grad(&ex, Some(&mut rng))?;
        let diverged = |reason: String| TrainError::Diverged { step, reason, checkpoint: last_good.clone() };
        if !stats.loss.is_finite() {
            return Err(diverged(format!("loss {}", stats.loss)));
        }
        adam.step(model, &g).map_err(|e| diverged(e.to_string()))?;
        loss_sum += stats.loss;
        loss_n += 1;
        let eval_now = step % cfg.eval_every.max(1) == 0 || step == cfg.steps;
        if eval_now {
            let p = point(step, loss_sum / loss_n as f64, &heldout_stats(model, heldout, cfg.heldout_limit)?);
            progress(&p);
            report.points.push(p);
            (loss_sum, loss_n) = (0.0, 0);
        }
        if let Some(run) = run {
            if step % cfg.checkpoint_every.max(1) == 0 || step == cfg.steps {
                let path = run.save_checkpoint(model, Some(adam))?;
                report.checkpoints.push(path.clone());
                last_good = Some(path);
            }
            if eval_now {
                run.append_metrics(&MetricsRow { step, loss: Some(stats.loss), replacements: 0, dev_proportion: None })?;
            }
        }
    }
    Ok(report)
}
