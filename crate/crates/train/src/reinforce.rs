//! REINFORCE with a per-program running baseline and an entropy bonus.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use silo_core::cost::RlConfig;
use silo_model::{Example, Objective, ScheduleConfig};

use crate::data::Dataset;
use crate::run::TrainError;
use crate::runtime::eval::{EvalResponse, Evaluator};
use crate::silo::{explore, Exploration, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub rl: RlConfig,
    pub beta: f64,
    pub factor: f64,
    pub warmup: u64,
    pub steps: u64,
    pub batch: usize,
    pub temperature: f64,
    pub checkpoint_every: u64,
    pub dev_every: u64,
    pub seed: u64,
    pub decode_slack: usize,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            rl: RlConfig::default(),
            beta: 0.01,
            factor: ScheduleConfig::REINFORCE_FACTOR,
            warmup: 2000,
            steps: 2000,
            batch: 16,
            temperature: 1.0,
            checkpoint_every: 1000,
            dev_every: 1000,
            seed: 1,
            decode_slack: 16,
        }
    }
}

impl ReinforceConfig {
    pub fn schedule(&self, model_dim: usize) -> ScheduleConfig {
        ScheduleConfig { warmup: self.warmup, ..ScheduleConfig::new(self.factor, model_dim) }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.rl.lambda, self.rl.bit_rate, self.rl.clip, self.factor];
        if all.iter().any(|&x| !(x > 0.0)) || self.beta < 0.0 {
            return Err("reinforce constants must be positive".into());
        }
        Ok(())
    }
}

/// Ring buffers of recent objective values, one per program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTracker {
    pub capacity: usize,
    pub eps: f64,
    buffers: HashMap<String, VecDeque<f64>>,
}

impl Default for BaselineTracker {
    fn default() -> Self {
        BaselineTracker { capacity: 256, eps: 1e-6, buffers: HashMap::new() }
    }
}

impl BaselineTracker {
    /// Mean and population standard deviation of the buffer.
    pub fn stats(&self, id: &str) -> Option<(f64, f64)> {
        let b = self.buffers.get(id).filter(|b| !b.is_empty())?;
        let n = b.len() as f64;
        let mean = b.iter().sum::<f64>() / n;
        let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }

    pub fn len(&self, id: &str) -> usize {
        self.buffers.get(id).map_or(0, VecDeque::len)
    }

    /// `(j - mean) / max(std, eps)`, or zero until two values are recorded.
    pub fn advantage(&self, id: &str, j: f64) -> f64 {
        if self.len(id) < 2 {
            return 0.0;
        }
        let (mean, std) = self.stats(id).expect("nonempty");
        (j - mean) / std.max(self.eps)
    }

    pub fn record(&mut self, id: &str, j: f64) {
        let b = self.buffers.entry(id.to_string()).or_default();
        if b.len() == self.capacity {
            b.pop_front();
        }
        b.push_back(j);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReinforceStepReport {
    pub step: u64,
    pub loss: f64,
    pub mean_j: f64,
    pub verified: usize,
    /// Verified and cheaper than the entry's compiler reference.
    pub improved: usize,
    pub dropped: Option<String>,
    /// No parameter change happened (all advantages zero, no entropy term).
    pub skipped: bool,
}

/// Policy-gradient update from scored samples.
pub fn reinforce_update(
    state: &mut TrainState,
    data: &Dataset,
    ex: &Exploration,
    responses: &[EvalResponse],
    cfg: &ReinforceConfig,
) -> Result<ReinforceStepReport, TrainError> {
    let mut advantages = Vec::with_capacity(responses.len());
    let mut js = Vec::with_capacity(responses.len());
    for ((i, _), r) in ex.items.iter().zip(responses) {
        let id = &data.entries[*i].id;
        let j = r.objective(&cfg.rl).j;
        advantages.push(state.tracker.advantage(id, j));
        js.push(j);
    }
    for ((i, _), &j) in ex.items.iter().zip(&js) {
        state.tracker.record(&data.entries[*i].id, j);
    }
    let verified = responses.iter().filter(|r| r.v == 0).count();
    let improved = ex
        .items
        .iter()
        .zip(responses)
        .filter(|((i, _), r)| r.improves_on(data.entries[*i].cost_ref))
        .count();
    let mean_j = js.iter().sum::<f64>() / js.len().max(1) as f64;
    let mut report = ReinforceStepReport {
        step: ex.step,
        loss: 0.0,
        mean_j,
        verified,
        improved,
        dropped: None,
        skipped: false,
    };
    let batch: Vec<Example> = ex
        .items
        .iter()
        .zip(&advantages)
        .filter(|((_, toks), _)| toks.len() >= 2)
        .map(|((i, toks), &a)| Example {
            src: &data.src[*i],
            tgt: toks,
            objective: Objective::Reinforce { advantage: a, beta: cfg.beta },
        })
        .collect();
    if batch.is_empty() || (cfg.beta == 0.0 && advantages.iter().all(|&a| a == 0.0)) {
        state.model.step = ex.step;
        report.skipped = true;
        return Ok(report);
    }
    let step = ex.step;
    let (stats, g) = state.model.loss_and_grad(&batch, None)?;
    let diverged = |reason: String| TrainError::Diverged { step, reason, checkpoint: None };
    if !stats.loss.is_finite() {
        return Err(diverged(format!("loss {}", stats.loss)));
    }
    state.adam.step(&mut state.model, &g).map_err(|e| diverged(e.to_string()))?;
    report.loss = stats.loss;
    Ok(report)
}

pub fn reinforce_step(
    state: &mut TrainState,
    data: &Dataset,
    eval: &dyn Evaluator,
    cfg: &ReinforceConfig,
) -> Result<ReinforceStepReport, TrainError> {
    let step = state.step() + 1;
    let ex = explore(&state.model, data, cfg.batch, 1, cfg.temperature, cfg.decode_slack, cfg.seed, step, 0);
    match eval.evaluate(&ex.requests(data)) {
        Ok(resps) => reinforce_update(state, data, &ex, &resps, cfg),
        Err(e) => {
            state.model.step = step;
            Ok(ReinforceStepReport {
                step,
                loss: 0.0,
                mean_j: 0.0,
                verified: 0,
                improved: 0,
                dropped: Some(e.to_string()),
                skipped: true,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cold_start_and_equal_values_give_zero_advantage() {
        let mut t = BaselineTracker::default();
        assert_eq!(t.advantage("p", 10.0), 0.0);
        t.record("p", 10.0);
        assert_eq!(t.advantage("p", 10.0), 0.0);
        t.record("p", 10.0);
        // zero spread: the epsilon floor keeps it finite and exactly zero
        assert_eq!(t.advantage("p", 10.0), 0.0);
        t.record("p", 20.0);
        let (m, s) = t.stats("p").unwrap();
        assert!((m - 40.0 / 3.0).abs() < 1e-12);
        assert!((t.advantage("p", 20.0) - (20.0 - m) / s).abs() < 1e-12);
    }

    #[test]
    fn buffer_keeps_last_256() {
        let mut t = BaselineTracker::default();
        for i in 0..300 {
            t.record("p", i as f64);
        }
        assert_eq!(t.len("p"), 256);
        let (m, _) = t.stats("p").unwrap();
        assert_eq!(m, (44..300).sum::<i32>() as f64 / 256.0);
    }
}
