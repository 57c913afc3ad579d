//! Self-imitation fine-tuning. Each step explores (sample one rewrite per
//! spec, score it, keep it as the entry's new target when it verifies and is
//! strictly cheaper) and then learns (one cross-entropy step on a batch of
//! current targets).

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use silo_core::isa::{detokenize, tokenize, Program};
use silo_model::{sample_batch, Adam, Example, Model, ScheduleConfig, StepStats};

use crate::data::{step_rng, Dataset, Stream};
use crate::reinforce::BaselineTracker;
use crate::run::TrainError;
use crate::runtime::eval::{EvalRequest, EvalResponse, Evaluator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiloConfig {
    pub steps: u64,
    pub batch_ex: usize,
    pub batch_tr: usize,
    pub samples_per_spec: usize,
    pub temperature: f64,
    pub factor: f64,
    pub warmup: u64,
    pub checkpoint_every: u64,
    pub dev_every: u64,
    pub seed: u64,
    /// Decoding stops at the spec length plus this many tokens.
    pub decode_slack: usize,
    /// Draw half of each training batch from entries whose target was replaced.
    pub prioritize_replaced: bool,
}

impl Default for SiloConfig {
    fn default() -> Self {
        SiloConfig {
            steps: 2000,
            batch_ex: 16,
            batch_tr: 32,
            samples_per_spec: 1,
            temperature: 1.0,
            factor: ScheduleConfig::SILO_FACTOR,
            warmup: 2000,
            checkpoint_every: 1000,
            dev_every: 1000,
            seed: 1,
            decode_slack: 16,
            prioritize_replaced: false,
        }
    }
}

impl SiloConfig {
    pub fn schedule(&self, model_dim: usize) -> ScheduleConfig {
        ScheduleConfig { warmup: self.warmup, ..ScheduleConfig::new(self.factor, model_dim) }
    }
}

/// One accepted rewrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub entry_id: String,
    pub step: u64,
    pub old_cost: f64,
    pub new_cost: f64,
    /// Assembly text of the new target.
    pub rewrite: String,
}

/// The current best target of a training entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub program: Program,
    pub tokens: Vec<u32>,
    pub cost: f64,
}

/// Learner state shared by both fine-tuning algorithms.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// `model.step` counts optimizer steps of this fine-tuning run.
    pub model: Model<f32>,
    pub adam: Adam,
    pub targets: Vec<Target>,
    pub replacements: Vec<Replacement>,
    pub tracker: BaselineTracker,
}

impl TrainState {
    /// Starts fine-tuning from a (pre-trained) model with a fresh optimizer;
    /// the step counter restarts at zero.
    pub fn new(mut model: Model<f32>, data: &Dataset, schedule: ScheduleConfig) -> Self {
        model.step = 0;
        let adam = Adam::new(model.params.len(), schedule);
        let targets = data
            .entries
            .iter()
            .zip(&data.tgt)
            .map(|(e, t)| Target { program: e.f_ref.clone(), tokens: t.clone(), cost: e.cost_ref })
            .collect();
        TrainState { model, adam, targets, replacements: Vec::new(), tracker: BaselineTracker::default() }
    }

    pub fn step(&self) -> u64 {
        self.model.step
    }
}

/// Rewrites sampled for a batch of entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Exploration {
    pub step: u64,
    pub items: Vec<(usize, Vec<u32>)>,
}

impl Exploration {
    pub fn requests(&self, data: &Dataset) -> Vec<EvalRequest> {
        self.items
            .iter()
            .enumerate()
            .map(|(k, (i, toks))| EvalRequest::new((self.step << 20) | k as u64, &data.entries[*i].id, toks))
            .collect()
    }
}

/// Exploration batch for `step` of actor `actor`; depends only on the model
/// and `(seed, actor, step)`.
#[allow(clippy::too_many_arguments)]
pub fn explore(
    model: &Model<f32>,
    data: &Dataset,
    batch: usize,
    samples_per_spec: usize,
    temperature: f64,
    slack: usize,
    seed: u64,
    step: u64,
    actor: u32,
) -> Exploration {
    let mut rng = step_rng(seed, Stream::Explore(actor), step);
    let picked = sample(&mut rng, data.len(), batch.min(data.len())).into_vec();
    let idx: Vec<usize> = picked.iter().flat_map(|&i| std::iter::repeat(i).take(samples_per_spec.max(1))).collect();
    let srcs: Vec<&[u32]> = idx.iter().map(|&i| &data.src[i][..]).collect();
    let max_len = srcs.iter().map(|s| s.len()).max().unwrap_or(0) + slack;
    let samples = sample_batch(model, &srcs, temperature, &mut rng, max_len);
    Exploration { step, items: idx.into_iter().zip(samples).collect() }
}

/// Replaces targets with verified, strictly cheaper rewrites, in batch order.
pub fn apply_results(
    state: &mut TrainState,
    data: &Dataset,
    ex: &Exploration,
    responses: &[EvalResponse],
) -> Vec<Replacement> {
    let mut out = Vec::new();
    for ((i, toks), r) in ex.items.iter().zip(responses) {
        let target = &mut state.targets[*i];
        if !r.improves_on(target.cost) {
            continue;
        }
        let Ok(program) = detokenize(toks) else { continue };
        let Ok(tokens) = tokenize(&program).map(|t| t.0) else { continue };
        let new_cost = r.c_total.expect("verified responses carry costs");
        let rep = Replacement {
            entry_id: data.entries[*i].id.clone(),
            step: ex.step,
            old_cost: target.cost,
            new_cost,
            rewrite: program.to_string(),
        };
        *target = Target { program, tokens, cost: new_cost };
        out.push(rep);
    }
    state.replacements.extend(out.iter().cloned());
    out
}

/// One supervised step on the current targets.
pub fn learn(state: &mut TrainState, data: &Dataset, cfg: &SiloConfig, step: u64) -> Result<StepStats, TrainError> {
    let mut rng = step_rng(cfg.seed, Stream::Learn, step);
    let n = cfg.batch_tr.min(data.len());
    let replaced: Vec<usize> = if cfg.prioritize_replaced {
        (0..data.len()).filter(|&i| state.targets[i].cost < data.entries[i].cost_ref).collect()
    } else {
        Vec::new()
    };
    let idx: Vec<usize> = if replaced.is_empty() {
        sample(&mut rng, data.len(), n).into_vec()
    } else {
        (0..n)
            .map(|k| if k % 2 == 0 { replaced[rng.gen_range(0..replaced.len())] } else { rng.gen_range(0..data.len()) })
            .collect()
    };
    let ex: Vec<Example> = idx.iter().map(|&i| Example::xent(&data.src[i], &state.targets[i].tokens)).collect();
    let (stats, g) = state.model.loss_and_grad(&ex, Some(&mut rng))?;
    let diverged = |reason: String| TrainError::Diverged { step, reason, checkpoint: None };
    if !stats.loss.is_finite() {
        return Err(diverged(format!("loss {}", stats.loss)));
    }
    state.adam.step(&mut state.model, &g).map_err(|e| diverged(e.to_string()))?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiloStepReport {
    pub step: u64,
    pub loss: f64,
    pub verified: usize,
    pub replacements: Vec<Replacement>,
    /// Why the exploration results were dropped, if they were.
    pub dropped: Option<String>,
}

pub fn silo_step(
    state: &mut TrainState,
    data: &Dataset,
    eval: &dyn Evaluator,
    cfg: &SiloConfig,
) -> Result<SiloStepReport, TrainError> {
    let step = state.step() + 1;
    let ex = explore(
        &state.model,
        data,
        cfg.batch_ex,
        cfg.samples_per_spec,
        cfg.temperature,
        cfg.decode_slack,
        cfg.seed,
        step,
        0,
    );
    let (replacements, verified, dropped) = match eval.evaluate(&ex.requests(data)) {
        Ok(resps) => {
            let verified = resps.iter().filter(|r| r.v == 0).count();
            (apply_results(state, data, &ex, &resps), verified, None)
        }
        Err(e) => (Vec::new(), 0, Some(e.to_string())),
    };
    let stats = learn(state, data, cfg, step)?;
    Ok(SiloStepReport { step, loss: stats.loss, verified, replacements, dropped })
}
