//! One learner thread owns the model and the targets; actor threads sample
//! rewrites from read-only snapshots and get them scored by the evaluator.
//!
//! Liveness: the learner blocks while it needs results and none are queued.
//! It makes progress as long as one actor is alive, and fails once every
//! actor has exited.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use crossbeam::channel::{bounded, Receiver, RecvError, Sender};
use serde::{Deserialize, Serialize};

use silo_model::Model;

use crate::data::Dataset;
use crate::reinforce::{reinforce_update, ReinforceConfig, ReinforceStepReport};
use crate::run::TrainError;
use crate::runtime::eval::{EvalRequest, EvalResponse, Evaluator};
use crate::silo::{apply_results, explore, learn, Exploration, SiloConfig, SiloStepReport, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub enum Algo {
    Silo(SiloConfig),
    Reinforce(ReinforceConfig),
}

impl Algo {
    fn batch(&self) -> (usize, usize, f64, usize, u64) {
        match self {
            Algo::Silo(c) => (c.batch_ex, c.samples_per_spec, c.temperature, c.decode_slack, c.seed),
            Algo::Reinforce(c) => (c.batch, 1, c.temperature, c.decode_slack, c.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub actors: usize,
    /// Oldest snapshot, in learner versions behind, whose results are still
    /// used. `None` means unbounded.
    pub staleness: Option<u64>,
    /// Every actor samples exactly once from each snapshot and the learner
    /// waits for all of them before updating.
    pub sync_every_step: bool,
}

impl RuntimeConfig {
    pub fn silo() -> Self {
        RuntimeConfig { actors: 1, staleness: None, sync_every_step: false }
    }

    pub fn reinforce() -> Self {
        RuntimeConfig { actors: 1, staleness: Some(1), sync_every_step: false }
    }

    /// The configuration that replays the sequential loop.
    pub fn lockstep() -> Self {
        RuntimeConfig { actors: 1, staleness: Some(0), sync_every_step: true }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.actors == 0 {
            return Err("at least one actor is required".into());
        }
        if self.actors >= 1 << 15 {
            return Err("too many actors".into());
        }
        Ok(())
    }
}

/// What an actor hands to the learner.
#[derive(Debug, Clone)]
pub struct ActorResult {
    pub actor: u32,
    pub round: u64,
    /// Snapshot version the rewrites were sampled from.
    pub version: u64,
    pub exploration: Exploration,
    pub responses: Result<Vec<EvalResponse>, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepReport {
    Silo(SiloStepReport),
    Reinforce(ReinforceStepReport),
}

impl StepReport {
    pub fn step(&self) -> u64 {
        match self {
            StepReport::Silo(r) => r.step,
            StepReport::Reinforce(r) => r.step,
        }
    }

    pub fn loss(&self) -> f64 {
        match self {
            StepReport::Silo(r) => r.loss,
            StepReport::Reinforce(r) => r.loss,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub results: usize,
    pub stale: usize,
    pub duplicates: usize,
    pub failed: usize,
    /// `learner version - snapshot version` of each consumed result.
    pub lags: Vec<u64>,
}

struct Snapshot {
    version: u64,
    model: Arc<Model<f32>>,
}

struct Shared {
    snap: Mutex<Snapshot>,
    fresh: Condvar,
    stop: AtomicBool,
}

impl Shared {
    fn publish(&self, version: u64, model: &Model<f32>) {
        let mut s = self.snap.lock().expect("snapshot lock");
        *s = Snapshot { version, model: Arc::new(model.clone()) };
        self.fresh.notify_all();
    }

    fn shutdown(&self) {
        let _guard = self.snap.lock().expect("snapshot lock");
        self.stop.store(true, Ordering::SeqCst);
        self.fresh.notify_all();
    }
}

fn request_id(actor: u32, round: u64, k: usize) -> u64 {
    ((actor as u64) << 48) | ((round & 0xFFFF_FFFF) << 16) | k as u64
}

fn run_actor(
    actor: u32,
    shared: &Shared,
    data: &Dataset,
    eval: &dyn Evaluator,
    algo: &Algo,
    sync: bool,
    tx: Sender<ActorResult>,
) {
    let (batch, per_spec, temperature, slack, seed) = algo.batch();
    let mut last: Option<u64> = None;
    let mut round = 0u64;
    loop {
        let (version, model) = {
            let mut s = shared.snap.lock().expect("snapshot lock");
            while sync && !shared.stop.load(Ordering::SeqCst) && last == Some(s.version) {
                s = shared.fresh.wait(s).expect("snapshot lock");
            }
            if shared.stop.load(Ordering::SeqCst) {
                return;
            }
            (s.version, Arc::clone(&s.model))
        };
        round += 1;
        // In lockstep the stream position is the step being prepared, which
        // is what the sequential loop uses.
        let key = if sync { version + 1 } else { round };
        let ex = explore(&model, data, batch, per_spec, temperature, slack, seed, key, actor);
        let reqs: Vec<EvalRequest> = ex
            .items
            .iter()
            .enumerate()
            .map(|(k, (i, toks))| EvalRequest::new(request_id(actor, round, k), &data.entries[*i].id, toks))
            .collect();
        let responses = eval.evaluate(&reqs).map_err(|e| e.to_string());
        let msg = ActorResult { actor, round, version, exploration: ex, responses };
        if tx.send(msg).is_err() {
            return;
        }
        last = Some(version);
    }
}

struct Inbox {
    rx: Receiver<ActorResult>,
    seen_rounds: HashSet<(u32, u64)>,
    seen_ids: HashSet<u64>,
}

impl Inbox {
    fn next(&self) -> Result<ActorResult, TrainError> {
        self.rx
            .recv()
            .map_err(|RecvError| TrainError::Config("every actor exited before the budget was spent".into()))
    }

    /// Drops duplicates, stale results and failed evaluations.
    fn admit(&mut self, mut m: ActorResult, step: u64, rt: &RuntimeConfig, stats: &mut RuntimeStats) -> Option<ActorResult> {
        if !self.seen_rounds.insert((m.actor, m.round)) {
            stats.duplicates += 1;
            return None;
        }
        let lag = (step - 1).saturating_sub(m.version);
        if rt.staleness.is_some_and(|s| lag > s) {
            stats.stale += 1;
            return None;
        }
        let Ok(resps) = &m.responses else {
            stats.failed += 1;
            return None;
        };
        let keep: Vec<bool> = resps.iter().map(|r| self.seen_ids.insert(r.id)).collect();
        if keep.iter().any(|k| !k) {
            stats.duplicates += keep.iter().filter(|k| !**k).count();
            let mut it = keep.iter();
            m.exploration.items.retain(|_| *it.next().unwrap());
            let mut it = keep.iter();
            if let Ok(r) = &mut m.responses {
                r.retain(|_| *it.next().unwrap());
            }
        }
        stats.results += 1;
        stats.lags.push(lag);
        m.exploration.step = step;
        Some(m)
    }
}

/// Runs the selected algorithm until `state` reaches `budget_steps` updates.
/// `on_step` sees the state after each update (checkpointing, metrics).
pub fn run_learner(
    state: &mut TrainState,
    data: &Dataset,
    eval: &dyn Evaluator,
    algo: &Algo,
    rt: &RuntimeConfig,
    budget_steps: u64,
    on_step: &mut dyn FnMut(&TrainState, &StepReport) -> Result<(), TrainError>,
) -> Result<RuntimeStats, TrainError> {
    rt.validate().map_err(TrainError::Config)?;
    let mut stats = RuntimeStats::default();
    if state.step() >= budget_steps {
        return Ok(stats);
    }
    let shared = Shared {
        snap: Mutex::new(Snapshot { version: state.step(), model: Arc::new(state.model.clone()) }),
        fresh: Condvar::new(),
        stop: AtomicBool::new(false),
    };
    let (tx, rx) = bounded::<ActorResult>(2 * rt.actors);
    std::thread::scope(|s| {
        for a in 0..rt.actors {
            let tx = tx.clone();
            let shared = &shared;
            s.spawn(move || run_actor(a as u32, shared, data, eval, algo, rt.sync_every_step, tx));
        }
        drop(tx);
        let mut inbox = Inbox { rx, seen_rounds: HashSet::new(), seen_ids: HashSet::new() };
        let out = learner_loop(state, data, algo, rt, budget_steps, &shared, &mut inbox, &mut stats, on_step);
        shared.shutdown();
        drop(inbox);
        out
    })?;
    Ok(stats)
}

#[allow(clippy::too_many_arguments)]
fn learner_loop(
    state: &mut TrainState,
    data: &Dataset,
    algo: &Algo,
    rt: &RuntimeConfig,
    budget: u64,
    shared: &Shared,
    inbox: &mut Inbox,
    stats: &mut RuntimeStats,
    on_step: &mut dyn FnMut(&TrainState, &StepReport) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    while state.step() < budget {
        let step = state.step() + 1;
        let mut batch = Vec::new();
        let mut dropped = None;
        if rt.sync_every_step {
            let mut pending = rt.actors;
            while pending > 0 {
                let m = inbox.next()?;
                if m.version + 1 != step {
                    stats.stale += 1;
                    continue;
                }
                pending -= 1;
                if let Err(e) = &m.responses {
                    dropped = Some(e.clone());
                }
                batch.extend(inbox.admit(m, step, rt, stats));
            }
        } else {
            // SILO can learn from current targets alone; REINFORCE needs samples.
            if matches!(algo, Algo::Reinforce(_)) {
                let m = inbox.next()?;
                batch.extend(inbox.admit(m, step, rt, stats));
            }
            while let Ok(m) = inbox.rx.try_recv() {
                batch.extend(inbox.admit(m, step, rt, stats));
            }
        }
        let report = match algo {
            Algo::Silo(cfg) => {
                let mut replacements = Vec::new();
                let mut verified = 0;
                for m in &batch {
                    let resps = m.responses.as_ref().expect("admitted results are ok");
                    verified += resps.iter().filter(|r| r.v == 0).count();
                    replacements.extend(apply_results(state, data, &m.exploration, resps));
                }
                let st = learn(state, data, cfg, step)?;
                StepReport::Silo(SiloStepReport { step, loss: st.loss, verified, replacements, dropped })
            }
            Algo::Reinforce(cfg) => {
                let mut ex = Exploration { step, items: Vec::new() };
                let mut resps = Vec::new();
                for m in batch {
                    ex.items.extend(m.exploration.items);
                    resps.extend(m.responses.expect("admitted results are ok"));
                }
                let mut r = reinforce_update(state, data, &ex, &resps, cfg)?;
                r.dropped = dropped;
                StepReport::Reinforce(r)
            }
        };
        shared.publish(state.step(), &state.model);
        on_step(state, &report)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::silo::silo_step;
    use crate::runtime::eval::LocalEvaluator;
    use silo_core::datagen::{build_corpus, DatagenConfig};
    use silo_core::verify::VerifyConfig;
    use silo_model::{ModelConfig, ScheduleConfig};

    fn setup() -> (Dataset, LocalEvaluator, Model<f32>) {
        let c = build_corpus(12, 1, 1, &DatagenConfig::default()).unwrap();
        let ev = LocalEvaluator::new(&c.train, VerifyConfig::default());
        let data = Dataset::new(c.train);
        let cfg = ModelConfig::tiny();
        (data, ev, Model::new(cfg, 3).unwrap())
    }

    fn small() -> SiloConfig {
        SiloConfig { batch_ex: 4, batch_tr: 4, ..SiloConfig::default() }
    }

    #[test]
    fn zero_budget_is_a_no_op() {
        let (data, ev, model) = setup();
        let mut st = TrainState::new(model, &data, ScheduleConfig::new(0.5, 16));
        let before = st.model.params.clone();
        let s = run_learner(&mut st, &data, &ev, &Algo::Silo(small()), &RuntimeConfig::silo(), 0, &mut |_, _| Ok(()))
            .unwrap();
        assert_eq!(s, RuntimeStats::default());
        assert_eq!(st.model.params, before);
    }

    #[test]
    fn lockstep_matches_sequential_loop() {
        let (data, ev, model) = setup();
        let cfg = small();
        let sched = cfg.schedule(16);
        let mut a = TrainState::new(model.clone(), &data, sched.clone());
        for _ in 0..3 {
            silo_step(&mut a, &data, &ev, &cfg).unwrap();
        }
        let mut b = TrainState::new(model, &data, sched);
        run_learner(&mut b, &data, &ev, &Algo::Silo(cfg), &RuntimeConfig::lockstep(), 3, &mut |_, _| Ok(())).unwrap();
        assert_eq!(a.replacements, b.replacements);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn async_actors_record_versions() {
        let (data, ev, model) = setup();
        let mut st = TrainState::new(model, &data, ScheduleConfig::new(0.5, 16));
        let rt = RuntimeConfig { actors: 2, staleness: Some(3), sync_every_step: false };
        let algo = Algo::Reinforce(ReinforceConfig { batch: 2, ..ReinforceConfig::default() });
        let mut steps = Vec::new();
        let s = run_learner(&mut st, &data, &ev, &algo, &rt, 4, &mut |_, r| {
            steps.push(r.step());
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, vec![1, 2, 3, 4]);
        assert!(s.results >= 4);
        assert!(s.lags.iter().all(|&l| l <= 3));
    }
}
