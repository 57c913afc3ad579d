//! Fine-tuning driver: runs the learner, keeps the run directory current and
//! tracks the dev-subsample proportion over time.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::evaluate::{evaluate_model, Selection};
use crate::run::{MetricsRow, RunDir, TrainError};
use crate::runtime::eval::Evaluator;
use crate::runtime::learner::{run_learner, Algo, RuntimeConfig, RuntimeStats, StepReport};
use crate::silo::TrainState;

/// Dev-subsample scoring used for the progress series and model selection.
pub struct DevProtocol<'a> {
    pub data: &'a Dataset,
    pub idx: Vec<usize>,
    pub eval: &'a dyn Evaluator,
    pub width: usize,
    pub slack: usize,
}

impl DevProtocol<'_> {
    pub fn proportion(&self, state: &TrainState) -> Result<f64, TrainError> {
        Ok(evaluate_model("dev", &state.model, self.data, &self.idx, self.eval, self.width, self.slack)?.proportion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// `(step, dev proportion)`, starting with the initial model at step 0.
    pub series: Vec<(u64, f64)>,
    pub checkpoints: Vec<(u64, PathBuf)>,
    pub replacements: usize,
    pub stats: RuntimeStats,
    pub losses: Vec<f64>,
}

impl FinetuneReport {
    /// Best checkpoint by dev proportion (ties to the later step), read off
    /// the series where checkpoints were scored.
    pub fn selection(&self) -> Option<Selection> {
        let mut best: Option<(f64, u64, PathBuf)> = None;
        for (step, path) in &self.checkpoints {
            let Some(&(_, p)) = self.series.iter().find(|(s, _)| s == step) else { continue };
            if best.as_ref().is_none_or(|(bp, _, _)| p >= *bp) {
                best = Some((p, *step, path.clone()));
            }
        }
        best.map(|(_, step, path)| Selection { step, path, series: self.series.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub checkpoint_every: u64,
    pub dev_every: u64,
    pub runtime: RuntimeConfig,
}

pub fn finetune(
    state: &mut TrainState,
    train: &Dataset,
    eval: &dyn Evaluator,
    algo: &Algo,
    cfg: &FinetuneConfig,
    dev: Option<&DevProtocol>,
    run: Option<&RunDir>,
    progress: &mut dyn FnMut(&StepReport, Option<f64>),
) -> Result<FinetuneReport, TrainError> {
    let mut report = FinetuneReport {
        series: Vec::new(),
        checkpoints: Vec::new(),
        replacements: 0,
        stats: RuntimeStats::default(),
        losses: Vec::new(),
    };
    if let Some(d) = dev {
        let p = d.proportion(state)?;
        report.series.push((state.step(), p));
        if let Some(run) = run {
            run.append_metrics(&MetricsRow { step: state.step(), loss: None, replacements: 0, dev_proportion: Some(p) })?;
        }
    }
    let every = |n: u64, step: u64| step % n.max(1) == 0 || step == cfg.steps;
    let mut on_step = |st: &TrainState, r: &StepReport| -> Result<(), TrainError> {
        let step = r.step();
        let replaced = match r {
            StepReport::Silo(s) => {
                if let Some(run) = run {
                    run.append_replacements(&s.replacements)?;
                }
                s.replacements.len()
            }
            StepReport::Reinforce(_) => 0,
        };
        report.replacements += replaced;
        report.losses.push(r.loss());
        let mut dev_p = None;
        if let Some(d) = dev.filter(|_| every(cfg.dev_every, step)) {
            let p = d.proportion(st)?;
            report.series.push((step, p));
            dev_p = Some(p);
        }
        if let Some(run) = run {
            if every(cfg.checkpoint_every, step) {
                let path = run.save_checkpoint(&st.model, Some(&st.adam))?;
                report.checkpoints.push((step, path));
            }
            run.append_metrics(&MetricsRow { step, loss: Some(r.loss()), replacements: replaced, dev_proportion: dev_p })?;
        }
        progress(r, dev_p);
        Ok(())
    };
    report.stats = run_learner(state, train, eval, algo, &cfg.runtime, cfg.steps, &mut on_step)?;
    Ok(report)
}

/// Mean of the points in the first and the last quarter of `[0, last step]`.
pub fn quarter_means(series: &[(u64, f64)]) -> Option<(f64, f64)> {
    let last = series.last()?.0;
    let mean = |pts: Vec<f64>| (!pts.is_empty()).then(|| pts.iter().sum::<f64>() / pts.len() as f64);
    let first = mean(series.iter().filter(|(s, _)| 4 * s <= last).map(|p| p.1).collect())?;
    let fin = mean(series.iter().filter(|(s, _)| 4 * s >= 3 * last).map(|p| p.1).collect())?;
    Some((first, fin))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarters_split_by_step() {
        let s = [(0, 0.1), (250, 0.2), (500, 0.3), (750, 0.4), (1000, 0.5)];
        let (a, b) = quarter_means(&s).unwrap();
        assert!((a - 0.15).abs() < 1e-12 && (b - 0.45).abs() < 1e-12);
        assert_eq!(quarter_means(&[]), None);
    }

    #[test]
    fn selection_prefers_later_ties() {
        let r = FinetuneReport {
            series: vec![(0, 0.1), (1000, 0.3), (2000, 0.3)],
            checkpoints: vec![(1000, "a".into()), (2000, "b".into())],
            replacements: 0,
            stats: RuntimeStats::default(),
            losses: vec![],
        };
        assert_eq!(r.selection().unwrap().step, 2000);
    }
}
