//! Beam-search evaluation (best verified of the beam) and checkpoint
//! selection on a fixed dev subsample.

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use silo_core::cost::{cost, LatencyTable};
use silo_core::datagen::DatasetEntry;
use silo_core::verify::{verify, VerifyConfig};
use silo_model::{beam_decode, checkpoint, Model};

use crate::data::Dataset;
use crate::run::TrainError;
use crate::runtime::eval::{parse_rewrite, EvalRequest, Evaluator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub rank: usize,
    pub score: f64,
    pub parse_ok: bool,
    pub v: u8,
    pub c_total: Option<f64>,
    /// Token rendering.
    pub rewrite: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryResult {
    pub id: String,
    /// Cost of the compiler reference from the corpus file.
    pub original_cost: f64,
    pub candidates: Vec<CandidateResult>,
    /// Rank of the cheapest verified candidate.
    pub best: Option<usize>,
    pub best_cost: Option<f64>,
    pub superoptimized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub total: usize,
    pub superoptimized: usize,
    pub verified_any: usize,
    pub proportion: f64,
    pub entries: Vec<EntryResult>,
}

/// Decodes `width` candidates per entry, scores all of them, and counts the
/// entries whose best verified candidate beats the original reference.
pub fn evaluate_model(
    label: &str,
    model: &Model<f32>,
    data: &Dataset,
    idx: &[usize],
    eval: &dyn Evaluator,
    width: usize,
    slack: usize,
) -> Result<EvalSummary, TrainError> {
    let mut entries = Vec::with_capacity(idx.len());
    for &i in idx {
        let e = &data.entries[i];
        let src = &data.src[i];
        let hyps = beam_decode(model, src, width, src.len() + slack);
        let reqs: Vec<EvalRequest> =
            hyps.iter().enumerate().map(|(k, h)| EvalRequest::new(k as u64, &e.id, &h.tokens)).collect();
        let resps = eval.evaluate(&reqs)?;
        let candidates: Vec<CandidateResult> = hyps
            .iter()
            .zip(resps)
            .enumerate()
            .map(|(rank, (h, r))| CandidateResult {
                rank,
                score: h.score,
                parse_ok: r.parse_ok,
                v: r.v,
                c_total: r.c_total,
                rewrite: reqs[rank].rewrite.clone(),
            })
            .collect();
        let best = candidates
            .iter()
            .filter(|c| c.v == 0 && c.c_total.is_some())
            .min_by(|a, b| a.c_total.partial_cmp(&b.c_total).unwrap().then(a.rank.cmp(&b.rank)))
            .map(|c| c.rank);
        let best_cost = best.and_then(|b| candidates[b].c_total);
        entries.push(EntryResult {
            id: e.id.clone(),
            original_cost: e.cost_ref,
            superoptimized: best_cost.is_some_and(|c| c < e.cost_ref),
            candidates,
            best,
            best_cost,
        });
    }
    Ok(summarize(label, entries))
}

/// Recomputes the headline counts from per-entry records.
pub fn summarize(label: &str, entries: Vec<EntryResult>) -> EvalSummary {
    let superoptimized = entries.iter().filter(|e| e.superoptimized).count();
    let verified_any = entries.iter().filter(|e| e.best.is_some()).count();
    EvalSummary {
        model: label.to_string(),
        total: entries.len(),
        superoptimized,
        verified_any,
        proportion: superoptimized as f64 / entries.len().max(1) as f64,
        entries,
    }
}

/// Independent re-check of a claimed improvement, straight from the corpus
/// entry: the rewrite parses, verifies, and is strictly cheaper than `cost`.
pub fn reverify(entry: &DatasetEntry, rewrite: &str, against: f64, cfg: &VerifyConfig) -> bool {
    let p = match parse_rewrite(rewrite).or_else(|| silo_core::isa::parse(rewrite).ok()) {
        Some(p) => p,
        None => return false,
    };
    verify(&p, &entry.f_s, &entry.suite, &entry.live_out, cfg).is_equivalent()
        && cost(&p, &entry.suite, &LatencyTable::default()).c_total < against
}

/// A fixed-seed subsample of `n` indices out of `total`, in ascending order.
pub fn dev_subsample(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, total, n.min(total)).into_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub step: u64,
    pub path: PathBuf,
    /// `(step, proportion superoptimized)` per checkpoint.
    pub series: Vec<(u64, f64)>,
}

/// Picks the checkpoint with the highest dev proportion; ties go to the
/// later step.
pub fn select_model(
    checkpoints: &[(u64, PathBuf)],
    data: &Dataset,
    idx: &[usize],
    eval: &dyn Evaluator,
    width: usize,
    slack: usize,
) -> Result<Selection, TrainError> {
    if checkpoints.is_empty() {
        return Err(TrainError::Config("no checkpoints to select from".into()));
    }
    let mut ordered = checkpoints.to_vec();
    ordered.sort();
    let mut series = Vec::with_capacity(ordered.len());
    let mut best: Option<(f64, u64, PathBuf)> = None;
    for (step, path) in ordered {
        let (model, _) = checkpoint::load(&path)?;
        let s = evaluate_model("dev", &model, data, idx, eval, width, slack)?;
        series.push((step, s.proportion));
        if best.as_ref().is_none_or(|(p, _, _)| s.proportion >= *p) {
            best = Some((s.proportion, step, path));
        }
    }
    let (_, step, path) = best.expect("at least one checkpoint");
    Ok(Selection { step, path, series })
}
