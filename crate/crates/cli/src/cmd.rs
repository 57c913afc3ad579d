use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use silo_core::cost::RlConfig;
use silo_core::datagen::{build_corpus_with, read_split, write_corpus, DatagenConfig, DatasetEntry, Split};
use silo_core::isa::{parse, tokenize, Vocab};
use silo_core::verify::VerifyConfig;
use silo_model::{checkpoint, Adam, Model, ModelConfig};
use silo_train::evaluate::{reverify, Selection};
use silo_train::run::read_metrics;
use silo_train::runtime::socket::{SocketEvaluator, SocketServer};
use silo_train::{
    dev_subsample, evaluate_model, finetune as run_finetune, pretrain as run_pretrain, Algo, Dataset, DevProtocol,
    EvalRequest, Evaluator, FinetuneConfig, LocalEvaluator, PretrainConfig, ReinforceConfig, RunDir, RuntimeConfig,
    SiloConfig, StepReport, TrainState,
};

use crate::error::CliError;
use crate::{AlgoName, DatagenArgs, EvalArgs, FinetuneArgs, PlotArgs, PretrainArgs, ScoreArgs, ServeArgs};

/// Everything needed to rerun a command, stored in its output directory.
#[derive(Serialize)]
struct RunConfig<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a T,
}

fn run_config<'a, T: Serialize>(command: &'a str, args: &'a T) -> RunConfig<'a, T> {
    RunConfig { command, version: env!("CARGO_PKG_VERSION"), args }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<DatasetEntry>, CliError> {
    read_split(dir, split).map_err(|e| config_err(format!("cannot read {} split of {}: {e}", split.name(), dir.display())))
}

/// A checkpoint file, or a run directory's selected (else latest) checkpoint.
fn resolve_checkpoint(path: &Path) -> Result<PathBuf, CliError> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.is_dir() {
        let sel = path.join("selection.json");
        if sel.is_file() {
            let s: Selection = serde_json::from_str(&fs::read_to_string(sel)?)?;
            return Ok(s.path);
        }
        let run = RunDir::open(path)?;
        if let Some((_, p)) = run.checkpoints()?.pop() {
            return Ok(p);
        }
    }
    Err(config_err(format!("no checkpoint at {}", path.display())))
}

pub fn datagen(a: &DatagenArgs) -> Result<(), CliError> {
    if a.k == 0 || !(0.0..=1.0).contains(&a.rax_prob) {
        return Err(config_err("--k must be positive and --rax-prob within [0, 1]"));
    }
    let cfg = DatagenConfig { seed: a.seed, k: a.k, rax_result_prob: a.rax_prob, ..DatagenConfig::default() };
    let corpus = build_corpus_with(a.train, a.dev, a.test, &cfg, |split, n| {
        if n % 100 == 0 && n > 0 {
            eprintln!("{}: {n}", split.name());
        }
    })?;
    write_corpus(&a.out, &corpus)?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&run_config("datagen", a))? + "\n")?;
    println!("{}", corpus.stats.summary_line());
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<(), CliError> {
    let mcfg = ModelConfig::named(&a.model).ok_or_else(|| config_err(format!("unknown model preset `{}`", a.model)))?;
    let train = Dataset::new(load_split(&a.corpus, Split::Train)?);
    let dev = Dataset::new(load_split(&a.corpus, Split::Dev)?);
    let cfg = PretrainConfig {
        steps: a.steps,
        batch: a.batch,
        factor: a.factor,
        warmup: a.warmup,
        eval_every: a.eval_every,
        checkpoint_every: a.checkpoint_every,
        seed: a.seed,
        heldout_limit: a.heldout_limit,
    };
    let run = RunDir::create(&a.run)?;
    let (mut model, mut adam) = match run.checkpoints()?.pop() {
        Some((step, p)) => {
            let (m, adam) = checkpoint::load(&p)?;
            let adam = adam.ok_or_else(|| config_err(format!("{} has no optimizer state", p.display())))?;
            eprintln!("resuming from step {step}");
            (m, adam)
        }
        None => {
            let m = Model::new(mcfg.clone(), a.seed)?;
            let adam = Adam::new(m.params.len(), cfg.schedule(mcfg.model_dim));
            (m, adam)
        }
    };
    run.write_config(&run_config("pretrain", a))?;
    let report = run_pretrain(&mut model, &mut adam, &train, &dev, &cfg, Some(&run), &mut |p| {
        println!(
            "step {:>6}  train {:.4}  heldout {:.4}  token_acc {:.4}  exact {:.4}",
            p.step, p.train_loss, p.heldout_loss, p.token_accuracy, p.exact_match
        );
    })?;
    run.write_json("report.json", &report)?;
    Ok(())
}

fn algo_for(a: &FinetuneArgs) -> Algo {
    match a.algo {
        AlgoName::Silo => Algo::Silo(SiloConfig {
            steps: a.steps,
            batch_ex: a.batch_ex,
            batch_tr: a.batch_tr,
            samples_per_spec: a.samples_per_spec,
            temperature: a.temperature,
            factor: a.factor.unwrap_or(SiloConfig::default().factor),
            warmup: a.warmup,
            checkpoint_every: a.checkpoint_every,
            dev_every: a.dev_every,
            seed: a.seed,
            decode_slack: a.decode_slack,
            prioritize_replaced: a.prioritize_replaced,
        }),
        AlgoName::Reinforce => Algo::Reinforce(ReinforceConfig {
            rl: RlConfig { lambda: a.lambda, bit_rate: a.bit_rate, clip: a.clip },
            beta: a.beta,
            factor: a.factor.unwrap_or(ReinforceConfig::default().factor),
            warmup: a.warmup,
            steps: a.steps,
            batch: a.batch_ex,
            temperature: a.temperature,
            checkpoint_every: a.checkpoint_every,
            dev_every: a.dev_every,
            seed: a.seed,
            decode_slack: a.decode_slack,
        }),
    }
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    algo: AlgoName,
    steps: u64,
    replacements: usize,
    series: &'a [(u64, f64)],
    selected: Option<&'a Selection>,
    results: usize,
    stale: usize,
    duplicates: usize,
    failed: usize,
    max_lag: u64,
}

pub fn finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    let algo = algo_for(a);
    if let Algo::Reinforce(c) = &algo {
        c.validate().map_err(config_err)?;
    }
    let staleness = match a.algo {
        AlgoName::Silo => a.staleness,
        AlgoName::Reinforce => a.staleness.or(Some(1)),
    };
    let rt = RuntimeConfig { actors: a.actors, staleness, sync_every_step: a.sync };
    rt.validate().map_err(config_err)?;
    let init = resolve_checkpoint(&a.init)?;
    let train = Dataset::new(load_split(&a.corpus, Split::Train)?);
    let dev = Dataset::new(load_split(&a.corpus, Split::Dev)?);
    let (model, _) = checkpoint::load(&init)?;
    let run = RunDir::create(&a.run)?;
    if !run.checkpoints()?.is_empty() || run.replacements_path().exists() {
        return Err(config_err(format!("{} already holds a fine-tuning run", a.run.display())));
    }
    run.write_config(&run_config("finetune", a))?;

    let local = LocalEvaluator::new(train.entries.iter().chain(&dev.entries), VerifyConfig::default())
        .with_workers(a.workers);
    let server = match &a.socket {
        Some(p) => Some(SocketServer::bind(p, local.clone())?),
        None => None,
    };
    let remote = match &server {
        Some(s) => Some(SocketEvaluator::connect(s.path())?),
        None => None,
    };
    let eval: &dyn Evaluator = match &remote {
        Some(r) => r,
        None => &local,
    };

    let schedule = match &algo {
        Algo::Silo(c) => c.schedule(model.cfg.model_dim),
        Algo::Reinforce(c) => c.schedule(model.cfg.model_dim),
    };
    let mut state = TrainState::new(model, &train, schedule);
    let dev_proto = (a.dev_size > 0).then(|| DevProtocol {
        data: &dev,
        idx: dev_subsample(dev.len(), a.dev_size, a.dev_seed),
        eval,
        width: a.beam,
        slack: a.decode_slack,
    });
    let cfg = FinetuneConfig { steps: a.steps, checkpoint_every: a.checkpoint_every, dev_every: a.dev_every, runtime: rt };
    let report = run_finetune(&mut state, &train, eval, &algo, &cfg, dev_proto.as_ref(), Some(&run), &mut |r, dev_p| {
        let line = match r {
            StepReport::Silo(s) => format!("replaced {:>3}  verified {:>3}", s.replacements.len(), s.verified),
            StepReport::Reinforce(s) => format!("mean_j {:>10.1}  verified {:>3}  improved {:>3}", s.mean_j, s.verified, s.improved),
        };
        if r.step() % 50 == 0 || dev_p.is_some() {
            let dev = dev_p.map(|p| format!("  dev {p:.4}")).unwrap_or_default();
            println!("step {:>6}  loss {:.4}  {line}{dev}", r.step(), r.loss());
        }
    })?;
    let selection = report.selection().or_else(|| {
        report.checkpoints.last().map(|(s, p)| Selection { step: *s, path: p.clone(), series: report.series.clone() })
    });
    if let Some(s) = &selection {
        run.write_json("selection.json", s)?;
        println!("selected step {} ({})", s.step, s.path.display());
    }
    run.write_json(
        "report.json",
        &FinetuneSummary {
            algo: a.algo,
            steps: state.step(),
            replacements: report.replacements,
            series: &report.series,
            selected: selection.as_ref(),
            results: report.stats.results,
            stale: report.stats.stale,
            duplicates: report.stats.duplicates,
            failed: report.stats.failed,
            max_lag: report.stats.lags.iter().copied().max().unwrap_or(0),
        },
    )?;
    Ok(())
}

/// One row of the summary table.
#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub checkpoint: String,
    pub entries: usize,
    pub superoptimized: usize,
    pub proportion: f64,
    /// Superoptimizations that re-verify offline against the corpus file.
    pub reverified: usize,
}

fn split_label(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((l, p)) => (l.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(s);
            let l = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| s.to_string());
            (l, p)
        }
    }
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let split = Split::from_name(&a.split).ok_or_else(|| config_err(format!("unknown split `{}`", a.split)))?;
    if a.beam == 0 {
        return Err(config_err("--beam must be positive"));
    }
    let models: Vec<(String, PathBuf)> = a
        .models
        .iter()
        .map(|m| {
            let (l, p) = split_label(m);
            resolve_checkpoint(&p).map(|c| (l, c))
        })
        .collect::<Result<_, _>>()?;
    let data = Dataset::new(load_split(&a.corpus, split)?);
    let n = if a.limit == 0 { data.len() } else { a.limit.min(data.len()) };
    let idx: Vec<usize> = (0..n).collect();
    let local = LocalEvaluator::new(&data.entries, VerifyConfig::default()).with_workers(a.workers);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&run_config("eval", a))? + "\n")?;
    let vcfg = VerifyConfig::default();
    let mut rows = Vec::new();
    for (label, ckpt) in models {
        let (model, _) = checkpoint::load(&ckpt)?;
        let summary = evaluate_model(&label, &model, &data, &idx, &local, a.beam, a.decode_slack)?;
        let mut f = fs::File::create(a.out.join(format!("{label}.entries.jsonl")))?;
        let mut reverified = 0;
        for (e, i) in summary.entries.iter().zip(&idx) {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
            if let (true, Some(b)) = (e.superoptimized, e.best) {
                if reverify(&data.entries[*i], &e.candidates[b].rewrite, e.original_cost, &vcfg) {
                    reverified += 1;
                }
            }
        }
        rows.push(SummaryRow {
            model: label,
            checkpoint: ckpt.display().to_string(),
            entries: summary.total,
            superoptimized: summary.superoptimized,
            proportion: summary.proportion,
            reverified,
        });
    }
    let mut w = csv::Writer::from_path(a.out.join("summary.csv"))?;
    println!("{:<12} {:>8} {:>14} {:>11} {:>10}", "model", "entries", "superoptimized", "proportion", "reverified");
    for r in &rows {
        println!("{:<12} {:>8} {:>14} {:>10.2}% {:>10}", r.model, r.entries, r.superoptimized, 100.0 * r.proportion, r.reverified);
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn plotdata(a: &PlotArgs) -> Result<(), CliError> {
    fs::create_dir_all(&a.out)?;
    for spec in &a.runs {
        let (label, dir) = split_label(spec);
        let run = RunDir::open(&dir)?;
        let rows = read_metrics(&run.metrics_path()).map_err(|e| config_err(format!("{}: {e}", dir.display())))?;
        // later rows for a step win, so resumed runs stay strictly increasing
        let mut dev: BTreeMap<u64, f64> = BTreeMap::new();
        let mut replaced: BTreeMap<u64, usize> = BTreeMap::new();
        for r in &rows {
            if let Some(p) = r.dev_proportion {
                dev.insert(r.step, p);
            }
            if r.loss.is_some() {
                replaced.insert(r.step, r.replacements);
            }
        }
        let path = a.out.join(format!("{label}.dev.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["step", "proportion"])?;
        for (s, p) in &dev {
            w.write_record([s.to_string(), p.to_string()])?;
        }
        w.flush()?;
        println!("{}", path.display());
        if run.replacements_path().exists() {
            let path = a.out.join(format!("{label}.replacements.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["step", "replacements", "cumulative"])?;
            let mut total = 0;
            for (s, n) in &replaced {
                total += n;
                w.write_record([s.to_string(), n.to_string(), total.to_string()])?;
            }
            w.flush()?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn load_all(dir: &Path) -> Result<Vec<DatasetEntry>, CliError> {
    let mut all = Vec::new();
    for s in Split::ALL {
        all.extend(load_split(dir, s)?);
    }
    Ok(all)
}

pub fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let entries = load_all(&a.corpus)?;
    let local = LocalEvaluator::new(&entries, VerifyConfig::default()).with_workers(a.workers);
    let server = SocketServer::bind(&a.socket, local)?;
    eprintln!("serving {} entries on {}", entries.len(), server.path().display());
    server.wait();
    Ok(())
}

pub fn score(a: &ScoreArgs) -> Result<(), CliError> {
    let entries = load_all(&a.corpus)?;
    let entry = entries
        .iter()
        .find(|e| e.id == a.entry)
        .ok_or_else(|| config_err(format!("no entry `{}`", a.entry)))?;
    let text = fs::read_to_string(&a.rewrite)?;
    let rendered = match parse(&text).ok().and_then(|p| tokenize(&p).ok()) {
        Some(t) => Vocab::get().render(&t.0),
        // keeps the text so the service reports it as unparseable
        None => text.split_whitespace().collect::<Vec<_>>().join(" "),
    };
    let req = EvalRequest { rewrite: rendered, ..EvalRequest::new(0, &entry.id, &[]) };
    let local = LocalEvaluator::new(std::iter::once(entry), VerifyConfig::default());
    let resp = local.evaluate_one(&req).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{}", serde_json::to_string(&resp)?);
    println!("reference cost {}", entry.cost_ref);
    Ok(())
}
