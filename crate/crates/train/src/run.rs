//! Run directory layout and training errors.
//!
//! ```text
//! <run>/config.json            serialized run configuration
//! <run>/checkpoints/step-NNNNNN.ckpt
//! <run>/replacements.jsonl     one accepted rewrite per line (fine-tuning)
//! <run>/metrics.csv            step,loss,replacements,dev_proportion
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use silo_model::checkpoint;
use silo_model::{Adam, Model, ModelError};

use crate::runtime::eval::EvalError;
use crate::silo::Replacement;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training diverged at step {step}: {reason} (last good checkpoint: {checkpoint:?})")]
    Diverged {
        step: u64,
        reason: String,
        checkpoint: Option<PathBuf>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: Option<f64>,
    pub replacements: usize,
    pub dev_proportion: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(RunDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(TrainError::Config(format!("{} is not a run directory", root.display())));
        }
        Ok(RunDir { root })
    }

    pub fn write_config(&self, cfg: &impl Serialize) -> Result<(), TrainError> {
        fs::write(self.root.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
        Ok(())
    }

    pub fn read_config<T: for<'de> Deserialize<'de>>(&self) -> Result<T, TrainError> {
        Ok(serde_json::from_str(&fs::read_to_string(self.root.join("config.json"))?)?)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:06}.ckpt"))
    }

    pub fn save_checkpoint(&self, model: &Model<f32>, adam: Option<&Adam>) -> Result<PathBuf, TrainError> {
        let p = self.checkpoint_path(model.step);
        checkpoint::save(&p, model, adam)?;
        Ok(p)
    }

    /// Checkpoints sorted by step.
    pub fn checkpoints(&self) -> Result<Vec<(u64, PathBuf)>, TrainError> {
        let mut out = Vec::new();
        let dir = self.root.join("checkpoints");
        if !dir.is_dir() {
            return Ok(out);
        }
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            let step = p
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step-"))
                .and_then(|n| n.strip_suffix(".ckpt"))
                .and_then(|n| n.parse().ok());
            if let Some(s) = step {
                out.push((s, p));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn replacements_path(&self) -> PathBuf {
        self.root.join("replacements.jsonl")
    }

    pub fn append_replacements(&self, rs: &[Replacement]) -> Result<(), TrainError> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.replacements_path())?;
        for r in rs {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn read_replacements(&self) -> Result<Vec<Replacement>, TrainError> {
        read_replacements(&self.replacements_path())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn append_metrics(&self, row: &MetricsRow) -> Result<(), TrainError> {
        let path = self.metrics_path();
        let fresh = !path.exists();
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
        w.serialize(row)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_metrics(&self) -> Result<Vec<MetricsRow>, TrainError> {
        read_metrics(&self.metrics_path())
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf, TrainError> {
        let p = self.root.join(name);
        let mut f = File::create(&p)?;
        writeln!(f, "{}", serde_json::to_string_pretty(value)?)?;
        Ok(p)
    }
}

pub fn read_replacements(path: &Path) -> Result<Vec<Replacement>, TrainError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
