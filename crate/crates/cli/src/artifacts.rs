//! On-disk formats. Every artifact carries the hash of the config that
//! produced it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use stepq::cost::{Budget, CostReport};
use stepq::quant::{BlockReport, Policy};
use stepq::search::{Candidate, EliteEntry, EvalRecord};

use crate::error::{bad_input, CliError, CliResult};

pub const DATASET: &str = "data.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const BANK: &str = "bank.json";
pub const CALIBRATION: &str = "calibration.json";
pub const POOL: &str = "pool.json";
pub const SEARCH_LOG: &str = "search_log.jsonl";
pub const ELITE: &str = "elite.json";
pub const SAMPLES: &str = "samples.csv";
pub const SAMPLES_META: &str = "samples.json";
pub const SAMPLES_PLOT: &str = "samples.png";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    bad_input(format!("{}: {e}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub config_hash: String,
    pub blocks: Vec<BlockReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolFile {
    pub config_hash: String,
    pub budget: Budget,
    pub seeds: Vec<u64>,
    pub policies: Vec<Policy>,
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub config_hash: String,
    pub epoch: usize,
    pub index: usize,
    pub epoch_size: usize,
    pub candidate: Candidate,
    pub overall_bitops: u128,
    pub fitness: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LogLine {
    pub fn new(config_hash: &str, r: &EvalRecord) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            epoch: r.epoch,
            index: r.index,
            epoch_size: r.epoch_size,
            candidate: r.candidate.clone(),
            overall_bitops: r.overall_bitops,
            fitness: r.fitness,
            seed: r.seed,
            error: r.error.clone(),
        }
    }

    pub fn record(&self) -> EvalRecord {
        EvalRecord {
            epoch: self.epoch,
            index: self.index,
            epoch_size: self.epoch_size,
            candidate: self.candidate.clone(),
            overall_bitops: self.overall_bitops,
            fitness: self.fitness,
            seed: self.seed,
            error: self.error.clone(),
        }
    }
}

/// Reads a JSON-lines search log. A missing file is an empty log.
pub fn read_log(path: &Path) -> CliResult<Vec<LogLine>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(parsed);
    }
    Ok(out)
}

pub fn write_log(path: &Path, lines: &[LogLine], append: bool) -> CliResult<()> {
    let internal = |e: std::io::Error| CliError::Internal(format!("{}: {e}", path.display()));
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(internal)?;
    let mut w = BufWriter::new(file);
    for line in lines {
        let text = serde_json::to_string(line).map_err(|e| CliError::Internal(e.to_string()))?;
        writeln!(w, "{text}").map_err(internal)?;
    }
    w.flush().map_err(internal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliteRecord {
    pub rank: usize,
    pub candidate: Candidate,
    pub fitness: f64,
    pub epoch: usize,
    pub index: usize,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliteFile {
    pub config_hash: String,
    pub budget: Budget,
    pub epochs: usize,
    pub best_history: Vec<f64>,
    pub elite: Vec<EliteRecord>,
}

impl EliteRecord {
    pub fn from_entry(rank: usize, e: &EliteEntry, cost: CostReport) -> Self {
        Self { rank, candidate: e.candidate.clone(), fitness: e.fitness, epoch: e.epoch, index: e.index, cost }
    }
}

/// A candidate given either as an elite file (its best entry) or bare.
pub fn read_candidate(path: &Path) -> CliResult<Candidate> {
    let value: serde_json::Value = read_json(path)?;
    if let Ok(elite) = serde_json::from_value::<EliteFile>(value.clone()) {
        return elite
            .elite
            .first()
            .map(|e| e.candidate.clone())
            .ok_or_else(|| bad_input(format!("{}: elite file is empty", path.display())));
    }
    serde_json::from_value(value).map_err(|e| io_err(path, format!("not a candidate: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub config_hash: String,
    pub seed: u64,
    pub n: usize,
    pub candidate: Candidate,
    pub overall_bitops: u128,
}

pub fn out_path(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}
