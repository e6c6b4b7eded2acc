//! JSONL metrics: one record per event, in step order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, BenchError, Result};
use crate::scoring::BoundaryScore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step {
        step: u64,
        task_id: usize,
        objective: f64,
        #[serde(default)]
        expected_loglik: Option<f64>,
        kl_current: f64,
        kl_regularisers: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        statistic: Option<f64>,
        wall_ms: u64,
    },
    Detection {
        step: u64,
        task_id: usize,
        statistic: Option<f64>,
        wall_ms: u64,
    },
    TaskEnd {
        step: u64,
        task_id: usize,
        selection_score: f64,
        points: usize,
        train_size: usize,
        retained_labels: Vec<usize>,
        /// Test accuracy on every task seen so far, when evaluated.
        accuracies: Vec<Option<f64>>,
        wall_ms: u64,
    },
    Final {
        step: u64,
        accuracies: Vec<Option<f64>>,
        mean_accuracy: Option<f64>,
        true_boundaries: Vec<u64>,
        detections: Vec<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        boundary: Option<BoundaryScore>,
        wall_ms: u64,
    },
}

impl MetricsRecord {
    pub fn step(&self) -> u64 {
        match self {
            Self::Step { step, .. }
            | Self::Detection { step, .. }
            | Self::TaskEnd { step, .. }
            | Self::Final { step, .. } => *step,
        }
    }
}

/// Appends records to a JSONL file, refusing to go back in steps.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: u64,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self { path: path.into(), out: BufWriter::new(file), last_step: 0 })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let step = record.step();
        assert!(step >= self.last_step, "metrics out of step order: {step} after {}", self.last_step);
        self.last_step = step;
        serde_json::to_writer(&mut self.out, record).map_err(|source| BenchError::Json { path: self.path.clone(), source })?;
        self.out.write_all(b"\n").map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| BenchError::Json { path: path.into(), source })?);
    }
    Ok(out)
}
