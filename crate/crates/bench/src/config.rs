//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use frcl_core::boundary::{Aggregation, DetectorConfig};
use frcl_core::engine::{BoundaryMode, EngineConfig, Mode, SelectionSettings};
use frcl_core::inducing::Criterion;
use frcl_core::optim::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, BenchError, Result};

/// Environment variable naming the MNIST directory when the config has none.
pub const MNIST_DIR_VAR: &str = "FRCL_MNIST_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    SplitMnist,
    PermutedMnist,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub task_count: usize,
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub points_per_task: usize,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self { task_count: 3, classes: 2, dims: 2, separation: 10.0, points_per_task: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionJson {
    pub criterion: String,
    pub search_steps: usize,
    pub eval_cap: usize,
    pub class_balanced_init: Option<bool>,
}

impl Default for SelectionJson {
    fn default() -> Self {
        let d = SelectionSettings::default();
        Self {
            criterion: d.criterion.name().to_string(),
            search_steps: d.search_steps,
            eval_cap: d.eval_cap,
            class_balanced_init: d.class_balanced_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorJson {
    pub threshold: f64,
    pub min_time_in: usize,
    pub cooldown: usize,
    pub aggregation: String,
    pub log_space: bool,
    pub window: usize,
}

impl Default for DetectorJson {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            threshold: d.threshold,
            min_time_in: d.min_time_in,
            cooldown: d.cooldown,
            aggregation: "max".into(),
            log_space: d.log_space,
            window: d.window,
        }
    }
}

/// Engine settings as written in a config file. The input width comes from
/// the dataset and the seed from the repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineJson {
    pub mode: String,
    pub boundary_mode: String,
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub train_steps_per_task: usize,
    pub points_per_task: usize,
    pub selection: SelectionJson,
    pub detector: DetectorJson,
    pub sigma_w2: f64,
    pub inducing_jitter: f64,
    pub head_init_mean_sd: f64,
    pub head_init_scale: f64,
    pub quadrature_order: usize,
    pub mc_samples: usize,
    pub kl_subsample: Option<usize>,
    pub reservoir_size: usize,
    pub nominal_task_size: usize,
}

impl Default for EngineJson {
    fn default() -> Self {
        let d = EngineConfig::split_mnist();
        Self {
            mode: "frcl".into(),
            boundary_mode: "known".into(),
            hidden_layers: d.layer_sizes[1..].to_vec(),
            learning_rate: d.adam.learning_rate,
            beta1: d.adam.beta1,
            beta2: d.adam.beta2,
            epsilon: d.adam.epsilon,
            batch_size: d.batch_size,
            train_steps_per_task: d.train_steps_per_task,
            points_per_task: d.points_per_task,
            selection: SelectionJson::default(),
            detector: DetectorJson::default(),
            sigma_w2: d.sigma_w2,
            inducing_jitter: d.inducing_jitter,
            head_init_mean_sd: d.head_init_mean_sd,
            head_init_scale: d.head_init_scale,
            quadrature_order: d.quadrature_order,
            mc_samples: d.mc_samples,
            kl_subsample: d.kl_subsample,
            reservoir_size: d.reservoir_size,
            nominal_task_size: d.nominal_task_size,
        }
    }
}

impl EngineJson {
    pub fn to_engine(&self, input_dim: usize, seed: u64) -> Result<EngineConfig> {
        let bad = |m: String| BenchError::Config(m);
        let mode = match self.mode.as_str() {
            "frcl" => Mode::Frcl,
            "baseline" => Mode::Baseline,
            m => return Err(bad(format!("unknown mode {m:?}"))),
        };
        let boundary_mode = match self.boundary_mode.as_str() {
            "known" => BoundaryMode::Known,
            "detected" => BoundaryMode::Detected,
            m => return Err(bad(format!("unknown boundary_mode {m:?}"))),
        };
        let criterion: Criterion = self.selection.criterion.parse()?;
        let aggregation: Aggregation = self.detector.aggregation.parse()?;
        let mut layer_sizes = vec![input_dim];
        layer_sizes.extend(&self.hidden_layers);
        let cfg = EngineConfig {
            mode,
            boundary_mode,
            layer_sizes,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            batch_size: self.batch_size,
            train_steps_per_task: self.train_steps_per_task,
            points_per_task: self.points_per_task,
            selection: SelectionSettings {
                criterion,
                search_steps: self.selection.search_steps,
                eval_cap: self.selection.eval_cap,
                class_balanced_init: self.selection.class_balanced_init,
            },
            detector: DetectorConfig {
                threshold: self.detector.threshold,
                min_time_in: self.detector.min_time_in,
                cooldown: self.detector.cooldown,
                aggregation,
                log_space: self.detector.log_space,
                window: self.detector.window,
            },
            sigma_w2: self.sigma_w2,
            inducing_jitter: self.inducing_jitter,
            head_init_mean_sd: self.head_init_mean_sd,
            head_init_scale: self.head_init_scale,
            quadrature_order: self.quadrature_order,
            mc_samples: self.mc_samples,
            kl_subsample: self.kl_subsample,
            reservoir_size: self.reservoir_size,
            nominal_task_size: self.nominal_task_size,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    /// Directory with the four MNIST IDX files.
    pub data_dir: Option<PathBuf>,
    pub permuted_tasks: usize,
    pub blobs: BlobsConfig,
    pub engine: EngineJson,
    pub repetitions: usize,
    /// Seed of the first repetition; repetition `r` uses `seed + r`.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Evaluate every seen task after each task (known boundaries only).
    pub evaluate_each_task: bool,
    /// Write engine checkpoints next to the metrics.
    pub checkpoint: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::SplitMnist,
            data_dir: None,
            permuted_tasks: 10,
            blobs: BlobsConfig::default(),
            engine: EngineJson::default(),
            repetitions: 1,
            seed: 0,
            output_dir: PathBuf::from("results"),
            evaluate_each_task: true,
            checkpoint: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| BenchError::Json { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text, path)
    }

    pub fn mnist_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(MNIST_DIR_VAR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }

    /// Checks everything that can be checked before any data is loaded.
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(BenchError::Config("repetitions must be at least 1".into()));
        }
        let input_dim = match self.dataset {
            Dataset::Blobs => self.blobs.dims.max(1),
            _ => 784,
        };
        let engine = self.engine.to_engine(input_dim, self.seed)?;
        match self.dataset {
            Dataset::Blobs => {}
            Dataset::PermutedMnist if self.permuted_tasks == 0 => {
                return Err(BenchError::Config("permuted_tasks must be at least 1".into()))
            }
            _ => {
                let dir = self.mnist_dir();
                for f in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
                    let p = dir.join(f);
                    std::fs::metadata(&p).map_err(io_err(p))?;
                }
            }
        }
        if engine.boundary_mode == BoundaryMode::Detected && self.dataset == Dataset::Blobs && self.blobs.classes < 2 {
            return Err(BenchError::Config("blobs need at least two classes".into()));
        }
        Ok(())
    }
}
