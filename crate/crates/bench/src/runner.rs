//! Runs an experiment: one metrics stream per seed and a summary over seeds.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use frcl_core::engine::{BoundaryMode, EngineEvent, Mode};
use frcl_core::inducing::TaskData;
use frcl_core::Engine;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Dataset, ExperimentConfig};
use crate::error::{io_err, BenchError, Result};
use crate::idx::load_mnist;
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::scoring::{score_boundaries, BoundaryScore, DEFAULT_TOLERANCE};
use crate::streams::{make_blobs, make_permuted_mnist, make_split_mnist, MnistData, Part, TaskStream};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Replaces the configured first seed.
    pub seed: Option<u64>,
    /// Train on training plus validation images and test on the test file.
    pub final_protocol: bool,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracies: Vec<Option<f64>>,
    pub mean_accuracy: Option<f64>,
    pub detections: Vec<u64>,
    pub boundary: Option<BoundaryScore>,
    /// Distinct labels among the retained inputs of each task.
    pub class_coverage: Vec<usize>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub dataset: Dataset,
    pub mode: String,
    pub boundary_mode: String,
    pub criterion: String,
    pub points_per_task: usize,
    pub final_protocol: bool,
    pub repetitions: usize,
    pub seeds: Vec<u64>,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub precision_mean: Option<f64>,
    pub recall_mean: Option<f64>,
    pub f1_mean: Option<f64>,
    pub runs: Vec<SeedResult>,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = v.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean_std(&v).0)
}

/// Builds the task stream for one repetition.
pub fn build_stream(cfg: &ExperimentConfig, mnist: Option<&MnistData>, seed: u64) -> Result<TaskStream> {
    match cfg.dataset {
        Dataset::SplitMnist => Ok(make_split_mnist(mnist.expect("MNIST loaded"))),
        Dataset::PermutedMnist => Ok(make_permuted_mnist(mnist.expect("MNIST loaded"), cfg.permuted_tasks, seed)),
        Dataset::Blobs => {
            let b = &cfg.blobs;
            make_blobs(b.task_count, b.classes, b.dims, b.separation, b.points_per_task, seed)
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mnist = match cfg.dataset {
        Dataset::Blobs => None,
        _ => {
            let (train, test) = load_mnist(&cfg.mnist_dir())?;
            Some(MnistData::new(train, test, opts.final_protocol)?)
        }
    };
    let first = opts.seed.unwrap_or(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.repetitions as u64).map(|r| first + r).collect();
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let stream = build_stream(cfg, mnist.as_ref(), seed)?;
        log::info!("seed {seed}: {} tasks of {}", stream.len(), stream.name(0));
        runs.push(run_seed(cfg, &stream, seed, &out_dir)?);
    }
    let summary = summarise(cfg, opts.final_protocol, seeds, runs);
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|source| BenchError::Json { path: path.clone(), source })?;
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(summary)
}

fn summarise(cfg: &ExperimentConfig, final_protocol: bool, seeds: Vec<u64>, runs: Vec<SeedResult>) -> ExperimentSummary {
    let accs: Option<Vec<f64>> = runs.iter().map(|r| r.mean_accuracy).collect();
    let (accuracy_mean, accuracy_std) = match accs {
        Some(a) if !a.is_empty() => {
            let (m, s) = mean_std(&a);
            (Some(m), Some(s))
        }
        _ => (None, None),
    };
    let score = |f: fn(&BoundaryScore) -> f64| mean_of(runs.iter().map(|r| r.boundary.as_ref().map(f)));
    ExperimentSummary {
        dataset: cfg.dataset,
        mode: cfg.engine.mode.clone(),
        boundary_mode: cfg.engine.boundary_mode.clone(),
        criterion: cfg.engine.selection.criterion.clone(),
        points_per_task: cfg.engine.points_per_task,
        final_protocol,
        repetitions: runs.len(),
        seeds,
        accuracy_mean,
        accuracy_std,
        precision_mean: score(|b| b.precision),
        recall_mean: score(|b| b.recall),
        f1_mean: score(|b| b.f1),
        runs,
    }
}

fn wall_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

struct Recorder {
    writer: MetricsWriter,
    start: Instant,
    detected: bool,
    task_ends: Vec<EngineEvent>,
    /// Task end waiting for its evaluation (known boundaries).
    pending: Option<EngineEvent>,
    detections: Vec<u64>,
    error: Option<BenchError>,
}

impl Recorder {
    fn on_event(&mut self, e: &EngineEvent) {
        let r = match *e {
            EngineEvent::Step { step, task_id, objective, expected_loglik, kl_current, kl_regularisers, statistic } => {
                if step % 500 == 0 {
                    log::info!("step {step} task {task_id}: objective {objective:.3} (ell {expected_loglik:.3}, kl {kl_current:.3}, reg {kl_regularisers:.3})");
                }
                MetricsRecord::Step {
                    step,
                    task_id,
                    objective,
                    expected_loglik: expected_loglik.is_finite().then_some(expected_loglik),
                    kl_current,
                    kl_regularisers,
                    statistic,
                    wall_ms: wall_ms(self.start),
                }
            }
            EngineEvent::Detection { step, task_id, statistic } => {
                log::info!("step {step}: boundary detected (statistic {statistic:.2}), task {task_id} begins");
                self.detections.push(step);
                MetricsRecord::Detection {
                    step,
                    task_id,
                    statistic: statistic.is_finite().then_some(statistic),
                    wall_ms: wall_ms(self.start),
                }
            }
            EngineEvent::TaskEnd { .. } => {
                self.task_ends.push(e.clone());
                if self.detected {
                    if let Err(err) = self.write_task_end(e, Vec::new()) {
                        self.error.get_or_insert(err);
                    }
                } else {
                    self.pending = Some(e.clone());
                }
                return;
            }
        };
        if let Err(err) = self.writer.write(&r) {
            self.error.get_or_insert(err);
        }
    }

    fn check(&mut self) -> Result<()> {
        self.error.take().map_or(Ok(()), Err)
    }

    fn write_task_end(&mut self, e: &EngineEvent, accuracies: Vec<Option<f64>>) -> Result<()> {
        if let EngineEvent::TaskEnd { step, task_id, selection_score, points, train_size, retained_labels } = e {
            self.writer.write(&MetricsRecord::TaskEnd {
                step: *step,
                task_id: *task_id,
                selection_score: *selection_score,
                points: *points,
                train_size: *train_size,
                retained_labels: retained_labels.clone(),
                accuracies,
                wall_ms: wall_ms(self.start),
            })?;
        }
        Ok(())
    }
}

fn evaluate(engine: &Engine, stream: &TaskStream, tasks: usize) -> Result<Vec<Option<f64>>> {
    (0..tasks)
        .map(|t| {
            let set = stream.part(t, Part::Test);
            let data = TaskData { x: &set.x, labels: &set.labels, likelihood: stream.likelihood(t) };
            let acc = engine.evaluate_task(t, &data)?;
            Ok(acc.is_finite().then_some(acc))
        })
        .collect()
}

/// Trains one repetition and writes its metrics stream.
pub fn run_seed(cfg: &ExperimentConfig, stream: &TaskStream, seed: u64, out_dir: &Path) -> Result<SeedResult> {
    let start = Instant::now();
    let engine_cfg = cfg.engine.to_engine(stream.input_dim(), seed)?;
    let steps_per_task = engine_cfg.train_steps_per_task;
    let batch_size = engine_cfg.batch_size;
    let detected = engine_cfg.boundary_mode == BoundaryMode::Detected;
    let mode = engine_cfg.mode;
    let mut engine = Engine::new(engine_cfg)?;
    let mut rec = Recorder {
        writer: MetricsWriter::create(&out_dir.join(format!("metrics_seed{seed}.jsonl")))?,
        start,
        detected,
        task_ends: Vec::new(),
        pending: None,
        detections: Vec::new(),
        error: None,
    };
    if detected {
        let likelihood = stream.likelihood(0);
        if (1..stream.len()).any(|t| stream.likelihood(t) != likelihood) {
            return Err(BenchError::Config("detected boundaries need the same likelihood on every task".into()));
        }
        let batches = (0..stream.len()).flat_map(|t| {
            let n = stream.len_of(t, Part::Train);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ ((t as u64) << 32));
            (0..steps_per_task).map(move |_| {
                let idx = sample(&mut rng, n, batch_size.min(n)).into_vec();
                let set = stream.rows(t, Part::Train, &idx);
                (set.x, set.labels)
            })
        });
        engine.run_stream_detected(batches, likelihood, &mut |e| rec.on_event(e))?;
        rec.check()?;
    } else {
        for t in 0..stream.len() {
            let set = stream.part(t, Part::Train);
            let data = TaskData { x: &set.x, labels: &set.labels, likelihood: stream.likelihood(t) };
            engine.run_task_known(data, &mut |e| rec.on_event(e))?;
            drop(set);
            rec.check()?;
            let accuracies = if cfg.evaluate_each_task { evaluate(&engine, stream, t + 1)? } else { Vec::new() };
            if let Some(e) = rec.pending.take() {
                rec.write_task_end(&e, accuracies)?;
            }
        }
    }
    let Recorder { mut writer, task_ends, detections, .. } = rec;
    let class_coverage = task_ends
        .iter()
        .map(|e| match e {
            EngineEvent::TaskEnd { retained_labels, .. } => retained_labels.iter().collect::<BTreeSet<_>>().len(),
            _ => unreachable!("only task ends are kept"),
        })
        .collect();

    // accuracy is only meaningful when every true task got its own summary
    let accuracies = if engine.task_count() == stream.len() {
        evaluate(&engine, stream, stream.len())?
    } else {
        log::warn!("{} summaries for {} tasks; accuracy not evaluated", engine.task_count(), stream.len());
        vec![None; stream.len()]
    };
    let mean_accuracy = mean_of(accuracies.iter().copied());
    let true_boundaries = stream.true_boundaries(steps_per_task);
    let boundary = detected.then(|| score_boundaries(&true_boundaries, &detections, DEFAULT_TOLERANCE));
    writer.write(&MetricsRecord::Final {
        step: engine.step_count(),
        accuracies: accuracies.clone(),
        mean_accuracy,
        true_boundaries,
        detections: detections.clone(),
        boundary,
        wall_ms: wall_ms(start),
    })?;
    writer.finish()?;
    if cfg.checkpoint && mode == Mode::Frcl {
        engine.save_checkpoint(&out_dir.join(format!("checkpoint_seed{seed}")))?;
    }
    log::info!("seed {seed}: mean accuracy {mean_accuracy:?}, {} detections", detections.len());
    Ok(SeedResult {
        seed,
        accuracies,
        mean_accuracy,
        detections,
        boundary,
        class_coverage,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
