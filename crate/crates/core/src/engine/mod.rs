//! The continual-learning driver: trains the shared network task by task,
//! turns every finished task into a summary (or a replay buffer for the
//! baseline), and evaluates all tasks seen so far.

mod baseline;
mod checkpoint;

pub use baseline::{cross_entropy, predict_class, ReplayBuffer};
pub use checkpoint::{read_manifest, Manifest};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boundary::{surprise_from_features, DetectorConfig, DetectorState};
use crate::error::{FrclError, Result};
use crate::feature_net::FeatureNet;
use crate::inducing::{select, Criterion, SelectionConfig, TaskData};
use crate::kernel::{kernel_diag, KernelConfig};
use crate::likelihood::Likelihood;
use crate::numerics::{gauss_hermite, Matrix, QuadratureRule};
use crate::objective::{assemble_objective, Batch, ObjectiveContext, TRAIN_MC_SAMPLES};
use crate::optim::{AdamConfig, AdamGroup};
use crate::posterior::WeightPosterior;
use crate::scalar::Scalar;
use crate::summary::{argmax, distill, predict_with, TaskSummary, PREDICT_MC_SAMPLES};

/// Default [`EngineConfig::inducing_jitter`]. `K_Z` is singular whenever
/// there are more inducing inputs than features, and then the functional KL
/// charges `δ²/ε` for any drift of the stored means out of the span of `Φ_Z`.
pub const DEFAULT_INDUCING_JITTER: f64 = 1e-2;

/// Default [`EngineConfig::head_init_mean_sd`]: the prior weight scale. Much
/// smaller means leave the predictive variance as the only early signal on
/// the features, which then shrink until every ReLU is dead.
pub const DEFAULT_HEAD_MEAN_SD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Frcl,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryMode {
    Known,
    Detected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionSettings {
    pub criterion: Criterion,
    pub search_steps: usize,
    pub eval_cap: usize,
    /// `None` balances classes for multi-class tasks only.
    pub class_balanced_init: Option<bool>,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        Self {
            criterion: Criterion::Trace,
            search_steps: 1000,
            eval_cap: 2000,
            class_balanced_init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub mode: Mode,
    pub boundary_mode: BoundaryMode,
    /// Input width followed by the hidden widths; the last is the feature width.
    pub layer_sizes: Vec<usize>,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub train_steps_per_task: usize,
    /// Inducing inputs per task (frcl) or buffer size per task (baseline).
    pub points_per_task: usize,
    pub selection: SelectionSettings,
    pub detector: DetectorConfig,
    pub sigma_w2: f64,
    /// Diagonal added to inducing Gram matrices and distilled covariances.
    pub inducing_jitter: f64,
    /// Standard deviation of the initial head means.
    pub head_init_mean_sd: f64,
    /// Initial head covariance factor, as a multiple of the identity.
    pub head_init_scale: f64,
    pub quadrature_order: usize,
    pub mc_samples: usize,
    /// Summaries whose KL is evaluated per step; `None` evaluates all.
    pub kl_subsample: Option<usize>,
    /// Capacity of the reservoir of seen inputs used for selection when
    /// boundaries are detected.
    pub reservoir_size: usize,
    /// Task size used to scale the likelihood when boundaries are detected
    /// and the true size is unknown.
    pub nominal_task_size: usize,
    pub seed: u64,
}

impl EngineConfig {
    /// The hyperparameters used for Split-MNIST.
    pub fn split_mnist() -> Self {
        Self {
            mode: Mode::Frcl,
            boundary_mode: BoundaryMode::Known,
            layer_sizes: vec![784, 256, 256],
            adam: AdamConfig {
                learning_rate: 5e-4,
                ..AdamConfig::default()
            },
            batch_size: 100,
            train_steps_per_task: 3000,
            points_per_task: 40,
            selection: SelectionSettings::default(),
            detector: DetectorConfig::default(),
            sigma_w2: 1.0,
            inducing_jitter: DEFAULT_INDUCING_JITTER,
            head_init_mean_sd: DEFAULT_HEAD_MEAN_SD,
            head_init_scale: 1.0,
            quadrature_order: 20,
            mc_samples: TRAIN_MC_SAMPLES,
            kl_subsample: None,
            reservoir_size: 5000,
            nominal_task_size: 12000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FrclError::InvalidConfig(m.to_string()));
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return bad("layer_sizes needs an input width and at least one nonzero layer");
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0
            || self.train_steps_per_task == 0
            || self.points_per_task == 0
            || self.mc_samples == 0
            || self.reservoir_size == 0
            || self.nominal_task_size == 0
        {
            return bad("counts must be at least 1");
        }
        if !(self.head_init_mean_sd >= 0.0 && self.head_init_mean_sd.is_finite()) || !(self.head_init_scale > 0.0 && self.head_init_scale.is_finite()) {
            return bad("head initialisation needs a finite mean sd and a positive scale");
        }
        if self.kl_subsample == Some(0) {
            return bad("kl_subsample must be at least 1");
        }
        if self.mode == Mode::Baseline && self.boundary_mode == BoundaryMode::Detected {
            return bad("the replay baseline needs known task boundaries");
        }
        KernelConfig::new(self.sigma_w2)?.with_inducing_jitter(self.inducing_jitter)?;
        gauss_hermite::<f64>(self.quadrature_order)?;
        self.detector.validate()
    }
}

/// What the engine reports while it runs.
#[derive(Clone, Debug, PartialEq)]
pub enum EngineEvent {
    Step {
        step: u64,
        task_id: usize,
        /// ELBO (frcl) or negative total loss (baseline).
        objective: f64,
        expected_loglik: f64,
        kl_current: f64,
        kl_regularisers: f64,
        /// Detector statistic, when boundaries are detected.
        statistic: Option<f64>,
    },
    Detection {
        step: u64,
        /// Task that starts with this batch.
        task_id: usize,
        statistic: f64,
    },
    TaskEnd {
        step: u64,
        task_id: usize,
        /// Inducing-set score (frcl) or 0 (baseline).
        selection_score: f64,
        points: usize,
        train_size: usize,
        /// Labels of the retained inputs (inducing inputs or buffer).
        retained_labels: Vec<usize>,
    },
}

struct CurrentHead<T> {
    task_id: usize,
    q: WeightPosterior<T>,
    adam: AdamGroup<T>,
    likelihood: Likelihood,
}

struct BaselineTask<T> {
    w: Matrix<T>,
    adam: AdamGroup<T>,
    likelihood: Likelihood,
    buffer: Option<ReplayBuffer<T>>,
}

/// Uniform sample of everything seen since the last task switch.
struct Reservoir<T> {
    capacity: usize,
    rows: Vec<Vec<T>>,
    labels: Vec<usize>,
    seen: usize,
}

impl<T: Scalar> Reservoir<T> {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            rows: Vec::new(),
            labels: Vec::new(),
            seen: 0,
        }
    }

    fn push(&mut self, rng: &mut ChaCha8Rng, x: &[T], y: usize) {
        self.seen += 1;
        if self.rows.len() < self.capacity {
            self.rows.push(x.to_vec());
            self.labels.push(y);
        } else {
            let j = rng.random_range(0..self.seen);
            if j < self.capacity {
                self.rows[j] = x.to_vec();
                self.labels[j] = y;
            }
        }
    }

    fn take(&mut self) -> Option<(Matrix<T>, Vec<usize>)> {
        if self.rows.is_empty() {
            return None;
        }
        let x = Matrix::from_rows(&self.rows).ok()?;
        let labels = std::mem::take(&mut self.labels);
        self.rows.clear();
        self.seen = 0;
        Some((x, labels))
    }
}

/// splitmix64 finaliser, used to derive independent sub-seeds.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SALT_HEAD: u64 = 1;
const SALT_STEP: u64 = 2;
const SALT_SELECT: u64 = 3;
const SALT_BUFFER: u64 = 4;
const SALT_EVAL: u64 = 5;

pub struct Engine<T> {
    cfg: EngineConfig,
    kernel: KernelConfig<T>,
    rule: QuadratureRule<T>,
    net: FeatureNet<T>,
    theta_adam: AdamGroup<T>,
    current: Option<CurrentHead<T>>,
    summaries: Vec<TaskSummary<T>>,
    baseline: Vec<BaselineTask<T>>,
    step: u64,
    tasks_started: usize,
    rng: ChaCha8Rng,
    detector: Option<DetectorState<T>>,
    reservoir: Reservoir<T>,
}

impl<T: Scalar> Engine<T> {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let net = FeatureNet::init(&cfg.layer_sizes, cfg.seed)?;
        let detector = match cfg.boundary_mode {
            BoundaryMode::Detected => Some(DetectorState::new(cfg.detector.clone())?),
            BoundaryMode::Known => None,
        };
        Ok(Self {
            kernel: KernelConfig::new(T::of(cfg.sigma_w2))?.with_inducing_jitter(T::of(cfg.inducing_jitter))?,
            rule: gauss_hermite(cfg.quadrature_order)?,
            theta_adam: AdamGroup::new(net.param_count()),
            net,
            current: None,
            summaries: Vec::new(),
            baseline: Vec::new(),
            step: 0,
            tasks_started: 0,
            rng: ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0, 0)),
            detector,
            reservoir: Reservoir::new(cfg.reservoir_size),
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn net(&self) -> &FeatureNet<T> {
        &self.net
    }

    pub fn kernel(&self) -> &KernelConfig<T> {
        &self.kernel
    }

    pub fn summaries(&self) -> &[TaskSummary<T>] {
        &self.summaries
    }

    pub fn replay_buffers(&self) -> impl Iterator<Item = &ReplayBuffer<T>> {
        self.baseline.iter().filter_map(|b| b.buffer.as_ref())
    }

    /// Heads still held in memory: at most one (the current task) in frcl
    /// mode, one per task for the baseline.
    pub fn live_heads(&self) -> usize {
        usize::from(self.current.is_some()) + self.baseline.len()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn task_count(&self) -> usize {
        match self.cfg.mode {
            Mode::Frcl => self.summaries.len(),
            Mode::Baseline => self.baseline.len(),
        }
    }

    fn start_head(&mut self, likelihood: Likelihood) {
        let task_id = self.tasks_started;
        self.tasks_started += 1;
        let seed = mix(self.cfg.seed, SALT_HEAD, task_id as u64);
        let k = self.net.feature_dim();
        match self.cfg.mode {
            Mode::Frcl => {
                let q = WeightPosterior::init_with(
                    k,
                    likelihood.function_count(),
                    self.cfg.head_init_mean_sd,
                    self.cfg.head_init_scale,
                    seed,
                );
                self.current = Some(CurrentHead {
                    task_id,
                    adam: AdamGroup::new(q.param_count()),
                    q,
                    likelihood,
                });
            }
            Mode::Baseline => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, self.cfg.head_init_mean_sd).expect("validated sd");
                let f = likelihood.function_count();
                let w = Matrix::from_fn(k, f, |_, _| T::of(normal.sample(&mut rng)));
                self.baseline.push(BaselineTask {
                    adam: AdamGroup::new(k * f),
                    w,
                    likelihood,
                    buffer: None,
                });
            }
        }
    }

    fn theta_step(&mut self, ascent: &[T]) -> Result<()> {
        let mut p = self.net.param_vec();
        let g: Vec<T> = ascent.iter().map(|&v| -v).collect();
        self.theta_adam.step(&self.cfg.adam, &mut p, &g);
        self.net.set_param_vec(&p)
    }

    /// One Adam step of the frcl objective on the current head.
    fn frcl_step(
        &mut self,
        x: &Matrix<T>,
        labels: &[usize],
        data_size: usize,
    ) -> Result<(f64, f64, f64, f64)> {
        let head = self.current.as_ref().expect("a head is active");
        let ctx = ObjectiveContext {
            kernel: self.kernel,
            likelihood: head.likelihood,
            rule: &self.rule,
            data_size,
            subsample: self.cfg.kl_subsample,
            mc_samples: self.cfg.mc_samples,
            step: self.step,
        };
        let seed = mix(self.cfg.seed, SALT_STEP, self.step);
        let r = assemble_objective(&self.net, &head.q, Batch { x, labels }, &self.summaries, &ctx, seed)?;
        let out = (
            r.elbo.as_f64(),
            r.expected_loglik.as_f64(),
            r.kl_current.as_f64(),
            r.kl_regulariser_total().as_f64(),
        );
        self.theta_step(&r.theta_grad.to_vec())?;
        let head = self.current.as_mut().expect("a head is active");
        let mut p = head.q.to_vec();
        let g: Vec<T> = r.head_grad.to_vec().iter().map(|&v| -v).collect();
        head.adam.step(&self.cfg.adam, &mut p, &g);
        head.q.set_from_vec(&p)?;
        Ok(out)
    }

    /// Total baseline loss on a minibatch of the newest task plus every
    /// stored buffer, with its gradients; returns `(loss, dθ, dW per task)`.
    pub fn baseline_loss(
        &self,
        x: &Matrix<T>,
        labels: &[usize],
        data_size: usize,
    ) -> Result<(T, Vec<T>, Vec<Matrix<T>>)> {
        let cur = self.baseline.len().checked_sub(1).ok_or(FrclError::UnknownTask(0))?;
        let mut parts = vec![x];
        let mut spans = vec![(cur, x.rows(), T::of(data_size as f64 / x.rows() as f64))];
        for (i, t) in self.baseline.iter().enumerate().take(cur) {
            let b = t.buffer.as_ref().expect("finished tasks keep a buffer");
            parts.push(&b.x);
            spans.push((i, b.len(), T::of(b.weight())));
        }
        let stacked = Matrix::vstack(&parts)?;
        let pass = self.net.forward_pass(&stacked)?;
        let phi = pass.output();
        let mut cot = Matrix::zeros(phi.rows(), phi.cols());
        let mut dws: Vec<Matrix<T>> = self.baseline.iter().map(|t| Matrix::zeros(t.w.rows(), t.w.cols())).collect();
        let mut total = T::zero();
        let mut row = 0;
        for (k, &(task, n, scale)) in spans.iter().enumerate() {
            let t = &self.baseline[task];
            let lab: &[usize] = if k == 0 { labels } else { &t.buffer.as_ref().unwrap().labels };
            let (l, dw, dphi) = cross_entropy(t.likelihood, &t.w, &phi.slice_rows(row, row + n), lab, scale)?;
            total += l;
            dws[task] = dw;
            for r in 0..n {
                cot.row_mut(row + r).copy_from_slice(dphi.row(r));
            }
            row += n;
        }
        let dtheta = self.net.backward_cached(&pass, &cot)?.to_vec();
        Ok((total, dtheta, dws))
    }

    fn baseline_step(&mut self, x: &Matrix<T>, labels: &[usize], data_size: usize) -> Result<f64> {
        let (loss, dtheta, dws) = self.baseline_loss(x, labels, data_size)?;
        if !loss.is_finite() || dtheta.iter().any(|v| !v.is_finite()) {
            return Err(FrclError::NonFiniteObjective {
                step: self.step,
                detail: format!("baseline loss {loss:e}"),
            });
        }
        let mut p = self.net.param_vec();
        self.theta_adam.step(&self.cfg.adam, &mut p, &dtheta);
        self.net.set_param_vec(&p)?;
        for (t, dw) in self.baseline.iter_mut().zip(dws) {
            let mut w = t.w.data().to_vec();
            t.adam.step(&self.cfg.adam, &mut w, dw.data());
            t.w.data_mut().copy_from_slice(&w);
        }
        Ok(-loss.as_f64())
    }

    fn minibatch(&mut self, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size.min(n);
        sample(&mut self.rng, n, b).into_vec()
    }

    fn check_task(&self, data: &TaskData<'_, T>) -> Result<()> {
        if data.x.rows() == 0 {
            return Err(FrclError::EmptyBatch);
        }
        if data.x.cols() != self.net.input_dim() || data.labels.len() != data.x.rows() {
            return Err(FrclError::InvalidConfig(format!(
                "task data is {}x{} with {} labels, network expects width {}",
                data.x.rows(),
                data.x.cols(),
                data.labels.len(),
                self.net.input_dim()
            )));
        }
        data.labels.iter().try_for_each(|&y| data.likelihood.check_label(y))
    }

    /// Trains a fresh head on one task with its boundary known, then stores
    /// the task's summary (frcl) or replay buffer (baseline).
    pub fn run_task_known(
        &mut self,
        data: TaskData<'_, T>,
        observer: &mut dyn FnMut(&EngineEvent),
    ) -> Result<()> {
        self.check_task(&data)?;
        self.start_head(data.likelihood);
        let n = data.x.rows();
        let task_id = self.tasks_started - 1;
        for _ in 0..self.cfg.train_steps_per_task {
            let idx = self.minibatch(n);
            let xb = data.x.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (objective, ell, klc, klr) = match self.cfg.mode {
                Mode::Frcl => self.frcl_step(&xb, &yb, n)?,
                Mode::Baseline => (self.baseline_step(&xb, &yb, n)?, f64::NAN, 0.0, 0.0),
            };
            observer(&EngineEvent::Step {
                step: self.step,
                task_id,
                objective,
                expected_loglik: ell,
                kl_current: klc,
                kl_regularisers: klr,
                statistic: None,
            });
            self.step += 1;
        }
        let (score, retained_labels) = self.finish_task(data)?;
        observer(&EngineEvent::TaskEnd {
            step: self.step,
            task_id,
            selection_score: score,
            points: retained_labels.len(),
            train_size: n,
            retained_labels,
        });
        Ok(())
    }

    /// Selection and distillation (frcl) or buffer sampling (baseline).
    fn finish_task(&mut self, data: TaskData<'_, T>) -> Result<(f64, Vec<usize>)> {
        let n = data.x.rows();
        let m = self.cfg.points_per_task.min(n);
        match self.cfg.mode {
            Mode::Frcl => {
                let head = self.current.take().expect("a head is active");
                let s = &self.cfg.selection;
                let sel_cfg = SelectionConfig {
                    criterion: s.criterion,
                    m,
                    search_steps: s.search_steps,
                    eval_cap: s.eval_cap,
                    seed: mix(self.cfg.seed, SALT_SELECT, head.task_id as u64),
                    class_balanced_init: s
                        .class_balanced_init
                        .unwrap_or(data.likelihood.class_count() > 2),
                };
                let result = select(&sel_cfg, data, &head.q, &self.net, &self.kernel, &self.rule)?;
                let z = data.x.select_rows(&result.indices);
                let summary = distill(&head.q, &z, &self.net, &self.kernel, head.likelihood, head.task_id)?;
                log::info!(
                    "task {} summarised with {} points (score {:.4e} -> {:.4e}, {} swaps)",
                    head.task_id,
                    m,
                    result.initial_score.as_f64(),
                    result.final_score.as_f64(),
                    result.score_trace.len()
                );
                self.summaries.push(summary);
                let labels = result.indices.iter().map(|&i| data.labels[i]).collect();
                Ok((result.final_score.as_f64(), labels))
            }
            Mode::Baseline => {
                let task_id = self.baseline.len() - 1;
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, SALT_BUFFER, task_id as u64));
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
                self.baseline[task_id].buffer = Some(ReplayBuffer {
                    x: data.x.select_rows(&idx),
                    labels: labels.clone(),
                    task_size: n,
                });
                Ok((0.0, labels))
            }
        }
    }

    /// Trains on an unlabelled-boundary stream of minibatches, starting a new
    /// task whenever the detector fires; the last task is summarised when the
    /// stream ends.
    pub fn run_stream_detected<I>(
        &mut self,
        batches: I,
        likelihood: Likelihood,
        observer: &mut dyn FnMut(&EngineEvent),
    ) -> Result<()>
    where
        I: IntoIterator<Item = (Matrix<T>, Vec<usize>)>,
    {
        if self.cfg.mode != Mode::Frcl || self.detector.is_none() {
            return Err(FrclError::InvalidConfig("detected boundaries need frcl mode and a detector".into()));
        }
        if self.current.is_none() {
            self.start_head(likelihood);
            self.detector.as_mut().unwrap().reset_task();
        }
        for (x, labels) in batches {
            if x.rows() == 0 {
                return Err(FrclError::EmptyBatch);
            }
            labels.iter().try_for_each(|&y| likelihood.check_label(y))?;
            // surprise is measured before the batch touches any parameter
            let phi = self.net.forward(&x)?;
            let prior = kernel_diag(&self.kernel, &phi);
            let keep: Vec<usize> = (0..phi.rows()).filter(|&i| prior[i] > T::of(crate::boundary::PRIOR_FLOOR)).collect();
            let decision = if keep.len() >= 2 {
                let head = self.current.as_ref().unwrap();
                let scores = surprise_from_features(&head.q, &self.kernel, &phi.select_rows(&keep))?;
                Some(self.detector.as_mut().unwrap().step(&scores)?)
            } else {
                log::debug!("step {}: too few inputs with nonzero features to score", self.step);
                None
            };
            let statistic = decision.and_then(|d| d.statistic).map(|t| t.as_f64());
            if decision.is_some_and(|d| d.detected) {
                self.flush_detected()?;
                self.start_head(likelihood);
                observer(&EngineEvent::Detection {
                    step: self.step,
                    task_id: self.tasks_started - 1,
                    statistic: statistic.unwrap_or(f64::NAN),
                });
            }
            for (i, &y) in labels.iter().enumerate() {
                self.reservoir.push(&mut self.rng, x.row(i), y);
            }
            let (objective, ell, klc, klr) = self.frcl_step(&x, &labels, self.cfg.nominal_task_size)?;
            observer(&EngineEvent::Step {
                step: self.step,
                task_id: self.tasks_started - 1,
                objective,
                expected_loglik: ell,
                kl_current: klc,
                kl_regularisers: klr,
                statistic,
            });
            self.step += 1;
        }
        let task_id = self.tasks_started - 1;
        let (score, train_size, retained_labels) = self.flush_detected()?;
        observer(&EngineEvent::TaskEnd {
            step: self.step,
            task_id,
            selection_score: score,
            points: retained_labels.len(),
            train_size,
            retained_labels,
        });
        Ok(())
    }

    /// Summarises the task in progress from the reservoir; returns the
    /// selection score, the number of inputs seen and the retained labels.
    fn flush_detected(&mut self) -> Result<(f64, usize, Vec<usize>)> {
        let likelihood = self.current.as_ref().expect("a head is active").likelihood;
        let seen = self.reservoir.seen;
        match self.reservoir.take() {
            Some((x, labels)) => {
                let data = TaskData { x: &x, labels: &labels, likelihood };
                let (score, labels) = self.finish_task(data)?;
                Ok((score, seen, labels))
            }
            None => {
                self.current = None;
                Ok((0.0, 0, Vec::new()))
            }
        }
    }

    /// Accuracy on each evaluation set under the current network; `sets[i]`
    /// belongs to task `i`.
    pub fn evaluate(&self, sets: &[TaskData<'_, T>]) -> Result<Vec<f64>> {
        sets.iter()
            .enumerate()
            .map(|(i, d)| self.evaluate_task(i, d))
            .collect()
    }

    /// Accuracy of task `task` on `data`; NaN for an empty set.
    pub fn evaluate_task(&self, task: usize, data: &TaskData<'_, T>) -> Result<f64> {
        let n = data.x.rows();
        if n == 0 {
            return Ok(f64::NAN);
        }
        let correct = match self.cfg.mode {
            Mode::Frcl => {
                let s = self
                    .summaries
                    .iter()
                    .find(|s| s.task_id() == task)
                    .ok_or(FrclError::UnknownTask(task))?;
                let seed = mix(self.cfg.seed, SALT_EVAL, task as u64);
                let mut correct = 0;
                // chunks bound the size of the cross-kernel
                for start in (0..n).step_by(2000) {
                    let end = (start + 2000).min(n);
                    let xs = data.x.slice_rows(start, end);
                    let preds = predict_with(s, &xs, &self.net, &self.kernel, &self.rule, PREDICT_MC_SAMPLES, seed ^ start as u64)?;
                    correct += preds
                        .iter()
                        .zip(&data.labels[start..end])
                        .filter(|(p, &y)| argmax(&p.class_probabilities) == y)
                        .count();
                }
                correct
            }
            Mode::Baseline => {
                let t = self.baseline.get(task).ok_or(FrclError::UnknownTask(task))?;
                let logits = self.net.forward(data.x)?.matmul(&t.w)?;
                logits
                    .row_iter()
                    .zip(data.labels)
                    .filter(|(f, &y)| predict_class(t.likelihood, f) == y)
                    .count()
            }
        };
        Ok(correct as f64 / n as f64)
    }
}
