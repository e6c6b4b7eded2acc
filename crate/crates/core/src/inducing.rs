//! Choosing which training inputs become a task's inducing inputs: a random
//! start, refined by single-point swaps accepted only on strict improvement.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, FrclError, Result};
use crate::feature_net::FeatureNet;
use crate::kernel::{inducing_gram, kernel_diag, KernelConfig, KernelWorkspace};
use crate::likelihood::{expected_loglik_binary, expected_loglik_softmax, label_sign, Likelihood};
use crate::numerics::{cholesky, gemm, tri_solve, Matrix, Op, QuadratureRule, TriSide};
use crate::objective::kl_functional_features;
use crate::posterior::WeightPosterior;
use crate::scalar::Scalar;
use crate::summary::{argmax, assemble_predictions, distill_functions, latent_moments, TaskSummary};

const EVAL_MC_SAMPLES: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Random,
    /// Total Nyström reconstruction error over the task's inputs.
    Trace,
    /// Negated sparse-GP evidence lower bound.
    Elbo,
    /// Negative mean log predictive density on held-out training inputs.
    LogPredDensity,
    /// Error rate on held-out training inputs.
    ClassError,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Trace => "trace",
            Self::Elbo => "elbo",
            Self::LogPredDensity => "log_pred_density",
            Self::ClassError => "class_error",
        }
    }

    fn uses_holdout(&self) -> bool {
        matches!(self, Self::LogPredDensity | Self::ClassError)
    }
}

impl std::str::FromStr for Criterion {
    type Err = FrclError;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Random, Self::Trace, Self::Elbo, Self::LogPredDensity, Self::ClassError]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| FrclError::InvalidConfig(format!("unknown selection criterion {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionConfig {
    pub criterion: Criterion,
    pub m: usize,
    pub search_steps: usize,
    /// Most training points used to score one candidate set.
    pub eval_cap: usize,
    pub seed: u64,
    pub class_balanced_init: bool,
}

impl SelectionConfig {
    pub fn new(criterion: Criterion, m: usize, seed: u64) -> Self {
        Self {
            criterion,
            m,
            search_steps: 1000,
            eval_cap: 2000,
            seed,
            class_balanced_init: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult<T> {
    pub indices: Vec<usize>,
    pub initial_score: T,
    pub final_score: T,
    /// Score after each accepted swap.
    pub score_trace: Vec<T>,
}

/// A task's labelled training inputs.
#[derive(Clone, Copy, Debug)]
pub struct TaskData<'a, T> {
    pub x: &'a Matrix<T>,
    pub labels: &'a [usize],
    pub likelihood: Likelihood,
}

/// Precomputed, θ-fixed state for scoring many candidate sets.
pub struct Scorer<'a, T> {
    criterion: Criterion,
    labels: &'a [usize],
    likelihood: Likelihood,
    q: &'a WeightPosterior<T>,
    kernel: KernelConfig<T>,
    rule: &'a QuadratureRule<T>,
    phi: Matrix<T>,
    /// `Φ_Xᵀ Φ_X`, so the trace criterion never touches individual points.
    scatter: Matrix<T>,
    prior_trace: T,
    eval: Vec<usize>,
    seed: u64,
}

impl<'a, T: Scalar> Scorer<'a, T> {
    pub fn new(
        cfg: &SelectionConfig,
        data: TaskData<'a, T>,
        q: &'a WeightPosterior<T>,
        net: &FeatureNet<T>,
        kernel: &KernelConfig<T>,
        rule: &'a QuadratureRule<T>,
    ) -> Result<Self> {
        let n = data.x.rows();
        if data.labels.len() != n {
            return Err(dim_err("Scorer labels", n, data.labels.len()));
        }
        if cfg.m == 0 || cfg.m > n {
            return Err(FrclError::InvalidConfig(format!(
                "need 1 <= M <= N, got M = {} with N = {n}",
                cfg.m
            )));
        }
        let phi = net.forward(data.x)?;
        let mut scatter = Matrix::zeros(phi.cols(), phi.cols());
        gemm(T::one(), &phi, Op::T, &phi, Op::N, T::zero(), &mut scatter)?;
        let prior_trace = kernel.sigma_w2 * scatter.trace();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1_5eed);
        let mut eval = if n > cfg.eval_cap {
            sample(&mut rng, n, cfg.eval_cap).into_vec()
        } else {
            (0..n).collect()
        };
        eval.sort_unstable();
        Ok(Self {
            criterion: cfg.criterion,
            labels: data.labels,
            likelihood: data.likelihood,
            q,
            kernel: *kernel,
            rule,
            phi,
            scatter,
            prior_trace,
            eval,
            seed: cfg.seed,
        })
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.phi
    }

    /// Lower is better for every criterion.
    pub fn score(&self, indices: &[usize]) -> Result<T> {
        match self.criterion {
            Criterion::Random | Criterion::Trace => self.trace(indices),
            Criterion::Elbo => self.neg_elbo(indices),
            Criterion::LogPredDensity | Criterion::ClassError => self.holdout(indices),
        }
    }

    /// `σ² tr(S) − σ⁴ ⟨BᵀB, S⟩` with `B = L⁻¹Φ_Z`, `K_Z = LLᵀ`; `BᵀB` is
    /// a (scaled) projection, so this stays accurate when `K_Z` is
    /// ill-conditioned.
    fn trace(&self, indices: &[usize]) -> Result<T> {
        let phi_z = self.phi.select_rows(indices);
        let ws = KernelWorkspace::from_features(&self.kernel, phi_z)?;
        let b = tri_solve(ws.chol(), ws.phi_z(), TriSide::Lower)?;
        let btb = b.t_matmul(&b)?;
        let s2 = self.kernel.sigma_w2;
        let explained = s2 * s2 * btb.dot(&self.scatter);
        Ok((self.prior_trace - explained).max(T::zero()))
    }

    fn summary_at(&self, indices: &[usize]) -> Result<(KernelWorkspace<T>, TaskSummary<T>)> {
        let phi_z = self.phi.select_rows(indices);
        let functions = distill_functions(self.q, &phi_z, &self.kernel)?;
        let summary = TaskSummary::from_parts(0, phi_z.clone(), functions, self.likelihood)?;
        Ok((KernelWorkspace::from_features(&self.kernel, phi_z)?, summary))
    }

    fn neg_elbo(&self, indices: &[usize]) -> Result<T> {
        let (ws, summary) = self.summary_at(indices)?;
        let phi_e = self.phi.select_rows(&self.eval);
        let mom = latent_moments(summary.functions(), &ws, &self.kernel, &phi_e)?;
        let mut ell = T::zero();
        for (j, &i) in self.eval.iter().enumerate() {
            let y = self.labels[i];
            ell += match self.likelihood {
                Likelihood::BernoulliLogit => {
                    expected_loglik_binary(mom.mean[0][j], mom.variance[0][j], label_sign(y), self.rule)
                }
                Likelihood::Softmax { .. } => {
                    let m: Vec<T> = mom.mean.iter().map(|v| v[j]).collect();
                    let v: Vec<T> = mom.variance.iter().map(|v| v[j]).collect();
                    expected_loglik_softmax(&m, &v, y, EVAL_MC_SAMPLES, self.seed.wrapping_add(i as u64))
                }
            };
        }
        let n = T::of(self.phi.rows() as f64);
        let ell = ell * n / T::of(self.eval.len() as f64);
        let (kl, _) = kl_functional_features(&summary, &self.kernel, ws.phi_z())?;
        Ok(-(ell - kl))
    }

    fn holdout(&self, indices: &[usize]) -> Result<T> {
        let chosen: HashSet<usize> = indices.iter().copied().collect();
        let held: Vec<usize> = self.eval.iter().copied().filter(|i| !chosen.contains(i)).collect();
        if held.is_empty() {
            return Err(FrclError::EmptyHoldout);
        }
        let (ws, summary) = self.summary_at(indices)?;
        let phi_h = self.phi.select_rows(&held);
        let mom = latent_moments(summary.functions(), &ws, &self.kernel, &phi_h)?;
        let preds = assemble_predictions(self.likelihood, &mom, self.rule, EVAL_MC_SAMPLES, self.seed);
        let total: T = held
            .iter()
            .zip(&preds)
            .map(|(&i, p)| {
                let y = self.labels[i];
                if self.criterion == Criterion::ClassError {
                    if argmax(&p.class_probabilities) == y {
                        T::zero()
                    } else {
                        T::one()
                    }
                } else {
                    -p.class_probabilities[y].max(T::min_positive_value()).ln()
                }
            })
            .sum();
        Ok(total / T::of(held.len() as f64))
    }
}

/// Score of one candidate set; see [`Scorer::score`].
pub fn score<T: Scalar>(
    cfg: &SelectionConfig,
    indices: &[usize],
    data: TaskData<'_, T>,
    q: &WeightPosterior<T>,
    net: &FeatureNet<T>,
    kernel: &KernelConfig<T>,
    rule: &QuadratureRule<T>,
) -> Result<T> {
    check_indices(indices, data.x.rows())?;
    Scorer::new(&SelectionConfig { m: indices.len(), ..cfg.clone() }, data, q, net, kernel, rule)?
        .score(indices)
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for &i in indices {
        if i >= n || !seen.insert(i) {
            return Err(FrclError::InvalidConfig(format!("bad inducing index {i} (N = {n})")));
        }
    }
    Ok(())
}

/// Initial set: uniform, or as even as possible across classes.
pub fn initial_indices<R: Rng>(
    rng: &mut R,
    labels: &[usize],
    classes: usize,
    m: usize,
    balanced: bool,
) -> Vec<usize> {
    let n = labels.len();
    if !balanced || classes < 2 {
        return sample(rng, n, m).into_vec();
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y.min(classes - 1)].push(i);
    }
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(m);
    for (rank, &c) in order.iter().enumerate() {
        let want = m / classes + usize::from(rank < m % classes);
        let pool = &mut by_class[c];
        pool.shuffle(rng);
        out.extend(pool.drain(..want.min(pool.len())));
    }
    // classes too small for their share: top up uniformly from the rest
    if out.len() < m {
        let mut rest: Vec<usize> = by_class.into_iter().flatten().collect();
        rest.sort_unstable();
        rest.shuffle(rng);
        out.extend(rest.into_iter().take(m - out.len()));
    }
    out
}

/// Greedy swap search over inducing sets drawn from the task's inputs.
pub fn select<T: Scalar>(
    cfg: &SelectionConfig,
    data: TaskData<'_, T>,
    q: &WeightPosterior<T>,
    net: &FeatureNet<T>,
    kernel: &KernelConfig<T>,
    rule: &QuadratureRule<T>,
) -> Result<SelectionResult<T>> {
    let scorer = Scorer::new(cfg, data, q, net, kernel, rule)?;
    select_with(cfg, &scorer, data)
}

pub fn select_with<T: Scalar>(
    cfg: &SelectionConfig,
    scorer: &Scorer<'_, T>,
    data: TaskData<'_, T>,
) -> Result<SelectionResult<T>> {
    let n = data.x.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices =
        initial_indices(&mut rng, data.labels, data.likelihood.class_count(), cfg.m, cfg.class_balanced_init);
    if cfg.criterion.uses_holdout() && cfg.m == n {
        return Err(FrclError::EmptyHoldout);
    }
    let initial_score = scorer.score(&indices)?;
    let mut best = initial_score;
    let mut score_trace = Vec::new();
    if cfg.criterion != Criterion::Random && cfg.m < n {
        let mut inside: HashSet<usize> = indices.iter().copied().collect();
        for _ in 0..cfg.search_steps {
            let j = rng.random_range(0..cfg.m);
            let x = loop {
                let x = rng.random_range(0..n);
                if !inside.contains(&x) {
                    break x;
                }
            };
            let old = indices[j];
            indices[j] = x;
            // an unfactorisable candidate is simply not an improvement
            let s = match scorer.score(&indices) {
                Ok(s) => s,
                Err(FrclError::NotPositiveDefinite { .. }) => T::infinity(),
                Err(e) => return Err(e),
            };
            if s < best {
                best = s;
                inside.remove(&old);
                inside.insert(x);
                score_trace.push(s);
            } else {
                indices[j] = old;
            }
        }
    }
    Ok(SelectionResult {
        indices,
        initial_score,
        final_score: best,
        score_trace,
    })
}

/// Dense reference for the trace criterion: `Σ_x` Nyström residual.
pub fn dense_trace<T: Scalar>(phi: &Matrix<T>, indices: &[usize], kernel: &KernelConfig<T>) -> Result<T> {
    let phi_z = phi.select_rows(indices);
    let chol = cholesky(&inducing_gram(kernel, &phi_z))?;
    let mut kzx = Matrix::zeros(indices.len(), phi.rows());
    gemm(kernel.sigma_w2, &phi_z, Op::N, phi, Op::T, T::zero(), &mut kzx)?;
    let a = chol.solve(&kzx)?;
    let diag = kernel_diag(kernel, phi);
    let mut total = T::zero();
    for (x, &d) in diag.iter().enumerate() {
        let mut e = T::zero();
        for i in 0..indices.len() {
            e += kzx[(i, x)] * a[(i, x)];
        }
        total += d - e;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gauss_hermite;

    fn blobs(n: usize, seed: u64) -> (Matrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Matrix::from_fn(n, 3, |i, _| {
            let c = if labels[i] == 1 { 2.0 } else { -2.0 };
            c + rng.random_range(-0.5..0.5)
        });
        (x, labels)
    }

    #[test]
    fn trace_of_full_set_is_zero() {
        let (x, y) = blobs(6, 1);
        let net = FeatureNet::<f64>::init(&[3, 8], 2).unwrap();
        let q = WeightPosterior::init(8, 1, 0);
        let rule = gauss_hermite(20).unwrap();
        let data = TaskData { x: &x, labels: &y, likelihood: Likelihood::BernoulliLogit };
        let cfg = SelectionConfig::new(Criterion::Trace, 6, 0);
        let s = score(&cfg, &[0, 1, 2, 3, 4, 5], data, &q, &net, &KernelConfig::default(), &rule).unwrap();
        assert!(s.abs() < 1e-8, "{s}");
    }

    #[test]
    fn trace_matches_dense_residual_sum() {
        let (x, y) = blobs(30, 3);
        let net = FeatureNet::<f64>::init(&[3, 10, 8], 4).unwrap();
        let q = WeightPosterior::init(8, 1, 0);
        let rule = gauss_hermite(20).unwrap();
        let cfg = SelectionConfig::new(Criterion::Trace, 3, 0);
        let data = TaskData { x: &x, labels: &y, likelihood: Likelihood::BernoulliLogit };
        let scorer = Scorer::new(&cfg, data, &q, &net, &KernelConfig::default(), &rule).unwrap();
        let idx = [4, 17, 9];
        let fast = scorer.score(&idx).unwrap();
        let dense = dense_trace(scorer.features(), &idx, &KernelConfig::default()).unwrap();
        assert!((fast - dense).abs() <= 1e-8 * dense.abs().max(1.0), "{fast} vs {dense}");
    }

    #[test]
    fn zero_steps_keeps_initial_set() {
        let (x, y) = blobs(20, 5);
        let net = FeatureNet::<f64>::init(&[3, 6], 6).unwrap();
        let q = WeightPosterior::init(6, 1, 0);
        let rule = gauss_hermite(20).unwrap();
        let data = TaskData { x: &x, labels: &y, likelihood: Likelihood::BernoulliLogit };
        let mut cfg = SelectionConfig::new(Criterion::Trace, 4, 7);
        cfg.search_steps = 0;
        let a = select(&cfg, data, &q, &net, &KernelConfig::default(), &rule).unwrap();
        cfg.criterion = Criterion::Random;
        cfg.search_steps = 1000;
        let b = select(&cfg, data, &q, &net, &KernelConfig::default(), &rule).unwrap();
        assert_eq!(a.indices, b.indices);
        assert!(b.score_trace.is_empty());
    }

    #[test]
    fn balanced_init_covers_classes() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = initial_indices(&mut rng, &labels, 10, 13, true);
        let mut counts = [0; 10];
        for &i in &idx {
            counts[labels[i]] += 1;
        }
        assert_eq!(idx.len(), 13);
        assert!(counts.iter().all(|&c| c == 1 || c == 2));
        assert_eq!(idx.iter().collect::<HashSet<_>>().len(), 13);
    }

    #[test]
    fn holdout_criteria_need_a_holdout() {
        let (x, y) = blobs(4, 8);
        let net = FeatureNet::<f64>::init(&[3, 6], 6).unwrap();
        let q = WeightPosterior::init(6, 1, 0);
        let rule = gauss_hermite(20).unwrap();
        let data = TaskData { x: &x, labels: &y, likelihood: Likelihood::BernoulliLogit };
        let cfg = SelectionConfig::new(Criterion::ClassError, 4, 0);
        let r = select(&cfg, data, &q, &net, &KernelConfig::default(), &rule);
        assert!(matches!(r, Err(FrclError::EmptyHoldout)));
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in [Criterion::Random, Criterion::Trace, Criterion::Elbo, Criterion::LogPredDensity, Criterion::ClassError] {
            assert_eq!(c.name().parse::<Criterion>().unwrap(), c);
        }
        assert!("bogus".parse::<Criterion>().is_err());
    }
}
