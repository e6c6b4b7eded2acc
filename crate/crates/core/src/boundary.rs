//! Task-switch detection without labels. Each incoming input is scored by how
//! far the current head's posterior marginal sits from the GP prior marginal;
//! inputs of a new task look like the prior, so a significant *drop* in
//! surprise relative to the previous batch signals a switch.

use std::collections::VecDeque;

use crate::error::{FrclError, Result};
use crate::feature_net::FeatureNet;
use crate::kernel::{kernel_diag, KernelConfig};
use crate::numerics::Matrix;
use crate::posterior::WeightPosterior;
use crate::scalar::Scalar;

/// Added to posterior marginal variances.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// Prior variances at or below this are rejected.
pub const PRIOR_FLOOR: f64 = 1e-12;
const LOG_FLOOR: f64 = 1e-12;

/// `scores[c][i]`: surprise of point `i` under latent function `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurpriseScores<T> {
    pub scores: Vec<Vec<T>>,
}

impl<T> SurpriseScores<T> {
    pub fn batch_size(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn function_count(&self) -> usize {
        self.scores.len()
    }
}

/// Symmetrised KL between univariate Gaussians with means `m`, `0` and
/// variances `vq`, `vp`: `¼[(vq + m²)/vp + (vp + m²)/vq − 2]`.
pub fn symmetric_kl<T: Scalar>(m: T, vq: T, vp: T) -> T {
    let m2 = m * m;
    (T::of(0.25) * ((vq + m2) / vp + (vp + m2) / vq - T::of(2.0))).max(T::zero())
}

/// Surprise of each input of `x` under the head `q`.
pub fn surprise<T: Scalar>(
    q: &WeightPosterior<T>,
    net: &FeatureNet<T>,
    cfg: &KernelConfig<T>,
    x: &Matrix<T>,
) -> Result<SurpriseScores<T>> {
    if x.rows() == 0 {
        return Err(FrclError::EmptyBatch);
    }
    let phi = net.forward(x)?;
    surprise_from_features(q, cfg, &phi)
}

pub fn surprise_from_features<T: Scalar>(
    q: &WeightPosterior<T>,
    cfg: &KernelConfig<T>,
    phi: &Matrix<T>,
) -> Result<SurpriseScores<T>> {
    let prior = kernel_diag(cfg, phi);
    if let Some(&p) = prior.iter().find(|&&p| !(p > T::of(PRIOR_FLOOR))) {
        return Err(FrclError::DegeneratePrior(p.as_f64()));
    }
    let floor = T::of(VARIANCE_FLOOR);
    let scores = (0..q.function_count())
        .map(|c| -> Result<Vec<T>> {
            let means = phi.matvec(q.mu(c))?;
            let a = phi.matmul(&q.l(c))?;
            Ok(a.row_iter()
                .zip(means)
                .zip(&prior)
                .map(|((r, m), &vp)| {
                    let vq = r.iter().map(|&v| v * v).sum::<T>() + floor;
                    symmetric_kl(m, vq, vp)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(SurpriseScores { scores })
}

fn mean_var<T: Scalar>(v: &[T]) -> (T, T) {
    let n = T::of(v.len() as f64);
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / (n - T::one());
    (mean, var)
}

/// Welch's statistic `(mean(b) − mean(a)) / √(s_a²/|a| + s_b²/|b|)`; positive
/// when `a` (the new batch) has the smaller mean.
pub fn welch_t<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() < 2 || b.len() < 2 {
        return Err(FrclError::InvalidConfig("Welch's t needs at least two samples per side".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let se2 = va / T::of(a.len() as f64) + vb / T::of(b.len() as f64);
    if se2 == T::zero() {
        return if ma == mb { Ok(T::zero()) } else { Err(FrclError::ZeroVariance) };
    }
    Ok((mb - ma) / se2.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    Mean,
    Median,
}

impl std::str::FromStr for Aggregation {
    type Err = FrclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            "median" => Ok(Self::Median),
            _ => Err(FrclError::InvalidConfig(format!("unknown aggregation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub threshold: f64,
    pub min_time_in: usize,
    pub cooldown: usize,
    pub aggregation: Aggregation,
    pub log_space: bool,
    /// Number of past batches pooled as the reference sample.
    pub window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 5.0,
            min_time_in: 10,
            cooldown: 10,
            aggregation: Aggregation::Max,
            log_space: true,
            window: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || self.window == 0 {
            return Err(FrclError::InvalidConfig(
                "detector threshold must be positive and window at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DetectorState<T> {
    cfg: DetectorConfig,
    /// Transformed scores of the most recent batches, newest last.
    old: VecDeque<Vec<Vec<T>>>,
    steps_in_task: usize,
    cooldown_remaining: usize,
}

/// Outcome of one detector step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision<T> {
    pub detected: bool,
    /// Aggregated statistic; `None` when there was no reference batch.
    pub statistic: Option<T>,
}

impl<T: Scalar> DetectorState<T> {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            old: VecDeque::new(),
            steps_in_task: 0,
            cooldown_remaining: 0,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn steps_in_task(&self) -> usize {
        self.steps_in_task
    }

    pub fn cooldown_remaining(&self) -> usize {
        self.cooldown_remaining
    }

    fn transform(&self, scores: &SurpriseScores<T>) -> Vec<Vec<T>> {
        let eps = T::of(LOG_FLOOR);
        scores
            .scores
            .iter()
            .map(|v| {
                if self.cfg.log_space {
                    v.iter().map(|&x| (x + eps).ln()).collect()
                } else {
                    v.clone()
                }
            })
            .collect()
    }

    /// Feeds the scores of the next batch, computed before any update on it.
    pub fn step(&mut self, scores: &SurpriseScores<T>) -> Result<Decision<T>> {
        let current = self.transform(scores);
        let statistic = if self.old.is_empty() {
            None
        } else {
            let mut per_fn = Vec::with_capacity(current.len());
            for (c, a) in current.iter().enumerate() {
                let b: Vec<T> = self
                    .old
                    .iter()
                    .filter_map(|batch| batch.get(c))
                    .flat_map(|v| v.iter().copied())
                    .collect();
                if b.is_empty() {
                    continue;
                }
                // both sides constant but different: the shift is certain
                per_fn.push(match welch_t(a, &b) {
                    Ok(t) => t,
                    Err(FrclError::ZeroVariance) => {
                        let (ma, _) = mean_var(a);
                        let (mb, _) = mean_var(&b);
                        if mb > ma {
                            T::infinity()
                        } else {
                            T::neg_infinity()
                        }
                    }
                    Err(e) => return Err(e),
                });
            }
            aggregate(&mut per_fn, self.cfg.aggregation)
        };
        let detected = statistic.is_some_and(|t| t > T::of(self.cfg.threshold))
            && self.steps_in_task > self.cfg.min_time_in
            && self.cooldown_remaining == 0;
        if detected {
            self.cooldown_remaining = self.cfg.cooldown;
            self.steps_in_task = 0;
        } else {
            self.cooldown_remaining = self.cooldown_remaining.saturating_sub(1);
            self.steps_in_task += 1;
        }
        self.old.push_back(current);
        while self.old.len() > self.cfg.window {
            self.old.pop_front();
        }
        Ok(Decision { detected, statistic })
    }

    /// Starts a new task without a detection (known boundaries, or a
    /// detection forced from outside).
    pub fn reset_task(&mut self) {
        self.steps_in_task = 0;
    }
}

fn aggregate<T: Scalar>(v: &mut [T], how: Aggregation) -> Option<T> {
    if v.is_empty() {
        return None;
    }
    Some(match how {
        Aggregation::Max => v.iter().copied().fold(T::neg_infinity(), T::max),
        Aggregation::Mean => v.iter().copied().sum::<T>() / T::of(v.len() as f64),
        Aggregation::Median => {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) * T::of(0.5)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn welch_hand_value() {
        let t = welch_t(&[1.0, 1.0, 1.0, 3.0], &[3.0, 3.0, 3.0, 5.0]).unwrap();
        assert!((t - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(welch_t(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(welch_t(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(welch_t(&[1.0, 1.0], &[2.0, 2.0]), Err(FrclError::ZeroVariance)));
    }

    #[test]
    fn equal_variance_kl() {
        // ½[μ²/(2v) + μ²/(2v)]
        let (m, v) = (0.7f64, 1.3);
        assert!((symmetric_kl(m, v, v) - m * m / (2.0 * v)).abs() < 1e-15);
        assert_eq!(symmetric_kl(0.0, 2.0, 2.0), 0.0);
    }

    #[test]
    fn prior_posterior_scores_nothing() {
        let net = FeatureNet::<f64>::init(&[3, 5], 1).unwrap();
        let q = WeightPosterior::from_factors(vec![(vec![0.0; 5], Matrix::identity(5))]).unwrap();
        let x = Matrix::from_fn(4, 3, |i, j| 1.0 + (i * 3 + j) as f64 * 0.1);
        let s = surprise(&q, &net, &KernelConfig::default(), &x).unwrap();
        assert!(s.scores[0].iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_features_are_rejected() {
        let net = FeatureNet::<f64>::init(&[2, 3], 1).unwrap();
        let q = WeightPosterior::init(3, 1, 0);
        let x = Matrix::zeros(2, 2);
        let r = surprise(&q, &net, &KernelConfig::default(), &x);
        assert!(matches!(r, Err(FrclError::DegeneratePrior(_))));
    }

    fn scores(v: Vec<f64>) -> SurpriseScores<f64> {
        SurpriseScores { scores: vec![v] }
    }

    #[test]
    fn first_batch_and_identical_batches_never_fire() {
        let mut d = DetectorState::new(DetectorConfig { min_time_in: 0, ..Default::default() }).unwrap();
        let s = scores(vec![1.0, 2.0, 3.0]);
        let first = d.step(&s).unwrap();
        assert!(!first.detected && first.statistic.is_none());
        let second = d.step(&s).unwrap();
        assert_eq!(second.statistic, Some(0.0));
        assert!(!second.detected);
    }

    #[test]
    fn gating_by_min_time_and_cooldown() {
        let cfg = DetectorConfig { min_time_in: 3, cooldown: 4, ..Default::default() };
        let mut d = DetectorState::new(cfg).unwrap();
        let high = scores(vec![1.0, 1.1, 0.9, 1.05]);
        let low = scores(vec![1e-4, 1.1e-4, 0.9e-4, 1.05e-4]);
        let mut fired = Vec::new();
        // alternate so every step after the first has a large positive statistic
        for t in 0..30 {
            let s = if t % 2 == 0 { &high } else { &low };
            let dec = d.step(s).unwrap();
            if dec.detected {
                fired.push(t);
            }
        }
        assert!(!fired.is_empty());
        assert!(fired[0] > 3);
        for w in fired.windows(2) {
            assert!(w[1] - w[0] > 4, "{fired:?}");
        }
    }

    #[test]
    fn drop_in_surprise_gives_positive_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = DetectorState::new(DetectorConfig::default()).unwrap();
        let old: Vec<f64> = (0..50).map(|_| rng.random_range(0.5..2.0)).collect();
        let new: Vec<f64> = old.iter().map(|v| v * 0.3).collect();
        d.step(&scores(old)).unwrap();
        assert!(d.step(&scores(new)).unwrap().statistic.unwrap() > 0.0);
    }

    #[test]
    fn permutation_invariant() {
        let mut a = DetectorState::new(DetectorConfig::default()).unwrap();
        let mut b = DetectorState::new(DetectorConfig::default()).unwrap();
        a.step(&scores(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        b.step(&scores(vec![4.0, 2.0, 1.0, 3.0])).unwrap();
        let ta = a.step(&scores(vec![0.1, 0.5, 0.2])).unwrap().statistic.unwrap();
        let tb = b.step(&scores(vec![0.5, 0.2, 0.1])).unwrap().statistic.unwrap();
        assert!((ta - tb).abs() < 1e-12);
    }

    #[test]
    fn aggregation_choices() {
        let mut v = vec![3.0, -1.0, 2.0, 10.0];
        assert_eq!(aggregate(&mut v.clone(), Aggregation::Max), Some(10.0));
        assert_eq!(aggregate(&mut v.clone(), Aggregation::Mean), Some(3.5));
        assert_eq!(aggregate(&mut v, Aggregation::Median), Some(2.5));
    }
}
