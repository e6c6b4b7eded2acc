//! Classification likelihoods and their expectations under Gaussian latents.
//!
//! Binary tasks use one latent function with `p(y|f) = σ(y f)`, `y = ±1`, and
//! Gauss–Hermite quadrature. Multi-class tasks use one latent per class, a
//! softmax link and reparameterised Monte Carlo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FrclError, Result};
use crate::numerics::QuadratureRule;
use crate::scalar::{log_sigmoid, sigmoid, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    BernoulliLogit,
    Softmax { classes: usize },
}

impl Likelihood {
    /// Bernoulli for two classes, softmax otherwise.
    pub fn for_classes(classes: usize) -> Result<Self> {
        match classes {
            0 | 1 => Err(FrclError::InvalidConfig(format!("need at least two classes, got {classes}"))),
            2 => Ok(Self::BernoulliLogit),
            c => Ok(Self::Softmax { classes: c }),
        }
    }

    /// Inverse of [`Self::function_count`].
    pub fn from_function_count(functions: usize) -> Result<Self> {
        match functions {
            0 => Err(FrclError::InvalidConfig("no latent functions".into())),
            1 => Ok(Self::BernoulliLogit),
            c => Ok(Self::Softmax { classes: c }),
        }
    }

    /// Number of latent GP functions.
    pub fn function_count(&self) -> usize {
        match self {
            Self::BernoulliLogit => 1,
            Self::Softmax { classes } => *classes,
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Self::BernoulliLogit => 2,
            Self::Softmax { classes } => *classes,
        }
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.class_count() {
            return Err(FrclError::InvalidConfig(format!(
                "label {label} out of range for {} classes",
                self.class_count()
            )));
        }
        Ok(())
    }
}

/// Class index 0/1 to the `∓1` sign used by the logistic likelihood.
#[inline]
pub fn label_sign<T: Scalar>(label: usize) -> T {
    if label == 1 {
        T::one()
    } else {
        -T::one()
    }
}

/// `E_{f~N(m, s²)}[ln σ(y f)]` together with its derivatives in `m` and `s`.
pub fn binary_terms<T: Scalar>(m: T, s: T, y: T, rule: &QuadratureRule<T>) -> (T, T, T) {
    let sqrt2 = T::SQRT_2();
    let norm = T::FRAC_2_SQRT_PI() * T::of(0.5);
    let (mut v, mut dm, mut ds) = (T::zero(), T::zero(), T::zero());
    for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
        let f = m + sqrt2 * s * x;
        v += w * log_sigmoid(y * f);
        let g = w * y * sigmoid(-y * f);
        dm += g;
        ds += g * sqrt2 * x;
    }
    (v * norm, dm * norm, ds * norm)
}

/// `E_{f~N(m, v)}[ln σ(y f)]` for `y = ±1`; always ≤ 0.
pub fn expected_loglik_binary<T: Scalar>(m: T, v: T, y: T, rule: &QuadratureRule<T>) -> T {
    assert!(v >= T::zero(), "variance must be nonnegative");
    binary_terms(m, v.sqrt(), y, rule).0
}

/// Monte-Carlo `E[ln softmax_y(m + s ⊙ ε)]` over the rows of `eps`
/// (one row of `C` standard normals per sample), with gradients in `m` and `s`.
pub fn softmax_terms<T: Scalar>(
    means: &[T],
    stds: &[T],
    y: usize,
    eps: &[T],
) -> (T, Vec<T>, Vec<T>) {
    let c = means.len();
    let samples = eps.len() / c;
    let mut value = T::zero();
    let mut dm = vec![T::zero(); c];
    let mut ds = vec![T::zero(); c];
    let mut f = vec![T::zero(); c];
    for e in eps.chunks_exact(c) {
        let mut fmax = T::neg_infinity();
        for k in 0..c {
            f[k] = means[k] + stds[k] * e[k];
            fmax = fmax.max(f[k]);
        }
        let mut z = T::zero();
        for v in f.iter_mut() {
            *v = (*v - fmax).exp();
            z += *v;
        }
        value += (f[y] / z).ln();
        for k in 0..c {
            let g = if k == y { T::one() } else { T::zero() } - f[k] / z;
            dm[k] += g;
            ds[k] += g * e[k];
        }
    }
    let inv = T::one() / T::of(samples as f64);
    dm.iter_mut().for_each(|v| *v *= inv);
    ds.iter_mut().for_each(|v| *v *= inv);
    (value * inv, dm, ds)
}

/// Fills `out` with standard normal draws.
pub fn fill_standard_normal<T: Scalar, R: Rng>(rng: &mut R, out: &mut [T]) {
    for v in out {
        let z: f64 = rng.sample(StandardNormal);
        *v = T::of(z);
    }
}

/// `E[ln softmax_y(f)]` with independent `f_c ~ N(means_c, vars_c)`,
/// deterministic in `seed`.
pub fn expected_loglik_softmax<T: Scalar>(
    means: &[T],
    vars: &[T],
    y: usize,
    sample_count: usize,
    seed: u64,
) -> T {
    assert!(means.len() >= 2 && means.len() == vars.len());
    assert!(vars.iter().all(|&v| v >= T::zero()), "variances must be nonnegative");
    let stds: Vec<T> = vars.iter().map(|v| v.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps = vec![T::zero(); sample_count.max(1) * means.len()];
    fill_standard_normal(&mut rng, &mut eps);
    softmax_terms(means, &stds, y, &eps).0
}

/// Predictive class probabilities for independent Gaussian latents.
pub fn class_probabilities<T: Scalar, R: Rng>(
    likelihood: Likelihood,
    means: &[T],
    vars: &[T],
    rule: &QuadratureRule<T>,
    mc_samples: usize,
    rng: &mut R,
) -> Vec<T> {
    match likelihood {
        Likelihood::BernoulliLogit => {
            let p = rule.expect(means[0], vars[0], sigmoid).min(T::one()).max(T::zero());
            vec![T::one() - p, p]
        }
        Likelihood::Softmax { classes } => {
            let stds: Vec<T> = vars.iter().map(|v| v.max(T::zero()).sqrt()).collect();
            let mut p = vec![T::zero(); classes];
            let mut f = vec![T::zero(); classes];
            let mut e = vec![T::zero(); classes];
            let samples = mc_samples.max(1);
            for _ in 0..samples {
                fill_standard_normal(rng, &mut e);
                let mut fmax = T::neg_infinity();
                for k in 0..classes {
                    f[k] = means[k] + stds[k] * e[k];
                    fmax = fmax.max(f[k]);
                }
                let mut z = T::zero();
                for v in f.iter_mut() {
                    *v = (*v - fmax).exp();
                    z += *v;
                }
                for k in 0..classes {
                    p[k] += f[k] / z;
                }
            }
            let total: T = p.iter().copied().sum();
            p.iter_mut().for_each(|v| *v /= total);
            p
        }
    }
}
