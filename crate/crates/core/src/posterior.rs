//! Full-covariance Gaussian posterior over the output weights of one task,
//! factorised across the task's latent functions.
//!
//! Each function carries `q(w) = N(μ, L Lᵀ)`. The Cholesky factor is stored
//! unconstrained: strictly-lower entries as they are, diagonal entries as
//! `ρ` with `L_ii = softplus(ρ_ii)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, FrclError, Result};
use crate::numerics::{dot, Matrix};
use crate::scalar::{sigmoid, softplus, softplus_inv, Scalar};

/// Standard deviation of the initial posterior means.
pub const INIT_MEAN_SD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadFunction<T> {
    pub mu: Vec<T>,
    /// Lower triangle holds the factor; the diagonal is pre-softplus.
    pub l_raw: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightPosterior<T> {
    functions: Vec<HeadFunction<T>>,
}

/// Gradient with respect to every unconstrained head parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad<T> {
    pub mu: Vec<Vec<T>>,
    pub l_raw: Vec<Matrix<T>>,
}

impl<T: Scalar> HeadGrad<T> {
    pub fn zeros(functions: usize, k: usize) -> Self {
        Self {
            mu: vec![vec![T::zero(); k]; functions],
            l_raw: vec![Matrix::zeros(k, k); functions],
        }
    }

    pub fn axpy(&mut self, alpha: T, other: &HeadGrad<T>) {
        for (a, b) in self.mu.iter_mut().zip(&other.mu) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
        for (a, b) in self.l_raw.iter_mut().zip(&other.l_raw) {
            a.axpy(alpha, b).expect("congruent head gradients");
        }
    }

    /// Same layout as [`WeightPosterior::to_vec`].
    pub fn to_vec(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (mu, l) in self.mu.iter().zip(&self.l_raw) {
            out.extend_from_slice(mu);
            push_lower(&mut out, l);
        }
        out
    }
}

fn push_lower<T: Scalar>(out: &mut Vec<T>, l: &Matrix<T>) {
    for i in 0..l.rows() {
        out.extend_from_slice(&l.row(i)[..=i]);
    }
}

impl<T: Scalar> WeightPosterior<T> {
    /// Means drawn from `N(0, INIT_MEAN_SD²)`, factors equal to the identity.
    pub fn init(feature_dim: usize, functions: usize, seed: u64) -> Self {
        Self::init_with(feature_dim, functions, INIT_MEAN_SD, 1.0, seed)
    }

    /// Means drawn from `N(0, mean_sd²)`, factors `scale · I`.
    pub fn init_with(feature_dim: usize, functions: usize, mean_sd: f64, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, mean_sd).expect("finite sd");
        let rho = softplus_inv(T::of(scale));
        let functions = (0..functions)
            .map(|_| {
                let mu = (0..feature_dim).map(|_| T::of(normal.sample(&mut rng))).collect();
                let mut l_raw = Matrix::zeros(feature_dim, feature_dim);
                for i in 0..feature_dim {
                    l_raw[(i, i)] = rho;
                }
                HeadFunction { mu, l_raw }
            })
            .collect();
        Self { functions }
    }

    /// Builds a posterior from means and actual lower Cholesky factors.
    pub fn from_factors(parts: Vec<(Vec<T>, Matrix<T>)>) -> Result<Self> {
        let mut functions = Vec::with_capacity(parts.len());
        let k = parts.first().map_or(0, |p| p.0.len());
        for (mu, l) in parts {
            if mu.len() != k || l.shape() != (k, k) {
                return Err(dim_err("WeightPosterior::from_factors", k, mu.len()));
            }
            let mut l_raw = Matrix::zeros(k, k);
            for i in 0..k {
                let d = l[(i, i)];
                if !(d > T::zero()) || !d.is_finite() {
                    return Err(FrclError::NonFiniteInput("WeightPosterior factor diagonal"));
                }
                for j in 0..i {
                    l_raw[(i, j)] = l[(i, j)];
                }
                l_raw[(i, i)] = softplus_inv(d);
            }
            functions.push(HeadFunction { mu, l_raw });
        }
        Ok(Self { functions })
    }

    pub fn function_count(&self) -> usize {
        self.functions.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.functions.first().map_or(0, |f| f.mu.len())
    }

    pub fn functions(&self) -> &[HeadFunction<T>] {
        &self.functions
    }

    pub fn mu(&self, c: usize) -> &[T] {
        &self.functions[c].mu
    }

    /// The lower Cholesky factor `L` of function `c`.
    pub fn l(&self, c: usize) -> Matrix<T> {
        let raw = &self.functions[c].l_raw;
        let k = raw.rows();
        Matrix::from_fn(k, k, |i, j| {
            if j < i {
                raw[(i, j)]
            } else if i == j {
                softplus(raw[(i, i)])
            } else {
                T::zero()
            }
        })
    }

    pub fn covariance(&self, c: usize) -> Matrix<T> {
        let l = self.l(c);
        l.matmul_t(&l).expect("square")
    }

    /// Marginal `(μᵀφ, ‖Lᵀφ‖²)` of `wᵀφ` for one feature vector.
    pub fn marginal(&self, c: usize, phi: &[T]) -> (T, T) {
        let l = self.l(c);
        let a = l.t_matvec(phi).expect("feature width");
        (dot(&self.functions[c].mu, phi), dot(&a, &a))
    }

    /// Number of unconstrained parameters.
    pub fn param_count(&self) -> usize {
        let k = self.feature_dim();
        self.functions.len() * (k + k * (k + 1) / 2)
    }

    /// Per function: `μ`, then the lower triangle of the raw factor by rows.
    pub fn to_vec(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for f in &self.functions {
            out.extend_from_slice(&f.mu);
            push_lower(&mut out, &f.l_raw);
        }
        out
    }

    pub fn set_from_vec(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(dim_err("WeightPosterior::set_from_vec", self.param_count(), values.len()));
        }
        let mut off = 0;
        for f in &mut self.functions {
            let k = f.mu.len();
            f.mu.copy_from_slice(&values[off..off + k]);
            off += k;
            for i in 0..k {
                f.l_raw.row_mut(i)[..=i].copy_from_slice(&values[off..off + i + 1]);
                off += i + 1;
            }
        }
        Ok(())
    }

    /// Chains a gradient taken with respect to the actual factor `L` (lower
    /// triangle) into the raw parameterisation, in place.
    pub fn chain_factor_grad(&self, c: usize, grad_l: &mut Matrix<T>) {
        let raw = &self.functions[c].l_raw;
        let k = raw.rows();
        for i in 0..k {
            grad_l[(i, i)] *= sigmoid(raw[(i, i)]);
            for j in i + 1..k {
                grad_l[(i, j)] = T::zero();
            }
        }
    }
}

/// `KL(N(μ, LLᵀ) ‖ N(0, σ_w² I))` for one function, with its gradients
/// with respect to `μ` and the raw factor.
pub fn kl_gauss_vs_standard<T: Scalar>(
    q: &WeightPosterior<T>,
    c: usize,
    sigma_w2: T,
) -> Result<(T, Vec<T>, Matrix<T>)> {
    let l = q.l(c);
    let mu = q.mu(c);
    let k = mu.len();
    if !l.is_finite() || mu.iter().any(|v| !v.is_finite()) {
        return Err(FrclError::NonFiniteInput("kl_gauss_vs_standard"));
    }
    let kf = T::of(k as f64);
    let tr = l.data().iter().map(|&v| v * v).sum::<T>();
    let mm = dot(mu, mu);
    let logdiag: T = l.diag().iter().map(|d| d.ln()).sum();
    let half = T::of(0.5);
    let value = half * (tr / sigma_w2 + mm / sigma_w2 - kf + kf * sigma_w2.ln() - T::of(2.0) * logdiag);
    let dmu = mu.iter().map(|&m| m / sigma_w2).collect();
    let mut dl = l.scale(T::one() / sigma_w2);
    for i in 0..k {
        dl[(i, i)] -= T::one() / l[(i, i)];
    }
    q.chain_factor_grad(c, &mut dl);
    Ok((value, dmu, dl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn prior_matching_posterior_has_zero_kl() {
        let q = WeightPosterior::<f64>::from_factors(vec![(vec![0.0; 4], Matrix::identity(4))]).unwrap();
        let (v, _, _) = kl_gauss_vs_standard(&q, 0, 1.0).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let q = WeightPosterior::<f64>::from_factors(vec![(vec![0.0], Matrix::identity(1))]).unwrap();
        let (v, _, _) = kl_gauss_vs_standard(&q, 0, 2.0).unwrap();
        let want = 0.5 * (0.5 - 1.0 + 2f64.ln());
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.09657).abs() < 1e-5);
    }

    #[test]
    fn init_is_near_prior() {
        let q = WeightPosterior::<f64>::init(6, 3, 1);
        assert_eq!(q.function_count(), 3);
        for c in 0..3 {
            assert!(q.l(c).sub(&Matrix::identity(6)).unwrap().max_abs() < 1e-12);
            assert!(q.mu(c).iter().all(|m| m.abs() < 0.01));
            let (v, _, _) = kl_gauss_vs_standard(&q, c, 1.0).unwrap();
            assert!(v.abs() < 1e-4);
        }
    }

    #[test]
    fn flat_round_trip() {
        let q = WeightPosterior::<f64>::init(3, 2, 4);
        let v = q.to_vec();
        assert_eq!(v.len(), q.param_count());
        assert_eq!(v.len(), 2 * (3 + 6));
        let mut p = WeightPosterior::<f64>::init(3, 2, 5);
        p.set_from_vec(&v).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let k = 3;
        let l = Matrix::from_rows(&[[1.2, 0.0, 0.0], [0.3, 0.7, 0.0], [-0.4, 0.2, 0.9]]).unwrap();
        let mu = vec![0.5, -0.3, 0.8];
        let sw2 = 1.5;
        let q = WeightPosterior::from_factors(vec![(mu.clone(), l.clone())]).unwrap();
        let (exact, _, _) = kl_gauss_vs_standard(&q, 0, sw2).unwrap();

        // E_q[ln q(w) − ln p(w)] from samples w = μ + L ε
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let logdet_l: f64 = l.diag().iter().map(|d: &f64| d.ln()).sum();
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let e: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let w: Vec<f64> = (0..k).map(|i| mu[i] + (0..=i).map(|j| l[(i, j)] * e[j]).sum::<f64>()).collect();
            let lq = -0.5 * e.iter().map(|v| v * v).sum::<f64>() - logdet_l;
            let lp = -0.5 * w.iter().map(|v| v * v).sum::<f64>() / sw2 - 0.5 * k as f64 * sw2.ln();
            let d = lq - lp;
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} exact {exact} se {se}");
    }
}
