//! Per-task functional memory: inducing inputs plus a Gaussian belief over
//! the latent function values there, distilled from the trained weight
//! posterior, and sparse-GP prediction from it under the current features.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, FrclError, Result};
use crate::feature_net::FeatureNet;
use crate::kernel::{kernel_diag, KernelConfig, KernelWorkspace};
use crate::likelihood::{class_probabilities, Likelihood};
use crate::numerics::{cholesky, gemm, gauss_hermite, Matrix, Op, QuadratureRule};
use crate::posterior::WeightPosterior;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FRCLSUM1";
/// Monte-Carlo samples behind softmax class probabilities.
pub const PREDICT_MC_SAMPLES: usize = 512;
pub const PREDICT_QUAD_ORDER: usize = 20;
const PREDICT_SEED: u64 = 0x5eed_0f_5a11;

/// `q(u) = N(mu_u, cov_u)` for one latent function.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryFunction<T> {
    pub mu_u: Vec<T>,
    /// Stored with the distillation jitter already on the diagonal.
    pub cov_u: Matrix<T>,
    pub logdet_cov_u: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSummary<T> {
    task_id: usize,
    z: Matrix<T>,
    functions: Vec<SummaryFunction<T>>,
    likelihood: Likelihood,
    /// `Σ_c (cov_u + mu_u mu_uᵀ)`, the only θ-independent quantity the
    /// functional KL needs besides the log-determinants.
    moment_sum: Matrix<T>,
}

/// Predictive distribution at one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub mean: Vec<T>,
    pub variance: Vec<T>,
    pub class_probabilities: Vec<T>,
}

/// Latent predictive moments for a batch: `mean[c][b]`, `variance[c][b]`.
#[derive(Clone, Debug)]
pub struct LatentMoments<T> {
    pub mean: Vec<Vec<T>>,
    pub variance: Vec<Vec<T>>,
}

impl<T: Scalar> TaskSummary<T> {
    /// Validates and wraps explicit summary contents.
    pub fn from_parts(
        task_id: usize,
        z: Matrix<T>,
        functions: Vec<SummaryFunction<T>>,
        likelihood: Likelihood,
    ) -> Result<Self> {
        let m = z.rows();
        if m == 0 {
            return Err(FrclError::InvalidConfig("summary needs at least one inducing input".into()));
        }
        if functions.len() != likelihood.function_count() {
            return Err(dim_err("TaskSummary", likelihood.function_count(), functions.len()));
        }
        for f in &functions {
            if f.mu_u.len() != m || f.cov_u.shape() != (m, m) {
                return Err(dim_err("TaskSummary", m, f.mu_u.len()));
            }
            if f.cov_u.asymmetry() > T::of(1e-9) {
                return Err(FrclError::NotSymmetric(f.cov_u.asymmetry().as_f64()));
            }
            if !f.logdet_cov_u.is_finite() {
                return Err(FrclError::NonFiniteInput("summary log-determinant"));
            }
        }
        let mut moment_sum = Matrix::zeros(m, m);
        for f in &functions {
            moment_sum.axpy(T::one(), &f.cov_u)?;
            for i in 0..m {
                for j in 0..m {
                    moment_sum[(i, j)] += f.mu_u[i] * f.mu_u[j];
                }
            }
        }
        Ok(Self {
            task_id,
            z,
            functions,
            likelihood,
            moment_sum,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn z(&self) -> &Matrix<T> {
        &self.z
    }

    /// Inducing set size `M`.
    pub fn m(&self) -> usize {
        self.z.rows()
    }

    pub fn functions(&self) -> &[SummaryFunction<T>] {
        &self.functions
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn moment_sum(&self) -> &Matrix<T> {
        &self.moment_sum
    }

    pub fn logdet_sum(&self) -> T {
        self.functions.iter().map(|f| f.logdet_cov_u).sum()
    }

    /// Stored scalars: `M D + C (M + M² + 1)`.
    pub fn stored_values(&self) -> usize {
        let m = self.m();
        self.z.data().len() + self.functions.len() * (m + m * m + 1)
    }

    /// Binary layout, little-endian: magic, `task_id`, `M`, `D`, `C` (latent
    /// function count, 1 for the logistic likelihood) as `u64`, then `Z`
    /// row-major, then per function `mu_u`, `cov_u` row-major and its
    /// log-determinant, all `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [self.task_id, self.m(), self.z.cols(), self.functions.len()] {
            w.write_u64::<LittleEndian>(v as u64)?;
        }
        let mut put = |v: T| w.write_f64::<LittleEndian>(v.as_f64());
        for &v in self.z.data() {
            put(v)?;
        }
        for f in &self.functions {
            for &v in &f.mu_u {
                put(v)?;
            }
            for &v in f.cov_u.data() {
                put(v)?;
            }
            put(f.logdet_cov_u)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FrclError::BadCheckpoint("summary magic mismatch".into()));
        }
        let mut header = [0usize; 4];
        for h in header.iter_mut() {
            *h = r.read_u64::<LittleEndian>()? as usize;
        }
        let [task_id, m, d, c] = header;
        if m == 0 || d == 0 || c == 0 || m > 1 << 16 || d > 1 << 24 || c > 1 << 16 {
            return Err(FrclError::BadCheckpoint(format!("implausible header M={m} D={d} C={c}")));
        }
        let mut read = |n: usize| -> Result<Vec<T>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(T::of(r.read_f64::<LittleEndian>()?));
            }
            Ok(out)
        };
        let z = Matrix::new(m, d, read(m * d)?)?;
        let mut functions = Vec::with_capacity(c);
        for _ in 0..c {
            let mu_u = read(m)?;
            let cov_u = Matrix::new(m, m, read(m * m)?)?;
            let logdet = read(1)?[0];
            functions.push(SummaryFunction {
                mu_u,
                cov_u,
                logdet_cov_u: logdet,
            });
        }
        Self::from_parts(task_id, z, functions, Likelihood::from_function_count(c)?)
    }
}

/// Converts a trained weight posterior into the function-space summary at `z`:
/// `mu_u = Φ_Z μ_w`, `cov_u = Φ_Z L_w L_wᵀ Φ_Zᵀ + εI` (plus jitter when
/// still singular), with ε the kernel's inducing jitter.
pub fn distill<T: Scalar>(
    q: &WeightPosterior<T>,
    z: &Matrix<T>,
    net: &FeatureNet<T>,
    kernel: &KernelConfig<T>,
    likelihood: Likelihood,
    task_id: usize,
) -> Result<TaskSummary<T>> {
    let phi_z = net.forward(z)?;
    let functions = distill_functions(q, &phi_z, kernel)?;
    TaskSummary::from_parts(task_id, z.clone(), functions, likelihood)
}

/// Distillation from precomputed inducing features.
pub fn distill_functions<T: Scalar>(
    q: &WeightPosterior<T>,
    phi_z: &Matrix<T>,
    kernel: &KernelConfig<T>,
) -> Result<Vec<SummaryFunction<T>>> {
    if phi_z.cols() != q.feature_dim() {
        return Err(dim_err("distill", q.feature_dim(), phi_z.cols()));
    }
    (0..q.function_count())
        .map(|c| {
            let mu_u = phi_z.matvec(q.mu(c))?;
            let a = phi_z.matmul(&q.l(c))?;
            let mut cov_u = a.matmul_t(&a)?;
            cov_u.symmetrize();
            cov_u.add_diag(kernel.inducing_jitter);
            let chol = cholesky(&cov_u)?;
            cov_u.add_diag(chol.jitter_used());
            Ok(SummaryFunction {
                mu_u,
                cov_u,
                logdet_cov_u: chol.logdet(),
            })
        })
        .collect()
}

/// Latent predictive moments from features:
/// `mean = mu_uᵀ K_Z⁻¹ k_Z*`,
/// `var = k** − k_Z*ᵀ K_Z⁻¹ k_Z* + (K_Z⁻¹ k_Z*)ᵀ cov_u (K_Z⁻¹ k_Z*)`, clamped at 0.
pub fn latent_moments<T: Scalar>(
    functions: &[SummaryFunction<T>],
    ws: &KernelWorkspace<T>,
    cfg: &KernelConfig<T>,
    phi_star: &Matrix<T>,
) -> Result<LatentMoments<T>> {
    let b = phi_star.rows();
    let m = ws.m();
    let mut k_zs = Matrix::zeros(m, b);
    gemm(cfg.sigma_w2, ws.phi_z(), Op::N, phi_star, Op::T, T::zero(), &mut k_zs)?;
    let a = ws.chol().solve(&k_zs)?;
    let kss = kernel_diag(cfg, phi_star);
    let mut base = kss;
    for i in 0..m {
        let (kr, ar) = (k_zs.row(i), a.row(i));
        for j in 0..b {
            base[j] -= kr[j] * ar[j];
        }
    }
    let mut mean = Vec::with_capacity(functions.len());
    let mut variance = Vec::with_capacity(functions.len());
    for f in functions {
        mean.push(a.t_matvec(&f.mu_u)?);
        let sa = f.cov_u.matmul(&a)?;
        let mut var = base.clone();
        for i in 0..m {
            let (sr, ar) = (sa.row(i), a.row(i));
            for j in 0..b {
                var[j] += sr[j] * ar[j];
            }
        }
        for v in var.iter_mut() {
            if *v < T::zero() {
                if *v < -T::of(1e-8) {
                    log::debug!("clamping negative predictive variance {v:e}");
                }
                *v = T::zero();
            }
        }
        variance.push(var);
    }
    Ok(LatentMoments { mean, variance })
}

/// Predictive distribution of a past task at `x_star` under the network's
/// current parameters.
pub fn predict<T: Scalar>(
    summary: &TaskSummary<T>,
    x_star: &Matrix<T>,
    net: &FeatureNet<T>,
    cfg: &KernelConfig<T>,
) -> Result<Vec<Prediction<T>>> {
    let rule = gauss_hermite(PREDICT_QUAD_ORDER)?;
    predict_with(summary, x_star, net, cfg, &rule, PREDICT_MC_SAMPLES, PREDICT_SEED)
}

pub fn predict_with<T: Scalar>(
    summary: &TaskSummary<T>,
    x_star: &Matrix<T>,
    net: &FeatureNet<T>,
    cfg: &KernelConfig<T>,
    rule: &QuadratureRule<T>,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<Prediction<T>>> {
    let ws = KernelWorkspace::new(net, cfg, &summary.z)?;
    let phi = net.forward(x_star)?;
    let moments = latent_moments(&summary.functions, &ws, cfg, &phi)?;
    Ok(assemble_predictions(summary.likelihood, &moments, rule, mc_samples, seed))
}

pub fn assemble_predictions<T: Scalar>(
    likelihood: Likelihood,
    moments: &LatentMoments<T>,
    rule: &QuadratureRule<T>,
    mc_samples: usize,
    seed: u64,
) -> Vec<Prediction<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = moments.mean.first().map_or(0, Vec::len);
    (0..b)
        .map(|j| {
            let mean: Vec<T> = moments.mean.iter().map(|m| m[j]).collect();
            let variance: Vec<T> = moments.variance.iter().map(|v| v[j]).collect();
            let class_probabilities =
                class_probabilities(likelihood, &mean, &variance, rule, mc_samples, &mut rng);
            Prediction {
                mean,
                variance,
                class_probabilities,
            }
        })
        .collect()
}

/// Index of the most probable class.
pub fn argmax<T: Scalar>(p: &[T]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_net::Layer;
    use rand::Rng;

    fn identity_net(d: usize) -> FeatureNet<f64> {
        FeatureNet::from_layers(vec![Layer {
            weight: Matrix::identity(d),
            bias: vec![0.0; d],
        }])
        .unwrap()
    }

    fn random_posterior(k: usize, c: usize, seed: u64) -> WeightPosterior<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = (0..c)
            .map(|_| {
                let mu = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let l = Matrix::from_fn(k, k, |i, j| {
                    if i == j {
                        rng.random_range(0.5..1.5)
                    } else if j < i {
                        rng.random_range(-0.3..0.3)
                    } else {
                        0.0
                    }
                });
                (mu, l)
            })
            .collect();
        WeightPosterior::from_factors(parts).unwrap()
    }

    #[test]
    fn identity_features_copy_the_weight_posterior() {
        let net = identity_net(3);
        let q = random_posterior(3, 1, 1);
        // positive rows keep the ReLU identity exact
        let z = Matrix::identity(3);
        let s = distill(&q, &z, &net, &KernelConfig::default(), Likelihood::BernoulliLogit, 0).unwrap();
        let f = &s.functions()[0];
        assert_eq!(f.mu_u, q.mu(0).to_vec());
        assert!(f.cov_u.sub(&q.covariance(0)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_mean_distills_to_zero() {
        let net = FeatureNet::<f64>::init(&[4, 5], 2).unwrap();
        let q = WeightPosterior::from_factors(vec![(vec![0.0; 5], Matrix::identity(5))]).unwrap();
        let z = Matrix::from_fn(3, 4, |i, j| (i + j) as f64 * 0.3);
        let s = distill(&q, &z, &net, &KernelConfig::default(), Likelihood::BernoulliLogit, 0).unwrap();
        assert!(s.functions()[0].mu_u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singular_covariance_gets_jitter() {
        // M = 4 inducing inputs with K = 2 features
        let net = FeatureNet::<f64>::init(&[3, 2], 3).unwrap();
        let q = random_posterior(2, 1, 4);
        let z = Matrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).sin().abs());
        let s = distill(&q, &z, &net, &KernelConfig::default(), Likelihood::BernoulliLogit, 0).unwrap();
        assert!(cholesky(&s.functions()[0].cov_u).is_ok());
    }

    #[test]
    fn orthogonal_input_reverts_to_prior() {
        let net = identity_net(3);
        let cfg = KernelConfig::default();
        let q = random_posterior(3, 1, 5);
        let z = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let s = distill(&q, &z, &net, &KernelConfig::default(), Likelihood::BernoulliLogit, 0).unwrap();
        let x = Matrix::from_rows(&[[0.0, 0.0, 2.0]]).unwrap();
        let p = predict(&s, &x, &net, &cfg).unwrap();
        assert!(p[0].mean[0].abs() < 1e-15);
        assert!((p[0].variance[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = FeatureNet::<f64>::init(&[4, 6], 6).unwrap();
        let q = random_posterior(6, 3, 7);
        let z = Matrix::from_fn(2, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let s = distill(&q, &z, &net, &KernelConfig::default(), Likelihood::Softmax { classes: 3 }, 4).unwrap();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"FRCLSUM1");
        assert_eq!(buf.len(), 8 + 4 * 8 + 8 * s.stored_values());
        let back = TaskSummary::<f64>::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, s);
        assert!(TaskSummary::<f64>::read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }
}
