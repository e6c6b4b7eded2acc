//! The training objective for the current task: expected log-likelihood of
//! the minibatch under the weight posterior, minus the weight-space KL, minus
//! the functional KL of every stored task summary against the GP prior that
//! the current features induce on its inducing inputs.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, FrclError, Result};
use crate::feature_net::{FeatureNet, ParamGrad};
use crate::kernel::{inducing_gram, KernelConfig};
use crate::likelihood::{binary_terms, fill_standard_normal, label_sign, softmax_terms, Likelihood};
use crate::numerics::{cholesky, gemm, Matrix, Op, QuadratureRule};
use crate::posterior::{kl_gauss_vs_standard, HeadGrad, WeightPosterior};
use crate::scalar::Scalar;
use crate::summary::TaskSummary;

/// Monte-Carlo samples per point for the softmax expectation during training.
pub const TRAIN_MC_SAMPLES: usize = 128;

/// A labelled minibatch.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a, T> {
    pub x: &'a Matrix<T>,
    pub labels: &'a [usize],
}

/// Everything the objective needs besides parameters, data and summaries.
#[derive(Clone, Debug)]
pub struct ObjectiveContext<'a, T> {
    pub kernel: KernelConfig<T>,
    pub likelihood: Likelihood,
    pub rule: &'a QuadratureRule<T>,
    /// Size `N_k` of the current task's training set.
    pub data_size: usize,
    /// Number of summaries whose KL is evaluated; `None` means all.
    pub subsample: Option<usize>,
    pub mc_samples: usize,
    /// Only used to label divergence errors.
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveReport<T> {
    pub elbo: T,
    pub expected_loglik: T,
    pub kl_current: T,
    /// One entry per summary: rescaled KL if evaluated this step, else 0.
    pub kl_regularisers: Vec<T>,
    /// Gradients of `elbo`, i.e. ascent directions.
    pub theta_grad: ParamGrad<T>,
    pub head_grad: HeadGrad<T>,
}

impl<T: Scalar> ObjectiveReport<T> {
    pub fn kl_regulariser_total(&self) -> T {
        self.kl_regularisers.iter().copied().sum()
    }
}

/// `Σ_c KL(q(u_c) ‖ N(0, K_Z))` with `K_Z` built from the current network,
/// and its gradient with respect to the network parameters.
pub fn kl_functional<T: Scalar>(
    summary: &TaskSummary<T>,
    net: &FeatureNet<T>,
    cfg: &KernelConfig<T>,
) -> Result<(T, ParamGrad<T>)> {
    let pass = net.forward_pass(summary.z())?;
    let (value, dphi) = kl_functional_features(summary, cfg, pass.output())?;
    let grad = net.backward_cached(&pass, &dphi)?;
    Ok((value, grad))
}

/// Functional KL from precomputed inducing features `Φ_Z`, returning the
/// cotangent `∂KL/∂Φ_Z`.
///
/// With `Ā = Σ_c (Σ_c + μ_c μ_cᵀ)` the value is
/// `½[tr(K⁻¹Ā) − CM + C ln|K| − Σ_c ln|Σ_c|]`, and
/// `∂KL/∂K = ½(C K⁻¹ − K⁻¹ Ā K⁻¹)`, so `∂KL/∂Φ = σ_w² (C K⁻¹Φ − K⁻¹ĀK⁻¹Φ)`.
pub fn kl_functional_features<T: Scalar>(
    summary: &TaskSummary<T>,
    cfg: &KernelConfig<T>,
    phi_z: &Matrix<T>,
) -> Result<(T, Matrix<T>)> {
    let m = summary.m();
    if phi_z.rows() != m {
        return Err(dim_err("kl_functional", m, phi_z.rows()));
    }
    let c = T::of(summary.functions().len() as f64);
    let chol = cholesky(&inducing_gram(cfg, phi_z))?;
    let kinv_a = chol.solve(summary.moment_sum())?;
    let kinv_phi = chol.solve(phi_z)?;
    let value = T::of(0.5)
        * (kinv_a.trace() - c * T::of(m as f64) + c * chol.logdet() - summary.logdet_sum());
    // K⁻¹ĀK⁻¹Φ = (K⁻¹Ā)(K⁻¹Φ)
    let mut dphi = kinv_phi.scale(c * cfg.sigma_w2);
    gemm(-cfg.sigma_w2, &kinv_a, Op::N, &kinv_phi, Op::N, T::one(), &mut dphi)?;
    Ok((value, dphi))
}

/// Evaluates the objective and all its gradients on one minibatch.
pub fn assemble_objective<T: Scalar>(
    net: &FeatureNet<T>,
    q: &WeightPosterior<T>,
    batch: Batch<'_, T>,
    summaries: &[TaskSummary<T>],
    ctx: &ObjectiveContext<'_, T>,
    seed: u64,
) -> Result<ObjectiveReport<T>> {
    let b = batch.x.rows();
    if b == 0 {
        return Err(FrclError::EmptyBatch);
    }
    if batch.labels.len() != b {
        return Err(dim_err("assemble_objective labels", b, batch.labels.len()));
    }
    if q.function_count() != ctx.likelihood.function_count() {
        return Err(dim_err(
            "assemble_objective head",
            ctx.likelihood.function_count(),
            q.function_count(),
        ));
    }
    for &y in batch.labels {
        ctx.likelihood.check_label(y)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let chosen: Vec<usize> = match ctx.subsample {
        Some(s) if s < summaries.len() => {
            if s == 0 {
                return Err(FrclError::InvalidConfig("KL subsample must be at least 1".into()));
            }
            let mut idx = sample(&mut rng, summaries.len(), s).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..summaries.len()).collect(),
    };
    let kl_scale = T::of(summaries.len() as f64 / chosen.len().max(1) as f64);

    // one pass over the batch and every evaluated inducing set
    let mut parts: Vec<&Matrix<T>> = vec![batch.x];
    parts.extend(chosen.iter().map(|&i| summaries[i].z()));
    let stacked = Matrix::vstack(&parts)?;
    let pass = net.forward_pass(&stacked)?;
    let phi_all = pass.output();
    let kdim = phi_all.cols();
    let phi = phi_all.slice_rows(0, b);
    let mut cot = Matrix::zeros(phi_all.rows(), kdim);

    let scale = T::of(ctx.data_size as f64 / b as f64);
    let (ell, mut head_grad) = likelihood_terms(q, &phi, batch.labels, ctx, &mut rng, scale, &mut cot)?;

    let mut kl_current = T::zero();
    for c in 0..q.function_count() {
        let (v, dmu, dl) = kl_gauss_vs_standard(q, c, ctx.kernel.sigma_w2)?;
        kl_current += v;
        for (g, d) in head_grad.mu[c].iter_mut().zip(dmu) {
            *g -= d;
        }
        head_grad.l_raw[c].axpy(-T::one(), &dl)?;
    }

    let mut kl_regularisers = vec![T::zero(); summaries.len()];
    let mut row = b;
    for &i in &chosen {
        let s = &summaries[i];
        let m = s.m();
        let phi_z = phi_all.slice_rows(row, row + m);
        let (v, dphi) = kl_functional_features(s, &ctx.kernel, &phi_z)?;
        kl_regularisers[i] = kl_scale * v;
        for r in 0..m {
            for (o, &g) in cot.row_mut(row + r).iter_mut().zip(dphi.row(r)) {
                *o -= kl_scale * g;
            }
        }
        row += m;
    }

    let theta_grad = net.backward_cached(&pass, &cot)?;
    let elbo = ell - kl_current - kl_regularisers.iter().copied().sum::<T>();
    if !elbo.is_finite() || !theta_grad.is_finite() || !head_grad.to_vec().iter().all(|v| v.is_finite()) {
        return Err(FrclError::NonFiniteObjective {
            step: ctx.step,
            detail: format!(
                "elbo {elbo:e}, expected log-likelihood {ell:e}, weight KL {kl_current:e}, regularisers {:?}",
                kl_regularisers.iter().map(|v| v.as_f64()).collect::<Vec<_>>()
            ),
        });
    }
    Ok(ObjectiveReport {
        elbo,
        expected_loglik: ell,
        kl_current,
        kl_regularisers,
        theta_grad,
        head_grad,
    })
}

/// Scaled expected log-likelihood; adds `∂/∂Φ` into the first rows of `cot`
/// and returns the head gradient.
fn likelihood_terms<T: Scalar>(
    q: &WeightPosterior<T>,
    phi: &Matrix<T>,
    labels: &[usize],
    ctx: &ObjectiveContext<'_, T>,
    rng: &mut ChaCha8Rng,
    scale: T,
    cot: &mut Matrix<T>,
) -> Result<(T, HeadGrad<T>)> {
    let b = phi.rows();
    let kdim = phi.cols();
    let nf = q.function_count();
    let ls: Vec<Matrix<T>> = (0..nf).map(|c| q.l(c)).collect();
    let means: Vec<Vec<T>> = (0..nf).map(|c| phi.matvec(q.mu(c))).collect::<Result<_>>()?;
    // rows of Φ L_c are L_cᵀ φ_i
    let projected: Vec<Matrix<T>> = ls.iter().map(|l| phi.matmul(l)).collect::<Result<_>>()?;
    let stds: Vec<Vec<T>> = projected
        .iter()
        .map(|a| a.row_iter().map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect())
        .collect();

    // per point derivatives with respect to the marginal mean and std
    let mut gm = vec![vec![T::zero(); b]; nf];
    let mut gs = vec![vec![T::zero(); b]; nf];
    let mut total = T::zero();
    match ctx.likelihood {
        Likelihood::BernoulliLogit => {
            for i in 0..b {
                let (v, dm, ds) = binary_terms(means[0][i], stds[0][i], label_sign(labels[i]), ctx.rule);
                total += v;
                gm[0][i] = dm;
                gs[0][i] = ds;
            }
        }
        Likelihood::Softmax { .. } => {
            let samples = ctx.mc_samples.max(1);
            let mut eps = vec![T::zero(); samples * nf];
            let mut mi = vec![T::zero(); nf];
            let mut si = vec![T::zero(); nf];
            for i in 0..b {
                fill_standard_normal(rng, &mut eps);
                for c in 0..nf {
                    mi[c] = means[c][i];
                    si[c] = stds[c][i];
                }
                let (v, dm, ds) = softmax_terms(&mi, &si, labels[i], &eps);
                total += v;
                for c in 0..nf {
                    gm[c][i] = dm[c];
                    gs[c][i] = ds[c];
                }
            }
        }
    }

    let mut head = HeadGrad::zeros(nf, kdim);
    for c in 0..nf {
        // ∂s/∂φ = L a / s and ∂s/∂L = φ aᵀ / s with a = Lᵀφ
        let mut weighted = projected[c].clone();
        for i in 0..b {
            let s = stds[c][i];
            let w = if s > T::zero() { scale * gs[c][i] / s } else { T::zero() };
            weighted.row_mut(i).iter_mut().for_each(|v| *v *= w);
        }
        let gm_scaled: Vec<T> = gm[c].iter().map(|&g| scale * g).collect();
        head.mu[c] = phi.t_matvec(&gm_scaled)?;
        let mut dl = Matrix::zeros(kdim, kdim);
        gemm(T::one(), phi, Op::T, &weighted, Op::N, T::zero(), &mut dl)?;
        q.chain_factor_grad(c, &mut dl);
        head.l_raw[c] = dl;

        let mu = q.mu(c);
        let mut dphi = Matrix::zeros(b, kdim);
        gemm(T::one(), &weighted, Op::N, &ls[c], Op::T, T::zero(), &mut dphi)?;
        for i in 0..b {
            let g = gm_scaled[i];
            for ((o, &d), &m) in cot.row_mut(i).iter_mut().zip(dphi.row(i)).zip(mu) {
                *o += d + g * m;
            }
        }
    }
    Ok((scale * total, head))
}
