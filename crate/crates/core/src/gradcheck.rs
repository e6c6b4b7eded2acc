//! Analytic gradients against central finite differences on random
//! desk-scale instances. Instances with a ReLU pre-activation close to its
//! kink are redrawn, since finite differences straddling the kink are not a
//! meaningful reference there.
//!
//! Each suite returns the worst relative error it saw, with the denominator
//! floored at 1% of the largest entry of the reference gradient so that
//! near-zero entries are judged on the vector's scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::feature_net::{FeatureNet, Layer};
use crate::kernel::KernelConfig;
use crate::likelihood::Likelihood;
use crate::numerics::{cholesky, gauss_hermite, Matrix};
use crate::objective::{assemble_objective, kl_functional, Batch, ObjectiveContext, ObjectiveReport};
use crate::posterior::WeightPosterior;
use crate::summary::{distill, TaskSummary};

const H: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

/// Which gradient a suite checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    FeatureNet,
    FunctionalKl,
    ObjectiveTheta,
    ObjectiveMean,
    ObjectiveFactor,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::FeatureNet,
        Target::FunctionalKl,
        Target::ObjectiveTheta,
        Target::ObjectiveMean,
        Target::ObjectiveFactor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::FeatureNet => "feature net theta",
            Target::FunctionalKl => "functional KL theta",
            Target::ObjectiveTheta => "objective theta",
            Target::ObjectiveMean => "objective head mean",
            Target::ObjectiveFactor => "objective head factor",
        }
    }
}

/// Worst relative error of one suite.
#[derive(Clone, Copy, Debug)]
pub struct SuiteReport {
    pub target: Target,
    pub instances: usize,
    pub worst_relative_error: f64,
}

pub fn run_suite(target: Target, instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let err = match target {
            Target::FeatureNet => feature_net_instance(&mut rng)?,
            Target::FunctionalKl => kl_instance(&mut rng)?,
            _ => objective_check(&mut rng, target)?,
        };
        if let Some(e) = err {
            worst = worst.max(e);
            done += 1;
        }
    }
    Ok(SuiteReport {
        target,
        instances,
        worst_relative_error: worst,
    })
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2 * scale))
        .fold(0.0, f64::max)
}

pub fn central_diff(x0: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    (0..x0.len())
        .map(|i| {
            x[i] = x0[i] + H;
            let up = f(&x);
            x[i] = x0[i] - H;
            let down = f(&x);
            x[i] = x0[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Net with uniform weights and small positive biases, so most units are active.
pub fn random_net<R: Rng>(rng: &mut R, sizes: &[usize]) -> FeatureNet<f64> {
    let layers = sizes
        .windows(2)
        .map(|w| Layer {
            weight: random_matrix(rng, w[0], w[1], (3.0 / w[0] as f64).sqrt()),
            bias: (0..w[1]).map(|_| rng.random_range(0.0..0.5)).collect(),
        })
        .collect();
    FeatureNet::from_layers(layers).expect("consistent layer sizes")
}

pub fn random_posterior<R: Rng>(rng: &mut R, k: usize, functions: usize) -> WeightPosterior<f64> {
    let parts = (0..functions)
        .map(|_| {
            let mu = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l = Matrix::from_fn(k, k, |i, j| {
                if i == j {
                    rng.random_range(0.3..1.2)
                } else if j < i {
                    rng.random_range(-0.3..0.3)
                } else {
                    0.0
                }
            });
            (mu, l)
        })
        .collect();
    WeightPosterior::from_factors(parts).expect("positive diagonal")
}

/// Smallest |pre-activation| over every layer and input row.
pub fn kink_distance(net: &FeatureNet<f64>, x: &Matrix<f64>) -> f64 {
    let mut a = x.clone();
    let mut closest = f64::INFINITY;
    for l in net.layers() {
        let mut z = a.matmul(&l.weight).expect("matching widths");
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&l.bias) {
                *v += b;
                closest = closest.min(v.abs());
            }
        }
        a = z.map(|v| v.max(0.0));
    }
    closest
}

fn with_params(net: &FeatureNet<f64>, p: &[f64]) -> Result<FeatureNet<f64>> {
    let mut n = net.clone();
    n.set_param_vec(p)?;
    Ok(n)
}

fn feature_net_instance(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let sizes = [rng.random_range(2..=10), rng.random_range(2..=8), rng.random_range(1..=6)];
    let net = random_net(rng, &sizes);
    let b = rng.random_range(1..=8);
    let x = random_matrix(rng, b, sizes[0], 1.0);
    if kink_distance(&net, &x) < KINK_MARGIN {
        return Ok(None);
    }
    let cot = random_matrix(rng, x.rows(), sizes[2], 1.0);
    let analytic = net.gradient(&x, &cot)?.to_vec();
    let numeric = central_diff(&net.param_vec(), |p| {
        with_params(&net, p).and_then(|n| n.forward(&x)).map_or(f64::NAN, |f| f.dot(&cot))
    });
    Ok(Some(relative_error(&analytic, &numeric)))
}

/// A summary distilled under a different network, so the KL against `net`
/// is not trivially zero. `None` when the instance is badly conditioned.
fn summary_instance(
    rng: &mut ChaCha8Rng,
    net: &FeatureNet<f64>,
    m: usize,
    functions: usize,
    task_id: usize,
) -> Option<TaskSummary<f64>> {
    let other = random_net(rng, net.sizes());
    let z = random_matrix(rng, m, net.input_dim(), 1.0);
    let q = random_posterior(rng, net.feature_dim(), functions);
    let likelihood = Likelihood::from_function_count(functions).ok()?;
    let s = distill(&q, &z, &other, &KernelConfig::default(), likelihood, task_id).ok()?;
    let phi = net.forward(&z).ok()?;
    let k = phi.matmul_t(&phi).ok()?;
    let chol = cholesky(&k).ok()?;
    // keep K_Z comfortably invertible so the difference quotient is stable
    let min_pivot = chol.l().diag().iter().fold(f64::INFINITY, |m, &d| m.min(d));
    let well_posed = chol.jitter_used() == 0.0
        && min_pivot > 0.05
        && kink_distance(net, &z) >= KINK_MARGIN
        && s.functions().iter().all(|f| cholesky(&f.cov_u).is_ok());
    well_posed.then_some(s)
}

fn kl_instance(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let cfg = KernelConfig::default();
    let net = random_net(rng, &[6, 5, 4]);
    let functions = if rng.random_bool(0.5) { 1 } else { 3 };
    let Some(s) = summary_instance(rng, &net, 3, functions, 0) else {
        return Ok(None);
    };
    let (_, grad) = kl_functional(&s, &net, &cfg)?;
    let numeric = central_diff(&net.param_vec(), |p| {
        with_params(&net, p)
            .and_then(|n| kl_functional(&s, &n, &cfg))
            .map_or(f64::NAN, |r| r.0)
    });
    Ok(Some(relative_error(&grad.to_vec(), &numeric)))
}

struct ObjectiveInstance {
    net: FeatureNet<f64>,
    q: WeightPosterior<f64>,
    x: Matrix<f64>,
    labels: Vec<usize>,
    summaries: Vec<TaskSummary<f64>>,
    likelihood: Likelihood,
    data_size: usize,
    seed: u64,
}

impl ObjectiveInstance {
    fn draw(rng: &mut ChaCha8Rng) -> Option<Self> {
        let sizes = [rng.random_range(3..=10), rng.random_range(4..=8), rng.random_range(4..=6)];
        let net = random_net(rng, &sizes);
        let classes = if rng.random_bool(0.5) { 2 } else { 3 };
        let likelihood = Likelihood::for_classes(classes).ok()?;
        let q = random_posterior(rng, sizes[2], likelihood.function_count());
        let b = rng.random_range(1..=8);
        let x = random_matrix(rng, b, sizes[0], 1.0);
        if kink_distance(&net, &x) < KINK_MARGIN {
            return None;
        }
        let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let mut summaries = Vec::new();
        for t in 0..rng.random_range(0..=2) {
            let m = rng.random_range(1..=4.min(sizes[2]));
            let f = if rng.random_bool(0.5) { 1 } else { 3 };
            summaries.push(summary_instance(rng, &net, m, f, t)?);
        }
        Some(ObjectiveInstance {
            net,
            q,
            x,
            labels,
            summaries,
            likelihood,
            data_size: rng.random_range(b..=50),
            seed: rng.random(),
        })
    }

    fn report(
        &self,
        ctx: &ObjectiveContext<'_, f64>,
        net: &FeatureNet<f64>,
        q: &WeightPosterior<f64>,
    ) -> Result<ObjectiveReport<f64>> {
        let batch = Batch {
            x: &self.x,
            labels: &self.labels,
        };
        assemble_objective(net, q, batch, &self.summaries, ctx, self.seed)
    }

    fn elbo(&self, ctx: &ObjectiveContext<'_, f64>, net: &FeatureNet<f64>, q: &WeightPosterior<f64>) -> f64 {
        self.report(ctx, net, q).map_or(f64::NAN, |r| r.elbo)
    }

    /// Finite differences over the flat head entries listed in `idx`.
    fn head_numeric(&self, ctx: &ObjectiveContext<'_, f64>, idx: &[usize]) -> Vec<f64> {
        let base = self.q.to_vec();
        let picked: Vec<f64> = idx.iter().map(|&i| base[i]).collect();
        central_diff(&picked, |vals| {
            let mut full = base.clone();
            for (&i, &v) in idx.iter().zip(vals) {
                full[i] = v;
            }
            let mut q = self.q.clone();
            match q.set_from_vec(&full) {
                Ok(()) => self.elbo(ctx, &self.net, &q),
                Err(_) => f64::NAN,
            }
        })
    }
}

/// Flat head indices of the means (`true`) or the factor entries (`false`).
fn head_indices(q: &WeightPosterior<f64>, means: bool) -> Vec<usize> {
    let k = q.feature_dim();
    let per = k + k * (k + 1) / 2;
    (0..q.function_count())
        .flat_map(|c| {
            let start = c * per;
            if means {
                (start..start + k).collect::<Vec<_>>()
            } else {
                (start + k..start + per).collect()
            }
        })
        .collect()
}

fn objective_check(rng: &mut ChaCha8Rng, target: Target) -> Result<Option<f64>> {
    let Some(inst) = ObjectiveInstance::draw(rng) else {
        return Ok(None);
    };
    let rule = gauss_hermite(20)?;
    let ctx = ObjectiveContext {
        kernel: KernelConfig::default(),
        likelihood: inst.likelihood,
        rule: &rule,
        data_size: inst.data_size,
        subsample: None,
        mc_samples: 16,
        step: 0,
    };
    let r = inst.report(&ctx, &inst.net, &inst.q)?;
    let err = match target {
        Target::ObjectiveTheta => {
            let numeric = central_diff(&inst.net.param_vec(), |p| {
                with_params(&inst.net, p).map_or(f64::NAN, |n| inst.elbo(&ctx, &n, &inst.q))
            });
            relative_error(&r.theta_grad.to_vec(), &numeric)
        }
        _ => {
            let idx = head_indices(&inst.q, target == Target::ObjectiveMean);
            let flat = r.head_grad.to_vec();
            let analytic: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
            relative_error(&analytic, &inst.head_numeric(&ctx, &idx))
        }
    };
    Ok(Some(err))
}
