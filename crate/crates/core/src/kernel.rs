//! Linear kernel on learned features, `k(x, x') = σ_w² φ(x)ᵀ φ(x')`, and the
//! Nyström reconstruction residuals it induces for a set of inducing inputs.

use crate::error::{dim_err, FrclError, Result};
use crate::feature_net::FeatureNet;
use crate::numerics::{cholesky, dot, gemm, tri_solve, CholeskyFactor, Matrix, Op, TriSide};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig<T> {
    pub sigma_w2: T,
    /// Constant added to the diagonal of every inducing Gram matrix `K_Z`
    /// (and of distilled covariances), as if each inducing value carried
    /// white noise of this variance. Zero gives the plain kernel.
    pub inducing_jitter: T,
}

impl<T: Scalar> KernelConfig<T> {
    pub fn new(sigma_w2: T) -> Result<Self> {
        if !(sigma_w2 > T::zero()) || !sigma_w2.is_finite() {
            return Err(FrclError::InvalidConfig(format!(
                "prior weight variance must be finite and positive, got {sigma_w2}"
            )));
        }
        Ok(Self { sigma_w2, inducing_jitter: T::zero() })
    }

    pub fn with_inducing_jitter(mut self, jitter: T) -> Result<Self> {
        if !(jitter >= T::zero()) || !jitter.is_finite() {
            return Err(FrclError::InvalidConfig(format!("inducing jitter must be finite and nonnegative, got {jitter}")));
        }
        self.inducing_jitter = jitter;
        Ok(self)
    }
}

impl<T: Scalar> Default for KernelConfig<T> {
    fn default() -> Self {
        Self { sigma_w2: T::one(), inducing_jitter: T::zero() }
    }
}

/// `σ_w² Φ_A Φ_Bᵀ`.
pub fn gram<T: Scalar>(
    net: &FeatureNet<T>,
    cfg: &KernelConfig<T>,
    a: &Matrix<T>,
    b: &Matrix<T>,
) -> Result<Matrix<T>> {
    let pa = net.forward(a)?;
    let pb = net.forward(b)?;
    gram_features(cfg, &pa, &pb)
}

/// Kernel matrix from precomputed feature rows.
pub fn gram_features<T: Scalar>(
    cfg: &KernelConfig<T>,
    phi_a: &Matrix<T>,
    phi_b: &Matrix<T>,
) -> Result<Matrix<T>> {
    if phi_a.cols() != phi_b.cols() {
        return Err(dim_err("gram", phi_a.cols(), phi_b.cols()));
    }
    let mut k = Matrix::zeros(phi_a.rows(), phi_b.rows());
    gemm(cfg.sigma_w2, phi_a, Op::N, phi_b, Op::T, T::zero(), &mut k)?;
    Ok(k)
}

/// `K_Z = σ_w² Φ_Z Φ_Zᵀ + ε I`, symmetrised.
pub fn inducing_gram<T: Scalar>(cfg: &KernelConfig<T>, phi_z: &Matrix<T>) -> Matrix<T> {
    let mut k = Matrix::zeros(phi_z.rows(), phi_z.rows());
    gemm(cfg.sigma_w2, phi_z, Op::N, phi_z, Op::T, T::zero(), &mut k).expect("square output");
    k.symmetrize();
    k.add_diag(cfg.inducing_jitter);
    k
}

/// `k(x, x)` for every feature row.
pub fn kernel_diag<T: Scalar>(cfg: &KernelConfig<T>, phi: &Matrix<T>) -> Vec<T> {
    phi.row_iter().map(|r| cfg.sigma_w2 * dot(r, r)).collect()
}

/// Kernel quantities on an inducing set, evaluated at one parameter snapshot.
#[derive(Clone, Debug)]
pub struct KernelWorkspace<T> {
    k_z: Matrix<T>,
    chol: CholeskyFactor<T>,
    phi_z: Matrix<T>,
    k_xz: Option<Matrix<T>>,
    diag_k_x: Option<Vec<T>>,
}

impl<T: Scalar> KernelWorkspace<T> {
    pub fn new(net: &FeatureNet<T>, cfg: &KernelConfig<T>, z: &Matrix<T>) -> Result<Self> {
        Self::from_features(cfg, net.forward(z)?)
    }

    pub fn from_features(cfg: &KernelConfig<T>, phi_z: Matrix<T>) -> Result<Self> {
        if phi_z.rows() == 0 {
            return Err(FrclError::InvalidConfig("empty inducing set".into()));
        }
        let k_z = inducing_gram(cfg, &phi_z);
        let chol = cholesky(&k_z)?;
        Ok(Self {
            k_z,
            chol,
            phi_z,
            k_xz: None,
            diag_k_x: None,
        })
    }

    /// Attaches `K_XZ` and `diag(K_X)` for a set of evaluation inputs.
    pub fn with_inputs(
        mut self,
        net: &FeatureNet<T>,
        cfg: &KernelConfig<T>,
        x: &Matrix<T>,
    ) -> Result<Self> {
        let phi_x = net.forward(x)?;
        self.k_xz = Some(gram_features(cfg, &phi_x, &self.phi_z)?);
        self.diag_k_x = Some(kernel_diag(cfg, &phi_x));
        Ok(self)
    }

    pub fn k_z(&self) -> &Matrix<T> {
        &self.k_z
    }

    pub fn chol(&self) -> &CholeskyFactor<T> {
        &self.chol
    }

    pub fn phi_z(&self) -> &Matrix<T> {
        &self.phi_z
    }

    pub fn k_xz(&self) -> Option<&Matrix<T>> {
        self.k_xz.as_ref()
    }

    pub fn diag_k_x(&self) -> Option<&[T]> {
        self.diag_k_x.as_deref()
    }

    pub fn m(&self) -> usize {
        self.phi_z.rows()
    }
}

/// Per-point Nyström residuals `k(x,x) − k_{Zx}ᵀ K_Z⁻¹ k_{Zx}`; their sum is
/// the trace criterion of the inducing set.
pub fn nystrom_residuals<T: Scalar>(
    ws: &KernelWorkspace<T>,
    x: &Matrix<T>,
    net: &FeatureNet<T>,
    cfg: &KernelConfig<T>,
) -> Result<Vec<T>> {
    let phi_x = net.forward(x)?;
    nystrom_residuals_from_features(ws, cfg, &phi_x)
}

pub fn nystrom_residuals_from_features<T: Scalar>(
    ws: &KernelWorkspace<T>,
    cfg: &KernelConfig<T>,
    phi_x: &Matrix<T>,
) -> Result<Vec<T>> {
    let mut k_zx = Matrix::zeros(ws.m(), phi_x.rows());
    gemm(cfg.sigma_w2, &ws.phi_z, Op::N, phi_x, Op::T, T::zero(), &mut k_zx)?;
    let v = tri_solve(&ws.chol, &k_zx, TriSide::Lower)?;
    let mut explained = vec![T::zero(); phi_x.rows()];
    for r in v.row_iter() {
        for (e, &val) in explained.iter_mut().zip(r) {
            *e += val * val;
        }
    }
    let diag = kernel_diag(cfg, phi_x);
    Ok(diag
        .into_iter()
        .zip(explained)
        .map(|(k, e)| clamp_residual(k - e, k))
        .collect())
}

pub(crate) fn clamp_residual<T: Scalar>(r: T, scale: T) -> T {
    if r >= T::zero() {
        return r;
    }
    if r < -T::of(1e-8) * scale.max(T::one()) {
        log::debug!("clamping negative Nyström residual {r:e} (k(x,x) = {scale:e})");
    }
    T::zero()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_net::Layer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_net(d: usize) -> FeatureNet<f64> {
        FeatureNet::from_layers(vec![Layer {
            weight: Matrix::identity(d),
            bias: vec![0.0; d],
        }])
        .unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn orthonormal_inputs_give_identity() {
        let net = identity_net(2);
        let e = Matrix::identity(2);
        let k = gram(&net, &KernelConfig::default(), &e, &e).unwrap();
        assert_eq!(k, Matrix::identity(2));
    }

    #[test]
    fn gram_matches_double_loop() {
        let net = FeatureNet::<f64>::init(&[5, 7, 6], 1).unwrap();
        let cfg = KernelConfig::new(1.7).unwrap();
        let a = random(4, 5, 2);
        let b = random(3, 5, 3);
        let k = gram(&net, &cfg, &a, &b).unwrap();
        let pa = net.forward(&a).unwrap();
        let pb = net.forward(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for c in 0..6 {
                    s += pa[(i, c)] * pb[(j, c)];
                }
                assert!((k[(i, j)] - 1.7 * s).abs() < 1e-10);
            }
        }
        let kt = gram(&net, &cfg, &b, &a).unwrap();
        assert_eq!(kt, k.transpose());
        let kaa = gram(&net, &cfg, &a, &a).unwrap();
        assert!(kaa.asymmetry() == 0.0 && kaa.diag().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(KernelConfig::new(0.0f64).is_err());
        assert!(KernelConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn residuals_vanish_when_z_is_x() {
        let net = FeatureNet::<f64>::init(&[4, 8, 6], 4).unwrap();
        let cfg = KernelConfig::default();
        let x = random(5, 4, 5);
        let ws = KernelWorkspace::new(&net, &cfg, &x).unwrap();
        let r = nystrom_residuals(&ws, &x, &net, &cfg).unwrap();
        assert!(r.iter().all(|&v| (0.0..1e-6).contains(&v)), "{r:?}");
    }

    #[test]
    fn orthogonal_point_keeps_full_prior_variance() {
        let net = identity_net(3);
        let cfg = KernelConfig::default();
        let z = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.0, 2.0, 1.0]]).unwrap();
        let ws = KernelWorkspace::new(&net, &cfg, &z).unwrap();
        let r = nystrom_residuals(&ws, &x, &net, &cfg).unwrap();
        assert!((r[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn workspace_attaches_cross_kernel() {
        let net = FeatureNet::<f64>::init(&[3, 4], 6).unwrap();
        let cfg = KernelConfig::default();
        let z = random(2, 3, 7);
        let x = random(5, 3, 8);
        let ws = KernelWorkspace::new(&net, &cfg, &z).unwrap().with_inputs(&net, &cfg, &x).unwrap();
        assert_eq!(ws.k_xz().unwrap().shape(), (5, 2));
        assert_eq!(ws.diag_k_x().unwrap().len(), 5);
        let mut kz = ws.k_z().clone();
        kz.add_diag(ws.chol().jitter_used());
        assert!(ws.chol().reconstruct().sub(&kz).unwrap().max_abs() < 1e-9);
    }
}
