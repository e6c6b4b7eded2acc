//! Replay baseline: deterministic per-task heads on the shared features,
//! trained with cross-entropy on the current task plus bias-corrected
//! cross-entropy on small stored subsets of every earlier task.

use crate::error::{dim_err, Result};
use crate::likelihood::{label_sign, Likelihood};
use crate::numerics::{gemm, Matrix, Op};
use crate::scalar::{log_sigmoid, sigmoid, Scalar};

/// Raw inputs kept from a finished task.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T> {
    pub x: Matrix<T>,
    pub labels: Vec<usize>,
    /// Size `N_i` of the task the buffer was drawn from.
    pub task_size: usize,
}

impl<T> ReplayBuffer<T> {
    /// `M_i`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `N_i / M_i`.
    pub fn weight(&self) -> f64 {
        self.task_size as f64 / self.len().max(1) as f64
    }
}

/// Summed cross-entropy of a head `W` (`K × F`) on features `phi`, with the
/// gradients with respect to `W` and `phi`, all multiplied by `scale`.
pub fn cross_entropy<T: Scalar>(
    likelihood: Likelihood,
    w: &Matrix<T>,
    phi: &Matrix<T>,
    labels: &[usize],
    scale: T,
) -> Result<(T, Matrix<T>, Matrix<T>)> {
    if labels.len() != phi.rows() {
        return Err(dim_err("cross_entropy labels", phi.rows(), labels.len()));
    }
    let logits = phi.matmul(w)?;
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let f = logits.row(i);
        let gr = g.row_mut(i);
        match likelihood {
            Likelihood::BernoulliLogit => {
                let s: T = label_sign(y);
                loss -= log_sigmoid(s * f[0]);
                gr[0] = -s * sigmoid(-s * f[0]);
            }
            Likelihood::Softmax { .. } => {
                let fmax = f.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = f.iter().map(|&v| (v - fmax).exp()).sum();
                loss -= f[y] - fmax - z.ln();
                for (k, gv) in gr.iter_mut().enumerate() {
                    *gv = (f[k] - fmax).exp() / z;
                }
                gr[y] -= T::one();
            }
        }
    }
    g.scale_mut(scale);
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    gemm(T::one(), phi, Op::T, &g, Op::N, T::zero(), &mut dw)?;
    let dphi = g.matmul_t(w)?;
    Ok((scale * loss, dw, dphi))
}

/// Predicted class from the logits of a deterministic head.
pub fn predict_class<T: Scalar>(likelihood: Likelihood, logits: &[T]) -> usize {
    match likelihood {
        Likelihood::BernoulliLogit => usize::from(logits[0] > T::zero()),
        Likelihood::Softmax { .. } => crate::summary::argmax(logits),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let phi = Matrix::from_rows(&[[1.0, 0.5, -0.2], [0.3, -1.0, 0.8]]).unwrap();
        let w = Matrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.7).sin());
        let labels = [2, 0];
        let lik = Likelihood::Softmax { classes: 4 };
        let (_, dw, dphi) = cross_entropy(lik, &w, &phi, &labels, 1.5).unwrap();
        let h = 1e-6;
        for idx in 0..12 {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (cross_entropy(lik, &wp, &phi, &labels, 1.5).unwrap().0
                - cross_entropy(lik, &wm, &phi, &labels, 1.5).unwrap().0)
                / (2.0 * h);
            assert!((fd - dw.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..6 {
            let mut pp = phi.clone();
            pp.data_mut()[idx] += h;
            let mut pm = phi.clone();
            pm.data_mut()[idx] -= h;
            let fd = (cross_entropy(lik, &w, &pp, &labels, 1.5).unwrap().0
                - cross_entropy(lik, &w, &pm, &labels, 1.5).unwrap().0)
                / (2.0 * h);
            assert!((fd - dphi.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn binary_loss_at_zero_logit() {
        let phi = Matrix::from_rows(&[[1.0f64]]).unwrap();
        let w = Matrix::zeros(1, 1);
        let (l, _, _) = cross_entropy(Likelihood::BernoulliLogit, &w, &phi, &[1], 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }
}
