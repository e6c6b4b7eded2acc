use crate::error::{FrclError, Result};
use crate::scalar::Scalar;

pub const MAX_ORDER: usize = 64;

/// Physicists' Gauss–Hermite rule: `∫ e^{-x²} g(x) dx ≈ Σ w_j g(x_j)`.
#[derive(Clone, Debug)]
pub struct QuadratureRule<T> {
    nodes: Vec<T>,
    weights: Vec<T>,
}

/// Nodes and weights of the `order`-point Gauss–Hermite rule, sorted ascending.
///
/// Roots are found by Newton iteration on the orthonormal Hermite recurrence,
/// seeded with the usual asymptotic guesses and refined until they stop moving.
pub fn gauss_hermite<T: Scalar>(order: usize) -> Result<QuadratureRule<T>> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(FrclError::OrderOutOfRange(order));
    }
    let n = order;
    let nf = n as f64;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0f64; n];
    let mut w = vec![0.0f64; n];
    let half = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let (p1, p2) = hermite_pair(n, z, pim4);
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                let (_, p2) = hermite_pair(n, z, pim4);
                pp = (2.0 * nf).sqrt() * p2;
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[half - 1] = 0.0;
    }
    x.reverse();
    w.reverse();
    Ok(QuadratureRule {
        nodes: x.into_iter().map(T::of).collect(),
        weights: w.into_iter().map(T::of).collect(),
    })
}

/// Orthonormal Hermite values `(h_n(z), h_{n-1}(z))`.
fn hermite_pair(n: usize, z: f64, pim4: f64) -> (f64, f64) {
    let mut p1 = pim4;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}

impl<T: Scalar> QuadratureRule<T> {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// `E_{f ~ N(mean, var)}[g(f)]`.
    pub fn expect(&self, mean: T, var: T, mut g: impl FnMut(T) -> T) -> T {
        let s = (T::of(2.0) * var.max(T::zero())).sqrt();
        let total: T = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * g(mean + s * x))
            .sum();
        total * T::FRAC_2_SQRT_PI() * T::of(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQRT_PI: f64 = 1.772_453_850_905_516;

    #[test]
    fn closed_forms() {
        let q1 = gauss_hermite::<f64>(1).unwrap();
        assert_eq!(q1.nodes(), &[0.0]);
        assert!((q1.weights()[0] - SQRT_PI).abs() < 1e-14);
        let q2 = gauss_hermite::<f64>(2).unwrap();
        let r = 0.5f64.sqrt();
        assert!((q2.nodes()[0] + r).abs() < 1e-14 && (q2.nodes()[1] - r).abs() < 1e-14);
        for &w in q2.weights() {
            assert!((w - SQRT_PI / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_sum_to_sqrt_pi() {
        for n in 1..=MAX_ORDER {
            let q = gauss_hermite::<f64>(n).unwrap();
            assert_eq!(q.order(), n);
            let s: f64 = q.weights().iter().sum();
            assert!((s - SQRT_PI).abs() < 1e-12, "order {n}: {s}");
            assert!(q.weights().iter().all(|&w| w > 0.0));
            assert!(q.nodes().windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn second_moment() {
        let q = gauss_hermite::<f64>(20).unwrap();
        let got = q.expect(0.3, 2.0, |f| f * f);
        assert!((got - 2.09).abs() < 1e-8);
    }

    #[test]
    fn order_bounds() {
        assert!(matches!(gauss_hermite::<f64>(0), Err(FrclError::OrderOutOfRange(0))));
        assert!(gauss_hermite::<f64>(65).is_err());
    }
}
