//! Gauss–Hermite rules for the weight function `exp(-x^2)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// π^(-1/4), leading coefficient of the orthonormal Hermite recurrence.
const PI_M4: f64 = 0.751_125_544_464_942_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    /// Ascending, symmetric about zero.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub order: usize,
    /// Recenter each expert's integral at its conditional mode.
    pub adaptive: bool,
}

impl QuadratureRule {
    pub fn with_adaptive(mut self, adaptive: bool) -> Self {
        self.adaptive = adaptive;
        self
    }

    /// Approximates `∫ f(x) exp(-x²) dx`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// Approximates `E[f(b)]` for `b ~ N(0, sigma2)`.
    pub fn normal_expectation<F: Fn(f64) -> f64>(&self, sigma2: f64, f: F) -> f64 {
        let scale = (2.0 * sigma2).sqrt();
        self.integrate(|x| f(scale * x)) / std::f64::consts::PI.sqrt()
    }
}

/// Largest supported order; beyond it the outermost weights underflow.
pub const MAX_ORDER: usize = 300;

/// Order-`order` Gauss–Hermite nodes and weights. Eigenvalues of the Jacobi
/// matrix seed a Newton iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(order: usize) -> Result<QuadratureRule> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::invalid(format!(
            "quadrature order must be between 1 and {MAX_ORDER}"
        )));
    }
    let n = order;
    let nf = n as f64;
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut guess: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    guess.sort_by(f64::total_cmp);

    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    // Polish the non-negative half and mirror it.
    for i in n / 2..n {
        let mut z = guess[i];
        for _ in 0..20 {
            let (p1, p2) = hermite_pair(n, z);
            let step = p1 / ((2.0 * nf).sqrt() * p2);
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        if n % 2 == 1 && i == n / 2 {
            z = 0.0;
        }
        let (_, p2) = hermite_pair(n, z);
        let pp = (2.0 * nf).sqrt() * p2;
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        order: n,
        adaptive: false,
    })
}

/// Orthonormal Hermite values `(p_n(z), p_{n-1}(z))`.
fn hermite_pair(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = PI_M4;
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}
