//! Marginal success probability `P(beta, sigma2) = E[logistic(beta + b)]`,
//! `b ~ N(0, sigma2)`, and delta-method intervals on the logit scale.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numeric::{logistic, logit, Rng};
use crate::quadrature::QuadratureRule;

/// Standard normal draws `z_q`; random effects are `b_q = sigma * z_q`, so the
/// same draws can be reused across variances.
#[derive(Debug, Clone)]
pub struct NormalDraws(Vec<f64>);

impl NormalDraws {
    pub fn sample(count: usize, rng: &mut Rng) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("number of Monte Carlo draws must be at least 1"));
        }
        Ok(Self((0..count).map(|_| rng.sample(StandardNormal)).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("sigma2 must be finite and >= 0, got {sigma2}")));
    }
    Ok(())
}

/// Stochastic-integration estimate of the marginal success probability from
/// `q` fresh draws of `rng`.
pub fn success_probability(beta: f64, sigma2: f64, q: usize, rng: &mut Rng) -> Result<f64> {
    check_sigma2(sigma2)?;
    let draws = NormalDraws::sample(q, rng)?;
    Ok(success_probability_with(beta, sigma2, &draws)?.value)
}

pub fn success_probability_with(beta: f64, sigma2: f64, draws: &NormalDraws) -> Result<McEstimate> {
    check_sigma2(sigma2)?;
    if draws.is_empty() {
        return Err(Error::invalid("no Monte Carlo draws"));
    }
    if sigma2 == 0.0 {
        return Ok(McEstimate {
            value: logistic(beta),
            std_error: 0.0,
        });
    }
    let sigma = sigma2.sqrt();
    let n = draws.len() as f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for &z in draws.as_slice() {
        let p = logistic(beta + sigma * z);
        sum += p;
        sum_sq += p * p;
    }
    let mean = sum / n;
    let var = if draws.len() > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
    })
}

/// Quadrature evaluation of the same integral.
pub fn success_probability_quadrature(beta: f64, sigma2: f64, rule: &QuadratureRule) -> Result<f64> {
    check_sigma2(sigma2)?;
    Ok(rule.normal_expectation(sigma2, |b| logistic(beta + b)))
}

/// `P` and its partial derivatives with respect to `beta` and `sigma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityGradient {
    pub p: f64,
    pub dp_dbeta: f64,
    pub dp_dsigma2: f64,
}

/// Derivative integrals by stochastic integration over the supplied draws:
/// `dP/dbeta = E[π(1-π)]`, `dP/dsigma2 = E[π (b² - σ²) / (2σ⁴)]`.
pub fn probability_gradient_with(beta: f64, sigma2: f64, draws: &NormalDraws) -> Result<ProbabilityGradient> {
    check_sigma2(sigma2)?;
    if draws.is_empty() {
        return Err(Error::invalid("no Monte Carlo draws"));
    }
    if sigma2 == 0.0 {
        let p = logistic(beta);
        let v = p * (1.0 - p);
        return Ok(ProbabilityGradient {
            p,
            dp_dbeta: v,
            // Limit sigma2 -> 0 of E[f(beta + b)]' is f''(beta) / 2.
            dp_dsigma2: 0.5 * v * (1.0 - 2.0 * p),
        });
    }
    let sigma = sigma2.sqrt();
    let n = draws.len() as f64;
    let (mut p_sum, mut db_sum, mut ds_sum) = (0.0, 0.0, 0.0);
    for &z in draws.as_slice() {
        let p = logistic(beta + sigma * z);
        p_sum += p;
        db_sum += p * (1.0 - p);
        // (b² - σ²) / (2σ⁴) with b = σ z
        ds_sum += p * (z * z - 1.0) / (2.0 * sigma2);
    }
    Ok(ProbabilityGradient {
        p: p_sum / n,
        dp_dbeta: db_sum / n,
        dp_dsigma2: ds_sum / n,
    })
}

pub fn probability_gradient_quadrature(beta: f64, sigma2: f64, rule: &QuadratureRule) -> Result<ProbabilityGradient> {
    check_sigma2(sigma2)?;
    if sigma2 == 0.0 {
        let p = logistic(beta);
        let v = p * (1.0 - p);
        return Ok(ProbabilityGradient {
            p,
            dp_dbeta: v,
            dp_dsigma2: 0.5 * v * (1.0 - 2.0 * p),
        });
    }
    Ok(ProbabilityGradient {
        p: rule.normal_expectation(sigma2, |b| logistic(beta + b)),
        dp_dbeta: rule.normal_expectation(sigma2, |b| {
            let p = logistic(beta + b);
            p * (1.0 - p)
        }),
        dp_dsigma2: rule.normal_expectation(sigma2, |b| {
            logistic(beta + b) * (b * b - sigma2) / (2.0 * sigma2 * sigma2)
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    /// Set when the interval collapsed (P numerically 0 or 1, clamped
    /// clusters, or crossing bounds in an intersection).
    pub degenerate: bool,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self {
            lower,
            upper,
            degenerate: false,
        }
    }

    pub fn point(p: f64) -> Self {
        Self {
            lower: p,
            upper: p,
            degenerate: true,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Two-sided standard normal quantile for a confidence level.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

/// Delta-method interval for `P` built on `gamma = logit(P)`, with `q` fresh
/// draws from `rng` shared by `P` and both derivative integrals.
pub fn delta_method_ci(
    beta: f64,
    sigma2: f64,
    cov: [[f64; 2]; 2],
    q: usize,
    level: f64,
    rng: &mut Rng,
) -> Result<Interval> {
    let draws = NormalDraws::sample(q, rng)?;
    delta_method_ci_with(beta, sigma2, cov, level, &draws)
}

/// `cov` is the asymptotic covariance of `(beta, sigma2)`.
pub fn delta_method_ci_with(
    beta: f64,
    sigma2: f64,
    cov: [[f64; 2]; 2],
    level: f64,
    draws: &NormalDraws,
) -> Result<Interval> {
    let z = normal_quantile(level)?;
    check_covariance(&cov)?;
    let g = probability_gradient_with(beta, sigma2, draws)?;
    Ok(delta_interval(g, cov, z))
}

pub(crate) fn delta_interval(g: ProbabilityGradient, cov: [[f64; 2]; 2], z: f64) -> Interval {
    let p = g.p;
    let denom = p * (1.0 - p);
    if !(denom > 0.0) || !denom.is_finite() {
        return Interval::point(if p >= 0.5 { 1.0 } else { 0.0 });
    }
    let gb = g.dp_dbeta / denom;
    let gs = g.dp_dsigma2 / denom;
    let var = gb * gb * cov[0][0] + 2.0 * gb * gs * cov[0][1] + gs * gs * cov[1][1];
    let se = var.max(0.0).sqrt();
    let gamma = logit(p);
    if se == 0.0 {
        return Interval::new(p, p);
    }
    Interval::new(logistic(gamma - z * se), logistic(gamma + z * se))
}

fn check_covariance(cov: &[[f64; 2]; 2]) -> Result<()> {
    let scale = cov[0][0].abs().max(cov[1][1].abs()).max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let ok = cov.iter().flatten().all(|v| v.is_finite())
        && cov[0][0] >= -tol
        && cov[1][1] >= -tol
        && (cov[0][1] - cov[1][0]).abs() <= tol
        && det >= -tol * scale;
    if !ok {
        return Err(Error::invalid("covariance must be symmetric positive semi-definite"));
    }
    Ok(())
}
