//! Random-intercept logistic model `logit P(y_ij = 1 | b_i) = beta_j + b_i`,
//! `b_i ~ N(0, sigma^2)`, fitted by maximum marginal likelihood.
//!
//! Each expert's marginal likelihood is a one-dimensional integral over `b_i`,
//! evaluated with Gauss–Hermite quadrature in log space. Frequency weights act
//! as exponents on the per-expert marginal likelihood, so an integer weight `m`
//! is equivalent to `m` copies of the expert. All reductions over experts go
//! through [`ExactSum`], which makes every result independent of thread count
//! and entry order, and makes weighting agree bit-for-bit with replication.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_logistic, log_sum_exp, logistic, ExactSum};
use crate::quadrature::{gauss_hermite, QuadratureRule};
use crate::table::{ExpertRatings, RatingsTable};

const LN_SQRT_PI: f64 = 0.572_364_942_924_700_1;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Ascending cluster ids; `beta[k]` belongs to `cluster_ids[k]`.
    pub cluster_ids: Vec<u64>,
    pub beta: Vec<f64>,
    /// `sigma^2 = exp(2 * log_sigma)`.
    pub log_sigma: f64,
}

impl ModelParams {
    pub fn new(cluster_ids: Vec<u64>, beta: Vec<f64>, log_sigma: f64) -> Result<Self> {
        if cluster_ids.len() != beta.len() {
            return Err(Error::invalid("cluster_ids and beta differ in length"));
        }
        if cluster_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("cluster_ids must be strictly increasing"));
        }
        if !log_sigma.is_finite() || beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self {
            cluster_ids,
            beta,
            log_sigma,
        })
    }

    pub fn from_sigma2(cluster_ids: Vec<u64>, beta: Vec<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::invalid("sigma2 must be positive"));
        }
        Self::new(cluster_ids, beta, 0.5 * sigma2.ln())
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn sigma2(&self) -> f64 {
        (2.0 * self.log_sigma).exp()
    }

    pub fn beta_of(&self, cluster_id: u64) -> Option<f64> {
        self.index_of(cluster_id).map(|k| self.beta[k])
    }

    pub fn index_of(&self, cluster_id: u64) -> Option<usize> {
        self.cluster_ids.binary_search(&cluster_id).ok()
    }

    /// Number of free parameters (all betas plus `log_sigma`).
    pub fn dim(&self) -> usize {
        self.beta.len() + 1
    }

    /// `(beta..., log_sigma)` as one vector.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.push(self.log_sigma);
        v
    }

    /// Same clusters, values from a vector laid out as in [`Self::to_vector`].
    pub fn with_vector(&self, v: &[f64]) -> Self {
        Self {
            cluster_ids: self.cluster_ids.clone(),
            beta: v[..v.len() - 1].to_vec(),
            log_sigma: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub quadrature_order: usize,
    pub adaptive: bool,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Starting values; empirical logits and `log_sigma = 0` when absent.
    pub initial: Option<ModelParams>,
    /// |beta| bound for clusters whose ratings are all 0 or all 1.
    pub beta_cap: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            quadrature_order: 30,
            adaptive: true,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            initial: None,
            beta_cap: 15.0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.quadrature_order == 0 {
            return Err(Error::invalid("quadrature order must be at least 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::invalid("gradient tolerance must be positive"));
        }
        if !(self.beta_cap > 0.0 && self.beta_cap.is_finite()) {
            return Err(Error::invalid("beta_cap must be positive and finite"));
        }
        Ok(())
    }

    pub fn rule(&self) -> Result<QuadratureRule> {
        Ok(gauss_hermite(self.quadrature_order)?.with_adaptive(self.adaptive))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Separation {
    AllZero,
    AllOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik: f64,
    /// Gradient at `params`, ordered as `(beta..., log_sigma)`.
    pub gradient: Vec<f64>,
    /// Hessian of the log-likelihood over `(beta..., log_sigma)`.
    pub hessian: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub separation_flags: BTreeSet<u64>,
}

impl FitResult {
    pub fn sigma2(&self) -> f64 {
        self.params.sigma2()
    }

    fn free_indices(&self) -> Vec<usize> {
        free_indices(&self.params, &self.separation_flags)
    }

    /// Max |gradient| over the parameters that were optimized.
    pub fn gradient_max_norm(&self) -> f64 {
        self.free_indices()
            .into_iter()
            .map(|k| self.gradient[k].abs())
            .fold(0.0, f64::max)
    }

    /// Negated inverse Hessian over the free parameters, embedded in the full
    /// `(beta..., log_sigma)` layout with zeros for clamped clusters. `None`
    /// when the free block is not negative definite.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let free = self.free_indices();
        let info = DMatrix::from_fn(free.len(), free.len(), |a, b| -self.hessian[(free[a], free[b])]);
        let inv = info.cholesky()?.inverse();
        let p = self.params.dim();
        let mut cov = DMatrix::zeros(p, p);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                cov[(i, j)] = inv[(a, b)];
            }
        }
        Some(cov)
    }

    /// Asymptotic covariance of `(beta_j, sigma^2)` for one cluster, with the
    /// Jacobian of `sigma^2 = exp(2 log_sigma)` applied.
    pub fn beta_sigma2_cov(&self, cluster_id: u64) -> Option<[[f64; 2]; 2]> {
        let cov = self.covariance()?;
        let j = self.params.index_of(cluster_id)?;
        Some(beta_sigma2_block(&cov, j, self.params.sigma2()))
    }
}

pub(crate) fn beta_sigma2_block(cov: &DMatrix<f64>, j: usize, sigma2: f64) -> [[f64; 2]; 2] {
    let s = cov.nrows() - 1;
    let jac = 2.0 * sigma2;
    let c_bs = cov[(j, s)] * jac;
    [[cov[(j, j)], c_bs], [c_bs, cov[(s, s)] * jac * jac]]
}

fn free_indices(params: &ModelParams, flags: &BTreeSet<u64>) -> Vec<usize> {
    let mut v: Vec<usize> = params
        .cluster_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| !flags.contains(id))
        .map(|(k, _)| k)
        .collect();
    v.push(params.beta.len());
    v
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Level {
    Value,
    Gradient,
    Hessian,
}

struct Evaluation {
    loglik: f64,
    gradient: Vec<f64>,
    hessian: Option<DMatrix<f64>>,
}

/// Per-expert center and scale for adaptive quadrature.
#[derive(Clone, Copy, Debug)]
struct Center {
    mode: f64,
    scale: f64,
}

/// One quadrature node mapped onto the random-effect scale.
#[derive(Clone, Copy)]
struct Node {
    b: f64,
    /// d b / d log_sigma and its second derivative.
    db: f64,
    d2b: f64,
    /// Log node weight (including the normal density when adaptive).
    lw: f64,
    dlw: f64,
    d2lw: f64,
}

fn nodes_for(rule: &QuadratureRule, log_sigma: f64, center: Option<Center>) -> Vec<Node> {
    let sigma = log_sigma.exp();
    match center {
        None => rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(&x, &w)| {
                let b = sigma * std::f64::consts::SQRT_2 * x;
                Node {
                    b,
                    db: b,
                    d2b: b,
                    lw: w.ln() - LN_SQRT_PI,
                    dlw: 0.0,
                    d2lw: 0.0,
                }
            })
            .collect(),
        Some(c) => {
            let s2 = sigma * sigma;
            rule.nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&x, &w)| {
                    let b = c.mode + std::f64::consts::SQRT_2 * c.scale * x;
                    let z2 = b * b / s2;
                    Node {
                        b,
                        db: 0.0,
                        d2b: 0.0,
                        lw: w.ln() + x * x + (std::f64::consts::SQRT_2 * c.scale).ln()
                            - 0.5 * z2
                            - log_sigma
                            - LN_SQRT_2PI,
                        dlw: z2 - 1.0,
                        d2lw: -2.0 * z2,
                    }
                })
                .collect()
        }
    }
}

/// Contribution of one expert: log marginal likelihood, gradient and Hessian
/// over the local parameter list `(betas of rated clusters..., log_sigma)`.
struct ExpertTerm {
    loglik: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

fn expert_term(
    expert: &ExpertRatings,
    pmap: &[usize],
    params: &ModelParams,
    nodes: &[Node],
    level: Level,
) -> ExpertTerm {
    let m = expert.ratings.len();
    let nq = nodes.len();
    let mut lq = vec![0.0; nq];
    let want_grad = level >= Level::Gradient;
    let mut resid = if want_grad { vec![0.0; nq * m] } else { Vec::new() };
    let mut var = if level == Level::Hessian {
        vec![0.0; nq * m]
    } else {
        Vec::new()
    };
    for (q, node) in nodes.iter().enumerate() {
        let mut l = node.lw;
        for (j, &(c, y)) in expert.ratings.iter().enumerate() {
            let eta = params.beta[pmap[c]] + node.b;
            l += if y == 1 { log_logistic(eta) } else { log_logistic(-eta) };
            if want_grad {
                let p = logistic(eta);
                resid[q * m + j] = y as f64 - p;
                if level == Level::Hessian {
                    var[q * m + j] = p * (1.0 - p);
                }
            }
        }
        lq[q] = l;
    }
    let loglik = log_sum_exp(&lq);
    if !want_grad {
        return ExpertTerm {
            loglik,
            grad: Vec::new(),
            hess: Vec::new(),
        };
    }
    let post: Vec<f64> = lq.iter().map(|l| (l - loglik).exp()).collect();
    // Score of each node's log integrand, local layout (betas..., log_sigma).
    let d = m + 1;
    let mut score = vec![0.0; nq * d];
    for (q, node) in nodes.iter().enumerate() {
        let r = &resid[q * m..(q + 1) * m];
        score[q * d..q * d + m].copy_from_slice(r);
        score[q * d + m] = node.db * r.iter().sum::<f64>() + node.dlw;
    }
    let mut grad = vec![0.0; d];
    for q in 0..nq {
        for k in 0..d {
            grad[k] += post[q] * score[q * d + k];
        }
    }
    if level != Level::Hessian {
        return ExpertTerm {
            loglik,
            grad,
            hess: Vec::new(),
        };
    }
    // H = E_post[d2 l + (s - g)(s - g)']
    let mut hess = vec![0.0; d * d];
    let mut c = vec![0.0; d];
    for (q, node) in nodes.iter().enumerate() {
        let pq = post[q];
        for k in 0..d {
            c[k] = score[q * d + k] - grad[k];
        }
        let v = &var[q * m..(q + 1) * m];
        let r = &resid[q * m..(q + 1) * m];
        for a in 0..d {
            let ca = pq * c[a];
            for b in a..d {
                hess[a * d + b] += ca * c[b];
            }
        }
        let mut ss = node.d2lw;
        for j in 0..m {
            hess[j * d + j] -= pq * v[j];
            hess[j * d + m] -= pq * v[j] * node.db;
            ss += -v[j] * node.db * node.db + r[j] * node.d2b;
        }
        hess[m * d + m] += pq * ss;
    }
    for a in 0..d {
        for b in 0..a {
            hess[a * d + b] = hess[b * d + a];
        }
    }
    ExpertTerm { loglik, grad, hess }
}

/// Maps each table cluster position to its position in `params`.
fn param_map(params: &ModelParams, data: &RatingsTable) -> Result<Vec<usize>> {
    data.cluster_ids()
        .iter()
        .map(|id| {
            params
                .index_of(*id)
                .ok_or_else(|| Error::ModelMismatch(format!("no beta supplied for cluster {id}")))
        })
        .collect()
}

fn conditional_mode(expert: &ExpertRatings, pmap: &[usize], params: &ModelParams) -> Center {
    let inv_s2 = 1.0 / params.sigma2();
    let mut b = 0.0_f64;
    let mut curv = inv_s2;
    for _ in 0..50 {
        let mut g = -b * inv_s2;
        let mut h = inv_s2;
        for &(c, y) in &expert.ratings {
            let p = logistic(params.beta[pmap[c]] + b);
            g += y as f64 - p;
            h += p * (1.0 - p);
        }
        curv = h;
        let step = (g / h).clamp(-5.0, 5.0);
        b += step;
        if step.abs() < 1e-10 * (1.0 + b.abs()) {
            break;
        }
    }
    Center {
        mode: b,
        scale: 1.0 / curv.sqrt(),
    }
}

fn centers_for(
    params: &ModelParams,
    data: &RatingsTable,
    pmap: &[usize],
    rule: &QuadratureRule,
) -> Option<Vec<Center>> {
    rule.adaptive.then(|| {
        data.experts()
            .par_iter()
            .map(|e| conditional_mode(e, pmap, params))
            .collect()
    })
}

fn evaluate(
    params: &ModelParams,
    data: &RatingsTable,
    pmap: &[usize],
    rule: &QuadratureRule,
    centers: Option<&[Center]>,
    level: Level,
) -> Result<Evaluation> {
    let shared = if centers.is_none() {
        Some(nodes_for(rule, params.log_sigma, None))
    } else {
        None
    };
    let terms: Vec<ExpertTerm> = data
        .experts()
        .par_iter()
        .enumerate()
        .map(|(i, e)| match centers {
            Some(cs) => {
                let nodes = nodes_for(rule, params.log_sigma, Some(cs[i]));
                expert_term(e, pmap, params, &nodes, level)
            }
            None => expert_term(e, pmap, params, shared.as_ref().unwrap(), level),
        })
        .collect();

    let p = params.dim();
    let s_idx = p - 1;
    let mut ll = ExactSum::new();
    let mut grad = if level >= Level::Gradient {
        vec![ExactSum::new(); p]
    } else {
        Vec::new()
    };
    let mut hess = if level == Level::Hessian {
        vec![ExactSum::new(); p * p]
    } else {
        Vec::new()
    };
    let mut local = Vec::new();
    for (i, (e, t)) in data.experts().iter().zip(&terms).enumerate() {
        if !t.loglik.is_finite() {
            return Err(Error::NumericOverflow(format!(
                "non-finite marginal likelihood for expert {}",
                e.id
            )));
        }
        let w = data.weight(i);
        ll.add_product(w, t.loglik);
        if level == Level::Value {
            continue;
        }
        local.clear();
        local.extend(e.ratings.iter().map(|&(c, _)| pmap[c]));
        local.push(s_idx);
        for (a, &ga) in local.iter().enumerate() {
            grad[ga].add_product(w, t.grad[a]);
        }
        if level == Level::Hessian {
            let d = local.len();
            for (a, &ga) in local.iter().enumerate() {
                for (b, &gb) in local.iter().enumerate().skip(a) {
                    let (r, c) = (ga.min(gb), ga.max(gb));
                    hess[r * p + c].add_product(w, t.hess[a * d + b]);
                }
            }
        }
    }
    let loglik = ll.value();
    if !loglik.is_finite() {
        return Err(Error::NumericOverflow("non-finite log-likelihood".into()));
    }
    let gradient: Vec<f64> = grad.iter().map(ExactSum::value).collect();
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericOverflow("non-finite gradient".into()));
    }
    let hessian = (level == Level::Hessian).then(|| {
        // Upper triangle only.
        let mut h = DMatrix::zeros(p, p);
        for r in 0..p {
            for c in r..p {
                let v = hess[r * p + c].value();
                h[(r, c)] = v;
                h[(c, r)] = v;
            }
        }
        h
    });
    Ok(Evaluation {
        loglik,
        gradient,
        hessian,
    })
}

/// Marginal log-likelihood `Σ_i ω_i log ∫ Π_j π^y (1-π)^(1-y) φ(b | 0, σ²) db`.
pub fn log_likelihood(params: &ModelParams, data: &RatingsTable, rule: &QuadratureRule) -> Result<f64> {
    let pmap = param_map(params, data)?;
    let centers = centers_for(params, data, &pmap, rule);
    Ok(evaluate(params, data, &pmap, rule, centers.as_deref(), Level::Value)?.loglik)
}

/// As [`log_likelihood`], with adaptive centers taken from `center_params`
/// instead of `params`. This is the function whose derivatives
/// [`log_likelihood_gradient`] and [`log_likelihood_hessian`] return.
pub fn log_likelihood_with_centers(
    params: &ModelParams,
    data: &RatingsTable,
    rule: &QuadratureRule,
    center_params: &ModelParams,
) -> Result<f64> {
    let pmap = param_map(params, data)?;
    let cmap = param_map(center_params, data)?;
    let centers = centers_for(center_params, data, &cmap, rule);
    Ok(evaluate(params, data, &pmap, rule, centers.as_deref(), Level::Value)?.loglik)
}

/// Analytic gradient over `(beta..., log_sigma)` in the order of `params`.
/// With an adaptive rule the centers are held at their values for `params`.
pub fn log_likelihood_gradient(params: &ModelParams, data: &RatingsTable, rule: &QuadratureRule) -> Result<Vec<f64>> {
    let pmap = param_map(params, data)?;
    let centers = centers_for(params, data, &pmap, rule);
    Ok(evaluate(params, data, &pmap, rule, centers.as_deref(), Level::Gradient)?.gradient)
}

/// Analytic Hessian over `(beta..., log_sigma)`.
pub fn log_likelihood_hessian(
    params: &ModelParams,
    data: &RatingsTable,
    rule: &QuadratureRule,
) -> Result<DMatrix<f64>> {
    let pmap = param_map(params, data)?;
    let centers = centers_for(params, data, &pmap, rule);
    let ev = evaluate(params, data, &pmap, rule, centers.as_deref(), Level::Hessian)?;
    Ok(ev.hessian.unwrap())
}

/// Clusters whose ratings are all 0 or all 1, aligned with `cluster_ids`.
pub fn detect_separation(data: &RatingsTable) -> Vec<Option<Separation>> {
    data.cluster_counts()
        .into_iter()
        .map(|(s, m)| {
            if s == 0 {
                Some(Separation::AllZero)
            } else if s == m {
                Some(Separation::AllOne)
            } else {
                None
            }
        })
        .collect()
}

/// Haldane-corrected empirical logits, using weighted counts.
pub fn empirical_logits(data: &RatingsTable) -> Vec<f64> {
    data.weighted_cluster_counts()
        .into_iter()
        .map(|(s, m)| ((s + 0.5) / (m + 1.0)).ln() - ((m - s + 0.5) / (m + 1.0)).ln())
        .collect()
}

const MAX_STEP: f64 = 5.0;
const MAX_HALVINGS: usize = 40;

/// Maximizes the marginal likelihood by damped Newton–Raphson on the analytic
/// gradient and Hessian, with step halving.
pub fn fit_ml(data: &RatingsTable, options: &FitOptions) -> Result<FitResult> {
    options.validate()?;
    let rule = options.rule()?;
    let ids = data.cluster_ids().to_vec();
    let separation = detect_separation(data);
    let mut flags = BTreeSet::new();

    let mut params = match &options.initial {
        Some(init) => {
            let beta = ids
                .iter()
                .map(|id| {
                    init.beta_of(*id)
                        .ok_or_else(|| Error::ModelMismatch(format!("initial values lack cluster {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            ModelParams::new(ids.clone(), beta, init.log_sigma)?
        }
        None => ModelParams::new(ids.clone(), empirical_logits(data), 0.0)?,
    };
    for (k, sep) in separation.iter().enumerate() {
        match sep {
            Some(Separation::AllZero) => params.beta[k] = -options.beta_cap,
            Some(Separation::AllOne) => params.beta[k] = options.beta_cap,
            None => continue,
        }
        flags.insert(ids[k]);
    }
    let free = free_indices(&params, &flags);
    let pmap: Vec<usize> = (0..ids.len()).collect();

    let mut converged = false;
    let mut iterations = 0;
    let mut ev;
    loop {
        let centers = centers_for(&params, data, &pmap, &rule);
        ev = evaluate(&params, data, &pmap, &rule, centers.as_deref(), Level::Hessian)?;
        let gmax = free.iter().map(|&k| ev.gradient[k].abs()).fold(0.0, f64::max);
        if gmax <= options.gradient_tolerance {
            converged = true;
            break;
        }
        if iterations >= options.max_iterations {
            break;
        }
        iterations += 1;

        let h = ev.hessian.as_ref().unwrap();
        let g = DVector::from_iterator(free.len(), free.iter().map(|&k| ev.gradient[k]));
        let info = DMatrix::from_fn(free.len(), free.len(), |a, b| -h[(free[a], free[b])]);
        let mut dir = newton_direction(info, &g);
        let biggest = dir.amax();
        if biggest > MAX_STEP {
            dir *= MAX_STEP / biggest;
        }

        let theta = params.to_vector();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut trial = theta.clone();
            for (a, &k) in free.iter().enumerate() {
                trial[k] += t * dir[a];
            }
            let cand = params.with_vector(&trial);
            let val = evaluate(&cand, data, &pmap, &rule, centers.as_deref(), Level::Value);
            if let Ok(v) = val {
                if v.loglik >= ev.loglik - 1e-12 * (1.0 + ev.loglik.abs()) {
                    accepted = Some(cand);
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some(p) => params = p,
            None => break,
        }
    }

    Ok(FitResult {
        params,
        loglik: ev.loglik,
        gradient: ev.gradient,
        hessian: ev.hessian.unwrap(),
        converged,
        iterations,
        separation_flags: flags,
    })
}

/// Solves `info * d = g`; adds a ridge until `info` is positive definite.
fn newton_direction(info: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = info.clone().cholesky() {
        return ch.solve(g);
    }
    let scale = info.diagonal().amax().max(1.0);
    let mut ridge = 1e-8 * scale;
    for _ in 0..30 {
        let mut m = info.clone();
        for k in 0..m.nrows() {
            m[(k, k)] += ridge;
        }
        if let Some(ch) = m.cholesky() {
            return ch.solve(g);
        }
        ridge *= 10.0;
    }
    g / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Rating;

    fn table(entries: &[(u64, u64, u8)]) -> RatingsTable {
        RatingsTable::from_entries(entries.iter().map(|&(e, c, y)| Rating::new(e, c, y))).unwrap()
    }

    #[test]
    fn degenerate_variance_single_rating() {
        let t = table(&[(1, 1, 1)]);
        let p = ModelParams::new(vec![1], vec![0.0], -30.0).unwrap();
        let rule = gauss_hermite(30).unwrap();
        let ll = log_likelihood(&p, &t, &rule).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-6);
        let g = log_likelihood_gradient(&p, &t, &rule).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn score_reduces_to_logistic_regression() {
        let t = table(&[(1, 1, 1)]);
        let rule = gauss_hermite(20).unwrap();
        for beta in [-2.0, 0.3, 1.7] {
            let p = ModelParams::new(vec![1], vec![beta], -25.0).unwrap();
            let g = log_likelihood_gradient(&p, &t, &rule).unwrap();
            assert!((g[0] - (1.0 - logistic(beta))).abs() < 1e-9);
        }
    }

    #[test]
    fn balanced_data_zero_score() {
        let t = table(&[(1, 1, 1), (1, 2, 0), (2, 1, 0), (2, 2, 1)]);
        let p = ModelParams::new(vec![1, 2], vec![0.0, 0.0], -25.0).unwrap();
        let g = log_likelihood_gradient(&p, &t, &gauss_hermite(30).unwrap()).unwrap();
        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
    }

    #[test]
    fn missing_beta_is_model_mismatch() {
        let t = table(&[(1, 1, 1), (1, 2, 0)]);
        let p = ModelParams::new(vec![1], vec![0.0], 0.0).unwrap();
        let err = log_likelihood(&p, &t, &gauss_hermite(5).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ModelMismatch(_)));
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let t = table(&[
            (1, 1, 1),
            (1, 2, 0),
            (1, 3, 1),
            (2, 1, 0),
            (2, 3, 0),
            (3, 2, 1),
            (3, 3, 1),
        ]);
        let rule = gauss_hermite(30).unwrap();
        let p = ModelParams::new(vec![1, 2, 3], vec![0.4, -0.7, 1.1], 0.3).unwrap();
        let h = log_likelihood_hessian(&p, &t, &rule).unwrap();
        let step = 1e-5;
        let base = p.to_vector();
        for k in 0..p.dim() {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[k] += step;
            dn[k] -= step;
            let gu = log_likelihood_gradient(&p.with_vector(&up), &t, &rule).unwrap();
            let gd = log_likelihood_gradient(&p.with_vector(&dn), &t, &rule).unwrap();
            for r in 0..p.dim() {
                let fd = (gu[r] - gd[r]) / (2.0 * step);
                assert!(
                    (fd - h[(r, k)]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "({r},{k}) {fd} vs {}",
                    h[(r, k)]
                );
            }
        }
    }

    #[test]
    fn separated_cluster_is_clamped() {
        let t = table(&[
            (1, 1, 1),
            (1, 2, 0),
            (2, 1, 0),
            (2, 2, 0),
            (3, 1, 1),
            (3, 2, 0),
            (4, 1, 0),
        ]);
        let fit = fit_ml(&t, &FitOptions::default()).unwrap();
        assert!(fit.separation_flags.contains(&2));
        assert_eq!(fit.params.beta[1], -15.0);
        assert!(fit.converged);
    }

    #[test]
    fn empty_options_rejected() {
        let t = table(&[(1, 1, 1)]);
        let opts = FitOptions {
            quadrature_order: 0,
            ..FitOptions::default()
        };
        assert!(fit_ml(&t, &opts).is_err());
    }

    #[test]
    fn adaptive_agrees_with_high_order() {
        let t = table(&[
            (1, 1, 1),
            (1, 2, 1),
            (1, 3, 1),
            (2, 1, 0),
            (2, 2, 0),
            (2, 3, 1),
            (3, 1, 1),
            (3, 2, 0),
        ]);
        let p = ModelParams::from_sigma2(vec![1, 2, 3], vec![0.5, -0.2, 1.0], 9.0).unwrap();
        let reference = log_likelihood(&p, &t, &gauss_hermite(120).unwrap().with_adaptive(true)).unwrap();
        let adaptive = gauss_hermite(40).unwrap().with_adaptive(true);
        let v = log_likelihood(&p, &t, &adaptive).unwrap();
        assert!((v - reference).abs() < 1e-7, "{v} vs {reference}");
    }
}
