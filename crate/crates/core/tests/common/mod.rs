//! Independent oracles shared by the integration tests. Nothing here calls the
//! library's likelihood code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use permsplit::{Rating, RatingsTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-expert rows as `(cluster_id, rating)` lists, keyed by expert id.
pub type Rows = BTreeMap<u64, Vec<(u64, u8)>>;

pub fn rows_of(table: &RatingsTable) -> Rows {
    let mut rows = Rows::new();
    for r in table.entries() {
        rows.entry(r.expert_id).or_default().push((r.cluster_id, r.rating));
    }
    rows
}

/// `∫ Π π^y (1-π)^(1-y) φ(b; 0, σ²) db` by the trapezoid rule on
/// `[-10σ, 10σ]`, evaluated in probability space.
pub fn expert_integral(ratings: &[(u64, u8)], beta: &BTreeMap<u64, f64>, sigma: f64) -> f64 {
    let h = (sigma / 4.0).min(0.5);
    let steps = (20.0 * sigma / h).ceil() as usize;
    let h = 20.0 * sigma / steps as f64;
    let mut total = 0.0;
    for k in 0..=steps {
        let b = -10.0 * sigma + k as f64 * h;
        let mut f = (-0.5 * (b / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        for &(c, y) in ratings {
            let p = sigmoid(beta[&c] + b);
            f *= if y == 1 { p } else { 1.0 - p };
        }
        let end = k == 0 || k == steps;
        total += if end { 0.5 * f } else { f };
    }
    total * h
}

pub fn oracle_loglik(rows: &Rows, weights: Option<&BTreeMap<u64, f64>>, beta: &BTreeMap<u64, f64>, sigma: f64) -> f64 {
    rows.iter()
        .map(|(e, r)| weights.map_or(1.0, |w| w[e]) * expert_integral(r, beta, sigma).ln())
        .sum()
}

/// Maximizer of the oracle likelihood by repeated grid refinement over
/// `(beta..., log_sigma)`.
pub struct GridOptimum {
    pub beta: Vec<f64>,
    pub log_sigma: f64,
    pub loglik: f64,
    /// Some coordinate sits on the edge of the search box, so the
    /// unconstrained maximum may not exist.
    pub on_boundary: bool,
    /// Smallest eigenvalue of the negated oracle Hessian at the optimum.
    pub min_curvature: f64,
}

pub const LOG_SIGMA_RANGE: (f64, f64) = (-3.0, 3.0);

pub fn grid_search(rows: &Rows, clusters: &[u64]) -> GridOptimum {
    let k = clusters.len();
    let dim = k + 1;
    let mut lo: Vec<f64> = vec![-8.0; k];
    let mut hi: Vec<f64> = vec![8.0; k];
    lo.push(LOG_SIGMA_RANGE.0);
    hi.push(LOG_SIGMA_RANGE.1);
    let (glo, ghi) = (lo.clone(), hi.clone());
    let eval = |x: &[f64]| {
        let beta: BTreeMap<u64, f64> = clusters.iter().copied().zip(x[..k].iter().copied()).collect();
        oracle_loglik(rows, None, &beta, x[k].exp())
    };
    const G: usize = 5;
    let mut best = vec![0.0; dim];
    let mut best_val = f64::NEG_INFINITY;
    let at_edge = |x: &[f64]| (0..dim).any(|d| x[d] - glo[d] < 0.05 || ghi[d] - x[d] < 0.05);
    for round in 0..60 {
        // A maximum still pinned to the box after a dozen refinements is not
        // going to come back inside.
        if round == 12 && at_edge(&best) {
            break;
        }
        let total = G.pow(dim as u32);
        for idx in 0..total {
            let mut rem = idx;
            let x: Vec<f64> = (0..dim)
                .map(|d| {
                    let i = rem % G;
                    rem /= G;
                    lo[d] + (hi[d] - lo[d]) * i as f64 / (G - 1) as f64
                })
                .collect();
            let v = eval(&x);
            if v > best_val {
                best_val = v;
                best = x;
            }
        }
        let mut width = 0.0_f64;
        for d in 0..dim {
            let half = 0.35 * (hi[d] - lo[d]);
            lo[d] = (best[d] - half).max(glo[d]);
            hi[d] = (best[d] + half).min(ghi[d]);
            width = width.max(hi[d] - lo[d]);
        }
        if width < 1e-5 {
            break;
        }
    }
    let on_boundary = at_edge(&best);
    if on_boundary {
        return GridOptimum {
            beta: best[..k].to_vec(),
            log_sigma: best[k],
            loglik: best_val,
            on_boundary,
            min_curvature: 0.0,
        };
    }
    let h = 1e-3;
    let hess = nalgebra::DMatrix::from_fn(dim, dim, |a, b| {
        let at = |da: f64, db: f64| {
            let mut x = best.clone();
            x[a] += da;
            x[b] += db;
            eval(&x)
        };
        -(at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
    });
    let min_curvature = hess.symmetric_eigenvalues().min();
    GridOptimum {
        beta: best[..k].to_vec(),
        log_sigma: best[k],
        loglik: best_val,
        on_boundary,
        min_curvature,
    }
}

/// A random table with up to `max_experts` experts and `max_clusters`
/// clusters. Every expert rates at least one cluster and every cluster is
/// rated at least once.
pub fn random_table(rng: &mut ChaCha8Rng, max_experts: usize, max_clusters: usize, sigma2: f64) -> RatingsTable {
    loop {
        let n_e = rng.random_range(2..=max_experts);
        let n_c = rng.random_range(1..=max_clusters);
        let beta: Vec<f64> = (0..n_c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut entries = Vec::new();
        for e in 0..n_e as u64 {
            let b = sigma2.sqrt() * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng);
            for (c, bj) in beta.iter().enumerate() {
                if rng.random_bool(0.8) {
                    let y = u8::from(rng.random::<f64>() < sigmoid(bj + b));
                    entries.push(Rating::new(e + 1, c as u64 + 1, y));
                }
            }
        }
        let clusters: std::collections::BTreeSet<u64> = entries.iter().map(|r| r.cluster_id).collect();
        if clusters.len() == n_c && !entries.is_empty() {
            return RatingsTable::from_entries(entries).unwrap();
        }
    }
}

/// Every one of `experts` experts rates every one of `clusters` clusters.
pub fn random_complete_table(rng: &mut ChaCha8Rng, experts: usize, clusters: usize, sigma2: f64) -> RatingsTable {
    let beta: Vec<f64> = (0..clusters).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut entries = Vec::new();
    for e in 0..experts as u64 {
        let b = sigma2.sqrt() * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng);
        for (c, bj) in beta.iter().enumerate() {
            let y = u8::from(rng.random::<f64>() < sigmoid(bj + b));
            entries.push(Rating::new(e + 1, c as u64 + 1, y));
        }
    }
    RatingsTable::from_entries(entries).unwrap()
}

/// True when no cluster has all-0 or all-1 ratings.
pub fn unseparated(table: &RatingsTable) -> bool {
    table.cluster_counts().iter().all(|&(s, m)| s > 0 && s < m)
}

/// Copies expert `i` `m_i` times, giving copies fresh ids.
pub fn replicate(table: &RatingsTable, copies: &BTreeMap<u64, usize>) -> RatingsTable {
    let mut next = table.expert_ids().into_iter().max().unwrap() + 1;
    let mut entries: Vec<Rating> = table.entries().collect();
    for e in table.experts() {
        for _ in 1..copies[&e.id] {
            for &(c, y) in &e.ratings {
                entries.push(Rating::new(next, table.cluster_ids()[c], y));
            }
            next += 1;
        }
    }
    RatingsTable::from_entries(entries).unwrap()
}
