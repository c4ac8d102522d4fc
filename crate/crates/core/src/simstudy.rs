//! Simulation harness comparing full maximum likelihood with the splitting
//! procedure on data generated from known parameters.
//!
//! True cluster effects are drawn once and held fixed; every replication
//! draws a fresh panel of experts (random intercepts and numbers of ratings).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fit_ml, FitOptions, FitResult};
use crate::numeric::{derive_seed, logistic, rng_from, Rng};
use crate::probability::{
    delta_interval, normal_quantile, probability_gradient_with, success_probability_quadrature, Interval, NormalDraws,
};
use crate::quadrature::gauss_hermite;
use crate::splitproc::{run_procedure, PartitionSpec};
use crate::table::{Rating, RatingsTable};

/// Quadrature order for the true marginal probabilities.
const TRUTH_ORDER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_clusters: usize,
    pub n_experts: usize,
    pub beta_mean: f64,
    /// Variance of the true cluster effects.
    pub beta_var: f64,
    pub sigma2_true: f64,
    pub ratings_mean: f64,
    pub ratings_min: usize,
    pub ratings_max: usize,
    pub replications: usize,
    pub split_spec: PartitionSpec,
    pub fit_options: FitOptions,
    pub master_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_clusters: 50,
            n_experts: 147,
            beta_mean: -2.0,
            beta_var: 2.0,
            sigma2_true: 12.25,
            ratings_mean: 25.0,
            ratings_min: 8,
            ratings_max: 50,
            replications: 200,
            split_spec: PartitionSpec {
                subset_size: 5,
                permutations: 20,
                mc_draws: 10_000,
                ..PartitionSpec::default()
            },
            fit_options: FitOptions::default(),
            master_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 || self.n_experts == 0 {
            return Err(Error::invalid("need at least 2 clusters and 1 expert"));
        }
        if self.ratings_min == 0 || self.ratings_min > self.ratings_max || self.ratings_max > self.n_clusters {
            return Err(Error::invalid(
                "ratings range must satisfy 1 <= ratings_min <= ratings_max <= n_clusters",
            ));
        }
        if !(self.beta_var >= 0.0 && self.sigma2_true >= 0.0) || !self.beta_mean.is_finite() {
            return Err(Error::invalid("variances must be finite and non-negative"));
        }
        if !(self.ratings_mean > 0.0 && self.ratings_mean.is_finite()) {
            return Err(Error::invalid("ratings_mean must be positive"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("at least one replication is required"));
        }
        // Truncated-Poisson rejection must have a reasonable acceptance rate.
        let pois = Poisson::new(self.ratings_mean).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = rng_from(self.master_seed, &[u64::MAX]);
        let hits = (0..2000)
            .filter(|_| {
                let k = pois.sample(&mut rng) as usize;
                (self.ratings_min..=self.ratings_max).contains(&k)
            })
            .count();
        if hits == 0 {
            return Err(Error::invalid("ratings range has negligible Poisson mass"));
        }
        self.split_spec.validate(self.n_clusters)?;
        self.fit_options.validate()
    }

    pub fn cluster_ids(&self) -> Vec<u64> {
        (1..=self.n_clusters as u64).collect()
    }
}

/// Cluster effects drawn once from `N(beta_mean, beta_var)`; keys are 1..=N.
pub fn draw_true_betas(config: &SimConfig, rng: &mut Rng) -> Result<BTreeMap<u64, f64>> {
    let sd = config.beta_var.sqrt();
    let normal = Normal::new(config.beta_mean, sd).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(config
        .cluster_ids()
        .into_iter()
        .map(|id| {
            (
                id,
                if sd == 0.0 {
                    config.beta_mean
                } else {
                    normal.sample(rng)
                },
            )
        })
        .collect())
}

/// One replicated data set. Experts are numbered 1..=n.
pub fn generate_dataset(
    config: &SimConfig,
    true_betas: &BTreeMap<u64, f64>,
    replication_index: usize,
) -> Result<RatingsTable> {
    let ids = config.cluster_ids();
    for id in &ids {
        if !true_betas.contains_key(id) {
            return Err(Error::invalid(format!("no true beta for cluster {id}")));
        }
    }
    let mut rng = rng_from(config.master_seed, &[1, replication_index as u64]);
    let pois = Poisson::new(config.ratings_mean).map_err(|e| Error::invalid(e.to_string()))?;
    let sd = config.sigma2_true.sqrt();
    let mut entries = Vec::new();
    for expert in 1..=config.n_experts as u64 {
        let n_i = loop {
            let k = pois.sample(&mut rng) as usize;
            if (config.ratings_min..=config.ratings_max).contains(&k) {
                break k;
            }
        };
        let b: f64 = if sd == 0.0 {
            0.0
        } else {
            sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
        };
        let chosen = rand::seq::index::sample(&mut rng, ids.len(), n_i);
        let mut chosen: Vec<usize> = chosen.into_iter().collect();
        chosen.sort_unstable();
        for c in chosen {
            let id = ids[c];
            let p = logistic(true_betas[&id] + b);
            let y = u8::from(rng.random::<f64>() < p);
            entries.push(Rating::new(expert, id, y));
        }
    }
    RatingsTable::from_entries(entries)
}

/// Point estimate and interval for one cluster under one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutcome {
    pub beta: f64,
    pub prob: f64,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub sigma2: f64,
    pub clusters: BTreeMap<u64, ClusterOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub index: usize,
    /// `None` when the full fit did not converge.
    pub ml: Option<MethodOutcome>,
    pub split: MethodOutcome,
    pub split_failed_subsets: usize,
}

/// Success probabilities and delta-method intervals from a full fit, with
/// draws for cluster `j` taken from the stream `(seed, j)`.
pub fn score_full_fit(fit: &FitResult, mc_draws: usize, level: f64, seed: u64) -> Result<MethodOutcome> {
    let z = normal_quantile(level)?;
    let cov = fit.covariance();
    let sigma2 = fit.sigma2();
    let mut clusters = BTreeMap::new();
    for (j, (&id, &beta)) in fit.params.cluster_ids.iter().zip(&fit.params.beta).enumerate() {
        let mut rng = rng_from(seed, &[id]);
        let draws = NormalDraws::sample(mc_draws, &mut rng)?;
        let g = probability_gradient_with(beta, sigma2, &draws)?;
        let interval = if fit.separation_flags.contains(&id) {
            Interval::point(g.p)
        } else {
            match &cov {
                Some(c) => delta_interval(g, crate::model::beta_sigma2_block(c, j, sigma2), z),
                None => Interval {
                    lower: 0.0,
                    upper: 1.0,
                    degenerate: true,
                },
            }
        };
        clusters.insert(
            id,
            ClusterOutcome {
                beta,
                prob: g.p,
                interval,
            },
        );
    }
    Ok(MethodOutcome { sigma2, clusters })
}

/// Fits one replication with both methods.
pub fn run_replication(
    config: &SimConfig,
    true_betas: &BTreeMap<u64, f64>,
    index: usize,
) -> Result<ReplicationOutcome> {
    let data = generate_dataset(config, true_betas, index)?;
    let rep_seed = derive_seed(config.master_seed, &[2, index as u64]);
    let full = fit_ml(&data, &config.fit_options)?;
    let ml = if full.converged {
        Some(score_full_fit(
            &full,
            config.split_spec.mc_draws,
            config.split_spec.ci_level,
            derive_seed(rep_seed, &[0]),
        )?)
    } else {
        None
    };
    let spec = PartitionSpec {
        seed: derive_seed(rep_seed, &[1]),
        ..config.split_spec.clone()
    };
    let proc = run_procedure(&data, &spec, &config.fit_options)?;
    let split = MethodOutcome {
        sigma2: proc.pooled.sigma2,
        clusters: proc
            .pooled
            .estimates
            .iter()
            .map(|e| {
                (
                    e.cluster_id,
                    ClusterOutcome {
                        beta: e.beta_hat,
                        prob: e.prob_hat,
                        interval: Interval {
                            lower: e.ci_lower,
                            upper: e.ci_upper,
                            degenerate: e.ci_degenerate,
                        },
                    },
                )
            })
            .collect(),
    };
    Ok(ReplicationOutcome {
        index,
        ml,
        split,
        split_failed_subsets: proc.pooled.diagnostics.total_failed_subsets,
    })
}

/// Per-cluster averages for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MethodSummary {
    /// Replications contributing to this row.
    pub n: usize,
    pub mean_beta: f64,
    pub mean_prob: f64,
    pub coverage: f64,
    /// True value below the lower limit.
    pub noncoverage_above: f64,
    /// True value above the upper limit.
    pub noncoverage_below: f64,
    pub mean_relative_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    /// 1-based rank by true success probability.
    pub rank: usize,
    pub cluster_id: u64,
    pub true_beta: f64,
    pub true_prob: f64,
    pub ml: MethodSummary,
    pub split: MethodSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    /// Sorted by descending true probability.
    pub rows: Vec<ClusterRow>,
    pub sigma2_true: f64,
    pub ml_sigma2_mean: f64,
    pub split_sigma2_mean: f64,
    pub replications: usize,
    pub ml_failures: usize,
    pub split_failed_subsets: usize,
    /// Mean |beta_split - beta_ml| over clusters and replications where both exist.
    pub mean_abs_method_gap: f64,
}

impl SimReport {
    pub fn row(&self, cluster_id: u64) -> Option<&ClusterRow> {
        self.rows.iter().find(|r| r.cluster_id == cluster_id)
    }

    pub fn top(&self, n: usize) -> &[ClusterRow] {
        &self.rows[..n.min(self.rows.len())]
    }

    /// One row per cluster, with a leading comment line holding the config.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# config: {}", serde_json::to_string(&self.config)?)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "rank",
            "cluster_id",
            "true_beta",
            "true_prob",
            "ml_mean_beta",
            "split_mean_beta",
            "ml_mean_prob",
            "split_mean_prob",
            "ml_coverage",
            "split_coverage",
            "ml_noncoverage_above",
            "split_noncoverage_above",
            "ml_noncoverage_below",
            "split_noncoverage_below",
            "ml_replications",
            "split_replications",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.rank.to_string(),
                r.cluster_id.to_string(),
                fmt(r.true_beta),
                fmt(r.true_prob),
                fmt(r.ml.mean_beta),
                fmt(r.split.mean_beta),
                fmt(r.ml.mean_prob),
                fmt(r.split.mean_prob),
                fmt(r.ml.coverage),
                fmt(r.split.coverage),
                fmt(r.ml.noncoverage_above),
                fmt(r.split.noncoverage_above),
                fmt(r.ml.noncoverage_below),
                fmt(r.split.noncoverage_below),
                r.ml.n.to_string(),
                r.split.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean relative differences `(beta_hat - beta) / beta` per cluster.
    pub fn write_relative_differences<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# config: {}", serde_json::to_string(&self.config)?)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "cluster_id",
            "true_beta",
            "ml_relative_difference",
            "split_relative_difference",
        ])?;
        let mut rows: Vec<&ClusterRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.cluster_id);
        for r in rows {
            w.write_record([
                r.cluster_id.to_string(),
                fmt(r.true_beta),
                fmt(r.ml.mean_relative_difference),
                fmt(r.split.mean_relative_difference),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("sim_clusters.csv"))?)?;
        self.write_relative_differences(std::fs::File::create(dir.join("sim_relative_differences.csv"))?)?;
        self.write_json(std::fs::File::create(dir.join("sim_summary.json"))?)?;
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

/// True marginal probability of each cluster by high-order quadrature.
pub fn true_probabilities(config: &SimConfig, true_betas: &BTreeMap<u64, f64>) -> Result<BTreeMap<u64, f64>> {
    let rule = gauss_hermite(TRUTH_ORDER)?;
    true_betas
        .iter()
        .map(|(&id, &b)| Ok((id, success_probability_quadrature(b, config.sigma2_true, &rule)?)))
        .collect()
}

/// Runs every replication and aggregates the results.
pub fn run_study(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let mut rng = rng_from(config.master_seed, &[0]);
    let true_betas = draw_true_betas(config, &mut rng)?;
    let outcomes: Vec<ReplicationOutcome> = (0..config.replications)
        .into_par_iter()
        .map(|r| run_replication(config, &true_betas, r))
        .collect::<Result<_>>()?;
    summarize(config, &true_betas, &outcomes)
}

/// Aggregates replication outcomes into a report.
pub fn summarize(
    config: &SimConfig,
    true_betas: &BTreeMap<u64, f64>,
    outcomes: &[ReplicationOutcome],
) -> Result<SimReport> {
    let truth = true_probabilities(config, true_betas)?;
    let summary = |id: u64, pick: &dyn Fn(&ReplicationOutcome) -> Option<ClusterOutcome>| {
        let (beta, p) = (true_betas[&id], truth[&id]);
        let vals: Vec<ClusterOutcome> = outcomes.iter().filter_map(pick).collect();
        let n = vals.len();
        if n == 0 {
            return MethodSummary::default();
        }
        let nf = n as f64;
        let above = vals.iter().filter(|v| p < v.interval.lower).count();
        let below = vals.iter().filter(|v| p > v.interval.upper).count();
        MethodSummary {
            n,
            mean_beta: vals.iter().map(|v| v.beta).sum::<f64>() / nf,
            mean_prob: vals.iter().map(|v| v.prob).sum::<f64>() / nf,
            coverage: (n - above - below) as f64 / nf,
            noncoverage_above: above as f64 / nf,
            noncoverage_below: below as f64 / nf,
            mean_relative_difference: vals.iter().map(|v| (v.beta - beta) / beta).sum::<f64>() / nf,
        }
    };
    let mut rows: Vec<ClusterRow> = true_betas
        .keys()
        .map(|&id| ClusterRow {
            rank: 0,
            cluster_id: id,
            true_beta: true_betas[&id],
            true_prob: truth[&id],
            ml: summary(id, &|o| o.ml.as_ref().and_then(|m| m.clusters.get(&id).copied())),
            split: summary(id, &|o| o.split.clusters.get(&id).copied()),
        })
        .collect();
    rows.sort_by(|a, b| {
        b.true_prob
            .total_cmp(&a.true_prob)
            .then(a.cluster_id.cmp(&b.cluster_id))
    });
    for (k, r) in rows.iter_mut().enumerate() {
        r.rank = k + 1;
    }

    let ml_fits: Vec<&MethodOutcome> = outcomes.iter().filter_map(|o| o.ml.as_ref()).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let ml_sigma2: Vec<f64> = ml_fits.iter().map(|m| m.sigma2).collect();
    let split_sigma2: Vec<f64> = outcomes.iter().map(|o| o.split.sigma2).collect();
    let mut gaps = Vec::new();
    for o in outcomes {
        if let Some(ml) = &o.ml {
            for (id, s) in &o.split.clusters {
                if let Some(m) = ml.clusters.get(id) {
                    gaps.push((s.beta - m.beta).abs());
                }
            }
        }
    }
    Ok(SimReport {
        config: config.clone(),
        rows,
        sigma2_true: config.sigma2_true,
        ml_sigma2_mean: mean(&ml_sigma2),
        split_sigma2_mean: mean(&split_sigma2),
        replications: outcomes.len(),
        ml_failures: outcomes.len() - ml_fits.len(),
        split_failed_subsets: outcomes.iter().map(|o| o.split_failed_subsets).sum(),
        mean_abs_method_gap: mean(&gaps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_clusters: 12,
            n_experts: 40,
            ratings_mean: 6.0,
            ratings_min: 3,
            ratings_max: 12,
            replications: 2,
            split_spec: PartitionSpec {
                subset_size: 4,
                permutations: 3,
                mc_draws: 500,
                ..PartitionSpec::default()
            },
            master_seed: 11,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_beta_variance() {
        let cfg = SimConfig {
            beta_var: 0.0,
            ..SimConfig::default()
        };
        let b = draw_true_betas(&cfg, &mut rng_from(1, &[])).unwrap();
        assert!(b.values().all(|&v| v == -2.0));
        assert_eq!(b.len(), 50);
    }

    #[test]
    fn beta_draws_law_of_large_numbers() {
        let cfg = SimConfig {
            n_clusters: 10_000,
            ..SimConfig::default()
        };
        let b = draw_true_betas(&cfg, &mut rng_from(5, &[])).unwrap();
        let m = b.values().sum::<f64>() / 10_000.0;
        assert!((m + 2.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn beta_draws_deterministic() {
        let cfg = SimConfig::default();
        let a = draw_true_betas(&cfg, &mut rng_from(cfg.master_seed, &[0])).unwrap();
        let b = draw_true_betas(&cfg, &mut rng_from(cfg.master_seed, &[0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ratings_per_expert_in_range() {
        let cfg = SimConfig::default();
        let betas = draw_true_betas(&cfg, &mut rng_from(0, &[])).unwrap();
        for rep in 0..5 {
            let t = generate_dataset(&cfg, &betas, rep).unwrap();
            assert_eq!(t.n_experts(), 147);
            for e in t.experts() {
                assert!((8..=50).contains(&e.ratings.len()));
            }
        }
    }

    #[test]
    fn symmetric_generator_is_balanced() {
        let cfg = SimConfig {
            sigma2_true: 0.0,
            ..SimConfig::default()
        };
        let betas: BTreeMap<u64, f64> = cfg.cluster_ids().into_iter().map(|id| (id, 0.0)).collect();
        let t = generate_dataset(&cfg, &betas, 0).unwrap();
        let n = t.n_ratings() as f64;
        let ones = t.entries().filter(|r| r.rating == 1).count() as f64;
        assert!((ones / n - 0.5).abs() < 3.0 * (0.25 / n).sqrt());
    }

    #[test]
    fn config_validation() {
        let bad = SimConfig {
            replications: 0,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SimConfig {
            ratings_max: 60,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn single_replication_report_matches_outcome() {
        let cfg = SimConfig {
            replications: 1,
            ..small()
        };
        let report = run_study(&cfg).unwrap();
        let betas = draw_true_betas(&cfg, &mut rng_from(cfg.master_seed, &[0])).unwrap();
        let out = run_replication(&cfg, &betas, 0).unwrap();
        for row in &report.rows {
            let s = out.split.clusters[&row.cluster_id];
            assert_eq!(row.split.mean_beta, s.beta);
            assert_eq!(row.split.mean_prob, s.prob);
            if let Some(ml) = &out.ml {
                assert_eq!(row.ml.mean_beta, ml.clusters[&row.cluster_id].beta);
            }
        }
        assert_eq!(report.split_sigma2_mean, out.split.sigma2);
    }

    #[test]
    fn coverage_columns_sum_to_one() {
        let report = run_study(&small()).unwrap();
        for r in &report.rows {
            for m in [&r.ml, &r.split] {
                if m.n > 0 {
                    assert!((m.coverage + m.noncoverage_above + m.noncoverage_below - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
