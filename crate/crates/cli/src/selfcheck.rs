//! Fast oracle checks run by `permsplit selfcheck`.

use std::collections::BTreeMap;
use std::io::Write;

use permsplit::numeric::rng_from;
use permsplit::probability::{success_probability_quadrature, success_probability_with, NormalDraws};
use permsplit::quadrature::QuadratureRule;
use permsplit::simstudy::{draw_true_betas, generate_dataset, SimConfig};
use permsplit::splitproc::run_partitions;
use permsplit::{
    combine_cis, fit_ml, gauss_hermite, log_likelihood, log_likelihood_gradient, make_partition, CiMode, FitOptions,
    Interval, ModelParams, Partition, PartitionSpec, Rating, RatingsTable,
};
use rand::Rng;

pub type GradientFn = fn(&ModelParams, &RatingsTable, &QuadratureRule) -> permsplit::Result<Vec<f64>>;

pub struct Check {
    pub name: &'static str,
    pub run: Box<dyn Fn() -> Result<String, String>>,
}

impl Check {
    pub fn new(name: &'static str, run: impl Fn() -> Result<String, String> + 'static) -> Self {
        Self {
            name,
            run: Box::new(run),
        }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn sample_table(seed: u64, n_clusters: usize, n_experts: usize, sigma2: f64) -> RatingsTable {
    let config = SimConfig {
        n_clusters,
        n_experts,
        sigma2_true: sigma2,
        ratings_mean: (n_clusters as f64 * 0.6).min(25.0),
        ratings_min: 2,
        ratings_max: n_clusters,
        master_seed: seed,
        ..SimConfig::default()
    };
    let betas = draw_true_betas(&config, &mut rng_from(seed, &[0])).expect("valid config");
    generate_dataset(&config, &betas, 0).expect("valid config")
}

/// Analytic gradient against central differences of the plain-rule
/// likelihood at random parameters.
pub fn gradient_check(gradient: GradientFn) -> Check {
    Check::new("gradient matches finite differences", move || {
        let rule = gauss_hermite(30).map_err(err)?;
        let mut rng = rng_from(101, &[]);
        let mut worst = 0.0_f64;
        for k in 0..10 {
            let table = sample_table(200 + k, 6, 12, 2.0);
            let beta: Vec<f64> = (0..table.n_clusters()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let params =
                ModelParams::new(table.cluster_ids().to_vec(), beta, rng.random_range(-1.0..1.2)).map_err(err)?;
            let g = gradient(&params, &table, &rule).map_err(err)?;
            let mut x = params.to_vector();
            for i in 0..x.len() {
                let h = 1e-5;
                let orig = x[i];
                x[i] = orig + h;
                let up = log_likelihood(&params.with_vector(&x), &table, &rule).map_err(err)?;
                x[i] = orig - h;
                let down = log_likelihood(&params.with_vector(&x), &table, &rule).map_err(err)?;
                x[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (g[i] - fd).abs() / fd.abs().max(1e-3);
                worst = worst.max(rel);
            }
        }
        if worst <= 1e-4 {
            Ok(format!("max relative error {worst:.1e}"))
        } else {
            Err(format!("max relative error {worst:.1e} exceeds 1e-4"))
        }
    })
}

fn quadrature_check() -> Check {
    Check::new("quadrature order 30 agrees with order 50", || {
        let table = sample_table(7, 20, 60, 4.0);
        let fit = fit_ml(&table, &FitOptions::default()).map_err(err)?;
        let at = |order| {
            let rule = gauss_hermite(order).map_err(err)?.with_adaptive(true);
            log_likelihood(&fit.params, &table, &rule).map_err(err)
        };
        let gap = (at(30)? - at(50)?).abs();
        if gap <= 1e-6 {
            Ok(format!("gap {gap:.1e} at sigma2 {:.2}", fit.sigma2()))
        } else {
            Err(format!("gap {gap:.1e} exceeds 1e-6"))
        }
    })
}

fn monte_carlo_check() -> Check {
    Check::new("Monte Carlo probability matches quadrature", || {
        let rule = gauss_hermite(50).map_err(err)?;
        let mut rng = rng_from(303, &[]);
        for _ in 0..20 {
            let beta = rng.random_range(-4.0..4.0);
            let sigma2 = rng.random_range(0.0..16.0);
            let draws = NormalDraws::sample(10_000, &mut rng).map_err(err)?;
            let mc = success_probability_with(beta, sigma2, &draws).map_err(err)?;
            let gh = success_probability_quadrature(beta, sigma2, &rule).map_err(err)?;
            if (mc.value - gh).abs() > 4.0 * mc.std_error {
                return Err(format!("beta {beta:.3} sigma2 {sigma2:.3}: {} vs {gh}", mc.value));
            }
        }
        Ok("20 cases within 4 standard errors".into())
    })
}

fn reduction_check() -> Check {
    Check::new("S=1 equals full ML", || {
        let table = sample_table(11, 8, 30, 2.0);
        let options = FitOptions::default();
        let spec = PartitionSpec {
            permutations: 1,
            mc_draws: 1000,
            ..PartitionSpec::default()
        };
        let res = run_partitions(&table, &[Partition::single(table.cluster_ids())], &spec, &options).map_err(err)?;
        let fit = fit_ml(&table, &options).map_err(err)?;
        let same_beta = fit
            .params
            .cluster_ids
            .iter()
            .zip(&fit.params.beta)
            .all(|(id, b)| res.pooled.beta[id] == *b);
        if res.permutations[0].subset_fits[0].fit == fit && res.pooled.sigma2 == fit.sigma2() && same_beta {
            Ok("identical".into())
        } else {
            Err("split result differs from the full fit".into())
        }
    })
}

fn partition_check() -> Check {
    Check::new("partitions are disjoint and exhaustive", || {
        let mut rng = rng_from(404, &[]);
        for _ in 0..200 {
            let n = rng.random_range(3..300);
            let k = rng.random_range(2..n);
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
            let p = make_partition(&ids, k, &mut rng).map_err(err)?;
            p.check_covers(&ids).map_err(err)?;
            if p.subsets.len() != n.div_ceil(k) || p.subsets[..p.subsets.len() - 1].iter().any(|s| s.len() != k) {
                return Err(format!("bad subset sizes for n={n}, k={k}"));
            }
        }
        Ok("200 partitions".into())
    })
}

fn weight_check() -> Check {
    Check::new("integer weight equals replicated experts", || {
        let table = sample_table(13, 6, 10, 2.0);
        let mut weights = BTreeMap::new();
        let mut entries: Vec<Rating> = table.entries().collect();
        let mut next = table.expert_ids().into_iter().max().unwrap_or(0) + 1;
        for (i, e) in table.experts().iter().enumerate() {
            let m = 1 + i % 3;
            weights.insert(e.id, m as f64);
            for _ in 1..m {
                entries.extend(
                    e.ratings
                        .iter()
                        .map(|&(c, y)| Rating::new(next, table.cluster_ids()[c], y)),
                );
                next += 1;
            }
        }
        let weighted = table.clone().with_weights(&weights).map_err(err)?;
        let copied = RatingsTable::from_entries(entries).map_err(err)?;
        let options = FitOptions::default();
        let a = fit_ml(&weighted, &options).map_err(err)?;
        let b = fit_ml(&copied, &options).map_err(err)?;
        if a.params == b.params && a.loglik == b.loglik {
            Ok("bit-identical fits".into())
        } else {
            Err(format!("loglik {} vs {}", a.loglik, b.loglik))
        }
    })
}

fn nesting_check() -> Check {
    Check::new("intersection within average within union", || {
        let mut rng = rng_from(505, &[]);
        for _ in 0..1000 {
            let w = rng.random_range(1..10);
            let ivs: Vec<Interval> = (0..w)
                .map(|_| {
                    let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
                    Interval::new(a.min(b), a.max(b))
                })
                .collect();
            let [i, a, u] = [CiMode::Intersection, CiMode::Average, CiMode::Union].map(|m| combine_cis(&ivs, m));
            let (i, a, u) = (i.map_err(err)?, a.map_err(err)?, u.map_err(err)?);
            if !(u.lower <= a.lower && a.lower <= i.lower && i.upper <= a.upper && a.upper <= u.upper) {
                return Err(format!("{ivs:?}"));
            }
        }
        Ok("1000 interval sets".into())
    })
}

pub fn default_checks() -> Vec<Check> {
    vec![
        gradient_check(log_likelihood_gradient),
        quadrature_check(),
        monte_carlo_check(),
        reduction_check(),
        partition_check(),
        weight_check(),
        nesting_check(),
    ]
}

/// Runs every check, printing one line each. True when all pass.
pub fn run_checks<W: Write>(checks: &[Check], mut out: W) -> std::io::Result<bool> {
    let mut ok = true;
    for c in checks {
        match (c.run)() {
            Ok(detail) => writeln!(out, "PASS  {}  ({detail})", c.name)?,
            Err(detail) => {
                ok = false;
                writeln!(out, "FAIL  {}  ({detail})", c.name)?;
            }
        }
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn skewed_gradient(p: &ModelParams, t: &RatingsTable, r: &QuadratureRule) -> permsplit::Result<Vec<f64>> {
        let mut g = log_likelihood_gradient(p, t, r)?;
        let last = g.len() - 1;
        g[last] *= 1.01;
        Ok(g)
    }

    #[test]
    fn all_checks_pass() {
        let mut out = Vec::new();
        let ok = run_checks(&default_checks(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(ok, "{text}");
        assert!(text.contains("PASS  S=1 equals full ML"));
    }

    #[test]
    fn injected_gradient_bug_fails() {
        let mut out = Vec::new();
        assert!(!run_checks(&[gradient_check(skewed_gradient)], &mut out).unwrap());
        assert!(String::from_utf8(out).unwrap().starts_with("FAIL  gradient"));
    }
}
