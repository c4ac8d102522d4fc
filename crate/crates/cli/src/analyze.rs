//! The `analyze` subcommand: ranking, run summary, histogram and id map.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use permsplit::splitproc::PooledEstimates;
use permsplit::{compute_weights, load_ratings, load_weights, run_procedure, IdMap, LoadedRatings, RatingsTable};
use serde::Serialize;
use serde_json::json;

use crate::config::AnalyzeConfig;

pub const HISTOGRAM_BINS: usize = 20;

/// One fitted variant of the data: unweighted or weighted.
pub struct Analysis {
    pub pooled: PooledEstimates,
    pub observed: Vec<f64>,
}

pub struct AnalyzeOutput {
    pub unweighted: Analysis,
    pub weighted: Option<Analysis>,
    pub loaded: LoadedRatings,
}

fn run_one(table: &RatingsTable, observed: Vec<f64>, cfg: &AnalyzeConfig) -> anyhow::Result<Analysis> {
    let res = run_procedure(table, &cfg.spec(), &cfg.fit_options())?;
    Ok(Analysis {
        pooled: res.pooled,
        observed,
    })
}

pub fn analyze(cfg: &AnalyzeConfig) -> anyhow::Result<AnalyzeOutput> {
    let input = cfg.input.as_deref().context("no ratings file given")?;
    let format = cfg.format();
    let loaded = load_ratings(input, &format).with_context(|| format!("reading {}", input.display()))?;
    cfg.spec().validate(loaded.table.n_clusters())?;
    let unweighted = run_one(&loaded.table, loaded.table.observed_probabilities(), cfg)?;
    let weighted = if cfg.weighted {
        let weights = match &cfg.weights_file {
            Some(path) => load_weights(path, &loaded.ids.experts, &format)
                .with_context(|| format!("reading {}", path.display()))?,
            None => compute_weights(&loaded.table),
        };
        let table = loaded.table.clone().with_weights(&weights)?;
        let observed = table.weighted_cluster_counts().iter().map(|&(s, m)| s / m).collect();
        Some(run_one(&table, observed, cfg)?)
    } else {
        None
    };
    Ok(AnalyzeOutput {
        unweighted,
        weighted,
        loaded,
    })
}

fn config_line(cfg: &AnalyzeConfig) -> anyhow::Result<String> {
    Ok(format!("# config: {}", serde_json::to_string(cfg)?))
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_ranking<W: Write>(out: &AnalyzeOutput, cfg: &AnalyzeConfig, mut w: W) -> anyhow::Result<()> {
    writeln!(w, "{}", config_line(cfg)?)?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec![
        "cluster_id",
        "beta_hat",
        "prob_estimated",
        "prob_observed",
        "ci_lower",
        "ci_upper",
        "rank",
        "separation_flag",
    ];
    if out.weighted.is_some() {
        header.extend([
            "beta_hat_weighted",
            "prob_estimated_weighted",
            "prob_observed_weighted",
            "ci_lower_weighted",
            "ci_upper_weighted",
            "rank_weighted",
            "separation_flag_weighted",
        ]);
    }
    csv.write_record(&header)?;
    let clusters = &out.loaded.ids.clusters;
    let u = &out.unweighted;
    let mut order: Vec<usize> = (0..u.pooled.estimates.len()).collect();
    order.sort_by_key(|&i| u.pooled.estimates[i].rank);
    for i in order {
        let e = &u.pooled.estimates[i];
        let mut row = vec![
            clusters.token(e.cluster_id).unwrap_or_default().to_string(),
            e.beta_hat.to_string(),
            e.prob_hat.to_string(),
            u.observed[i].to_string(),
            e.ci_lower.to_string(),
            e.ci_upper.to_string(),
            e.rank.to_string(),
            flag(e.flagged_separation).to_string(),
        ];
        if let Some(wa) = &out.weighted {
            let f = &wa.pooled.estimates[i];
            row.extend([
                f.beta_hat.to_string(),
                f.prob_hat.to_string(),
                wa.observed[i].to_string(),
                f.ci_lower.to_string(),
                f.ci_upper.to_string(),
                f.rank.to_string(),
                flag(f.flagged_separation).to_string(),
            ]);
        }
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Counts of `p` in equal-width bins over [0, 1]; 1 falls in the last bin.
pub fn histogram(p: impl Iterator<Item = f64>) -> [usize; HISTOGRAM_BINS] {
    let mut counts = [0; HISTOGRAM_BINS];
    for x in p {
        let bin = ((x * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    counts
}

pub fn write_histogram<W: Write>(out: &AnalyzeOutput, cfg: &AnalyzeConfig, mut w: W) -> anyhow::Result<()> {
    writeln!(w, "{}", config_line(cfg)?)?;
    let counts = histogram(out.unweighted.pooled.estimates.iter().map(|e| e.prob_hat));
    let weighted = out
        .weighted
        .as_ref()
        .map(|a| histogram(a.pooled.estimates.iter().map(|e| e.prob_hat)));
    write!(w, "bin_lower,bin_upper,count")?;
    if weighted.is_some() {
        write!(w, ",count_weighted")?;
    }
    writeln!(w)?;
    for (b, c) in counts.iter().enumerate() {
        let width = 1.0 / HISTOGRAM_BINS as f64;
        write!(w, "{},{},{c}", b as f64 * width, (b + 1) as f64 * width)?;
        if let Some(wc) = &weighted {
            write!(w, ",{}", wc[b])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MethodSummary {
    sigma2: f64,
    sigma2_per_permutation: Vec<f64>,
    subsets_per_permutation: Vec<usize>,
    failed_subsets_per_permutation: Vec<usize>,
    total_failed_subsets: usize,
    separated_clusters: Vec<String>,
    clusters_without_ci: Vec<String>,
}

fn tokens(map: &IdMap, ids: impl IntoIterator<Item = u64>) -> Vec<String> {
    ids.into_iter()
        .map(|id| map.token(id).unwrap_or_default().to_string())
        .collect()
}

fn method_summary(a: &Analysis, clusters: &IdMap) -> MethodSummary {
    let p = &a.pooled;
    MethodSummary {
        sigma2: p.sigma2,
        sigma2_per_permutation: p.sigma2_per_permutation.clone(),
        subsets_per_permutation: p.diagnostics.subsets_per_permutation.clone(),
        failed_subsets_per_permutation: p.diagnostics.failed_subsets_per_permutation.clone(),
        total_failed_subsets: p.diagnostics.total_failed_subsets,
        separated_clusters: tokens(
            clusters,
            p.estimates
                .iter()
                .filter(|e| e.flagged_separation)
                .map(|e| e.cluster_id),
        ),
        clusters_without_ci: tokens(clusters, p.diagnostics.clusters_without_ci.iter().copied()),
    }
}

/// Non-fatal problems worth a look, such as subsets that did not converge.
pub fn warnings(out: &AnalyzeOutput) -> Vec<String> {
    let mut v = Vec::new();
    let mut one = |label: &str, a: &Analysis| {
        let d = &a.pooled.diagnostics;
        if d.total_failed_subsets > 0 {
            let subsets: usize = d.subsets_per_permutation.iter().sum();
            v.push(format!(
                "{label}: {} of {subsets} subset fits did not converge",
                d.total_failed_subsets
            ));
        }
        if !d.clusters_without_ci.is_empty() {
            v.push(format!(
                "{label}: {} clusters have no interval (singular Hessian)",
                d.clusters_without_ci.len()
            ));
        }
    };
    one("unweighted", &out.unweighted);
    if let Some(w) = &out.weighted {
        one("weighted", w);
    }
    v
}

pub fn summary_json(out: &AnalyzeOutput, cfg: &AnalyzeConfig) -> serde_json::Value {
    let t = &out.loaded.table;
    let clusters = &out.loaded.ids.clusters;
    let mut s = json!({
        "command": "analyze",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "data": {
            "experts": t.n_experts(),
            "clusters": t.n_clusters(),
            "ratings": t.n_ratings(),
        },
        "unweighted": method_summary(&out.unweighted, clusters),
        "warnings": warnings(out),
    });
    if let Some(w) = &out.weighted {
        s["weighted"] = serde_json::to_value(method_summary(w, clusters)).expect("plain data");
    }
    s
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Writes ranking.csv, summary.json, histogram.csv and id_map.json.
pub fn write_outputs(out: &AnalyzeOutput, cfg: &AnalyzeConfig, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_ranking(out, cfg, create(dir, "ranking.csv")?)?;
    write_histogram(out, cfg, create(dir, "histogram.csv")?)?;
    let mut f = create(dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut f, &summary_json(out, cfg))?;
    writeln!(f)?;
    f.flush()?;
    let mut ids = serde_json::to_value(&out.loaded.ids)?;
    ids["config"] = serde_json::to_value(cfg)?;
    let mut f = create(dir, "id_map.json")?;
    serde_json::to_writer_pretty(&mut f, &ids)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Top of the ranking for the terminal.
pub fn print_top<W: Write>(out: &AnalyzeOutput, n: usize, mut w: W) -> std::io::Result<()> {
    let u = &out.unweighted.pooled;
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, e) in u.estimates.iter().enumerate() {
        rows.insert(e.rank, i);
    }
    writeln!(w, "sigma2 = {:.4}", u.sigma2)?;
    writeln!(
        w,
        "{:>5}  {:>14}  {:>8}  {:>8}  {:>8}  {:>8}",
        "rank", "cluster", "beta", "P", "lower", "upper"
    )?;
    for (&rank, &i) in rows.iter().take(n) {
        let e = &u.estimates[i];
        writeln!(
            w,
            "{rank:>5}  {:>14}  {:>8.3}  {:>8.3}  {:>8.3}  {:>8.3}",
            out.loaded.ids.clusters.token(e.cluster_id).unwrap_or_default(),
            e.beta_hat,
            e.prob_hat,
            e.ci_lower,
            e.ci_upper
        )?;
    }
    Ok(())
}
