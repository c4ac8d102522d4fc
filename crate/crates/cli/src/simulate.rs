//! The `simulate` subcommand.

use std::io::Write;

use anyhow::Context;
use permsplit::simstudy::{run_study, SimReport};

use crate::config::SimulateConfig;

/// Runs the study and writes sim_clusters.csv, sim_relative_differences.csv
/// and sim_summary.json.
pub fn simulate(cfg: &SimulateConfig) -> anyhow::Result<SimReport> {
    let report = run_study(&cfg.sim_config())?;
    report
        .write_all(&cfg.output_dir)
        .with_context(|| format!("writing to {}", cfg.output_dir.display()))?;
    Ok(report)
}

pub fn print_report<W: Write>(report: &SimReport, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "{} replications, sigma2 true {} / ML {:.3} / split {:.3}",
        report.replications, report.sigma2_true, report.ml_sigma2_mean, report.split_sigma2_mean
    )?;
    writeln!(
        w,
        "ML fits not converged: {}, split subset fits not converged: {}",
        report.ml_failures, report.split_failed_subsets
    )?;
    Ok(())
}
