//! Effective run settings: defaults, then a flat JSON config file, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use permsplit::quadrature::MAX_ORDER;
use permsplit::simstudy::SimConfig;
use permsplit::{CiMode, FitOptions, FormatOptions, PartitionSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Bad flags or configuration, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_ci_mode(s: &str) -> Result<CiMode, String> {
    s.parse().map_err(|e: permsplit::Error| e.to_string())
}

#[derive(Debug, Clone, Default, Args)]
pub struct AnalyzeArgs {
    /// Ratings CSV with columns expert_id, cluster_id, rating.
    pub input: Option<PathBuf>,
    /// Clusters per subset (N_k).
    #[arg(long)]
    pub nk: Option<usize>,
    /// Number of random permutations (W).
    #[arg(long)]
    pub permutations: Option<usize>,
    /// Monte Carlo draws per success probability (Q).
    #[arg(long)]
    pub mc_draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quadrature_order: Option<usize>,
    /// Use plain Gauss–Hermite nodes instead of recentering per expert.
    #[arg(long)]
    pub no_adaptive: bool,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Also fit with weights N/|Λ_i| and report both.
    #[arg(long)]
    pub weighted: bool,
    /// Weights CSV with columns expert_id, weight. Implies --weighted.
    #[arg(long)]
    pub weights_file: Option<PathBuf>,
    #[arg(long, value_parser = parse_ci_mode)]
    pub ci_mode: Option<CiMode>,
    #[arg(long)]
    pub ci_level: Option<f64>,
    /// Per-permutation level 1 - alpha/W.
    #[arg(long)]
    pub bonferroni: bool,
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Flat JSON object of settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub input: Option<PathBuf>,
    pub nk: usize,
    pub permutations: usize,
    pub mc_draws: usize,
    pub seed: u64,
    pub quadrature_order: usize,
    pub adaptive: bool,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub weighted: bool,
    pub weights_file: Option<PathBuf>,
    pub ci_mode: CiMode,
    pub ci_level: f64,
    pub bonferroni: bool,
    pub delimiter: char,
    pub expert_column: String,
    pub cluster_column: String,
    pub rating_column: String,
    pub weight_column: String,
    // Neither changes the results, so neither is written into outputs.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        let spec = PartitionSpec::default();
        let fit = FitOptions::default();
        let format = FormatOptions::default();
        Self {
            input: None,
            nk: spec.subset_size,
            permutations: spec.permutations,
            mc_draws: spec.mc_draws,
            seed: 1,
            quadrature_order: fit.quadrature_order,
            adaptive: fit.adaptive,
            max_iterations: fit.max_iterations,
            gradient_tolerance: fit.gradient_tolerance,
            weighted: false,
            weights_file: None,
            ci_mode: spec.ci_mode,
            ci_level: spec.ci_level,
            bonferroni: false,
            delimiter: char::from(format.delimiter),
            expert_column: format.expert_column,
            cluster_column: format.cluster_column,
            rating_column: format.rating_column,
            weight_column: format.weight_column,
            threads: None,
            output_dir: PathBuf::from("."),
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

macro_rules! override_with {
    ($cfg:ident, $args:ident; $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() {
            $cfg.$field = v.into();
        })*
    };
}

fn check_common(quadrature_order: usize, ci_level: f64, threads: Option<usize>) -> anyhow::Result<()> {
    if !(1..=MAX_ORDER).contains(&quadrature_order) {
        return Err(usage(format!("quadrature order must be between 1 and {MAX_ORDER}")));
    }
    if !(ci_level > 0.0 && ci_level < 1.0) {
        return Err(usage("ci level must be strictly between 0 and 1"));
    }
    if threads == Some(0) {
        return Err(usage("threads must be at least 1"));
    }
    Ok(())
}

impl AnalyzeConfig {
    pub fn resolve(args: &AnalyzeArgs) -> anyhow::Result<Self> {
        let mut cfg: Self = read_config(args.config.as_deref())?;
        override_with!(cfg, args; nk, permutations, mc_draws, seed, quadrature_order, max_iterations,
            ci_mode, ci_level, delimiter, output_dir);
        if args.input.is_some() {
            cfg.input = args.input.clone();
        }
        if args.weights_file.is_some() {
            cfg.weights_file = args.weights_file.clone();
        }
        if args.threads.is_some() {
            cfg.threads = args.threads;
        }
        cfg.adaptive &= !args.no_adaptive;
        cfg.weighted |= args.weighted || cfg.weights_file.is_some();
        cfg.bonferroni |= args.bonferroni;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.input.is_none() {
            return Err(usage("no ratings file given"));
        }
        if self.nk < 2 {
            return Err(usage("--nk must be at least 2"));
        }
        if self.permutations == 0 || self.mc_draws == 0 || self.max_iterations == 0 {
            return Err(usage("permutations, mc draws and max iterations must be at least 1"));
        }
        if !self.delimiter.is_ascii() {
            return Err(usage("delimiter must be a single ASCII character"));
        }
        check_common(self.quadrature_order, self.ci_level, self.threads)?;
        self.fit_options().validate().map_err(|e| usage(e.to_string()))
    }

    pub fn spec(&self) -> PartitionSpec {
        PartitionSpec {
            subset_size: self.nk,
            permutations: self.permutations,
            mc_draws: self.mc_draws,
            seed: self.seed,
            ci_level: self.ci_level,
            ci_mode: self.ci_mode,
            bonferroni: self.bonferroni,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            quadrature_order: self.quadrature_order,
            adaptive: self.adaptive,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            ..FitOptions::default()
        }
    }

    pub fn format(&self) -> FormatOptions {
        FormatOptions {
            delimiter: self.delimiter as u8,
            expert_column: self.expert_column.clone(),
            cluster_column: self.cluster_column.clone(),
            rating_column: self.rating_column.clone(),
            weight_column: self.weight_column.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub replications: Option<u64>,
    #[arg(long)]
    pub n_clusters: Option<usize>,
    #[arg(long)]
    pub n_experts: Option<usize>,
    #[arg(long)]
    pub beta_mean: Option<f64>,
    #[arg(long)]
    pub beta_var: Option<f64>,
    /// True inter-expert variance.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Poisson mean of the number of clusters each expert rates.
    #[arg(long)]
    pub ratings_mean: Option<f64>,
    #[arg(long)]
    pub ratings_min: Option<usize>,
    #[arg(long)]
    pub ratings_max: Option<usize>,
    #[arg(long)]
    pub nk: Option<usize>,
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub mc_draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quadrature_order: Option<usize>,
    #[arg(long)]
    pub no_adaptive: bool,
    #[arg(long, value_parser = parse_ci_mode)]
    pub ci_mode: Option<CiMode>,
    #[arg(long)]
    pub ci_level: Option<f64>,
    #[arg(long)]
    pub bonferroni: bool,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub replications: u64,
    pub n_clusters: usize,
    pub n_experts: usize,
    pub beta_mean: f64,
    pub beta_var: f64,
    pub sigma2: f64,
    pub ratings_mean: f64,
    pub ratings_min: usize,
    pub ratings_max: usize,
    pub nk: usize,
    pub permutations: usize,
    pub mc_draws: usize,
    pub seed: u64,
    pub quadrature_order: usize,
    pub adaptive: bool,
    pub ci_mode: CiMode,
    pub ci_level: f64,
    pub bonferroni: bool,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            replications: sim.replications as u64,
            n_clusters: sim.n_clusters,
            n_experts: sim.n_experts,
            beta_mean: sim.beta_mean,
            beta_var: sim.beta_var,
            sigma2: sim.sigma2_true,
            ratings_mean: sim.ratings_mean,
            ratings_min: sim.ratings_min,
            ratings_max: sim.ratings_max,
            nk: sim.split_spec.subset_size,
            permutations: sim.split_spec.permutations,
            mc_draws: sim.split_spec.mc_draws,
            seed: sim.master_seed,
            quadrature_order: sim.fit_options.quadrature_order,
            adaptive: sim.fit_options.adaptive,
            ci_mode: sim.split_spec.ci_mode,
            ci_level: sim.split_spec.ci_level,
            bonferroni: sim.split_spec.bonferroni,
            threads: None,
            output_dir: PathBuf::from("."),
        }
    }
}

impl SimulateConfig {
    pub fn resolve(args: &SimulateArgs) -> anyhow::Result<Self> {
        let mut cfg: Self = read_config(args.config.as_deref())?;
        override_with!(cfg, args; replications, n_clusters, n_experts, beta_mean, beta_var, sigma2,
            ratings_mean, ratings_min, ratings_max, nk, permutations, mc_draws,
            seed, quadrature_order, ci_mode, ci_level, output_dir);
        if args.threads.is_some() {
            cfg.threads = args.threads;
        }
        cfg.adaptive &= !args.no_adaptive;
        cfg.bonferroni |= args.bonferroni;
        if cfg.replications == 0 {
            return Err(usage("replications must be at least 1"));
        }
        check_common(cfg.quadrature_order, cfg.ci_level, cfg.threads)?;
        cfg.sim_config().validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n_clusters: self.n_clusters,
            n_experts: self.n_experts,
            beta_mean: self.beta_mean,
            beta_var: self.beta_var,
            sigma2_true: self.sigma2,
            ratings_mean: self.ratings_mean,
            ratings_min: self.ratings_min,
            ratings_max: self.ratings_max,
            replications: self.replications as usize,
            split_spec: PartitionSpec {
                subset_size: self.nk,
                permutations: self.permutations,
                mc_draws: self.mc_draws,
                seed: self.seed,
                ci_level: self.ci_level,
                ci_mode: self.ci_mode,
                bonferroni: self.bonferroni,
            },
            fit_options: FitOptions {
                quadrature_order: self.quadrature_order,
                adaptive: self.adaptive,
                ..FitOptions::default()
            },
            master_seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"nk": 12, "seed": 5, "ci_mode": "union", "input": "a.csv"}"#).unwrap();
        let args = AnalyzeArgs {
            config: Some(path),
            seed: Some(9),
            ..AnalyzeArgs::default()
        };
        let cfg = AnalyzeConfig::resolve(&args).unwrap();
        assert_eq!((cfg.nk, cfg.seed, cfg.ci_mode), (12, 9, CiMode::Union));
        assert_eq!(cfg.input, Some(PathBuf::from("a.csv")));
        assert_eq!(cfg.permutations, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"nk": 12, "sede": 5}"#).unwrap();
        let args = AnalyzeArgs {
            config: Some(path),
            ..AnalyzeArgs::default()
        };
        let err = AnalyzeConfig::resolve(&args).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().unwrap().0.contains("sede"));
    }

    #[test]
    fn weights_file_implies_weighted() {
        let args = AnalyzeArgs {
            input: Some("r.csv".into()),
            weights_file: Some("w.csv".into()),
            ..AnalyzeArgs::default()
        };
        assert!(AnalyzeConfig::resolve(&args).unwrap().weighted);
    }

    #[test]
    fn simulate_defaults_match_library() {
        let cfg = SimulateConfig::resolve(&SimulateArgs::default()).unwrap();
        assert_eq!(cfg.sim_config(), SimConfig::default());
    }

    #[test]
    fn range_checks() {
        let args = AnalyzeArgs {
            input: Some("r.csv".into()),
            quadrature_order: Some(400),
            ..AnalyzeArgs::default()
        };
        assert!(AnalyzeConfig::resolve(&args).is_err());
        let args = SimulateArgs {
            ci_level: Some(1.0),
            ..SimulateArgs::default()
        };
        assert!(SimulateConfig::resolve(&args).is_err());
    }
}
