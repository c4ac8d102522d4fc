//! Python bindings: ratings tables, model fitting, success probabilities and
//! the permutational splitting procedure.

use std::collections::BTreeMap;
use std::path::PathBuf;

use permsplit_core as ps;
use ps::numeric::rng_from;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: ps::Error) -> PyErr {
    match e {
        ps::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py(py: Python<'_>, value: serde_json::Value) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(&value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn fit_options(
    quadrature_order: usize,
    adaptive: bool,
    max_iterations: usize,
    gradient_tolerance: f64,
) -> ps::FitOptions {
    ps::FitOptions {
        quadrature_order,
        adaptive,
        max_iterations,
        gradient_tolerance,
        ..ps::FitOptions::default()
    }
}

/// Binary ratings of clusters by experts, optionally with per-expert weights.
#[pyclass(name = "RatingsTable", module = "permsplit", frozen)]
struct RatingsTable {
    inner: ps::RatingsTable,
}

#[pymethods]
impl RatingsTable {
    /// `entries` holds `(expert_id, cluster_id, rating)` triples.
    #[new]
    #[pyo3(signature = (entries, weights = None))]
    fn new(entries: Vec<(u64, u64, u8)>, weights: Option<BTreeMap<u64, f64>>) -> PyResult<Self> {
        let mut table = ps::RatingsTable::from_entries(entries.into_iter().map(|(e, c, y)| ps::Rating::new(e, c, y)))
            .map_err(to_py)?;
        if let Some(w) = weights {
            table = table.with_weights(&w).map_err(to_py)?;
        }
        Ok(Self { inner: table })
    }

    /// Reads a CSV with columns expert_id, cluster_id, rating. Returns the
    /// table (dense ids) with the expert and cluster tokens, indexed by id.
    #[staticmethod]
    #[pyo3(signature = (path, delimiter = ','))]
    fn load(path: PathBuf, delimiter: char) -> PyResult<(Self, Vec<String>, Vec<String>)> {
        if !delimiter.is_ascii() {
            return Err(PyValueError::new_err("delimiter must be ASCII"));
        }
        let options = ps::FormatOptions {
            delimiter: delimiter as u8,
            ..ps::FormatOptions::default()
        };
        let loaded = ps::load_ratings(&path, &options).map_err(to_py)?;
        Ok((
            Self { inner: loaded.table },
            loaded.ids.experts.tokens().to_vec(),
            loaded.ids.clusters.tokens().to_vec(),
        ))
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.n_experts()
    }

    #[getter]
    fn n_clusters(&self) -> usize {
        self.inner.n_clusters()
    }

    #[getter]
    fn n_ratings(&self) -> usize {
        self.inner.n_ratings()
    }

    #[getter]
    fn is_weighted(&self) -> bool {
        self.inner.is_weighted()
    }

    #[getter]
    fn cluster_ids(&self) -> Vec<u64> {
        self.inner.cluster_ids().to_vec()
    }

    #[getter]
    fn expert_ids(&self) -> Vec<u64> {
        self.inner.expert_ids()
    }

    fn entries(&self) -> Vec<(u64, u64, u8)> {
        self.inner
            .entries()
            .map(|r| (r.expert_id, r.cluster_id, r.rating))
            .collect()
    }

    fn weights(&self) -> Option<BTreeMap<u64, f64>> {
        self.inner.weights()
    }

    /// Proportion of 1 ratings per cluster.
    fn observed_probabilities(&self) -> BTreeMap<u64, f64> {
        self.inner
            .cluster_ids()
            .iter()
            .copied()
            .zip(self.inner.observed_probabilities())
            .collect()
    }

    /// `N / |Λ_i|` per expert.
    fn compute_weights(&self) -> BTreeMap<u64, f64> {
        ps::compute_weights(&self.inner)
    }

    fn with_weights(&self, weights: BTreeMap<u64, f64>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.clone().with_weights(&weights).map_err(to_py)?,
        })
    }

    /// The ratings of `clusters` only; experts left without ratings are dropped.
    fn restrict(&self, clusters: Vec<u64>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.restrict(&clusters).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.n_ratings()
    }

    fn __repr__(&self) -> String {
        format!(
            "RatingsTable(experts={}, clusters={}, ratings={}, weighted={})",
            self.inner.n_experts(),
            self.inner.n_clusters(),
            self.inner.n_ratings(),
            self.inner.is_weighted()
        )
    }
}

#[pyclass(name = "FitResult", module = "permsplit", frozen)]
struct FitResult {
    inner: ps::FitResult,
}

#[pymethods]
impl FitResult {
    #[getter]
    fn beta(&self) -> BTreeMap<u64, f64> {
        let p = &self.inner.params;
        p.cluster_ids.iter().copied().zip(p.beta.iter().copied()).collect()
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2()
    }

    #[getter]
    fn log_sigma(&self) -> f64 {
        self.inner.params.log_sigma
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn separation_flags(&self) -> Vec<u64> {
        self.inner.separation_flags.iter().copied().collect()
    }

    /// Gradient over `(beta..., log_sigma)` at the estimate.
    #[getter]
    fn gradient(&self) -> Vec<f64> {
        self.inner.gradient.clone()
    }

    #[getter]
    fn hessian(&self) -> Vec<Vec<f64>> {
        let h = &self.inner.hessian;
        (0..h.nrows()).map(|i| h.row(i).iter().copied().collect()).collect()
    }

    /// Negated inverse Hessian over `(beta..., log_sigma)`, or None when
    /// the Hessian is singular.
    fn covariance(&self) -> Option<Vec<Vec<f64>>> {
        let c = self.inner.covariance()?;
        Some((0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect())
    }

    /// Covariance of `(beta_j, sigma2)` for the delta method.
    fn beta_sigma2_cov(&self, cluster_id: u64) -> Option<[[f64; 2]; 2]> {
        self.inner.beta_sigma2_cov(cluster_id)
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(clusters={}, sigma2={:.6}, loglik={:.6}, converged={})",
            self.inner.params.beta.len(),
            self.inner.sigma2(),
            self.inner.loglik,
            self.inner.converged
        )
    }
}

/// Gauss–Hermite nodes and weights for `∫ f(x) exp(-x²) dx`.
#[pyfunction]
fn gauss_hermite(order: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let rule = ps::gauss_hermite(order).map_err(to_py)?;
    Ok((rule.nodes, rule.weights))
}

/// Marginal log-likelihood at the given cluster effects and variance.
#[pyfunction]
#[pyo3(signature = (table, beta, sigma2, quadrature_order = 30, adaptive = true))]
fn log_likelihood(
    table: &RatingsTable,
    beta: BTreeMap<u64, f64>,
    sigma2: f64,
    quadrature_order: usize,
    adaptive: bool,
) -> PyResult<f64> {
    let (ids, values): (Vec<u64>, Vec<f64>) = beta.into_iter().unzip();
    let params = ps::ModelParams::from_sigma2(ids, values, sigma2).map_err(to_py)?;
    let rule = ps::gauss_hermite(quadrature_order)
        .map_err(to_py)?
        .with_adaptive(adaptive);
    ps::log_likelihood(&params, &table.inner, &rule).map_err(to_py)
}

/// Maximum likelihood fit by damped Newton–Raphson.
#[pyfunction]
#[pyo3(signature = (table, quadrature_order = 30, adaptive = true, max_iterations = 200, gradient_tolerance = 1e-6))]
fn fit_ml(
    py: Python<'_>,
    table: &RatingsTable,
    quadrature_order: usize,
    adaptive: bool,
    max_iterations: usize,
    gradient_tolerance: f64,
) -> PyResult<FitResult> {
    let options = fit_options(quadrature_order, adaptive, max_iterations, gradient_tolerance);
    let inner = py.detach(|| ps::fit_ml(&table.inner, &options)).map_err(to_py)?;
    Ok(FitResult { inner })
}

/// Monte Carlo estimate of `E[logistic(beta + b)]` with `b ~ N(0, sigma2)`.
#[pyfunction]
#[pyo3(signature = (beta, sigma2, q = 10_000, seed = 0))]
fn success_probability(beta: f64, sigma2: f64, q: usize, seed: u64) -> PyResult<f64> {
    ps::success_probability(beta, sigma2, q, &mut rng_from(seed, &[])).map_err(to_py)
}

/// Delta-method interval for the success probability, built on its logit.
#[pyfunction]
#[pyo3(signature = (beta, sigma2, cov, q = 10_000, level = 0.95, seed = 0))]
fn delta_method_ci(
    beta: f64,
    sigma2: f64,
    cov: [[f64; 2]; 2],
    q: usize,
    level: f64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let iv = ps::delta_method_ci(beta, sigma2, cov, q, level, &mut rng_from(seed, &[])).map_err(to_py)?;
    Ok((iv.lower, iv.upper))
}

/// Combines `(lower, upper)` intervals by "average", "union" or "intersection".
#[pyfunction]
#[pyo3(signature = (intervals, mode = "average"))]
fn combine_cis(intervals: Vec<(f64, f64)>, mode: &str) -> PyResult<(f64, f64)> {
    let mode: ps::CiMode = mode.parse().map_err(to_py)?;
    let ivs: Vec<ps::Interval> = intervals.into_iter().map(|(l, u)| ps::Interval::new(l, u)).collect();
    let iv = ps::combine_cis(&ivs, mode).map_err(to_py)?;
    Ok((iv.lower, iv.upper))
}

/// Runs the permutational splitting procedure. Returns a dict with the
/// pooled variance, per-cluster effects, ranked estimates and diagnostics.
#[pyfunction]
#[pyo3(signature = (
    table, subset_size = 30, permutations = 20, mc_draws = 10_000, seed = 0, ci_level = 0.95,
    ci_mode = "average", bonferroni = false, quadrature_order = 30, adaptive = true
))]
#[allow(clippy::too_many_arguments)]
fn run_procedure<'py>(
    py: Python<'py>,
    table: &RatingsTable,
    subset_size: usize,
    permutations: usize,
    mc_draws: usize,
    seed: u64,
    ci_level: f64,
    ci_mode: &str,
    bonferroni: bool,
    quadrature_order: usize,
    adaptive: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = ps::PartitionSpec {
        subset_size,
        permutations,
        mc_draws,
        seed,
        ci_level,
        ci_mode: ci_mode.parse().map_err(to_py)?,
        bonferroni,
    };
    let options = fit_options(quadrature_order, adaptive, 200, 1e-6);
    let res = py
        .detach(|| ps::run_procedure(&table.inner, &spec, &options))
        .map_err(to_py)?;
    let pooled = res.pooled;
    let out = PyDict::new(py);
    out.set_item("sigma2", pooled.sigma2)?;
    out.set_item("sigma2_per_permutation", pooled.sigma2_per_permutation)?;
    out.set_item("beta", pooled.beta)?;
    out.set_item(
        "estimates",
        json_to_py(
            py,
            serde_json::to_value(&pooled.estimates).map_err(|e| PyValueError::new_err(e.to_string()))?,
        )?,
    )?;
    out.set_item(
        "diagnostics",
        json_to_py(
            py,
            serde_json::to_value(&pooled.diagnostics).map_err(|e| PyValueError::new_err(e.to_string()))?,
        )?,
    )?;
    Ok(out)
}

/// Runs a simulation study and returns its report as a dict.
#[pyfunction]
#[pyo3(signature = (
    replications = 10, seed = 0, n_clusters = 50, n_experts = 147, sigma2 = 12.25, subset_size = 5,
    permutations = 20, mc_draws = 10_000, quadrature_order = 30
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    replications: usize,
    seed: u64,
    n_clusters: usize,
    n_experts: usize,
    sigma2: f64,
    subset_size: usize,
    permutations: usize,
    mc_draws: usize,
    quadrature_order: usize,
) -> PyResult<Py<PyAny>> {
    let defaults = ps::SimConfig::default();
    let config = ps::SimConfig {
        n_clusters,
        n_experts,
        sigma2_true: sigma2,
        ratings_max: defaults.ratings_max.min(n_clusters),
        ratings_min: defaults.ratings_min.min(n_clusters),
        replications,
        split_spec: ps::PartitionSpec {
            subset_size,
            permutations,
            mc_draws,
            seed,
            ..defaults.split_spec.clone()
        },
        fit_options: fit_options(quadrature_order, true, 200, 1e-6),
        master_seed: seed,
        ..defaults
    };
    let report = py.detach(|| ps::run_study(&config)).map_err(to_py)?;
    json_to_py(
        py,
        serde_json::to_value(&report).map_err(|e| PyValueError::new_err(e.to_string()))?,
    )
}

#[pymodule]
fn permsplit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RatingsTable>()?;
    m.add_class::<FitResult>()?;
    m.add_function(wrap_pyfunction!(gauss_hermite, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ml, m)?)?;
    m.add_function(wrap_pyfunction!(success_probability, m)?)?;
    m.add_function(wrap_pyfunction!(delta_method_ci, m)?)?;
    m.add_function(wrap_pyfunction!(combine_cis, m)?)?;
    m.add_function(wrap_pyfunction!(run_procedure, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
