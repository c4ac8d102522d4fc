//! Permutational-splitting estimation.
//!
//! The cluster set is randomly permuted and cut into disjoint subsets of
//! `subset_size` clusters. The model is fitted by maximum likelihood on each
//! subset, and this is repeated for `permutations` independent permutations.
//! Cluster effects and the random-effect variance are averaged over
//! permutations; success probabilities come from stochastic integration at the
//! permutation's pooled variance, and per-permutation delta-method intervals are
//! combined into one interval per cluster.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fit_ml, FitOptions, FitResult};
use crate::numeric::Rng;
use crate::numeric::{derive_seed, rng_from};
use crate::probability::{
    delta_interval, normal_quantile, probability_gradient_with, success_probability_with, Interval, NormalDraws,
};
use crate::table::RatingsTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CiMode {
    #[default]
    Average,
    Union,
    Intersection,
}

impl std::str::FromStr for CiMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "union" => Ok(Self::Union),
            "intersection" => Ok(Self::Intersection),
            other => Err(Error::invalid(format!("unknown ci mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub subset_size: usize,
    pub permutations: usize,
    pub mc_draws: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub ci_mode: CiMode,
    /// Per-permutation level `1 - (1 - ci_level) / permutations`.
    pub bonferroni: bool,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            subset_size: 30,
            permutations: 20,
            mc_draws: 10_000,
            seed: 0,
            ci_level: 0.95,
            ci_mode: CiMode::Average,
            bonferroni: false,
        }
    }
}

impl PartitionSpec {
    /// Checks the spec against a data set with `n_clusters` clusters.
    pub fn validate(&self, n_clusters: usize) -> Result<()> {
        if self.subset_size < 2 {
            return Err(Error::invalid("subset size must be at least 2"));
        }
        if self.subset_size >= n_clusters {
            return Err(Error::invalid(format!(
                "subset size {} must be smaller than the number of clusters {n_clusters}",
                self.subset_size
            )));
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        if self.permutations == 0 {
            return Err(Error::invalid("at least one permutation is required"));
        }
        if self.mc_draws == 0 {
            return Err(Error::invalid("at least one Monte Carlo draw is required"));
        }
        normal_quantile(self.ci_level)?;
        Ok(())
    }

    /// Level used for each permutation's interval.
    pub fn per_permutation_level(&self) -> f64 {
        if self.bonferroni {
            1.0 - (1.0 - self.ci_level) / self.permutations as f64
        } else {
            self.ci_level
        }
    }

    /// Number of subsets for `n` clusters.
    pub fn subset_count(&self, n: usize) -> usize {
        n.div_ceil(self.subset_size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub subsets: Vec<Vec<u64>>,
}

impl Partition {
    /// All clusters in one subset.
    pub fn single(cluster_ids: &[u64]) -> Self {
        Self {
            subsets: vec![cluster_ids.to_vec()],
        }
    }

    /// Checks that the subsets are disjoint and cover exactly `cluster_ids`.
    pub fn check_covers(&self, cluster_ids: &[u64]) -> Result<()> {
        let mut all: Vec<u64> = self.subsets.iter().flatten().copied().collect();
        all.sort_unstable();
        let mut expected = cluster_ids.to_vec();
        expected.sort_unstable();
        if all != expected {
            return Err(Error::InvalidPartition(
                "subsets are not disjoint or do not cover the cluster set".into(),
            ));
        }
        if self.subsets.iter().any(Vec::is_empty) {
            return Err(Error::InvalidPartition("empty subset".into()));
        }
        Ok(())
    }
}

/// Fisher–Yates shuffle of `cluster_ids` cut into consecutive blocks of
/// `subset_size`; the last block takes the remainder.
pub fn make_partition(cluster_ids: &[u64], subset_size: usize, rng: &mut Rng) -> Result<Partition> {
    if subset_size < 2 {
        return Err(Error::invalid("subset size must be at least 2"));
    }
    if subset_size >= cluster_ids.len() {
        return Err(Error::invalid(format!(
            "subset size {subset_size} must be smaller than the number of clusters {}",
            cluster_ids.len()
        )));
    }
    let mut ids = cluster_ids.to_vec();
    ids.shuffle(rng);
    Ok(Partition {
        subsets: ids.chunks(subset_size).map(<[u64]>::to_vec).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct SubsetFit {
    pub subset_index: usize,
    pub fit: FitResult,
    pub expert_count: usize,
}

impl SubsetFit {
    pub fn sigma2(&self) -> f64 {
        self.fit.sigma2()
    }
}

/// Per-cluster output of one permutation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationCluster {
    pub beta: f64,
    /// Success probability at the permutation's pooled variance.
    pub prob: f64,
    pub prob_std_error: f64,
    pub interval: Interval,
    pub separated: bool,
    /// False when the subset Hessian could not be inverted.
    pub ci_available: bool,
}

#[derive(Debug, Clone)]
pub struct PermutationResult {
    pub partition: Partition,
    pub subset_fits: Vec<SubsetFit>,
    /// Mean subset variance over converged subsets.
    pub sigma2_w: f64,
    pub beta_w: BTreeMap<u64, f64>,
    pub failed_subsets: usize,
    /// Filled by [`score_permutation`].
    pub clusters: BTreeMap<u64, PermutationCluster>,
}

/// Fits every subset of `partition` by maximum likelihood.
pub fn fit_permutation(data: &RatingsTable, partition: &Partition, options: &FitOptions) -> Result<PermutationResult> {
    partition.check_covers(data.cluster_ids())?;
    let subsets: Vec<RatingsTable> = partition
        .subsets
        .iter()
        .map(|s| data.restrict(s))
        .collect::<Result<_>>()?;
    let fits: Vec<SubsetFit> = subsets
        .par_iter()
        .enumerate()
        .map(|(k, sub)| {
            fit_ml(sub, options).map(|fit| SubsetFit {
                subset_index: k,
                fit,
                expert_count: sub.n_experts(),
            })
        })
        .collect::<Result<_>>()?;

    let converged: Vec<f64> = fits.iter().filter(|f| f.fit.converged).map(SubsetFit::sigma2).collect();
    let failed_subsets = fits.len() - converged.len();
    // With no converged subset there is nothing better than the raw mean.
    let pool: Vec<f64> = if converged.is_empty() {
        fits.iter().map(SubsetFit::sigma2).collect()
    } else {
        converged
    };
    let sigma2_w = pool.iter().sum::<f64>() / pool.len() as f64;

    let mut beta_w = BTreeMap::new();
    for f in &fits {
        for (id, b) in f.fit.params.cluster_ids.iter().zip(&f.fit.params.beta) {
            beta_w.insert(*id, *b);
        }
    }
    Ok(PermutationResult {
        partition: partition.clone(),
        subset_fits: fits,
        sigma2_w,
        beta_w,
        failed_subsets,
        clusters: BTreeMap::new(),
    })
}

/// Success probabilities and delta-method intervals for one fitted
/// permutation. Draws for cluster `j` in permutation `w` come from the stream
/// `(seed, w, j)`.
pub fn score_permutation(perm: &mut PermutationResult, w: usize, spec: &PartitionSpec) -> Result<()> {
    spec.validate_common()?;
    let z = normal_quantile(spec.per_permutation_level())?;
    let sigma2_w = perm.sigma2_w;
    let scored: Vec<Vec<(u64, PermutationCluster)>> = perm
        .subset_fits
        .par_iter()
        .map(|sf| -> Result<Vec<(u64, PermutationCluster)>> {
            let fit = &sf.fit;
            let cov = fit.covariance();
            let sigma2_k = fit.sigma2();
            let mut out = Vec::with_capacity(fit.params.beta.len());
            for (j, (&id, &beta)) in fit.params.cluster_ids.iter().zip(&fit.params.beta).enumerate() {
                let mut rng = rng_from(spec.seed, &[w as u64, id]);
                let draws = NormalDraws::sample(spec.mc_draws, &mut rng)?;
                let p = success_probability_with(beta, sigma2_w, &draws)?;
                let separated = fit.separation_flags.contains(&id);
                let (interval, ci_available) = if separated {
                    (Interval::point(p.value), true)
                } else if let Some(cov) = &cov {
                    let block = crate::model::beta_sigma2_block(cov, j, sigma2_k);
                    let g = probability_gradient_with(beta, sigma2_k, &draws)?;
                    (delta_interval(g, block, z), true)
                } else {
                    let mut iv = Interval::new(0.0, 1.0);
                    iv.degenerate = true;
                    (iv, false)
                };
                out.push((
                    id,
                    PermutationCluster {
                        beta,
                        prob: p.value,
                        prob_std_error: p.std_error,
                        interval,
                        separated,
                        ci_available,
                    },
                ));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    perm.clusters = scored.into_iter().flatten().collect();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessEstimate {
    pub cluster_id: u64,
    pub beta_hat: f64,
    pub prob_hat: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// 1-based rank by `prob_hat`.
    pub rank: usize,
    pub flagged_separation: bool,
    pub ci_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub subsets_per_permutation: Vec<usize>,
    pub failed_subsets_per_permutation: Vec<usize>,
    pub total_failed_subsets: usize,
    /// Clusters whose interval could not be formed in some permutation.
    pub clusters_without_ci: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimates {
    pub beta: BTreeMap<u64, f64>,
    pub sigma2: f64,
    pub sigma2_per_permutation: Vec<f64>,
    /// One entry per cluster, ascending cluster id.
    pub estimates: Vec<SuccessEstimate>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone)]
pub struct ProcedureResult {
    pub pooled: PooledEstimates,
    pub permutations: Vec<PermutationResult>,
}

/// Runs the full procedure with `spec.permutations` random partitions.
pub fn run_procedure(data: &RatingsTable, spec: &PartitionSpec, options: &FitOptions) -> Result<ProcedureResult> {
    spec.validate(data.n_clusters())?;
    let partitions = (0..spec.permutations)
        .map(|w| {
            let mut rng = rng_from(derive_seed(spec.seed, &[w as u64]), &[]);
            make_partition(data.cluster_ids(), spec.subset_size, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    run_partitions(data, &partitions, spec, options)
}

/// Runs the procedure on caller-supplied partitions, one per permutation.
/// `spec.subset_size` is ignored.
pub fn run_partitions(
    data: &RatingsTable,
    partitions: &[Partition],
    spec: &PartitionSpec,
    options: &FitOptions,
) -> Result<ProcedureResult> {
    spec.validate_common()?;
    if partitions.is_empty() {
        return Err(Error::invalid("at least one partition is required"));
    }
    let permutations: Vec<PermutationResult> = partitions
        .par_iter()
        .enumerate()
        .map(|(w, part)| {
            let mut perm = fit_permutation(data, part, options)?;
            score_permutation(&mut perm, w, spec)?;
            Ok(perm)
        })
        .collect::<Result<_>>()?;
    let pooled = pool(data, &permutations, spec.ci_mode)?;
    Ok(ProcedureResult { pooled, permutations })
}

fn pool(data: &RatingsTable, perms: &[PermutationResult], mode: CiMode) -> Result<PooledEstimates> {
    let w = perms.len() as f64;
    let sigma2_per_permutation: Vec<f64> = perms.iter().map(|p| p.sigma2_w).collect();
    let sigma2 = sigma2_per_permutation.iter().sum::<f64>() / w;
    let mut beta = BTreeMap::new();
    let mut estimates = Vec::with_capacity(data.n_clusters());
    let mut clusters_without_ci = Vec::new();
    for &id in data.cluster_ids() {
        let per: Vec<&PermutationCluster> = perms.iter().map(|p| &p.clusters[&id]).collect();
        let b = per.iter().map(|c| c.beta).sum::<f64>() / w;
        let prob = per.iter().map(|c| c.prob).sum::<f64>() / w;
        let intervals: Vec<Interval> = per.iter().map(|c| c.interval).collect();
        let ci = combine_cis(&intervals, mode)?;
        if per.iter().any(|c| !c.ci_available) {
            clusters_without_ci.push(id);
        }
        beta.insert(id, b);
        estimates.push(SuccessEstimate {
            cluster_id: id,
            beta_hat: b,
            prob_hat: prob,
            ci_lower: ci.lower,
            ci_upper: ci.upper,
            rank: 0,
            flagged_separation: per.iter().any(|c| c.separated),
            ci_degenerate: ci.degenerate,
        });
    }
    assign_ranks(&mut estimates);
    let failed: Vec<usize> = perms.iter().map(|p| p.failed_subsets).collect();
    Ok(PooledEstimates {
        beta,
        sigma2,
        sigma2_per_permutation,
        estimates,
        diagnostics: Diagnostics {
            subsets_per_permutation: perms.iter().map(|p| p.subset_fits.len()).collect(),
            total_failed_subsets: failed.iter().sum(),
            failed_subsets_per_permutation: failed,
            clusters_without_ci,
        },
    })
}

/// Sets `rank` from the `prob_hat` ordering.
pub fn assign_ranks(estimates: &mut [SuccessEstimate]) {
    let order = rank_clusters(estimates, RankKey::ProbHat);
    let pos: BTreeMap<u64, usize> = order.iter().enumerate().map(|(r, e)| (e.cluster_id, r + 1)).collect();
    for e in estimates.iter_mut() {
        e.rank = pos[&e.cluster_id];
    }
}

/// Combines per-permutation intervals.
pub fn combine_cis(intervals: &[Interval], mode: CiMode) -> Result<Interval> {
    if intervals.is_empty() {
        return Err(Error::invalid("no intervals to combine"));
    }
    let n = intervals.len() as f64;
    let (min_lower, max_lower) = min_max(intervals.iter().map(|i| i.lower));
    let (min_upper, max_upper) = min_max(intervals.iter().map(|i| i.upper));
    // Clamped so rounding in the mean cannot break union ⊇ average ⊇ intersection.
    let avg_lower = (intervals.iter().map(|i| i.lower).sum::<f64>() / n).clamp(min_lower, max_lower);
    let avg_upper = (intervals.iter().map(|i| i.upper).sum::<f64>() / n).clamp(min_upper, max_upper);
    let degenerate = intervals.iter().all(|i| i.degenerate);
    let iv = match mode {
        CiMode::Average => Interval {
            lower: avg_lower,
            upper: avg_upper,
            degenerate,
        },
        CiMode::Union => Interval {
            lower: min_lower,
            upper: max_upper,
            degenerate,
        },
        CiMode::Intersection => {
            let (lower, upper) = (max_lower, min_upper);
            if lower <= upper {
                Interval {
                    lower,
                    upper,
                    degenerate,
                }
            } else {
                // Empty intersection: collapse to a point inside the average interval.
                let mid = (0.5 * (lower + upper)).clamp(avg_lower, avg_upper);
                Interval::point(mid)
            }
        }
    };
    Ok(iv)
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    ProbHat,
    CiLower,
}

/// Descending by key; ties by ascending cluster id.
pub fn rank_clusters(estimates: &[SuccessEstimate], key: RankKey) -> Vec<SuccessEstimate> {
    let value = |e: &SuccessEstimate| match key {
        RankKey::ProbHat => e.prob_hat,
        RankKey::CiLower => e.ci_lower,
    };
    let mut v = estimates.to_vec();
    v.sort_by(|a, b| value(b).total_cmp(&value(a)).then(a.cluster_id.cmp(&b.cluster_id)));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(l: f64, u: f64) -> Interval {
        Interval::new(l, u)
    }

    #[test]
    fn partition_shapes() {
        let mut rng = rng_from(1, &[]);
        let ids: Vec<u64> = (1..=6).collect();
        let p = make_partition(&ids, 2, &mut rng).unwrap();
        assert_eq!(p.subsets.len(), 3);
        p.check_covers(&ids).unwrap();

        let ids: Vec<u64> = (0..22_015).collect();
        assert_eq!(make_partition(&ids, 30, &mut rng).unwrap().subsets.len(), 734);
        let ids: Vec<u64> = (1..=50).collect();
        assert_eq!(make_partition(&ids, 5, &mut rng).unwrap().subsets.len(), 10);
    }

    #[test]
    fn partition_rejects_large_subsets() {
        let mut rng = rng_from(1, &[]);
        assert!(make_partition(&[1, 2, 3], 3, &mut rng).is_err());
        assert!(make_partition(&[1, 2, 3], 1, &mut rng).is_err());
    }

    #[test]
    fn remainder_goes_last() {
        let mut rng = rng_from(9, &[]);
        let ids: Vec<u64> = (0..23).collect();
        let p = make_partition(&ids, 5, &mut rng).unwrap();
        let sizes: Vec<usize> = p.subsets.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 5, 3]);
    }

    #[test]
    fn combine_examples() {
        let a = [iv(0.1, 0.5), iv(0.3, 0.7)];
        let avg = combine_cis(&a, CiMode::Average).unwrap();
        assert!((avg.lower - 0.2).abs() < 1e-15 && (avg.upper - 0.6).abs() < 1e-15);
        let uni = combine_cis(&a, CiMode::Union).unwrap();
        assert_eq!((uni.lower, uni.upper), (0.1, 0.7));
        let int = combine_cis(&a, CiMode::Intersection).unwrap();
        assert_eq!((int.lower, int.upper), (0.3, 0.5));
        assert!(combine_cis(&[], CiMode::Average).is_err());
    }

    #[test]
    fn identical_intervals_all_modes() {
        let a = [iv(0.25, 0.75); 4];
        for mode in [CiMode::Average, CiMode::Union, CiMode::Intersection] {
            let c = combine_cis(&a, mode).unwrap();
            assert_eq!((c.lower, c.upper), (0.25, 0.75));
        }
    }

    #[test]
    fn crossing_intersection_is_flagged() {
        let a = [iv(0.0, 0.1), iv(0.2, 1.0), iv(0.2, 1.0)];
        let c = combine_cis(&a, CiMode::Intersection).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.lower, c.upper);
    }

    fn est(id: u64, p: f64, lo: f64) -> SuccessEstimate {
        SuccessEstimate {
            cluster_id: id,
            beta_hat: 0.0,
            prob_hat: p,
            ci_lower: lo,
            ci_upper: 1.0,
            rank: 0,
            flagged_separation: false,
            ci_degenerate: false,
        }
    }

    #[test]
    fn rank_ties_by_id() {
        let v = [est(9, 0.5, 0.1), est(3, 0.5, 0.2), est(5, 0.7, 0.0)];
        let r = rank_clusters(&v, RankKey::ProbHat);
        assert_eq!(r.iter().map(|e| e.cluster_id).collect::<Vec<_>>(), vec![5, 3, 9]);
        let r = rank_clusters(&v, RankKey::CiLower);
        assert_eq!(r.iter().map(|e| e.cluster_id).collect::<Vec<_>>(), vec![3, 9, 5]);
    }

    #[test]
    fn bonferroni_level() {
        let spec = PartitionSpec {
            bonferroni: true,
            permutations: 20,
            ..PartitionSpec::default()
        };
        assert!((spec.per_permutation_level() - (1.0 - 0.05 / 20.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive(n in 3usize..200, k in 2usize..40, seed in any::<u64>()) {
            prop_assume!(k < n);
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
            let mut rng = rng_from(seed, &[]);
            let p = make_partition(&ids, k, &mut rng).unwrap();
            p.check_covers(&ids).unwrap();
            prop_assert_eq!(p.subsets.len(), n.div_ceil(k));
            for s in &p.subsets[..p.subsets.len() - 1] {
                prop_assert_eq!(s.len(), k);
            }
        }

        #[test]
        fn interval_nesting(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30)) {
            let ivs: Vec<Interval> = raw.iter().map(|&(a, b)| iv(a.min(b), a.max(b))).collect();
            let a = combine_cis(&ivs, CiMode::Average).unwrap();
            let u = combine_cis(&ivs, CiMode::Union).unwrap();
            let i = combine_cis(&ivs, CiMode::Intersection).unwrap();
            prop_assert!(u.lower <= a.lower && a.lower <= i.lower);
            prop_assert!(i.upper <= a.upper && a.upper <= u.upper);
            prop_assert!(i.lower <= i.upper);
        }
    }
}
