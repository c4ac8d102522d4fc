//! Sparse binary ratings indexed by (expert, cluster).

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::error::{Error, Result};
use crate::numeric::ExactSum;

/// One rating as supplied by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rating {
    pub expert_id: u64,
    pub cluster_id: u64,
    pub rating: u8,
}

impl Rating {
    pub fn new(expert_id: u64, cluster_id: u64, rating: u8) -> Self {
        Self {
            expert_id,
            cluster_id,
            rating,
        }
    }
}

/// All ratings of one expert, sorted by cluster position.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRatings {
    pub id: u64,
    /// (index into `RatingsTable::cluster_ids`, 0/1 rating)
    pub ratings: Vec<(usize, u8)>,
}

/// Validated ratings table. Experts and clusters are stored in ascending id
/// order, so the table is independent of the order entries were supplied in.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsTable {
    cluster_ids: Vec<u64>,
    experts: Vec<ExpertRatings>,
    weights: Option<Vec<f64>>,
}

impl RatingsTable {
    pub fn from_entries<I: IntoIterator<Item = Rating>>(entries: I) -> Result<Self> {
        let mut by_expert: BTreeMap<u64, Vec<(u64, u8)>> = BTreeMap::new();
        let mut clusters = BTreeSet::new();
        let mut seen = HashSet::new();
        for r in entries {
            if r.rating > 1 {
                return Err(Error::InvalidTable(format!(
                    "rating {} for expert {} cluster {} is not 0 or 1",
                    r.rating, r.expert_id, r.cluster_id
                )));
            }
            if !seen.insert((r.expert_id, r.cluster_id)) {
                return Err(Error::InvalidTable(format!(
                    "duplicate rating for expert {} cluster {}",
                    r.expert_id, r.cluster_id
                )));
            }
            clusters.insert(r.cluster_id);
            by_expert.entry(r.expert_id).or_default().push((r.cluster_id, r.rating));
        }
        if by_expert.is_empty() {
            return Err(Error::invalid("ratings table is empty"));
        }
        let cluster_ids: Vec<u64> = clusters.into_iter().collect();
        let experts = by_expert
            .into_iter()
            .map(|(id, list)| {
                let mut ratings: Vec<(usize, u8)> = list
                    .into_iter()
                    .map(|(c, y)| (cluster_ids.binary_search(&c).unwrap(), y))
                    .collect();
                ratings.sort_unstable();
                ExpertRatings { id, ratings }
            })
            .collect();
        Ok(Self {
            cluster_ids,
            experts,
            weights: None,
        })
    }

    /// Attaches frequency weights. Every expert needs a finite weight > 0;
    /// weights for experts absent from the table are ignored.
    pub fn with_weights(mut self, weights: &BTreeMap<u64, f64>) -> Result<Self> {
        let mut w = Vec::with_capacity(self.experts.len());
        for e in &self.experts {
            match weights.get(&e.id) {
                Some(&v) if v.is_finite() && v > 0.0 => w.push(v),
                Some(&v) => {
                    return Err(Error::InvalidTable(format!(
                        "weight {v} for expert {} must be positive and finite",
                        e.id
                    )))
                }
                None => return Err(Error::InvalidTable(format!("expert {} has no weight", e.id))),
            }
        }
        self.weights = Some(w);
        Ok(self)
    }

    pub fn without_weights(mut self) -> Self {
        self.weights = None;
        self
    }

    pub fn cluster_ids(&self) -> &[u64] {
        &self.cluster_ids
    }

    pub fn experts(&self) -> &[ExpertRatings] {
        &self.experts
    }

    pub fn expert_ids(&self) -> Vec<u64> {
        self.experts.iter().map(|e| e.id).collect()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn n_ratings(&self) -> usize {
        self.experts.iter().map(|e| e.ratings.len()).sum()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.is_some()
    }

    /// Weight of the expert at position `idx` (1 when unweighted).
    #[inline]
    pub fn weight(&self, idx: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[idx])
    }

    pub fn weights(&self) -> Option<BTreeMap<u64, f64>> {
        self.weights
            .as_ref()
            .map(|w| self.experts.iter().zip(w).map(|(e, &v)| (e.id, v)).collect())
    }

    /// Entries in (expert, cluster) order.
    pub fn entries(&self) -> impl Iterator<Item = Rating> + '_ {
        self.experts.iter().flat_map(move |e| {
            e.ratings
                .iter()
                .map(move |&(c, y)| Rating::new(e.id, self.cluster_ids[c], y))
        })
    }

    /// Unweighted (successes, ratings) per cluster.
    pub fn cluster_counts(&self) -> Vec<(usize, usize)> {
        let mut counts = vec![(0usize, 0usize); self.cluster_ids.len()];
        for e in &self.experts {
            for &(c, y) in &e.ratings {
                counts[c].0 += y as usize;
                counts[c].1 += 1;
            }
        }
        counts
    }

    /// Weighted (successes, ratings) per cluster, summed exactly.
    pub fn weighted_cluster_counts(&self) -> Vec<(f64, f64)> {
        let mut s = vec![ExactSum::new(); self.cluster_ids.len()];
        let mut m = vec![ExactSum::new(); self.cluster_ids.len()];
        for (i, e) in self.experts.iter().enumerate() {
            let w = self.weight(i);
            for &(c, y) in &e.ratings {
                if y == 1 {
                    s[c].add(w);
                }
                m[c].add(w);
            }
        }
        s.iter().zip(&m).map(|(a, b)| (a.value(), b.value())).collect()
    }

    /// Proportion of 1s per cluster, aligned with `cluster_ids`.
    pub fn observed_probabilities(&self) -> Vec<f64> {
        self.cluster_counts()
            .into_iter()
            .map(|(s, m)| s as f64 / m as f64)
            .collect()
    }

    /// Ratings of the given clusters only; experts left without ratings are
    /// dropped. Weights carry over.
    pub fn restrict(&self, clusters: &[u64]) -> Result<Self> {
        let mut keep: Vec<u64> = clusters.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut remap = vec![None; self.cluster_ids.len()];
        for (new, id) in keep.iter().enumerate() {
            match self.cluster_ids.binary_search(id) {
                Ok(old) => remap[old] = Some(new),
                Err(_) => {
                    return Err(Error::InvalidPartition(format!(
                        "cluster {id} is not present in the data"
                    )))
                }
            }
        }
        let mut experts = Vec::new();
        let mut weights = Vec::new();
        for (i, e) in self.experts.iter().enumerate() {
            let ratings: Vec<(usize, u8)> = e
                .ratings
                .iter()
                .filter_map(|&(c, y)| remap[c].map(|n| (n, y)))
                .collect();
            if !ratings.is_empty() {
                experts.push(ExpertRatings { id: e.id, ratings });
                weights.push(self.weight(i));
            }
        }
        if experts.is_empty() {
            return Err(Error::InvalidPartition("subset has no ratings".into()));
        }
        Ok(Self {
            cluster_ids: keep,
            experts,
            weights: self.weights.as_ref().map(|_| weights),
        })
    }
}
