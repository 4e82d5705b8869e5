//! Grouping experts into clusters: agglomerative clustering (the method)
//! and K-means / fuzzy C-means (comparison baselines).

mod budgets;
mod fcm;
mod hierarchical;
mod kmeans;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::LayerStats;
use crate::error::{Error, Result};
use crate::moe::MoeLayer;

pub use budgets::{global_keep, non_uniform_budgets};
pub use fcm::{fcm_cluster, FcmInit, FcmOptions, FcmResult, Membership};
pub use hierarchical::{hierarchical_cluster, linkage_distance, Linkage};
pub use kmeans::{kmeans_cluster, KMeansInit};

/// Which router-derived vector represents an expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterFeature {
    /// Expert i's column of `W_R` (length d_h).
    WeightColumn,
    /// Mean router logit vector over tokens that selected expert i (length n).
    LogitProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    ExpertOutput,
    RouterLogits(RouterFeature),
    Weight,
}

/// One feature vector per expert, in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub kind: FeatureKind,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn new(kind: FeatureKind, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("feature matrix has no rows".into()))?
            .len();
        for row in &rows {
            if row.len() != dim {
                return Err(Error::InvalidArgument("feature rows differ in length".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("feature matrix contains NaN or Inf".into()));
            }
        }
        Ok(Self { kind, rows })
    }

    pub fn expert_outputs(stats: &LayerStats) -> Result<Self> {
        let rows = stats
            .mean_outputs
            .iter()
            .map(|o| o.iter().map(|&v| f64::from(v)).collect())
            .collect();
        Self::new(FeatureKind::ExpertOutput, rows)
    }

    pub fn router_logits(layer: &MoeLayer, stats: &LayerStats, variant: RouterFeature) -> Result<Self> {
        let rows = match variant {
            RouterFeature::WeightColumn => (0..layer.n_slots())
                .map(|i| layer.router().column(i).into_iter().map(f64::from).collect())
                .collect(),
            RouterFeature::LogitProfile => stats.logit_profiles.clone(),
        };
        Self::new(FeatureKind::RouterLogits(variant), rows)
    }

    /// Flattened `W_gate ‖ W_up ‖ W_down` per routing slot.
    pub fn weights(layer: &MoeLayer) -> Result<Self> {
        let rows = (0..layer.n_slots())
            .map(|i| {
                let e = layer.expert_for_slot(i);
                e.w_gate
                    .as_slice()
                    .iter()
                    .chain(e.w_up.as_slice())
                    .chain(e.w_down.as_slice())
                    .map(|&v| f64::from(v))
                    .collect()
            })
            .collect();
        Self::new(FeatureKind::Weight, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }
}

/// Symmetric n × n Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { 0.0 } else { f(i.min(j), i.max(j)) })
                    .collect()
            })
            .collect();
        Self { n, data: rows.concat() }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

pub fn distance_matrix(features: &FeatureMatrix) -> Result<DistanceMatrix> {
    if features.rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("feature matrix contains NaN or Inf".into()));
    }
    let rows = &features.rows;
    Ok(DistanceMatrix::from_fn(rows.len(), |i, j| {
        crate::tensor::sq_dist(&rows[i], &rows[j]).sqrt()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    /// Cluster ids are the smallest member index; `a < b`.
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMethod {
    Hierarchical(Linkage),
    KMeansFixed,
    KMeansRandom,
    FuzzyCMeans,
    OneShotRouter,
    Planted,
}

/// Hard assignment of n experts to r clusters. Labels are canonical: cluster
/// ids follow the order of each cluster's smallest member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub r: usize,
    pub merge_trace: Vec<MergeStep>,
    pub method: ClusterMethod,
}

impl ClusterAssignment {
    pub fn from_labels(labels: &[usize], method: ClusterMethod) -> Self {
        let labels = canonical_labels(labels);
        let r = labels.iter().max().map_or(0, |m| m + 1);
        Self {
            labels,
            r,
            merge_trace: Vec::new(),
            method,
        }
    }

    pub fn singletons(n: usize, method: ClusterMethod) -> Self {
        Self::from_labels(&(0..n).collect::<Vec<_>>(), method)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Members of each cluster, ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.r];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.r];
        for &l in &self.labels {
            if l >= self.r {
                return Err(Error::InvalidArgument(format!("label {l} out of range 0..{}", self.r)));
            }
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("assignment is not surjective".into()));
        }
        Ok(())
    }
}

/// Relabels clusters in order of first occurrence.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}
