//! End-to-end helpers: choose features, cluster every layer, merge.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationStats;
use crate::clustering::{
    distance_matrix, fcm_cluster, hierarchical_cluster, kmeans_cluster, ClusterAssignment, FcmOptions, FeatureMatrix,
    KMeansInit, Linkage, RouterFeature,
};
use crate::error::{check_dim, Error, Result};
use crate::merging::{apply_merge_plan, FixDomFeatures, MergePlan, MergeStrategy};
use crate::moe::MoeModel;

pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    ExpertOutput,
    RouterLogits(RouterFeature),
    Weight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Hierarchical(Linkage),
    KMeansFixed,
    KMeansRandom {
        seed: u64,
    },
    /// Fuzzy C-means, hardened by argmax membership.
    FuzzyCMeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub features: FeatureSource,
    pub algorithm: Algorithm,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            features: FeatureSource::ExpertOutput,
            algorithm: Algorithm::Hierarchical(Linkage::Average),
        }
    }
}

pub fn layer_features(
    model: &MoeModel,
    stats: &CalibrationStats,
    layer: usize,
    source: FeatureSource,
) -> Result<FeatureMatrix> {
    let ls = stats
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("no calibration statistics for layer {layer}")))?;
    match source {
        FeatureSource::ExpertOutput => FeatureMatrix::expert_outputs(ls),
        FeatureSource::RouterLogits(v) => FeatureMatrix::router_logits(&model.layers()[layer], ls, v),
        FeatureSource::Weight => FeatureMatrix::weights(&model.layers()[layer]),
    }
}

pub fn cluster_features(f: &FeatureMatrix, r: usize, algorithm: Algorithm) -> Result<ClusterAssignment> {
    match algorithm {
        Algorithm::Hierarchical(linkage) => hierarchical_cluster(&distance_matrix(f)?, r, linkage),
        Algorithm::KMeansFixed => kmeans_cluster(f, r, KMeansInit::FixedFirst, KMEANS_MAX_ITER),
        Algorithm::KMeansRandom { seed } => kmeans_cluster(f, r, KMeansInit::Random { seed }, KMEANS_MAX_ITER),
        Algorithm::FuzzyCMeans => Ok(fcm_cluster(f, r, &FcmOptions::default())?.membership.hard_labels()),
    }
}

/// Clusters each layer to its own budget.
pub fn cluster_model(
    model: &MoeModel,
    stats: &CalibrationStats,
    budgets: &[usize],
    config: &ClusterConfig,
) -> Result<Vec<ClusterAssignment>> {
    check_dim("calibrated layers", model.num_layers(), stats.layers.len())?;
    check_dim("layer budgets", model.num_layers(), budgets.len())?;
    (0..model.num_layers())
        .into_par_iter()
        .map(|l| {
            cluster_features(
                &layer_features(model, stats, l, config.features)?,
                budgets[l],
                config.algorithm,
            )
        })
        .collect()
}

pub fn merge_model(
    model: &MoeModel,
    stats: &CalibrationStats,
    assignments: &[ClusterAssignment],
    strategy: MergeStrategy,
    fixdom_features: Option<FixDomFeatures>,
) -> Result<(MoeModel, MergePlan)> {
    let plan = MergePlan::build(assignments, stats, strategy, fixdom_features)?;
    let merged = apply_merge_plan(model, &plan, Some(stats))?;
    Ok((merged, plan))
}

/// HC on expert outputs with a uniform budget, then merge.
pub fn hc_smoe(
    model: &MoeModel,
    stats: &CalibrationStats,
    r: usize,
    linkage: Linkage,
    strategy: MergeStrategy,
) -> Result<(MoeModel, MergePlan)> {
    let config = ClusterConfig {
        features: FeatureSource::ExpertOutput,
        algorithm: Algorithm::Hierarchical(linkage),
    };
    let assignments = cluster_model(model, stats, &vec![r; model.num_layers()], &config)?;
    let fixdom = (strategy == MergeStrategy::FixDom).then_some(FixDomFeatures::Weight);
    merge_model(model, stats, &assignments, strategy, fixdom)
}
