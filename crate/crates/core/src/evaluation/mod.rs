//! Fidelity of reduced models, cluster quality, and the brute-force oracles
//! used to check clustering and merging claims on small instances.

mod fcm_merge;
mod fidelity;
mod oracle;
mod validity;

use serde::{Deserialize, Serialize};

pub use fcm_merge::{fcm_merge_eval, fcm_merge_model, soft_merge_layer, FcmMergeEval};
pub use fidelity::{jensen_check, model_jensen_slack, output_fidelity, Fidelity, JensenCheck};
pub use oracle::{opt_partition_oracle, partition_cost, set_partitions, stirling2, OptPartition, ORACLE_MAX_N};
pub use validity::{adjusted_rand_index, dunn_index, silhouette, Metric, DUNN_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuality {
    pub silhouette_euc: f64,
    pub silhouette_cos: f64,
    pub dunn_euc: f64,
    pub dunn_cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub fidelity: Fidelity,
    /// Cluster validity per layer; `None` where a layer has fewer than two
    /// clusters.
    pub layers: Vec<Option<LayerQuality>>,
    /// Minimum over layers and tokens of (bound − error).
    pub jensen_slack: Option<f64>,
}

impl LayerQuality {
    pub fn compute(
        features: &crate::clustering::FeatureMatrix,
        assignment: &crate::clustering::ClusterAssignment,
    ) -> crate::Result<Option<Self>> {
        if assignment.r < 2 {
            return Ok(None);
        }
        Ok(Some(Self {
            silhouette_euc: silhouette(features, assignment, Metric::Euclidean)?,
            silhouette_cos: silhouette(features, assignment, Metric::Cosine)?,
            dunn_euc: dunn_index(features, assignment, Metric::Euclidean)?,
            dunn_cos: dunn_index(features, assignment, Metric::Cosine)?,
        }))
    }
}
