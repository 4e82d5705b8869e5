use rayon::prelude::*;

use super::{output_fidelity, LayerQuality, QualityReport};
use crate::calibration::CalibrationStats;
use crate::clustering::{fcm_cluster, FcmOptions, FeatureMatrix, Membership};
use crate::error::{check_dim, Error, Result};
use crate::merging::merge_linear;
use crate::moe::{MoeLayer, MoeModel, TokenBatch};
use crate::tensor::{narrow, Matrix};

/// Soft merge of one layer into `r` experts. Expert j is Σ_i w_ij E_i with
/// w_ij = u_ij / Σ_i u_ij; router column j is Σ_i u_ij W_R[:, i], so crisp
/// memberships sum the router columns of each cluster.
pub fn soft_merge_layer(layer: &MoeLayer, membership: &Membership) -> Result<MoeLayer> {
    check_dim("membership rows", layer.n_slots(), membership.n())?;
    let r = membership.r();
    if r == 0 {
        return Err(Error::InvalidArgument("membership has no clusters".into()));
    }
    let members: Vec<_> = (0..layer.n_slots()).map(|i| layer.expert_for_slot(i)).collect();
    let experts = (0..r)
        .map(|j| {
            let total: f64 = membership.u.iter().map(|row| row[j]).sum();
            if total.is_nan() || total <= 0.0 {
                return Err(Error::InvalidArgument(format!("cluster {j} has zero total membership")));
            }
            let alphas: Vec<f64> = membership.u.iter().map(|row| row[j] / total).collect();
            merge_linear(&members, &alphas)
        })
        .collect::<Result<Vec<_>>>()?;
    let router = layer.router();
    let d_h = router.rows();
    let mut cols = vec![0.0f64; d_h * r];
    for (i, row) in membership.u.iter().enumerate() {
        for (j, &u) in row.iter().enumerate() {
            for h in 0..d_h {
                cols[h * r + j] += u * f64::from(router.get(h, i));
            }
        }
    }
    MoeLayer::dense(Matrix::from_vec(d_h, r, narrow(&cols))?, experts, layer.k().min(r))
}

#[derive(Debug, Clone)]
pub struct FcmMergeEval {
    pub model: MoeModel,
    pub memberships: Vec<Membership>,
    pub quality: QualityReport,
}

/// Runs FCM on each layer's expert-output features and soft-merges.
pub fn fcm_merge_model(
    model: &MoeModel,
    stats: &CalibrationStats,
    r: usize,
    options: &FcmOptions,
) -> Result<(MoeModel, Vec<Membership>)> {
    check_dim("calibrated layers", model.num_layers(), stats.layers.len())?;
    let merged: Vec<(MoeLayer, Membership)> = model
        .layers()
        .par_iter()
        .zip(&stats.layers)
        .map(|(layer, ls)| {
            let f = FeatureMatrix::expert_outputs(ls)?;
            let membership = fcm_cluster(&f, r, options)?.membership;
            Ok((soft_merge_layer(layer, &membership)?, membership))
        })
        .collect::<Result<_>>()?;
    let (layers, memberships) = merged.into_iter().unzip();
    Ok((MoeModel::new(model.d_h(), model.d_m(), layers)?, memberships))
}

/// Soft-merges with FCM and reports fidelity against the original model.
/// Validity indices use the argmax assignment on expert-output features.
pub fn fcm_merge_eval(
    model: &MoeModel,
    stats: &CalibrationStats,
    batch: &TokenBatch,
    r: usize,
    options: &FcmOptions,
) -> Result<FcmMergeEval> {
    let (merged, memberships) = fcm_merge_model(model, stats, r, options)?;
    let fidelity = output_fidelity(model, &merged, batch)?;
    let layers = stats
        .layers
        .iter()
        .zip(&memberships)
        .map(|(ls, u)| {
            let hard = u.hard_labels();
            if hard.r < 2 {
                return Ok(None);
            }
            LayerQuality::compute(&FeatureMatrix::expert_outputs(ls)?, &hard)
        })
        .collect::<Result<_>>()?;
    Ok(FcmMergeEval {
        model: merged,
        memberships,
        quality: QualityReport {
            fidelity,
            layers,
            jensen_slack: None,
        },
    })
}
