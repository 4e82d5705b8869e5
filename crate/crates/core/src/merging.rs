//! Collapsing each cluster into a single expert in weight space.
//!
//! The merged layer keeps the original router; slot i is redirected to the
//! merged expert of its cluster through the layer remap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationStats, LayerStats};
use crate::clustering::ClusterAssignment;
use crate::error::{check_dim, Error, Result};
use crate::moe::{ExpertWeights, MoeLayer, MoeModel};
use crate::tensor::{narrow, Matrix};

const ALPHA_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeStrategy {
    Average,
    Frequency,
    FixDom,
}

impl std::str::FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "frequency" => Ok(Self::Frequency),
            "fixdom" | "fix-dom" => Ok(Self::FixDom),
            other => Err(Error::InvalidArgument(format!("unknown merge strategy `{other}`"))),
        }
    }
}

/// Features used to align intermediate dimensions in fix-dom merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixDomFeatures {
    Activation,
    Weight,
    ActivationWeight,
}

impl std::str::FromStr for FixDomFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "act" | "activation" => Ok(Self::Activation),
            "weight" => Ok(Self::Weight),
            "act+weight" | "activation-weight" => Ok(Self::ActivationWeight),
            other => Err(Error::InvalidArgument(format!(
                "unknown fix-dom feature kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub assignment: ClusterAssignment,
    pub strategy: MergeStrategy,
    /// Coefficients per cluster, aligned with the cluster's ascending members.
    pub alphas: Vec<Vec<f64>>,
    /// Dominant expert index per cluster (fix-dom only).
    pub dominant: Option<Vec<usize>>,
    pub fixdom_features: Option<FixDomFeatures>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub layers: Vec<LayerPlan>,
}

/// Merge coefficients for one cluster. Frequency weighting falls back to
/// uniform when the cluster was never selected.
pub fn build_alphas(members: &[usize], frequency: &[u64], strategy: MergeStrategy) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("cannot merge an empty cluster".into()));
    }
    let uniform = vec![1.0 / members.len() as f64; members.len()];
    match strategy {
        MergeStrategy::Average | MergeStrategy::FixDom => Ok(uniform),
        MergeStrategy::Frequency => {
            let total: u64 = members.iter().map(|&i| frequency[i]).sum();
            if total == 0 {
                Ok(uniform)
            } else {
                Ok(members.iter().map(|&i| frequency[i] as f64 / total as f64).collect())
            }
        }
    }
}

/// Highest-frequency member, lowest index on ties.
pub fn default_dominant(members: &[usize], frequency: &[u64]) -> usize {
    members
        .iter()
        .copied()
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if frequency[b] >= frequency[i] => Some(b),
            _ => Some(i),
        })
        .expect("nonempty cluster")
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    let sum: f64 = alphas.iter().sum();
    if alphas.iter().any(|&a| a.is_nan() || a < 0.0) || (sum - 1.0).abs() > ALPHA_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "merge coefficients must be nonnegative and sum to 1, got {alphas:?}"
        )));
    }
    Ok(())
}

impl LayerPlan {
    pub fn new(
        assignment: ClusterAssignment,
        stats: &LayerStats,
        strategy: MergeStrategy,
        fixdom_features: Option<FixDomFeatures>,
        dominant: Option<Vec<usize>>,
    ) -> Result<Self> {
        assignment.validate()?;
        check_dim("assignment size", stats.n_experts(), assignment.n())?;
        let clusters = assignment.clusters();
        let alphas = clusters
            .iter()
            .map(|c| build_alphas(c, &stats.frequency, strategy))
            .collect::<Result<_>>()?;
        let (dominant, fixdom_features) = if strategy == MergeStrategy::FixDom {
            let dom = match dominant {
                Some(d) => d,
                None => clusters.iter().map(|c| default_dominant(c, &stats.frequency)).collect(),
            };
            (Some(dom), Some(fixdom_features.unwrap_or(FixDomFeatures::Weight)))
        } else {
            (None, None)
        };
        let plan = Self {
            assignment,
            strategy,
            alphas,
            dominant,
            fixdom_features,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.assignment.validate()?;
        let clusters = self.assignment.clusters();
        check_dim("alpha lists", clusters.len(), self.alphas.len())?;
        for (c, a) in clusters.iter().zip(&self.alphas) {
            check_dim("cluster alphas", c.len(), a.len())?;
            check_alphas(a)?;
        }
        if self.strategy == MergeStrategy::FixDom {
            let dom = self
                .dominant
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("fix-dom plan lacks dominant experts".into()))?;
            check_dim("dominant list", clusters.len(), dom.len())?;
            for (j, (&d, c)) in dom.iter().zip(&clusters).enumerate() {
                if !c.contains(&d) {
                    return Err(Error::InvalidArgument(format!(
                        "dominant expert {d} is not a member of cluster {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl MergePlan {
    /// One layer plan per assignment, all with the same strategy.
    pub fn build(
        assignments: &[ClusterAssignment],
        stats: &CalibrationStats,
        strategy: MergeStrategy,
        fixdom_features: Option<FixDomFeatures>,
    ) -> Result<Self> {
        check_dim("assignments per layer", stats.num_layers(), assignments.len())?;
        let layers = assignments
            .iter()
            .zip(&stats.layers)
            .map(|(a, s)| LayerPlan::new(a.clone(), s, strategy, fixdom_features, None))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Convex combination of whole experts: every matrix is Σ α_j W_j.
pub fn merge_linear(members: &[&ExpertWeights], alphas: &[f64]) -> Result<ExpertWeights> {
    check_dim("merge coefficients", members.len(), alphas.len())?;
    check_alphas(alphas)?;
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot merge an empty cluster".into()))?;
    let (d_h, d_m) = (first.d_h(), first.d_m());
    for e in members {
        e.w_gate.ensure_shape("merge member w_gate", d_h, d_m)?;
    }
    let combine = |pick: fn(&ExpertWeights) -> &Matrix| -> Result<Matrix> {
        let (rows, cols) = pick(first).shape();
        let mut acc = vec![0.0f64; rows * cols];
        for (e, &a) in members.iter().zip(alphas) {
            for (s, &v) in acc.iter_mut().zip(pick(e).as_slice()) {
                *s += a * f64::from(v);
            }
        }
        Matrix::from_vec(rows, cols, narrow(&acc))
    };
    Ok(ExpertWeights {
        w_gate: combine(|e| &e.w_gate)?,
        w_up: combine(|e| &e.w_up)?,
        w_down: combine(|e| &e.w_down)?,
    })
}

/// Per-intermediate-dimension feature matrix for fix-dom alignment; column p
/// describes intermediate unit p.
pub fn fixdom_feature_matrix(
    expert: &ExpertWeights,
    kind: FixDomFeatures,
    activations: Option<&Matrix>,
) -> Result<Matrix> {
    let weight = || {
        let (d_h, d_m) = (expert.d_h(), expert.d_m());
        Matrix::from_fn(3 * d_h, d_m, |row, p| match row / d_h {
            0 => expert.w_gate.get(row, p),
            1 => expert.w_up.get(row - d_h, p),
            _ => expert.w_down.get(p, row - 2 * d_h),
        })
    };
    let act = || -> Result<Matrix> {
        let a = activations.ok_or(Error::MissingActivationCache { layer: 0 })?;
        check_dim("activation cache width", expert.d_m(), a.cols())?;
        Ok(a.clone())
    };
    match kind {
        FixDomFeatures::Weight => Ok(weight()),
        FixDomFeatures::Activation => act(),
        FixDomFeatures::ActivationWeight => {
            let a = zscore_columns(&act()?);
            let w = zscore_columns(&weight());
            let rows = a.rows() + w.rows();
            Ok(Matrix::from_fn(rows, a.cols(), |i, p| {
                if i < a.rows() {
                    a.get(i, p)
                } else {
                    w.get(i - a.rows(), p)
                }
            }))
        }
    }
}

fn zscore_columns(m: &Matrix) -> Matrix {
    let stats: Vec<(f64, f64)> = (0..m.cols())
        .map(|p| {
            let col = m.column(p);
            let n = col.len() as f64;
            let mean = col.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = col.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect();
    Matrix::from_fn(m.rows(), m.cols(), |i, p| {
        let (mean, sd) = stats[p];
        if sd > 0.0 {
            ((f64::from(m.get(i, p)) - mean) / sd) as f32
        } else {
            0.0
        }
    })
}

/// Centered columns and their norms, for repeated Pearson correlations.
struct CenteredColumns {
    cols: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl CenteredColumns {
    fn new(m: &Matrix) -> Self {
        let cols: Vec<Vec<f64>> = (0..m.cols())
            .map(|p| {
                let col: Vec<f64> = m.column(p).into_iter().map(f64::from).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                col.into_iter().map(|v| v - mean).collect()
            })
            .collect();
        let norms = cols
            .iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Self { cols, norms }
    }

    fn correlation(&self, p: usize, other: &CenteredColumns, q: usize) -> f64 {
        let denom = self.norms[p] * other.norms[q];
        if denom == 0.0 {
            return 0.0;
        }
        let dot: f64 = self.cols[p].iter().zip(&other.cols[q]).map(|(a, b)| a * b).sum();
        dot / denom
    }
}

/// For every non-dominant member, the dominant column each of its
/// intermediate units is grouped with (highest Pearson correlation, lowest
/// index on ties).
pub fn fixdom_alignment(features: &[Matrix], dominant: usize) -> Result<Vec<Vec<usize>>> {
    let reference = features
        .get(dominant)
        .ok_or_else(|| Error::InvalidArgument("dominant index outside cluster".into()))?;
    let d_m = reference.cols();
    for f in features {
        f.ensure_shape("fix-dom feature matrix", reference.rows(), d_m)?;
    }
    let dom = CenteredColumns::new(reference);
    Ok(features
        .iter()
        .enumerate()
        .map(|(j, f)| {
            if j == dominant {
                return (0..d_m).collect();
            }
            let cols = CenteredColumns::new(f);
            (0..d_m)
                .map(|p| {
                    let mut best = (0, f64::NEG_INFINITY);
                    for q in 0..d_m {
                        let c = cols.correlation(p, &dom, q);
                        if c > best.1 {
                            best = (q, c);
                        }
                    }
                    best.0
                })
                .collect()
        })
        .collect())
}

/// Fix-dom merge: align every member's intermediate units to the dominant
/// expert's, then take the α-weighted mean of all units grouped on each
/// dominant unit. The result keeps the dominant expert's unit order.
pub fn fixdom_merge(
    members: &[&ExpertWeights],
    dominant: usize,
    features: &[Matrix],
    alphas: &[f64],
) -> Result<ExpertWeights> {
    check_dim("fix-dom features", members.len(), features.len())?;
    check_dim("merge coefficients", members.len(), alphas.len())?;
    check_alphas(alphas)?;
    let dom = members
        .get(dominant)
        .ok_or_else(|| Error::InvalidArgument("dominant index outside cluster".into()))?;
    let (d_h, d_m) = (dom.d_h(), dom.d_m());
    for e in members {
        e.w_gate.ensure_shape("merge member w_gate", d_h, d_m)?;
    }
    let alignment = fixdom_alignment(features, dominant)?;

    let mut gate = vec![0.0f64; d_h * d_m];
    let mut up = vec![0.0f64; d_h * d_m];
    let mut down = vec![0.0f64; d_m * d_h];
    let mut weight = vec![0.0f64; d_m];
    for ((e, map), &a) in members.iter().zip(&alignment).zip(alphas) {
        for (p, &q) in map.iter().enumerate() {
            weight[q] += a;
            for i in 0..d_h {
                gate[i * d_m + q] += a * f64::from(e.w_gate.get(i, p));
                up[i * d_m + q] += a * f64::from(e.w_up.get(i, p));
                down[q * d_h + i] += a * f64::from(e.w_down.get(p, i));
            }
        }
    }
    // A unit that attracted zero total weight (all α on it zero) keeps the
    // dominant's own column.
    for q in 0..d_m {
        let w = weight[q];
        for i in 0..d_h {
            if w > 0.0 {
                gate[i * d_m + q] /= w;
                up[i * d_m + q] /= w;
                down[q * d_h + i] /= w;
            } else {
                gate[i * d_m + q] = f64::from(dom.w_gate.get(i, q));
                up[i * d_m + q] = f64::from(dom.w_up.get(i, q));
                down[q * d_h + i] = f64::from(dom.w_down.get(q, i));
            }
        }
    }
    Ok(ExpertWeights {
        w_gate: Matrix::from_vec(d_h, d_m, narrow(&gate))?,
        w_up: Matrix::from_vec(d_h, d_m, narrow(&up))?,
        w_down: Matrix::from_vec(d_m, d_h, narrow(&down))?,
    })
}

fn merge_layer(idx: usize, layer: &MoeLayer, plan: &LayerPlan, stats: Option<&LayerStats>) -> Result<MoeLayer> {
    plan.validate()?;
    check_dim("plan size", layer.n_slots(), plan.assignment.n())?;
    let clusters = plan.assignment.clusters();
    let merged = clusters
        .iter()
        .enumerate()
        .map(|(c, members)| {
            let experts: Vec<&ExpertWeights> = members.iter().map(|&i| layer.expert_for_slot(i)).collect();
            let alphas = &plan.alphas[c];
            match plan.strategy {
                MergeStrategy::Average | MergeStrategy::Frequency => merge_linear(&experts, alphas),
                MergeStrategy::FixDom => {
                    let dom_expert = plan.dominant.as_ref().expect("validated")[c];
                    let dominant = members.iter().position(|&i| i == dom_expert).expect("validated");
                    let kind = plan.fixdom_features.unwrap_or(FixDomFeatures::Weight);
                    let cache = if kind == FixDomFeatures::Weight {
                        None
                    } else {
                        Some(
                            stats
                                .and_then(|s| s.activations.as_ref())
                                .ok_or(Error::MissingActivationCache { layer: idx })?,
                        )
                    };
                    let features = members
                        .iter()
                        .zip(&experts)
                        .map(|(&i, e)| fixdom_feature_matrix(e, kind, cache.map(|c| &c[i])))
                        .collect::<Result<Vec<_>>>()?;
                    fixdom_merge(&experts, dominant, &features, alphas)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    MoeLayer::new(
        layer.router().clone(),
        merged,
        plan.assignment.labels.clone(),
        layer.k(),
    )
}

/// Replaces every layer's experts by the merged experts of its plan.
/// Activation-based fix-dom plans need the calibration activation cache.
pub fn apply_merge_plan(model: &MoeModel, plan: &MergePlan, stats: Option<&CalibrationStats>) -> Result<MoeModel> {
    check_dim("plan layers", model.num_layers(), plan.layers.len())?;
    if let Some(s) = stats {
        check_dim("stats layers", model.num_layers(), s.num_layers())?;
    }
    let layers = model
        .layers()
        .par_iter()
        .zip(&plan.layers)
        .enumerate()
        .map(|(idx, (layer, lp))| merge_layer(idx, layer, lp, stats.map(|s| &s.layers[idx])))
        .collect::<Result<Vec<_>>>()?;
    MoeModel::new(model.d_h(), model.d_m(), layers)
}
