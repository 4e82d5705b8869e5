//! Retraining-free comparison methods: frequency, router-score and
//! output-deviation pruning, and one-shot router-logit grouping.
//!
//! Pruning deletes the router columns of removed experts, so top-k is taken
//! over the survivors and the softmax renormalizes among them.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationStats, LayerStats};
use crate::clustering::{global_keep, ClusterAssignment, ClusterMethod, FeatureMatrix};
use crate::error::{check_dim, Error, Result};
use crate::moe::{MoeLayer, MoeModel, TokenBatch};
use crate::synth::CounterRng;
use crate::tensor::sq_dist;

/// Largest subset count searched exhaustively.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMethod {
    Frequency,
    RouterScore,
    OutputDeviation,
    OutputDeviationSampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedLayer {
    pub kept: Vec<usize>,
    /// Output deviation of the chosen subset (O-prune only).
    pub objective: Option<f64>,
    /// Every evaluated subset with its objective, when retained.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub enumeration: Option<Vec<(Vec<usize>, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub method: PruneMethod,
    pub layers: Vec<PrunedLayer>,
}

impl PruneResult {
    fn from_kept(method: PruneMethod, kept: Vec<Vec<usize>>) -> Self {
        Self {
            method,
            layers: kept
                .into_iter()
                .map(|kept| PrunedLayer {
                    kept,
                    objective: None,
                    enumeration: None,
                })
                .collect(),
        }
    }
}

fn check_ratio(keep_ratio: f64) -> Result<()> {
    if !(keep_ratio > 0.0 && keep_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep ratio {keep_ratio} must be in (0, 1)"
        )));
    }
    Ok(())
}

/// Keeps the globally most frequently selected experts.
pub fn f_prune(stats: &CalibrationStats, keep_ratio: f64) -> Result<PruneResult> {
    check_ratio(keep_ratio)?;
    let scores: Vec<Vec<f64>> = stats
        .layers
        .iter()
        .map(|l| l.frequency.iter().map(|&f| f as f64).collect())
        .collect();
    Ok(PruneResult::from_kept(
        PruneMethod::Frequency,
        global_keep(&scores, keep_ratio)?,
    ))
}

/// Keeps the experts with the largest accumulated routing weight.
pub fn s_prune(stats: &CalibrationStats, keep_ratio: f64) -> Result<PruneResult> {
    check_ratio(keep_ratio)?;
    let scores: Vec<Vec<f64>> = stats.layers.iter().map(|l| l.router_score.clone()).collect();
    Ok(PruneResult::from_kept(
        PruneMethod::RouterScore,
        global_keep(&scores, keep_ratio)?,
    ))
}

/// Restricts a layer to the given routing slots (ascending, unique).
pub fn prune_layer(layer: &MoeLayer, kept: &[usize]) -> Result<MoeLayer> {
    if kept.is_empty() {
        return Err(Error::InvalidArgument("cannot prune every expert of a layer".into()));
    }
    let unique: BTreeSet<usize> = kept.iter().copied().collect();
    if unique.len() != kept.len() || kept.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(
            "kept indices must be ascending and unique".into(),
        ));
    }
    if let Some(&bad) = kept.iter().find(|&&i| i >= layer.n_slots()) {
        return Err(Error::InvalidArgument(format!("kept index {bad} out of range")));
    }
    let router = layer.router().select_columns(kept);
    let mut stored: Vec<usize> = Vec::new();
    let remap = kept
        .iter()
        .map(|&slot| {
            let target = layer.remap()[slot];
            stored.iter().position(|&s| s == target).unwrap_or_else(|| {
                stored.push(target);
                stored.len() - 1
            })
        })
        .collect();
    let experts = stored.iter().map(|&s| layer.experts()[s].clone()).collect();
    MoeLayer::new(router, experts, remap, layer.k().min(kept.len()))
}

pub fn apply_prune(model: &MoeModel, result: &PruneResult) -> Result<MoeModel> {
    check_dim("prune result layers", model.num_layers(), result.layers.len())?;
    let layers = model
        .layers()
        .iter()
        .zip(&result.layers)
        .map(|(layer, p)| prune_layer(layer, &p.kept))
        .collect::<Result<_>>()?;
    MoeModel::new(model.d_h(), model.d_m(), layers)
}

pub fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    (0..r).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// All r-subsets of 0..n in lexicographic order.
pub fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r > n {
        return out;
    }
    let mut cur: Vec<usize> = (0..r).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..r).rev().find(|&i| cur[i] < n - r + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..r {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OPruneBudget {
    Exhaustive,
    /// `samples` distinct subsets drawn uniformly from the seeded generator.
    Sampled {
        samples: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OPruneObjective {
    /// Deviation at the layer output, fed the original layer inputs.
    LayerLocal,
    /// Deviation at the model output, with earlier layers already pruned.
    EndToEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OPruneOptions {
    pub budget: OPruneBudget,
    pub objective: OPruneObjective,
    pub retain_enumeration: bool,
}

impl Default for OPruneOptions {
    fn default() -> Self {
        Self {
            budget: OPruneBudget::Exhaustive,
            objective: OPruneObjective::LayerLocal,
            retain_enumeration: false,
        }
    }
}

fn candidate_subsets(n: usize, r: usize, budget: OPruneBudget) -> Result<Vec<Vec<usize>>> {
    let count = binomial(n, r);
    match budget {
        OPruneBudget::Exhaustive => {
            if count > EXHAUSTIVE_LIMIT {
                return Err(Error::Combinatorial {
                    n,
                    r,
                    count,
                    limit: EXHAUSTIVE_LIMIT,
                });
            }
            Ok(combinations(n, r))
        }
        OPruneBudget::Sampled { samples, seed } => {
            if samples == 0 {
                return Err(Error::InvalidArgument("sample count must be positive".into()));
            }
            let mut rng = CounterRng::new(seed, 0x6f70);
            if samples as u128 >= count {
                return Ok(combinations(n, r));
            }
            if count <= EXHAUSTIVE_LIMIT && count <= 4 * samples as u128 {
                let all = combinations(n, r);
                let mut picked: Vec<Vec<usize>> = rng
                    .sample_distinct(all.len(), samples)
                    .into_iter()
                    .map(|i| all[i].clone())
                    .collect();
                picked.sort();
                return Ok(picked);
            }
            let mut seen = BTreeSet::new();
            while seen.len() < samples {
                let mut s = rng.sample_distinct(n, r);
                s.sort_unstable();
                seen.insert(s);
            }
            Ok(seen.into_iter().collect())
        }
    }
}

fn deviation(reference: &TokenBatch, produced: &TokenBatch) -> f64 {
    (0..reference.len())
        .map(|t| {
            reference
                .token(t)
                .iter()
                .zip(produced.token(t))
                .map(|(a, b)| {
                    let d = f64::from(*a) - f64::from(*b);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

fn forward_from(layers: &[MoeLayer], input: TokenBatch) -> Result<TokenBatch> {
    layers.iter().try_fold(input, |h, layer| layer.forward_batch(&h))
}

/// Layer-by-layer search for the `r` experts whose retention minimizes
/// output deviation. Ties go to the lexicographically smallest subset.
pub fn o_prune(model: &MoeModel, batch: &TokenBatch, r: usize, options: &OPruneOptions) -> Result<PruneResult> {
    let original = model.layer_inputs(batch)?;
    let final_out = original.last().expect("layer inputs nonempty");
    let mut pruned_input = batch.clone();
    let mut layers = Vec::with_capacity(model.num_layers());
    for (l, layer) in model.layers().iter().enumerate() {
        let n = layer.n_slots();
        if r == 0 || r >= n {
            return Err(Error::InvalidArgument(format!(
                "O-prune keeps {r} experts but layer {l} has {n}"
            )));
        }
        let candidates = candidate_subsets(n, r, options.budget)?;
        let scores: Vec<f64> = candidates
            .par_iter()
            .map(|kept| -> Result<f64> {
                let candidate = prune_layer(layer, kept)?;
                match options.objective {
                    OPruneObjective::LayerLocal => {
                        Ok(deviation(&original[l + 1], &candidate.forward_batch(&original[l])?))
                    }
                    OPruneObjective::EndToEnd => {
                        let h = candidate.forward_batch(&pruned_input)?;
                        Ok(deviation(final_out, &forward_from(&model.layers()[l + 1..], h)?))
                    }
                }
            })
            .collect::<Result<_>>()?;
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, &s)| if s < scores[b] { i } else { b });
        let kept = candidates[best].clone();
        if options.objective == OPruneObjective::EndToEnd {
            pruned_input = prune_layer(layer, &kept)?.forward_batch(&pruned_input)?;
        }
        layers.push(PrunedLayer {
            kept,
            objective: Some(scores[best]),
            enumeration: options
                .retain_enumeration
                .then(|| candidates.into_iter().zip(scores).collect()),
        });
    }
    let method = match options.budget {
        OPruneBudget::Exhaustive => PruneMethod::OutputDeviation,
        OPruneBudget::Sampled { .. } => PruneMethod::OutputDeviationSampled,
    };
    Ok(PruneResult { method, layers })
}

/// One-shot grouping: the `r` most frequently selected experts become
/// seeds, every other expert joins the seed nearest in router-feature space.
/// No re-centering.
pub fn msmoe_group(stats: &LayerStats, features: &FeatureMatrix, r: usize) -> Result<ClusterAssignment> {
    let n = stats.n_experts();
    check_dim("router features", n, features.len())?;
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("cluster count {r} must be in 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| stats.frequency[b].cmp(&stats.frequency[a]).then(a.cmp(&b)));
    let mut seeds = order[..r].to_vec();
    seeds.sort_unstable();
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            if let Some(pos) = seeds.iter().position(|&s| s == i) {
                return pos;
            }
            let mut best = (0, f64::INFINITY);
            for (pos, &s) in seeds.iter().enumerate() {
                let d = sq_dist(&features.rows[i], &features.rows[s]);
                if d < best.1 {
                    best = (pos, d);
                }
            }
            best.0
        })
        .collect();
    Ok(ClusterAssignment::from_labels(&labels, ClusterMethod::OneShotRouter))
}
