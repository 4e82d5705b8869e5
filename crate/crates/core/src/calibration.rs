//! Per-expert statistics gathered by streaming a calibration batch through
//! the original model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::moe::{ExpertWeights, MoeLayer, MoeModel, Routing, TokenBatch};
use crate::tensor::Matrix;

/// Default ceiling on the activation cache (4 GiB of `f32`).
pub const DEFAULT_MAX_CACHE_BYTES: u64 = 4 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationOptions {
    pub cache_activations: bool,
    /// Apply SiLU to the gate when caching activations. Off reproduces the
    /// purely bilinear `(x·W_gate) ⊙ (x·W_up)` feature.
    pub activation_silu: bool,
    pub max_cache_bytes: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            cache_activations: false,
            activation_silu: true,
            max_cache_bytes: DEFAULT_MAX_CACHE_BYTES,
        }
    }
}

impl CalibrationOptions {
    pub fn with_cache() -> Self {
        Self {
            cache_activations: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// o_i: mean of expert i's output over every calibration token.
    pub mean_outputs: Vec<Vec<f32>>,
    /// Number of tokens whose top-k included expert i.
    pub frequency: Vec<u64>,
    /// Sum over tokens of the routing weight given to expert i.
    pub router_score: Vec<f64>,
    /// Mean router logit vector over the tokens that selected expert i
    /// (zero when the expert was never selected).
    pub logit_profiles: Vec<Vec<f64>>,
    /// Per-expert T × d_m intermediate activations, when requested.
    #[serde(skip)]
    pub activations: Option<Vec<Matrix>>,
}

impl LayerStats {
    pub fn n_experts(&self) -> usize {
        self.frequency.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub token_count: usize,
    pub top_k: Vec<usize>,
    pub activation_silu: bool,
    pub layers: Vec<LayerStats>,
}

impl CalibrationStats {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn has_activation_cache(&self) -> bool {
        !self.layers.is_empty() && self.layers.iter().all(|l| l.activations.is_some())
    }

    pub fn total_experts(&self) -> usize {
        self.layers.iter().map(LayerStats::n_experts).sum()
    }
}

/// T × d_m matrix of intermediate activations of `expert` on every token.
pub fn activation_features(expert: &ExpertWeights, batch: &TokenBatch, apply_silu: bool) -> Result<Matrix> {
    check_dim("activation batch width", expert.d_h(), batch.d_h())?;
    let rows: Vec<Vec<f32>> = (0..batch.len())
        .map(|t| expert.activation(batch.token(t), apply_silu))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

fn cache_bytes(model: &MoeModel, tokens: usize) -> Option<u64> {
    model.layers().iter().try_fold(0u64, |acc, layer| {
        (tokens as u64)
            .checked_mul(layer.d_m() as u64)?
            .checked_mul(layer.n_slots() as u64)?
            .checked_mul(4)
            .and_then(|b| acc.checked_add(b))
    })
}

struct DenseExpert {
    mean: Vec<f32>,
    activations: Option<Matrix>,
}

fn dense_expert(expert: &ExpertWeights, inputs: &TokenBatch, options: &CalibrationOptions) -> Result<DenseExpert> {
    let mut sum = vec![0.0f64; expert.d_h()];
    for t in 0..inputs.len() {
        for (s, v) in sum.iter_mut().zip(expert.forward_f64(inputs.token(t))?) {
            *s += v;
        }
    }
    let count = inputs.len() as f64;
    let activations = if options.cache_activations {
        Some(activation_features(expert, inputs, options.activation_silu)?)
    } else {
        None
    };
    Ok(DenseExpert {
        mean: sum.iter().map(|s| (s / count) as f32).collect(),
        activations,
    })
}

fn layer_stats(layer: &MoeLayer, inputs: &TokenBatch, options: &CalibrationOptions) -> Result<LayerStats> {
    let n = layer.n_slots();
    let dense: Vec<DenseExpert> = (0..n)
        .into_par_iter()
        .map(|slot| dense_expert(layer.expert_for_slot(slot), inputs, options))
        .collect::<Result<_>>()?;

    let routed: Vec<(Vec<f32>, Routing)> = (0..inputs.len())
        .into_par_iter()
        .map(|t| {
            let logits = layer.logits(inputs.token(t))?;
            let routing = layer.route_logits(&logits);
            Ok((logits, routing))
        })
        .collect::<Result<_>>()?;

    let mut frequency = vec![0u64; n];
    let mut router_score = vec![0.0f64; n];
    let mut profile_sum = vec![vec![0.0f64; n]; n];
    for (logits, routing) in &routed {
        for (&slot, &w) in routing.slots.iter().zip(&routing.weights) {
            frequency[slot] += 1;
            router_score[slot] += f64::from(w);
            for (acc, &l) in profile_sum[slot].iter_mut().zip(logits) {
                *acc += f64::from(l);
            }
        }
    }
    let logit_profiles = profile_sum
        .into_iter()
        .zip(&frequency)
        .map(|(sum, &f)| {
            if f == 0 {
                sum
            } else {
                sum.into_iter().map(|s| s / f as f64).collect()
            }
        })
        .collect();

    let (mean_outputs, activations): (Vec<_>, Vec<_>) = dense.into_iter().map(|d| (d.mean, d.activations)).unzip();
    let activations = if options.cache_activations {
        Some(activations.into_iter().map(|a| a.expect("cached")).collect())
    } else {
        None
    };
    Ok(LayerStats {
        mean_outputs,
        frequency,
        router_score,
        logit_profiles,
        activations,
    })
}

/// Evaluates every expert densely on every token that reaches its layer and
/// records routing counts. Layer inputs are the outputs of the preceding
/// original layers.
pub fn collect_stats(model: &MoeModel, batch: &TokenBatch, options: &CalibrationOptions) -> Result<CalibrationStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("calibration batch is empty".into()));
    }
    check_dim("calibration batch width", model.d_h(), batch.d_h())?;
    if options.cache_activations {
        let needed = cache_bytes(model, batch.len());
        if needed.is_none_or(|b| b > options.max_cache_bytes) {
            let (d_m, n) = model.layers().first().map_or((0, 0), |l| (l.d_m(), l.n_slots()));
            return Err(Error::Resource(format!(
                "activation cache of T×d_m×n = {}×{}×{} per layer over {} layers ({} bytes) exceeds limit of {} bytes",
                batch.len(),
                d_m,
                n,
                model.num_layers(),
                needed.map_or("overflowing".to_string(), |b| b.to_string()),
                options.max_cache_bytes
            )));
        }
    }
    let mut layers = Vec::with_capacity(model.num_layers());
    let mut inputs = batch.clone();
    for (idx, layer) in model.layers().iter().enumerate() {
        layers.push(layer_stats(layer, &inputs, options)?);
        if idx + 1 < model.num_layers() {
            inputs = layer.forward_batch(&inputs)?;
        }
    }
    Ok(CalibrationStats {
        token_count: batch.len(),
        top_k: model.layers().iter().map(MoeLayer::k).collect(),
        activation_silu: options.activation_silu,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_batch, gen_planted_model, PlantedSpec};

    fn small_spec() -> PlantedSpec {
        PlantedSpec {
            layers: 2,
            experts: 4,
            groups: 2,
            d_h: 6,
            d_m: 5,
            k: 2,
            noise: 0.1,
            seed: 11,
        }
    }

    #[test]
    fn single_token_mean_is_expert_output() {
        let spec = small_spec();
        let (model, _) = gen_planted_model(&spec).unwrap();
        let batch = gen_batch(&spec, 1).unwrap();
        let stats = collect_stats(&model, &batch, &CalibrationOptions::default()).unwrap();
        let layer = &model.layers()[0];
        for (i, e) in layer.experts().iter().enumerate() {
            assert_eq!(stats.layers[0].mean_outputs[i], e.forward(batch.token(0)).unwrap());
        }
    }

    #[test]
    fn two_token_mean_is_midpoint() {
        let spec = small_spec();
        let (model, _) = gen_planted_model(&spec).unwrap();
        let batch = gen_batch(&spec, 2).unwrap();
        let stats = collect_stats(&model, &batch, &CalibrationOptions::default()).unwrap();
        let e = &model.layers()[0].experts()[1];
        let u = e.forward(batch.token(0)).unwrap();
        let v = e.forward(batch.token(1)).unwrap();
        for (j, &o) in stats.layers[0].mean_outputs[1].iter().enumerate() {
            assert!((o - (u[j] + v[j]) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn counts_match_per_token_recount() {
        let spec = PlantedSpec {
            layers: 2,
            experts: 4,
            groups: 4,
            ..small_spec()
        };
        let (model, _) = gen_planted_model(&spec).unwrap();
        let batch = gen_batch(&spec, 64).unwrap();
        let stats = collect_stats(&model, &batch, &CalibrationOptions::default()).unwrap();

        // Naive recount with independent top-2 selection and softmax.
        let mut h: Vec<Vec<f32>> = (0..64).map(|t| batch.token(t).to_vec()).collect();
        for (l, layer) in model.layers().iter().enumerate() {
            let mut f = [0u64; 4];
            let mut s = [0.0f64; 4];
            for x in &h {
                let logits: Vec<f64> = (0..4)
                    .map(|j| {
                        (0..6)
                            .map(|i| f64::from(x[i]) * f64::from(layer.router().get(i, j)))
                            .sum()
                    })
                    .collect();
                let mut best = 0;
                for j in 1..4 {
                    if (logits[j] as f32) > (logits[best] as f32) {
                        best = j;
                    }
                }
                let mut second = usize::MAX;
                for j in 0..4 {
                    if j != best && (second == usize::MAX || (logits[j] as f32) > (logits[second] as f32)) {
                        second = j;
                    }
                }
                let zb = 1.0;
                let zs = (logits[second] as f32 as f64 - logits[best] as f32 as f64).exp();
                f[best] += 1;
                f[second] += 1;
                s[best] += zb / (zb + zs);
                s[second] += zs / (zb + zs);
            }
            assert_eq!(stats.layers[l].frequency, f.to_vec());
            for j in 0..4 {
                assert!((stats.layers[l].router_score[j] - s[j]).abs() < 1e-5);
            }
            h = h.iter().map(|x| layer.forward(x).unwrap()).collect();
        }
    }

    #[test]
    fn conservation_and_permutation_invariance() {
        let spec = PlantedSpec {
            experts: 6,
            groups: 3,
            k: 3,
            ..small_spec()
        };
        let (model, _) = gen_planted_model(&spec).unwrap();
        let batch = gen_batch(&spec, 40).unwrap();
        let stats = collect_stats(&model, &batch, &CalibrationOptions::default()).unwrap();
        for l in &stats.layers {
            assert_eq!(l.frequency.iter().sum::<u64>(), 3 * 40);
            assert!((l.router_score.iter().sum::<f64>() - 40.0).abs() < 1e-4);
        }

        let mut rows: Vec<Vec<f32>> = (0..40).map(|t| batch.token(t).to_vec()).collect();
        rows.reverse();
        let reversed = TokenBatch::new(Matrix::from_rows(&rows).unwrap()).unwrap();
        let again = collect_stats(&model, &reversed, &CalibrationOptions::default()).unwrap();
        for (a, b) in stats.layers.iter().zip(&again.layers) {
            assert_eq!(a.frequency, b.frequency);
            for (x, y) in a.router_score.iter().zip(&b.router_score) {
                assert!((x - y).abs() < 1e-9);
            }
            for (u, v) in a.mean_outputs.iter().zip(&b.mean_outputs) {
                for (p, q) in u.iter().zip(v) {
                    assert!((p - q).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn duplicate_experts_share_mean_output_bitwise() {
        let spec = PlantedSpec {
            noise: 0.0,
            ..small_spec()
        };
        let (model, truth) = gen_planted_model(&spec).unwrap();
        let batch = gen_batch(&spec, 16).unwrap();
        let stats = collect_stats(&model, &batch, &CalibrationOptions::default()).unwrap();
        for (l, labels) in stats.layers.iter().zip(&truth) {
            for i in 0..4 {
                for j in 0..4 {
                    if labels[i] == labels[j] {
                        assert_eq!(l.mean_outputs[i], l.mean_outputs[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_batch_and_cache_limit() {
        let spec = small_spec();
        let (model, _) = gen_planted_model(&spec).unwrap();
        let batch = gen_batch(&spec, 8).unwrap();
        let options = CalibrationOptions {
            max_cache_bytes: 16,
            ..CalibrationOptions::with_cache()
        };
        let err = collect_stats(&model, &batch, &options).unwrap_err();
        assert!(matches!(err, Error::Resource(ref m) if m.contains("8×5×4")));

        let stats = collect_stats(&model, &batch, &CalibrationOptions::with_cache()).unwrap();
        assert!(stats.has_activation_cache());
        assert_eq!(stats.layers[0].activations.as_ref().unwrap()[0].shape(), (8, 5));
    }

    #[test]
    fn activation_feature_examples() {
        let w = |v: f32| Matrix::from_vec(1, 1, vec![v]).unwrap();
        let e = ExpertWeights::new(w(0.7), w(-1.3), w(2.0)).unwrap();
        let batch = TokenBatch::new(Matrix::from_vec(2, 1, vec![0.0, 0.9]).unwrap()).unwrap();
        let acts = activation_features(&e, &batch, true).unwrap();
        assert_eq!(acts.get(0, 0), 0.0);
        let g = 0.7f64 * 0.9;
        let expected = g / (1.0 + (-g).exp()) * (-1.3 * 0.9);
        assert!((f64::from(acts.get(1, 0)) - expected).abs() < 1e-6);
        let raw = activation_features(&e, &batch, false).unwrap();
        assert!((f64::from(raw.get(1, 0)) - g * (-1.3 * 0.9)).abs() < 1e-6);

        let dead = ExpertWeights::new(w(0.7), w(0.0), w(2.0)).unwrap();
        let acts = activation_features(&dead, &batch, true).unwrap();
        assert!(acts.as_slice().iter().all(|&v| v == 0.0));
    }
}
