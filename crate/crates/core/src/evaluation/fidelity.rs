use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::moe::{softmax_f64, MoeLayer, MoeModel, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Σ_t ‖T(x_t) − S(x_t)‖₂ over final-layer outputs.
    pub l2_sum: f64,
    pub l2_mean: f64,
    /// Mean per-token cosine similarity.
    pub cosine_mean: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

pub(crate) fn compare_outputs(reference: &TokenBatch, produced: &TokenBatch) -> Result<Fidelity> {
    check_dim("output width", reference.d_h(), produced.d_h())?;
    check_dim("output tokens", reference.len(), produced.len())?;
    let t = reference.len();
    let mut l2 = 0.0;
    let mut cos = 0.0;
    for i in 0..t {
        let (a, b) = (reference.token(i), produced.token(i));
        l2 += a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum::<f64>()
            .sqrt();
        cos += cosine(a, b);
    }
    Ok(Fidelity {
        l2_sum: l2,
        l2_mean: l2 / t as f64,
        cosine_mean: cos / t as f64,
    })
}

/// Compares final-layer outputs of an original and a reduced model.
pub fn output_fidelity(original: &MoeModel, reduced: &MoeModel, batch: &TokenBatch) -> Result<Fidelity> {
    check_dim("model width", original.d_h(), reduced.d_h())?;
    compare_outputs(&original.forward(batch)?, &reduced.forward(batch)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JensenCheck {
    /// ‖y_orig − y_merged‖²
    pub error: f64,
    /// Σ_i P_i ‖E_i(x) − Ē_{g(i)}(x)‖²
    pub bound: f64,
}

impl JensenCheck {
    pub fn slack(&self) -> f64 {
        self.bound - self.error
    }
}

/// Both sides of the routing-weighted convexity bound for one token. The
/// merged layer must share the original router, so routing weights agree.
pub fn jensen_check(original: &MoeLayer, merged: &MoeLayer, x: &[f32]) -> Result<JensenCheck> {
    if original.router() != merged.router() || original.k() != merged.k() || original.n_slots() != merged.n_slots() {
        return Err(Error::InvalidArgument(
            "merged layer does not share the original router; plans are mismatched".into(),
        ));
    }
    // Weights stay in f64 so they sum to 1 and the convexity argument is exact.
    let logits = original.logits(x)?;
    let routing = original.route_logits(&logits);
    let picked: Vec<f32> = routing.slots.iter().map(|&s| logits[s]).collect();
    let weights = softmax_f64(&picked);
    let mut diff = vec![0.0f64; original.d_h()];
    let mut bound = 0.0;
    for (&slot, &p) in routing.slots.iter().zip(&weights) {
        let e = original.expert_for_slot(slot).forward_f64(x)?;
        let m = merged.expert_for_slot(slot).forward_f64(x)?;
        let mut sq = 0.0;
        for ((acc, a), b) in diff.iter_mut().zip(&e).zip(&m) {
            *acc += p * (a - b);
            sq += (a - b).powi(2);
        }
        bound += p * sq;
    }
    let error = diff.iter().map(|v| v * v).sum();
    Ok(JensenCheck { error, bound })
}

/// Minimum slack (bound − error) per layer over all tokens, evaluating each
/// layer on the original model's inputs to it.
pub fn model_jensen_slack(original: &MoeModel, merged: &MoeModel, batch: &TokenBatch) -> Result<Vec<f64>> {
    check_dim("merged layers", original.num_layers(), merged.num_layers())?;
    let inputs = original.layer_inputs(batch)?;
    original
        .layers()
        .iter()
        .zip(merged.layers())
        .zip(&inputs)
        .map(|((o, m), h)| {
            (0..h.len()).try_fold(f64::INFINITY, |acc, t| {
                Ok(acc.min(jensen_check(o, m, h.token(t))?.slack()))
            })
        })
        .collect()
}
