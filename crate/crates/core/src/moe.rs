//! SMoE data types and forward semantics.
//!
//! A layer owns a router `W_R` (d_h × n) and a list of stored experts. Each
//! of the n routing slots points at one stored expert through `remap`; an
//! unmerged layer has the identity remap, a merged layer stores r ≤ n experts
//! and several slots share one of them. The router is never rewritten by
//! merging, only the remap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::tensor::{narrow, Matrix};

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Gated feed-forward expert: `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights {
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl ExpertWeights {
    pub fn new(w_gate: Matrix, w_up: Matrix, w_down: Matrix) -> Result<Self> {
        let (d_h, d_m) = w_gate.shape();
        w_up.ensure_shape("w_up", d_h, d_m)?;
        w_down.ensure_shape("w_down", d_m, d_h)?;
        let e = Self { w_gate, w_up, w_down };
        if !e.is_finite() {
            return Err(Error::InvalidArgument("expert weights contain NaN or Inf".into()));
        }
        Ok(e)
    }

    pub fn zeros(d_h: usize, d_m: usize) -> Self {
        Self {
            w_gate: Matrix::zeros(d_h, d_m),
            w_up: Matrix::zeros(d_h, d_m),
            w_down: Matrix::zeros(d_m, d_h),
        }
    }

    pub fn d_h(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn d_m(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn param_count(&self) -> usize {
        3 * self.d_h() * self.d_m()
    }

    pub fn is_finite(&self) -> bool {
        self.w_gate.is_finite() && self.w_up.is_finite() && self.w_down.is_finite()
    }

    fn intermediate(&self, x: &[f32], apply_silu: bool) -> Result<Vec<f64>> {
        let gate = self.w_gate.vec_mul(x)?;
        let up = self.w_up.vec_mul(x)?;
        Ok(gate
            .into_iter()
            .zip(up)
            .map(|(g, u)| if apply_silu { silu(g) * u } else { g * u })
            .collect())
    }

    /// Intermediate activation fed into `W_down`, length d_m. With
    /// `apply_silu = false` the gate is used linearly.
    pub fn activation(&self, x: &[f32], apply_silu: bool) -> Result<Vec<f32>> {
        Ok(narrow(&self.intermediate(x, apply_silu)?))
    }

    pub(crate) fn forward_f64(&self, x: &[f32]) -> Result<Vec<f64>> {
        let h = self.intermediate(x, true)?;
        self.w_down.vec_mul_f64(&h)
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(narrow(&self.forward_f64(x)?))
    }
}

/// Sparse routing decision for one token: the selected slots in ascending
/// order and their softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub slots: Vec<usize>,
    pub weights: Vec<f32>,
}

impl Routing {
    /// Dense length-n weight vector with zeros off the selected slots.
    pub fn dense(&self, n: usize) -> Vec<f32> {
        let mut p = vec![0.0; n];
        for (&s, &w) in self.slots.iter().zip(&self.weights) {
            p[s] = w;
        }
        p
    }
}

/// Indices of the k largest values, ties to the lower index, returned in
/// ascending index order.
pub(crate) fn top_k(values: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

pub(crate) fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| f64::from(l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

pub(crate) fn softmax(logits: &[f32]) -> Vec<f32> {
    softmax_f64(logits).into_iter().map(|p| p as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    router: Matrix,
    experts: Vec<ExpertWeights>,
    remap: Vec<usize>,
    k: usize,
}

impl MoeLayer {
    /// Unmerged layer: one stored expert per routing slot.
    pub fn dense(router: Matrix, experts: Vec<ExpertWeights>, k: usize) -> Result<Self> {
        let remap = (0..experts.len()).collect();
        Self::new(router, experts, remap, k)
    }

    pub fn new(router: Matrix, experts: Vec<ExpertWeights>, remap: Vec<usize>, k: usize) -> Result<Self> {
        let (d_h, n) = router.shape();
        if n == 0 {
            return Err(Error::Config("layer has no routing slots".into()));
        }
        if k == 0 || k > n {
            return Err(Error::Config(format!("top-k {k} must be in 1..={n}")));
        }
        if !router.is_finite() {
            return Err(Error::InvalidArgument("router contains NaN or Inf".into()));
        }
        check_dim("remap length", n, remap.len())?;
        let first = experts
            .first()
            .ok_or_else(|| Error::Config("layer stores no experts".into()))?;
        let d_m = first.d_m();
        let mut referenced = vec![false; experts.len()];
        for &target in &remap {
            if target >= experts.len() {
                return Err(Error::Config(format!(
                    "remap target {target} out of range for {} stored experts",
                    experts.len()
                )));
            }
            referenced[target] = true;
        }
        if referenced.iter().any(|r| !r) {
            return Err(Error::Config("remap is not surjective onto stored experts".into()));
        }
        for e in &experts {
            check_dim("expert d_h", d_h, e.d_h())?;
            check_dim("expert d_m", d_m, e.d_m())?;
            e.w_up.ensure_shape("w_up", d_h, d_m)?;
            e.w_down.ensure_shape("w_down", d_m, d_h)?;
            if !e.is_finite() {
                return Err(Error::InvalidArgument("expert weights contain NaN or Inf".into()));
            }
        }
        Ok(Self {
            router,
            experts,
            remap,
            k,
        })
    }

    pub fn router(&self) -> &Matrix {
        &self.router
    }

    pub fn experts(&self) -> &[ExpertWeights] {
        &self.experts
    }

    pub fn remap(&self) -> &[usize] {
        &self.remap
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_h(&self) -> usize {
        self.router.rows()
    }

    pub fn d_m(&self) -> usize {
        self.experts[0].d_m()
    }

    /// Number of routing slots n.
    pub fn n_slots(&self) -> usize {
        self.router.cols()
    }

    /// Number of stored experts (r for a merged layer).
    pub fn n_stored(&self) -> usize {
        self.experts.len()
    }

    pub fn is_merged(&self) -> bool {
        self.remap.iter().enumerate().any(|(i, &t)| i != t) || self.n_stored() != self.n_slots()
    }

    pub fn expert_for_slot(&self, slot: usize) -> &ExpertWeights {
        &self.experts[self.remap[slot]]
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(narrow(&self.router.vec_mul(x)?))
    }

    pub fn route(&self, x: &[f32]) -> Result<Routing> {
        let logits = self.logits(x)?;
        Ok(self.route_logits(&logits))
    }

    pub(crate) fn route_logits(&self, logits: &[f32]) -> Routing {
        let slots = top_k(logits, self.k);
        let picked: Vec<f32> = slots.iter().map(|&s| logits[s]).collect();
        Routing {
            weights: softmax(&picked),
            slots,
        }
    }

    pub(crate) fn forward_routed(&self, x: &[f32], routing: &Routing) -> Result<Vec<f64>> {
        let mut cache: Vec<Option<Vec<f64>>> = vec![None; self.experts.len()];
        let mut y = vec![0.0f64; self.d_h()];
        for (&slot, &p) in routing.slots.iter().zip(&routing.weights) {
            let target = self.remap[slot];
            if cache[target].is_none() {
                cache[target] = Some(self.experts[target].forward_f64(x)?);
            }
            let out = cache[target].as_ref().expect("filled above");
            let p = f64::from(p);
            for (acc, &v) in y.iter_mut().zip(out) {
                *acc += p * v;
            }
        }
        Ok(y)
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        let routing = self.route(x)?;
        Ok(narrow(&self.forward_routed(x, &routing)?))
    }

    pub fn forward_batch(&self, batch: &TokenBatch) -> Result<TokenBatch> {
        check_dim("batch width", self.d_h(), batch.d_h())?;
        let rows: Vec<Vec<f32>> = (0..batch.len())
            .into_par_iter()
            .map(|t| self.forward(batch.token(t)))
            .collect::<Result<_>>()?;
        TokenBatch::new(Matrix::from_rows(&rows)?)
    }

    pub fn expert_param_count(&self) -> usize {
        self.experts.iter().map(ExpertWeights::param_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    d_h: usize,
    d_m: usize,
    layers: Vec<MoeLayer>,
}

impl MoeModel {
    pub fn new(d_h: usize, d_m: usize, layers: Vec<MoeLayer>) -> Result<Self> {
        for layer in &layers {
            check_dim("layer d_h", d_h, layer.d_h())?;
            check_dim("layer d_m", d_m, layer.d_m())?;
        }
        Ok(Self { d_h, d_m, layers })
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn d_m(&self) -> usize {
        self.d_m
    }

    pub fn layers(&self) -> &[MoeLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn forward_token(&self, x: &[f32]) -> Result<Vec<f32>> {
        check_dim("token width", self.d_h, x.len())?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, batch: &TokenBatch) -> Result<TokenBatch> {
        check_dim("batch width", self.d_h, batch.d_h())?;
        let rows: Vec<Vec<f32>> = (0..batch.len())
            .into_par_iter()
            .map(|t| self.forward_token(batch.token(t)))
            .collect::<Result<_>>()?;
        TokenBatch::new(Matrix::from_rows(&rows)?)
    }

    /// Hidden states entering each layer, followed by the final output
    /// (length L + 1).
    pub fn layer_inputs(&self, batch: &TokenBatch) -> Result<Vec<TokenBatch>> {
        check_dim("batch width", self.d_h, batch.d_h())?;
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        out.push(batch.clone());
        for layer in &self.layers {
            let next = layer.forward_batch(out.last().expect("nonempty"))?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn expert_param_count(&self) -> usize {
        self.layers.iter().map(MoeLayer::expert_param_count).sum()
    }

    pub fn router_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.d_h() * l.n_slots()).sum()
    }
}

/// Calibration hidden states, one d_h row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    vectors: Matrix,
}

impl TokenBatch {
    pub fn new(vectors: Matrix) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::InvalidArgument("token batch is empty".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::InvalidArgument("token batch contains NaN or Inf".into()));
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn d_h(&self) -> usize {
        self.vectors.cols()
    }

    pub fn token(&self, t: usize) -> &[f32] {
        self.vectors.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.vectors
    }

    pub fn into_matrix(self) -> Matrix {
        self.vectors
    }
}
