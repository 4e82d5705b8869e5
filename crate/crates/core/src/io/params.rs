//! Parameter counts before and after expert reduction.
//!
//! Only routed experts shrink; embeddings, attention, norms, shared experts
//! and the router (whose width is preserved by merging) stay constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::MoeModel;

/// Published architecture dimensions of a decoder-only SMoE transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDims {
    pub name: String,
    pub vocab: u64,
    pub d_model: u64,
    pub layers: u64,
    pub heads: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub qkv_bias: bool,
    pub tied_embeddings: bool,
    pub expert_ffn: u64,
    pub experts: u64,
    /// Intermediate width of an always-on shared expert, 0 if none.
    pub shared_expert_ffn: u64,
    pub shared_expert_gate: bool,
}

impl ArchDims {
    pub fn mixtral_8x7b() -> Self {
        Self {
            name: "mixtral-8x7b".into(),
            vocab: 32_000,
            d_model: 4096,
            layers: 32,
            heads: 32,
            kv_heads: 8,
            head_dim: 128,
            qkv_bias: false,
            tied_embeddings: false,
            expert_ffn: 14_336,
            experts: 8,
            shared_expert_ffn: 0,
            shared_expert_gate: false,
        }
    }

    pub fn qwen15_moe_a27b() -> Self {
        Self {
            name: "qwen1.5-moe-a2.7b".into(),
            vocab: 151_936,
            d_model: 2048,
            layers: 24,
            heads: 16,
            kv_heads: 16,
            head_dim: 128,
            qkv_bias: true,
            tied_embeddings: false,
            expert_ffn: 1408,
            experts: 60,
            shared_expert_ffn: 5632,
            shared_expert_gate: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mixtral-8x7b" | "mixtral" => Ok(Self::mixtral_8x7b()),
            "qwen1.5-moe-a2.7b" | "qwen" => Ok(Self::qwen15_moe_a27b()),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (known: mixtral-8x7b, qwen1.5-moe-a2.7b)"
            ))),
        }
    }

    pub fn params_per_expert(&self) -> u64 {
        3 * self.d_model * self.expert_ffn
    }

    pub fn non_expert_params(&self) -> u64 {
        let d = self.d_model;
        let embeddings = self.vocab * d * if self.tied_embeddings { 1 } else { 2 };
        let q_out = self.heads * self.head_dim;
        let kv_out = self.kv_heads * self.head_dim;
        let attention = d * q_out + 2 * d * kv_out + q_out * d;
        let bias = if self.qkv_bias { q_out + 2 * kv_out } else { 0 };
        let router = d * self.experts;
        let shared = 3 * d * self.shared_expert_ffn + if self.shared_expert_gate { d } else { 0 };
        let norms = 2 * d;
        embeddings + self.layers * (attention + bias + router + shared + norms) + d
    }

    /// Total parameters with `experts_per_layer` routed experts stored.
    pub fn total_params(&self, experts_per_layer: u64) -> u64 {
        self.non_expert_params() + self.layers * experts_per_layer * self.params_per_expert()
    }

    pub fn report(&self, experts_per_layer: u64) -> ParamReport {
        let before = self.layers * self.experts * self.params_per_expert();
        let after = self.layers * experts_per_layer * self.params_per_expert();
        ParamReport {
            name: self.name.clone(),
            expert_params_before: before,
            expert_params_after: after,
            expert_ratio: after as f64 / before as f64,
            total_params_before: self.total_params(self.experts),
            total_params_after: self.total_params(experts_per_layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub expert_params_before: u64,
    pub expert_params_after: u64,
    pub expert_ratio: f64,
    pub total_params_before: u64,
    pub total_params_after: u64,
}

impl ParamReport {
    /// Counts for an in-memory original/reduced pair; totals add router weights.
    pub fn for_models(original: &MoeModel, reduced: &MoeModel) -> Self {
        let before = original.expert_param_count() as u64;
        let after = reduced.expert_param_count() as u64;
        ParamReport {
            name: "checkpoint".into(),
            expert_params_before: before,
            expert_params_after: after,
            expert_ratio: after as f64 / before as f64,
            total_params_before: before + original.router_param_count() as u64,
            total_params_after: after + reduced.router_param_count() as u64,
        }
    }
}
