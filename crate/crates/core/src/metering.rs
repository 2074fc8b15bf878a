//! Compute and communication metering.
//!
//! FLOP accounting covers every matrix multiplication in the forward pass,
//! split by component. The analytic formulas and the instrumented counter
//! must agree exactly: both count multiply-adds of each `m x k @ k x n`
//! product as `m*k*n`, and report FLOPs as multiply-adds times two (the
//! convention is recorded in the report). Element-wise work (norms,
//! activations, softmax) is excluded from both sides by construction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::allocator::{buffer_capacity, AssignmentTable};
use crate::model::vit::ModelConfig;
use crate::numkit::CostCenter;
use crate::{Error, Result};

/// The FLOP convention marker stored in every report.
pub const FLOP_CONVENTION: &str = "multiply_adds_x2";

/// Multiply-add counts per component for one forward pass over a batch,
/// plus derived totals and per-token / per-image views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub convention: String,
    /// Images in the metered batch.
    pub images: u64,
    /// Tokens in the metered batch (images times tokens per image).
    pub tokens: u64,
    pub embedding_madds: u64,
    pub attention_madds: u64,
    pub dense_mlp_madds: u64,
    pub router_madds: u64,
    pub expert_mlp_madds: u64,
    pub head_madds: u64,
    /// Matmuls charged to no named component; zero for the model forward.
    pub other_madds: u64,
    pub total_madds: u64,
    /// `2 * total_madds` under the stated convention.
    pub total_flops: u64,
    pub flops_per_token: f64,
    pub flops_per_image: f64,
}

impl FlopReport {
    /// Builds a report from per-component multiply-add counts.
    pub fn from_madds(
        images: usize,
        tokens: usize,
        madds: &BTreeMap<CostCenter, u64>,
    ) -> FlopReport {
        assert!(images > 0 && tokens > 0, "report needs a non-empty batch");
        let get = |c: CostCenter| madds.get(&c).copied().unwrap_or(0);
        let embedding = get(CostCenter::Embedding);
        let attention = get(CostCenter::Attention);
        let dense_mlp = get(CostCenter::DenseMlp);
        let router = get(CostCenter::Router);
        let expert_mlp = get(CostCenter::ExpertMlp);
        let head = get(CostCenter::Head);
        let other = get(CostCenter::Other);
        let total = embedding + attention + dense_mlp + router + expert_mlp + head + other;
        let total_flops = 2 * total;
        FlopReport {
            convention: FLOP_CONVENTION.to_string(),
            images: images as u64,
            tokens: tokens as u64,
            embedding_madds: embedding,
            attention_madds: attention,
            dense_mlp_madds: dense_mlp,
            router_madds: router,
            expert_mlp_madds: expert_mlp,
            head_madds: head,
            other_madds: other,
            total_madds: total,
            total_flops,
            flops_per_token: total_flops as f64 / tokens as f64,
            flops_per_image: total_flops as f64 / images as f64,
        }
    }

    /// Total multiply-adds outside the router, the term that must be
    /// invariant in the number of experts at fixed k, C, and token count.
    pub fn non_router_madds(&self) -> u64 {
        self.total_madds - self.router_madds
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Closed-form multiply-add counts for one forward pass of `images` images,
/// with `k` and the capacity ratio supplied explicitly so inference-time
/// overrides can be metered. The whole batch is treated as one allocation
/// group (matching the default forward pass).
pub fn flops_analytic(
    config: &ModelConfig,
    images: usize,
    k: usize,
    capacity_ratio: f64,
) -> FlopReport {
    assert!(images > 0, "need at least one image");
    assert!(k >= 1 && k <= config.num_experts, "k out of range");
    let n = images as u64;
    let p = config.patches_per_image() as u64;
    let s = config.seq_len() as u64;
    let t = n * s;
    let d = config.embed_dim as u64;
    let d_mlp = config.mlp_dim as u64;
    let e = config.num_experts as u64;
    let classes = config.num_classes as u64;
    let l = config.blocks as u64;
    let n_moe = config.moe_blocks().len() as u64;
    let n_dense = l - n_moe;

    let embedding = n * p * config.patch_dim() as u64 * d;
    // Per block: q/k/v/output projections (4 T D^2) plus scores and the
    // attention-weighted sum (2 S^2 D per image).
    let attention = l * n * (4 * s * d * d + 2 * s * s * d);
    let dense_mlp = n_dense * t * 2 * d * d_mlp;
    let router = n_moe * t * e * d;
    let b_e = buffer_capacity(
        images,
        config.seq_len(),
        k,
        config.num_experts,
        capacity_ratio,
    ) as u64;
    let expert_mlp = n_moe * e * b_e * 2 * d * d_mlp;
    let head = n * d * classes;

    let mut madds = BTreeMap::new();
    madds.insert(CostCenter::Embedding, embedding);
    madds.insert(CostCenter::Attention, attention);
    madds.insert(CostCenter::DenseMlp, dense_mlp);
    madds.insert(CostCenter::Router, router);
    madds.insert(CostCenter::ExpertMlp, expert_mlp);
    madds.insert(CostCenter::Head, head);
    FlopReport::from_madds(images, t as usize, &madds)
}

/// Wraps the matmul counters of an instrumented forward pass into a report.
pub fn flops_counted(
    madds: &BTreeMap<CostCenter, u64>,
    images: usize,
    tokens: usize,
) -> FlopReport {
    FlopReport::from_madds(images, tokens, madds)
}

/// Simulated cross-device traffic for one sparse layer's assignment table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommReport {
    /// Successful (buffered) assignments in the table.
    pub successful_assignments: u64,
    /// Dispatched token copies whose source and expert devices differ.
    pub dispatch_crossings: u64,
    /// Result rows returned across devices; equals dispatch by symmetry.
    pub combine_crossings: u64,
    /// Dispatch plus combine.
    pub total_crossings: u64,
}

/// Counts boundary crossings given device placements: `expert_to_device[e]`
/// and `token_to_device[t]`. Every successful assignment whose token sits on
/// a different device than its expert crosses once at dispatch and once at
/// combine.
///
/// Errors if either placement is missing an entry.
pub fn comm_volume(
    table: &AssignmentTable,
    expert_to_device: &[usize],
    token_to_device: &[usize],
) -> Result<CommReport> {
    if expert_to_device.len() < table.num_experts() {
        return Err(Error::Config(format!(
            "expert placement covers {} of {} experts",
            expert_to_device.len(),
            table.num_experts()
        )));
    }
    if token_to_device.len() < table.num_tokens() {
        return Err(Error::Config(format!(
            "token placement covers {} of {} tokens",
            token_to_device.len(),
            table.num_tokens()
        )));
    }
    let mut successes = 0u64;
    let mut crossings = 0u64;
    for (token, _, a) in table.iter() {
        if a.succeeded() {
            successes += 1;
            if token_to_device[token] != expert_to_device[a.expert] {
                crossings += 1;
            }
        }
    }
    Ok(CommReport {
        successful_assignments: successes,
        dispatch_crossings: crossings,
        combine_crossings: crossings,
        total_crossings: 2 * crossings,
    })
}
