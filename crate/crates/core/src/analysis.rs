//! Routing introspection: per-token traces, class/position specialization
//! matrices, random-router ablations, inference-time k mismatch, and
//! experts-per-image histograms. Every operation here is a deterministic
//! function of (parameters, dataset, seed).

use std::collections::{BTreeMap, BTreeSet};

use crate::model::data::Dataset;
use crate::model::train::evaluate;
use crate::model::vit::{
    model_forward, EvalOptions, ModelParams, RandomRouterKind, RandomizeRouters,
};
use crate::numkit::{stream, RngStream};
use crate::router::RouterMode;
use crate::{Error, Result};

/// One (sparse layer, token) routing decision: which experts were selected,
/// with what weights, and whether each assignment won a buffer slot.
/// `weights` is in rank order, so `weights[0]` is the TOP-1 weight and
/// `weights[1]` (k >= 2 only) the TOP-2 weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub layer: usize,
    /// Global token id: `image * tokens_per_image + position`.
    pub token: usize,
    /// Dataset-wide image index.
    pub image: usize,
    pub class: usize,
    /// 0 is the class token; patches follow in row-major grid order.
    pub position: usize,
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
    pub success: Vec<bool>,
}

impl TraceRecord {
    pub fn top1_weight(&self) -> f64 {
        self.weights[0]
    }

    /// Absent when the model routes with k = 1.
    pub fn top2_weight(&self) -> Option<f64> {
        self.weights.get(1).copied()
    }
}

/// Routing decisions for every (sparse layer, token) pair of a dataset pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub k: usize,
    pub num_experts: usize,
    pub tokens_per_image: usize,
    /// Block indices of the sparse layers, ascending.
    pub layers: Vec<usize>,
    pub records: Vec<TraceRecord>,
}

impl RoutingTrace {
    pub fn layer_records(&self, layer: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.layer == layer)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if self.layers.contains(&layer) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "layer {layer} is not one of the traced sparse layers {:?}",
                self.layers
            )))
        }
    }

    /// Long-format CSV: one row per (layer, token, rank).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,token,image,class,position,rank,expert,weight,success\n");
        for r in &self.records {
            for rank in 0..r.experts.len() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.layer,
                    r.token,
                    r.image,
                    r.class,
                    r.position,
                    rank,
                    r.experts[rank],
                    r.weights[rank],
                    r.success[rank]
                ));
            }
        }
        out
    }
}

/// Runs the model over the whole dataset in eval batches and records every
/// routing decision. `opts.mode` must be `Eval`.
pub fn collect_traces(
    params: &ModelParams,
    dataset: &Dataset,
    opts: &EvalOptions,
    batch_images: usize,
) -> RoutingTrace {
    assert!(matches!(opts.mode, RouterMode::Eval), "traces are collected in eval mode");
    assert!(batch_images >= 1);
    let cfg = params.config();
    let s = cfg.seq_len();
    let k = opts.k_override.unwrap_or(cfg.k);
    let mut routing_rng = RngStream::new(0, stream::ROUTING_NOISE);
    let mut records = Vec::new();
    let n = dataset.len();
    let mut start = 0usize;
    while start < n {
        let take = batch_images.min(n - start);
        let indices: Vec<usize> = (start..start + take).collect();
        let (images, labels) = dataset.batch(&indices);
        let rec = model_forward(params, &images, opts, &mut routing_rng, None);
        for layer in &rec.layers {
            for t in 0..take * s {
                let local_image = t / s;
                let image = start + local_image;
                let position = t % s;
                let experts = layer.selection.experts_of(t).to_vec();
                let weights = layer.selection.weights_of(t).to_vec();
                let success = (0..k)
                    .map(|rank| layer.table.slot(t, rank).succeeded())
                    .collect();
                records.push(TraceRecord {
                    layer: layer.block,
                    token: image * s + position,
                    image,
                    class: labels[local_image],
                    position,
                    experts,
                    weights,
                    success,
                });
            }
        }
        start += take;
    }
    // Batch loops emit layer-major records per batch; reorder to layer-major
    // over the whole dataset so consumers see each layer contiguously.
    records.sort_by_key(|r| (r.layer, r.token));
    RoutingTrace {
        k,
        num_experts: cfg.num_experts,
        tokens_per_image: s,
        layers: cfg.moe_blocks(),
        records,
    }
}

/// Mean routing-weight mass per (group, expert) at one layer; rows are
/// classes or patch positions, depending on the grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecializationMatrix {
    pub layer: usize,
    /// Group keys with at least one token, ascending. Keys without tokens
    /// are absent rather than zero-filled.
    pub row_keys: Vec<usize>,
    pub num_experts: usize,
    /// `cells[i][e]` is the mean mass group `row_keys[i]` sends to expert e.
    pub cells: Vec<Vec<f64>>,
}

impl SpecializationMatrix {
    pub fn cell(&self, key: usize, expert: usize) -> Option<f64> {
        let i = self.row_keys.iter().position(|&r| r == key)?;
        self.cells[i].get(expert).copied()
    }

    /// CSV with one row per group key: `key,expert0,...,expert{E-1}`.
    pub fn to_csv(&self, key_name: &str) -> String {
        let mut out = String::from(key_name);
        for e in 0..self.num_experts {
            out.push_str(&format!(",expert{e}"));
        }
        out.push('\n');
        for (key, row) in self.row_keys.iter().zip(&self.cells) {
            out.push_str(&key.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn grouped_matrix(
    trace: &RoutingTrace,
    layer: usize,
    key_of: impl Fn(&TraceRecord) -> usize,
) -> Result<SpecializationMatrix> {
    trace.check_layer(layer)?;
    let e = trace.num_experts;
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for r in trace.layer_records(layer) {
        let entry = sums.entry(key_of(r)).or_insert_with(|| (vec![0.0; e], 0));
        for (expert, weight) in r.experts.iter().zip(&r.weights) {
            entry.0[*expert] += *weight;
        }
        entry.1 += 1;
    }
    let row_keys: Vec<usize> = sums.keys().copied().collect();
    let cells = sums
        .into_values()
        .map(|(sum, count)| sum.into_iter().map(|v| v / count as f64).collect())
        .collect();
    Ok(SpecializationMatrix { layer, row_keys, num_experts: e, cells })
}

/// Mean routing mass each class sends to each expert at `layer`.
pub fn class_expert_matrix(trace: &RoutingTrace, layer: usize) -> Result<SpecializationMatrix> {
    grouped_matrix(trace, layer, |r| r.class)
}

/// Mean routing mass each token position sends to each expert at `layer`.
pub fn position_expert_matrix(trace: &RoutingTrace, layer: usize) -> Result<SpecializationMatrix> {
    grouped_matrix(trace, layer, |r| r.position)
}

/// Which routers a single ablation evaluation replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationScope {
    /// Exactly this sparse block.
    Single(usize),
    /// Every sparse block with index <= the bound (possibly none).
    Cumulative(usize),
}

/// Accuracy of one ablation evaluation plus the layers it replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    pub scope: AblationScope,
    pub layers: Vec<usize>,
    pub accuracy: f64,
}

fn scope_layers(params: &ModelParams, scope: AblationScope) -> Result<Vec<usize>> {
    let moe = params.config().moe_blocks();
    match scope {
        AblationScope::Single(layer) => {
            if moe.contains(&layer) {
                Ok(vec![layer])
            } else {
                Err(Error::Config(format!(
                    "block {layer} is not a sparse layer (sparse blocks: {moe:?})"
                )))
            }
        }
        AblationScope::Cumulative(bound) => {
            if bound >= params.config().blocks {
                Err(Error::Config(format!(
                    "cumulative bound {bound} exceeds the last block {}",
                    params.config().blocks - 1
                )))
            } else {
                Ok(moe.into_iter().filter(|&b| b <= bound).collect())
            }
        }
    }
}

/// Evaluates accuracy with the scoped routers replaced (fresh-draw Gaussian
/// logits or a random expert permutation, per `kind`). A scope covering zero
/// layers reproduces the baseline evaluation exactly.
pub fn random_router_ablation(
    params: &ModelParams,
    dataset: &Dataset,
    kind: RandomRouterKind,
    scope: AblationScope,
    base_opts: &EvalOptions,
    batch_images: usize,
    seed: u64,
) -> Result<AblationPoint> {
    let layers = scope_layers(params, scope)?;
    let accuracy = if layers.is_empty() {
        evaluate(params, dataset, base_opts, batch_images, None)
    } else {
        let opts = EvalOptions {
            randomize: Some(RandomizeRouters {
                kind,
                layers: layers.iter().copied().collect(),
            }),
            ..base_opts.clone()
        };
        let mut ablation_rng = RngStream::new(seed, stream::ABLATION);
        evaluate(params, dataset, &opts, batch_images, Some(&mut ablation_rng))
    };
    Ok(AblationPoint { scope, layers, accuracy })
}

/// [`random_router_ablation`] over a series of scopes; each point draws from
/// a fresh ablation stream keyed by `seed` so points are order-independent.
pub fn ablation_series(
    params: &ModelParams,
    dataset: &Dataset,
    kind: RandomRouterKind,
    scopes: &[AblationScope],
    base_opts: &EvalOptions,
    batch_images: usize,
    seed: u64,
) -> Result<Vec<AblationPoint>> {
    scopes
        .iter()
        .map(|&s| random_router_ablation(params, dataset, kind, s, base_opts, batch_images, seed))
        .collect()
}

/// Accuracy when evaluating with each `k'` in the grid while every parameter
/// stays fixed. `k' = k` reproduces the standard evaluation bit-for-bit.
pub fn vary_k_eval(
    params: &ModelParams,
    dataset: &Dataset,
    k_grid: &[usize],
    base_opts: &EvalOptions,
    batch_images: usize,
) -> Result<Vec<(usize, f64)>> {
    let e = params.config().num_experts;
    let mut out = Vec::with_capacity(k_grid.len());
    for &k_prime in k_grid {
        if k_prime == 0 || k_prime > e {
            return Err(Error::Config(format!(
                "k'={k_prime} out of range for {e} experts"
            )));
        }
        let opts = EvalOptions { k_override: Some(k_prime), ..base_opts.clone() };
        out.push((k_prime, evaluate(params, dataset, &opts, batch_images, None)));
    }
    Ok(out)
}

/// Distribution over images of how many distinct experts processed at least
/// one of the image's tokens (successful assignments only) at one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertsPerImageHistogram {
    pub layer: usize,
    /// distinct-expert count -> number of images.
    pub counts: BTreeMap<usize, usize>,
    pub images: usize,
}

impl ExpertsPerImageHistogram {
    pub fn to_json(&self) -> String {
        let obj = serde_json::json!({
            "layer": self.layer,
            "images": self.images,
            "counts": self.counts.iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
        });
        serde_json::to_string_pretty(&obj).expect("histogram serializes")
    }
}

/// Builds the experts-per-image histogram for `layer` from a trace.
pub fn experts_per_image(
    trace: &RoutingTrace,
    layer: usize,
) -> Result<ExpertsPerImageHistogram> {
    trace.check_layer(layer)?;
    let mut per_image: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for r in trace.layer_records(layer) {
        let set = per_image.entry(r.image).or_default();
        for (rank, &expert) in r.experts.iter().enumerate() {
            if r.success[rank] {
                set.insert(expert);
            }
        }
    }
    let images = per_image.len();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for set in per_image.values() {
        *counts.entry(set.len()).or_insert(0) += 1;
    }
    Ok(ExpertsPerImageHistogram { layer, counts, images })
}
