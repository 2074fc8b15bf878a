//! Noisy gating and top-k expert selection.
//!
//! The router scores each token against every expert, perturbs the scores
//! with Gaussian noise during training, and keeps the k largest gate values.
//! Softmax runs *before* the top-k cut, so the surviving weights stay
//! strictly below 1 and keep a useful gradient; the legacy ordering
//! (softmax after the cut) is retained as an ablation.

use crate::numkit::rng::RngStream;
use crate::numkit::tensor::{self, Tensor};
use crate::numkit::sample_gaussian;

/// Router weight matrix, one row of scores per expert: logits = X W^T.
#[derive(Clone, Debug)]
pub struct RouterParams {
    w: Tensor,
}

impl RouterParams {
    /// `w` has shape `[E, D]`. Panics on empty dimensions or non-finite entries.
    pub fn new(w: Tensor) -> Self {
        assert!(w.rows() >= 1 && w.cols() >= 1, "router needs E >= 1, D >= 1");
        assert!(w.all_finite(), "router weights must be finite");
        RouterParams { w }
    }

    pub fn num_experts(&self) -> usize {
        self.w.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }
}

/// Whether routing noise is injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterMode {
    Train,
    Eval,
}

/// Gate values for a batch of tokens, with the raw scores kept around for
/// the load loss (which needs both the clean and the perturbed logits).
#[derive(Clone, Debug)]
pub struct GateMatrix {
    probs: Tensor,
    clean_logits: Tensor,
    noisy_logits: Tensor,
    noise_applied: bool,
}

impl GateMatrix {
    pub fn from_parts(
        probs: Tensor,
        clean_logits: Tensor,
        noisy_logits: Tensor,
        noise_applied: bool,
    ) -> Self {
        assert_eq!(probs.shape(), clean_logits.shape());
        assert_eq!(probs.shape(), noisy_logits.shape());
        let e = probs.cols();
        for t in 0..probs.rows() {
            let s: f64 = probs.row(t).iter().sum();
            debug_assert!((s - 1.0).abs() <= 1e-12, "gate row {t} sums to {s}");
            let _ = e;
        }
        if !noise_applied {
            debug_assert!(noisy_logits.bit_eq(&clean_logits));
        }
        GateMatrix { probs, clean_logits, noisy_logits, noise_applied }
    }

    pub fn num_tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn clean_logits(&self) -> &Tensor {
        &self.clean_logits
    }

    pub fn noisy_logits(&self) -> &Tensor {
        &self.noisy_logits
    }

    pub fn noise_applied(&self) -> bool {
        self.noise_applied
    }
}

/// Per-token top-k expert choices, slot-ordered by descending gate value.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKSelection {
    k: usize,
    num_tokens: usize,
    num_experts: usize,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl TopKSelection {
    /// Build from per-token rows; mainly for tests and hand-made instances.
    pub fn from_rows(
        k: usize,
        num_experts: usize,
        indices: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
    ) -> Self {
        assert_eq!(indices.len(), weights.len());
        let num_tokens = indices.len();
        let mut flat_i = Vec::with_capacity(num_tokens * k);
        let mut flat_w = Vec::with_capacity(num_tokens * k);
        for (ri, rw) in indices.iter().zip(&weights) {
            assert_eq!(ri.len(), k);
            assert_eq!(rw.len(), k);
            assert!(ri.iter().all(|&e| e < num_experts), "expert id out of range");
            flat_i.extend_from_slice(ri);
            flat_w.extend_from_slice(rw);
        }
        TopKSelection { k, num_tokens, num_experts, indices: flat_i, weights: flat_w }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    /// Expert chosen by token `t` at slot rank `i` (0-based).
    pub fn expert(&self, t: usize, i: usize) -> usize {
        self.indices[t * self.k + i]
    }

    /// Gate weight of token `t` at slot rank `i`.
    pub fn weight(&self, t: usize, i: usize) -> f64 {
        self.weights[t * self.k + i]
    }

    pub fn experts_of(&self, t: usize) -> &[usize] {
        &self.indices[t * self.k..(t + 1) * self.k]
    }

    /// Selection restricted to the token range `[start, start + len)`.
    pub fn slice_tokens(&self, start: usize, len: usize) -> TopKSelection {
        assert!(start + len <= self.num_tokens, "token slice out of range");
        TopKSelection {
            k: self.k,
            num_tokens: len,
            num_experts: self.num_experts,
            indices: self.indices[start * self.k..(start + len) * self.k].to_vec(),
            weights: self.weights[start * self.k..(start + len) * self.k].to_vec(),
        }
    }

    pub fn weights_of(&self, t: usize) -> &[f64] {
        &self.weights[t * self.k..(t + 1) * self.k]
    }
}

/// Routing-noise standard deviation for `e` experts.
pub fn noise_std(num_experts: usize) -> f64 {
    1.0 / num_experts as f64
}

/// Sample the entry-wise routing perturbation for a `[T, E]` logit matrix.
pub fn routing_noise(rng: &mut RngStream, num_tokens: usize, num_experts: usize) -> Tensor {
    sample_gaussian(rng, vec![num_tokens, num_experts], 0.0, noise_std(num_experts))
}

/// Gate a batch of tokens: probs = softmax(X W^T + eps) row-wise, with
/// eps ~ N(0, (1/E)^2) per entry in train mode and eps = 0 in eval mode.
pub fn gates(
    x: &Tensor,
    params: &RouterParams,
    mode: RouterMode,
    rng: &mut RngStream,
) -> GateMatrix {
    assert_eq!(
        x.cols(),
        params.token_dim(),
        "token dim {} does not match router dim {}",
        x.cols(),
        params.token_dim()
    );
    let wt = tensor::transpose(params.weights());
    let clean = tensor::matmul(x, &wt);
    let (noisy, applied) = match mode {
        RouterMode::Train => {
            let eps = routing_noise(rng, x.rows(), params.num_experts());
            (clean.zip(&eps, |l, e| l + e), true)
        }
        RouterMode::Eval => (clean.clone(), false),
    };
    let probs = tensor::softmax_rows(&noisy);
    GateMatrix::from_parts(probs, clean, noisy, applied)
}

/// Column order of a row under (value descending, index ascending).
fn descending_order(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap().then(i.cmp(&j)));
    order
}

/// Keep the k largest gate values per token, unrenormalized.
pub fn top_k_select(g: &GateMatrix, k: usize) -> TopKSelection {
    let e = g.num_experts();
    assert!(k >= 1 && k <= e, "k={k} out of range for {e} experts");
    let t = g.num_tokens();
    let mut indices = Vec::with_capacity(t * k);
    let mut weights = Vec::with_capacity(t * k);
    for row_idx in 0..t {
        let row = g.probs().row(row_idx);
        let order = descending_order(row);
        for &col in order.iter().take(k) {
            indices.push(col);
            weights.push(row[col]);
        }
    }
    TopKSelection { k, num_tokens: t, num_experts: e, indices, weights }
}

/// Legacy ablation ordering: pick the k largest logits, then softmax over
/// just those k values, so the weights of each token sum to one.
pub fn legacy_softmax_of_topk(g: &GateMatrix, k: usize) -> TopKSelection {
    let e = g.num_experts();
    assert!(k >= 1 && k <= e, "k={k} out of range for {e} experts");
    let t = g.num_tokens();
    let mut indices = Vec::with_capacity(t * k);
    let mut weights = Vec::with_capacity(t * k);
    for row_idx in 0..t {
        let row = g.noisy_logits().row(row_idx);
        let order = descending_order(row);
        let chosen: Vec<usize> = order[..k].to_vec();
        let top: Vec<f64> = chosen.iter().map(|&c| row[c]).collect();
        let max = top.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = top.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (c, ev) in chosen.into_iter().zip(exps) {
            indices.push(c);
            weights.push(ev / z);
        }
    }
    TopKSelection { k, num_tokens: t, num_experts: e, indices, weights }
}
