//! The sparse expert layer: dispatch tokens into fixed-size per-expert
//! buffers, run every expert's two-layer GeLU MLP over its whole buffer
//! (padding included), and gather the weighted outputs back into token
//! order. Tokens that lose all their slots contribute a zero row here and
//! are preserved by the residual connection around the layer.

use crate::allocator::{self, AllocationPolicy, AssignmentTable};
use crate::numkit::graph::{CombineTerm, CostCenter, Graph, NodeId};
use crate::numkit::rng::RngStream;
use crate::numkit::tensor::Tensor;
use crate::router::{
    self, GateMatrix, RouterMode, RouterParams, TopKSelection,
};

/// Weights of all E experts; every expert is a two-layer GeLU MLP with the
/// same shapes but its own parameters.
#[derive(Clone, Debug)]
pub struct ExpertParams {
    w1: Vec<Tensor>,
    b1: Vec<Tensor>,
    w2: Vec<Tensor>,
    b2: Vec<Tensor>,
}

impl ExpertParams {
    /// Per expert: `w1 [D_mlp, D]`, `b1 [1, D_mlp]`, `w2 [D, D_mlp]`,
    /// `b2 [1, D]`. All experts must share shapes.
    pub fn new(w1: Vec<Tensor>, b1: Vec<Tensor>, w2: Vec<Tensor>, b2: Vec<Tensor>) -> Self {
        let e = w1.len();
        assert!(e >= 1, "need at least one expert");
        assert!(b1.len() == e && w2.len() == e && b2.len() == e);
        let (d_mlp, d) = (w1[0].rows(), w1[0].cols());
        for i in 0..e {
            assert_eq!(w1[i].shape(), &[d_mlp, d], "expert {i} w1 shape");
            assert_eq!(b1[i].shape(), &[1, d_mlp], "expert {i} b1 shape");
            assert_eq!(w2[i].shape(), &[d, d_mlp], "expert {i} w2 shape");
            assert_eq!(b2[i].shape(), &[1, d], "expert {i} b2 shape");
        }
        ExpertParams { w1, b1, w2, b2 }
    }

    pub fn num_experts(&self) -> usize {
        self.w1.len()
    }

    pub fn token_dim(&self) -> usize {
        self.w1[0].cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1[0].rows()
    }

    pub fn w1(&self, e: usize) -> &Tensor {
        &self.w1[e]
    }

    pub fn b1(&self, e: usize) -> &Tensor {
        &self.b1[e]
    }

    pub fn w2(&self, e: usize) -> &Tensor {
        &self.w2[e]
    }

    pub fn b2(&self, e: usize) -> &Tensor {
        &self.b2[e]
    }
}

/// Fixed-size token buffers, one block of `slots_per_expert` rows per expert.
/// Unfilled slots stay exactly zero.
#[derive(Clone, Debug)]
pub struct ExpertBuffers {
    slots: Tensor,
    num_experts: usize,
    slots_per_expert: usize,
    occupancy: Vec<usize>,
}

impl ExpertBuffers {
    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn slots_per_expert(&self) -> usize {
        self.slots_per_expert
    }

    pub fn occupancy(&self, expert: usize) -> usize {
        self.occupancy[expert]
    }

    /// All buffers stacked expert-major: row `e * slots_per_expert + pos`.
    pub fn as_tensor(&self) -> &Tensor {
        &self.slots
    }

    pub fn slot(&self, expert: usize, position: usize) -> &[f64] {
        assert!(position < self.slots_per_expert);
        self.slots.row(expert * self.slots_per_expert + position)
    }
}

/// All parameters of one sparse layer.
#[derive(Clone, Debug)]
pub struct MoeLayerParams {
    pub router: RouterParams,
    pub experts: ExpertParams,
    pub k: usize,
    pub capacity_ratio: f64,
}

impl MoeLayerParams {
    pub fn new(router: RouterParams, experts: ExpertParams, k: usize, capacity_ratio: f64) -> Self {
        assert_eq!(router.num_experts(), experts.num_experts());
        assert_eq!(router.token_dim(), experts.token_dim());
        assert!(k >= 1 && k <= experts.num_experts(), "k must lie in [1, E]");
        assert!(capacity_ratio > 0.0);
        MoeLayerParams { router, experts, k, capacity_ratio }
    }
}

/// Order of the softmax and the top-k cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingOrdering {
    /// Softmax first, then keep k (weights < 1, gradient-carrying).
    TopKOfSoftmax,
    /// Legacy ablation: cut first, softmax over the survivors.
    SoftmaxOfTopK,
}

/// Token grouping for allocation: capacity is provisioned per group of
/// `images * tokens_per_image` consecutive rows, mirroring per-device
/// dispatch. A batch may hold several groups; each allocates independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupShape {
    pub images: usize,
    pub tokens_per_image: usize,
}

impl GroupShape {
    pub fn tokens(&self) -> usize {
        self.images * self.tokens_per_image
    }
}

/// Everything the forward pass needs besides inputs and parameters.
#[derive(Clone, Copy, Debug)]
pub struct MoeForwardSpec {
    pub k: usize,
    pub capacity_ratio: f64,
    pub policy: AllocationPolicy,
    pub ordering: GatingOrdering,
    pub group: GroupShape,
    pub mode: RouterMode,
}

/// Graph-node handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct MoeLayerNodes {
    pub router_w: NodeId,
    pub w1: Vec<NodeId>,
    pub b1: Vec<NodeId>,
    pub w2: Vec<NodeId>,
    pub b2: Vec<NodeId>,
}

impl MoeLayerNodes {
    pub fn insert(g: &mut Graph, params: &MoeLayerParams) -> Self {
        let e = params.experts.num_experts();
        MoeLayerNodes {
            router_w: g.leaf(params.router.weights().clone()),
            w1: (0..e).map(|i| g.leaf(params.experts.w1(i).clone())).collect(),
            b1: (0..e).map(|i| g.leaf(params.experts.b1(i).clone())).collect(),
            w2: (0..e).map(|i| g.leaf(params.experts.w2(i).clone())).collect(),
            b2: (0..e).map(|i| g.leaf(params.experts.b2(i).clone())).collect(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w1.len()
    }
}

/// Node ids of the gating intermediates (for the auxiliary losses).
#[derive(Clone, Copy, Debug)]
pub struct GateNodes {
    pub clean_logits: NodeId,
    pub noisy_logits: NodeId,
    pub probs: NodeId,
}

/// Forward result: the output node plus every intermediate the losses and
/// the analysis tooling need.
#[derive(Clone, Debug)]
pub struct MoeGraphOutput {
    pub output: NodeId,
    pub gate_nodes: GateNodes,
    pub gate: GateMatrix,
    pub selection: TopKSelection,
    pub table: AssignmentTable,
}

/// Replaces the router's decision signal for ablation studies. `Identity`
/// is the normal path.
#[derive(Clone, Debug)]
pub enum RouterTransform {
    Identity,
    /// Use these values (shape `[tokens, experts]`) as the clean logits
    /// instead of X W^T.
    ReplaceLogits(Tensor),
    /// Shuffle the expert columns of the computed logits: column `j` of the
    /// result is column `perm[j]` of the original.
    PermuteExperts(Vec<usize>),
}

/// Differentiable gating: probs = softmax(X W^T + eps) with eps sampled here
/// (train) or zero (eval). Returns node handles and the value-level record.
pub fn gates_graph(
    g: &mut Graph,
    x: NodeId,
    router_w: NodeId,
    mode: RouterMode,
    rng: &mut RngStream,
) -> (GateNodes, GateMatrix) {
    gates_graph_transformed(g, x, router_w, mode, rng, RouterTransform::Identity)
}

/// [`gates_graph`] with an optional logit transform applied before noise.
pub fn gates_graph_transformed(
    g: &mut Graph,
    x: NodeId,
    router_w: NodeId,
    mode: RouterMode,
    rng: &mut RngStream,
    transform: RouterTransform,
) -> (GateNodes, GateMatrix) {
    g.set_cost_center(CostCenter::Router);
    let num_experts = g.value(router_w).rows();
    let tokens = g.value(x).rows();
    let clean = match transform {
        RouterTransform::Identity => {
            let wt = g.transpose(router_w);
            g.matmul(x, wt)
        }
        RouterTransform::ReplaceLogits(t) => {
            assert_eq!(
                t.shape(),
                &[tokens, num_experts],
                "replacement logits must be [tokens, experts]"
            );
            g.leaf(t)
        }
        RouterTransform::PermuteExperts(perm) => {
            let mut seen = vec![false; num_experts];
            assert_eq!(perm.len(), num_experts, "permutation length mismatch");
            for &p in &perm {
                assert!(p < num_experts && !seen[p], "not a permutation: {perm:?}");
                seen[p] = true;
            }
            let wt = g.transpose(router_w);
            let raw = g.matmul(x, wt);
            let src: Vec<(usize, usize)> = (0..tokens)
                .flat_map(|t| perm.iter().map(move |&p| (t, p)))
                .collect();
            g.gather_entries(raw, tokens, num_experts, src)
        }
    };
    let (noisy, applied) = match mode {
        RouterMode::Train => {
            let eps = router::routing_noise(rng, g.value(x).rows(), num_experts);
            let eps_node = g.leaf(eps);
            (g.add(clean, eps_node), true)
        }
        RouterMode::Eval => (clean, false),
    };
    let probs = g.softmax_rows(noisy);
    let gate = GateMatrix::from_parts(
        g.value(probs).clone(),
        g.value(clean).clone(),
        g.value(noisy).clone(),
        applied,
    );
    (GateNodes { clean_logits: clean, noisy_logits: noisy, probs }, gate)
}

/// Full sparse-layer forward on the tape: gate, select, allocate per group,
/// dispatch, run experts, combine.
pub fn moe_forward_graph(
    g: &mut Graph,
    x: NodeId,
    nodes: &MoeLayerNodes,
    spec: &MoeForwardSpec,
    rng: &mut RngStream,
) -> MoeGraphOutput {
    moe_forward_graph_transformed(g, x, nodes, spec, rng, RouterTransform::Identity)
}

/// [`moe_forward_graph`] with a router transform for ablation studies.
pub fn moe_forward_graph_transformed(
    g: &mut Graph,
    x: NodeId,
    nodes: &MoeLayerNodes,
    spec: &MoeForwardSpec,
    rng: &mut RngStream,
    transform: RouterTransform,
) -> MoeGraphOutput {
    let t = g.value(x).rows();
    let e = nodes.num_experts();
    assert!(spec.k >= 1 && spec.k <= e, "k={} out of range for {e} experts", spec.k);
    let group_tokens = spec.group.tokens();
    assert!(
        group_tokens > 0 && t % group_tokens == 0,
        "batch of {t} tokens does not divide into groups of {group_tokens}"
    );
    let num_groups = t / group_tokens;

    let (gate_nodes, gate) =
        gates_graph_transformed(g, x, nodes.router_w, spec.mode, rng, transform);

    let selection = match spec.ordering {
        GatingOrdering::TopKOfSoftmax => router::top_k_select(&gate, spec.k),
        GatingOrdering::SoftmaxOfTopK => router::legacy_softmax_of_topk(&gate, spec.k),
    };

    let slots_per_expert = allocator::buffer_capacity(
        spec.group.images,
        spec.group.tokens_per_image,
        spec.k,
        e,
        spec.capacity_ratio,
    );
    let group_tables: Vec<AssignmentTable> = (0..num_groups)
        .map(|grp| {
            let local = selection.slice_tokens(grp * group_tokens, group_tokens);
            allocator::allocate(&local, slots_per_expert, spec.policy)
        })
        .collect();
    let table = AssignmentTable::concat_groups(&group_tables);

    // Dispatch: expert-major buffer, rows = e * (groups * B_e) + position.
    let rows_per_expert = num_groups * slots_per_expert;
    let mut moves = Vec::new();
    for (token, _, a) in table.iter() {
        if let Some(pos) = a.position {
            moves.push((token, a.expert * rows_per_expert + pos));
        }
    }
    let buffers = g.scatter_rows(x, e * rows_per_expert, moves);

    // Every expert processes its whole buffer, zero-padded slots included.
    g.set_cost_center(CostCenter::ExpertMlp);
    let mut expert_outs = Vec::with_capacity(e);
    for i in 0..e {
        let block = g.slice_rows(buffers, i * rows_per_expert, rows_per_expert);
        let w1t = g.transpose(nodes.w1[i]);
        let pre = g.matmul(block, w1t);
        let pre = g.add_row_vec(pre, nodes.b1[i]);
        let hidden = g.gelu(pre);
        let w2t = g.transpose(nodes.w2[i]);
        let out = g.matmul(hidden, w2t);
        let out = g.add_row_vec(out, nodes.b2[i]);
        expert_outs.push(out);
    }
    let buffers_out = g.concat_rows(&expert_outs);

    // Combine weights: the paper ordering reads straight from the softmax
    // matrix; the legacy ordering re-softmaxes the k surviving logits.
    let (weights_node, w_col_of) = match spec.ordering {
        GatingOrdering::TopKOfSoftmax => {
            let col_of = |_rank: usize, expert: usize| expert;
            (gate_nodes.probs, col_of as fn(usize, usize) -> usize)
        }
        GatingOrdering::SoftmaxOfTopK => {
            let mut src = Vec::with_capacity(t * spec.k);
            for token in 0..t {
                for rank in 0..spec.k {
                    src.push((token, selection.expert(token, rank)));
                }
            }
            let gathered = g.gather_entries(gate_nodes.noisy_logits, t, spec.k, src);
            let soft = g.softmax_rows(gathered);
            let col_of = |rank: usize, _expert: usize| rank;
            (soft, col_of as fn(usize, usize) -> usize)
        }
    };
    let mut terms = Vec::new();
    for (token, rank, a) in table.iter() {
        if let Some(pos) = a.position {
            terms.push(CombineTerm {
                token,
                buf_row: a.expert * rows_per_expert + pos,
                w_col: w_col_of(rank, a.expert),
            });
        }
    }
    let output = g.combine_rows(buffers_out, weights_node, t, terms);

    MoeGraphOutput { output, gate_nodes, gate, selection, table }
}

/// Copy each admitted token row into its buffer slot (one group).
pub fn dispatch(x: &Tensor, table: &AssignmentTable) -> ExpertBuffers {
    assert_eq!(x.rows(), table.num_tokens(), "table does not match batch");
    let e = table.num_experts();
    let b = table.slots_per_expert();
    let d = x.cols();
    let mut slots = Tensor::zeros(vec![e * b, d]);
    let mut filled = vec![false; e * b];
    for (token, _, a) in table.iter() {
        if let Some(pos) = a.position {
            let row = a.expert * b + pos;
            assert!(!filled[row], "buffer position collision at expert {} slot {}", a.expert, pos);
            filled[row] = true;
            for c in 0..d {
                slots.set(row, c, x.at(token, c));
            }
        }
    }
    ExpertBuffers {
        slots,
        num_experts: e,
        slots_per_expert: b,
        occupancy: table.occupancies().to_vec(),
    }
}

/// Run every expert's MLP over its whole buffer block.
pub fn experts_forward(buf: &ExpertBuffers, params: &ExpertParams) -> ExpertBuffers {
    assert_eq!(buf.num_experts(), params.num_experts());
    assert_eq!(buf.as_tensor().cols(), params.token_dim());
    let mut g = Graph::new();
    let slots = g.leaf(buf.as_tensor().clone());
    let b = buf.slots_per_expert();
    let mut outs = Vec::new();
    for i in 0..params.num_experts() {
        let block = g.slice_rows(slots, i * b, b);
        let w1 = g.leaf(params.w1(i).clone());
        let b1 = g.leaf(params.b1(i).clone());
        let w2 = g.leaf(params.w2(i).clone());
        let b2 = g.leaf(params.b2(i).clone());
        let w1t = g.transpose(w1);
        let pre = g.matmul(block, w1t);
        let pre = g.add_row_vec(pre, b1);
        let hidden = g.gelu(pre);
        let w2t = g.transpose(w2);
        let out = g.matmul(hidden, w2t);
        let out = g.add_row_vec(out, b2);
        outs.push(out);
    }
    let all = g.concat_rows(&outs);
    ExpertBuffers {
        slots: g.value(all).clone(),
        num_experts: buf.num_experts(),
        slots_per_expert: b,
        occupancy: buf.occupancy.clone(),
    }
}

/// Weighted gather of expert outputs back into token order; tokens whose
/// slots all failed come back as zero rows.
pub fn combine(buf_out: &ExpertBuffers, table: &AssignmentTable) -> Tensor {
    assert_eq!(buf_out.num_experts(), table.num_experts());
    assert_eq!(buf_out.slots_per_expert(), table.slots_per_expert());
    let d = buf_out.as_tensor().cols();
    let b = buf_out.slots_per_expert();
    let mut out = Tensor::zeros(vec![table.num_tokens(), d]);
    for (token, _, a) in table.iter() {
        if let Some(pos) = a.position {
            let row = buf_out.as_tensor().row(a.expert * b + pos);
            for c in 0..d {
                let cur = out.at(token, c);
                out.set(token, c, cur + a.weight * row[c]);
            }
        }
    }
    out
}

/// Value-level forward pass with optional inference-time overrides of the
/// trained k and C. Returns the layer output plus the gate matrix and the
/// assignment table for downstream losses and analysis.
#[allow(clippy::too_many_arguments)]
pub fn moe_forward(
    x: &Tensor,
    params: &MoeLayerParams,
    policy: AllocationPolicy,
    ordering: GatingOrdering,
    group: GroupShape,
    mode: RouterMode,
    rng: &mut RngStream,
    k_override: Option<usize>,
    c_override: Option<f64>,
) -> (Tensor, GateMatrix, AssignmentTable) {
    let spec = MoeForwardSpec {
        k: k_override.unwrap_or(params.k),
        capacity_ratio: c_override.unwrap_or(params.capacity_ratio),
        policy,
        ordering,
        group,
        mode,
    };
    let mut g = Graph::new();
    let x_node = g.leaf(x.clone());
    let nodes = MoeLayerNodes::insert(&mut g, params);
    let out = moe_forward_graph(&mut g, x_node, &nodes, &spec, rng);
    (g.value(out.output).clone(), out.gate, out.table)
}
