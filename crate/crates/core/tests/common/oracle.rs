//! Reference allocator, written independently of the production code paths.
//!
//! The three allocation rules are restated here in deliberately plain,
//! quadratic-time form (repeated argmax instead of sorts, explicit admission
//! rounds) so the acceptance suite can cross-check the optimized
//! implementation bit for bit against a second, independently derived answer.

use vmoe::allocator::PriorityMode;
use vmoe::router::TopKSelection;

/// One (token, rank) routing attempt in the reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct RefSlot {
    pub expert: usize,
    pub weight: f64,
    /// Buffer seat granted to the attempt, if it was admitted.
    pub position: Option<usize>,
}

/// Reference allocation result, token-major (`slots[t * k + rank]`).
#[derive(Clone, Debug, PartialEq)]
pub struct RefTable {
    pub k: usize,
    pub num_tokens: usize,
    pub num_experts: usize,
    pub slots_per_expert: usize,
    pub slots: Vec<RefSlot>,
    pub occupancy: Vec<usize>,
}

/// Round half away from zero, spelled out longhand so the production
/// rounding has an independent witness (all inputs here are non-negative).
pub fn round_half_away(x: f64) -> f64 {
    assert!(x >= 0.0);
    let f = x.floor();
    if x - f >= 0.5 {
        f + 1.0
    } else {
        f
    }
}

/// Reference buffer capacity: round(k * N * P * C / E), half away from zero.
pub fn ref_buffer_capacity(
    images: usize,
    tokens_per_image: usize,
    k: usize,
    num_experts: usize,
    capacity_ratio: f64,
) -> usize {
    let raw = (k * images * tokens_per_image) as f64 * capacity_ratio / num_experts as f64;
    round_half_away(raw) as usize
}

/// Core admission procedure shared by all three rules. Round `r` walks the
/// visit order and settles every visited token's rank-`r` choice before any
/// rank-`r+1` choice is considered; a token absent from `visit` fails all of
/// its attempts. Buffer seats then number each expert's admitted attempts in
/// (rank, token) lexicographic order.
fn admit(sel: &TopKSelection, slots_per_expert: usize, visit: &[usize]) -> RefTable {
    let num_tokens = sel.num_tokens();
    let num_experts = sel.num_experts();
    let k = sel.k();

    let mut admitted = vec![false; num_tokens * k];
    let mut used = vec![0usize; num_experts];
    for rank in 0..k {
        for &t in visit {
            let e = sel.expert(t, rank);
            if used[e] < slots_per_expert {
                used[e] += 1;
                admitted[t * k + rank] = true;
            }
        }
    }

    let mut slots: Vec<RefSlot> = (0..num_tokens)
        .flat_map(|t| {
            (0..k).map(move |r| RefSlot {
                expert: sel.expert(t, r),
                weight: sel.weight(t, r),
                position: None,
            })
        })
        .collect();
    let mut next_seat = vec![0usize; num_experts];
    for rank in 0..k {
        for t in 0..num_tokens {
            if admitted[t * k + rank] {
                let e = sel.expert(t, rank);
                slots[t * k + rank].position = Some(next_seat[e]);
                next_seat[e] += 1;
            }
        }
    }

    RefTable { k, num_tokens, num_experts, slots_per_expert, slots, occupancy: used }
}

/// Priority score per token: its largest gate weight, or the sum of all k.
pub fn ref_scores(sel: &TopKSelection, mode: PriorityMode) -> Vec<f64> {
    (0..sel.num_tokens())
        .map(|t| {
            let ws = sel.weights_of(t);
            match mode {
                PriorityMode::Max => {
                    let mut best = ws[0];
                    for &w in &ws[1..] {
                        if w > best {
                            best = w;
                        }
                    }
                    best
                }
                PriorityMode::SumTopK => ws.iter().sum(),
            }
        })
        .collect()
}

/// Visit order by repeated argmax: highest score first, ties broken toward
/// the lowest original token index (a strict `>` never displaces an earlier
/// equal score).
pub fn ref_priority_order(scores: &[f64]) -> Vec<usize> {
    let n = scores.len();
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = usize::MAX;
        for t in 0..n {
            if taken[t] {
                continue;
            }
            if best == usize::MAX || scores[t] > scores[best] {
                best = t;
            }
        }
        taken[best] = true;
        order.push(best);
    }
    order
}

/// Vanilla: visit tokens in their original order, rank round by rank round.
pub fn ref_vanilla(sel: &TopKSelection, slots_per_expert: usize) -> RefTable {
    let visit: Vec<usize> = (0..sel.num_tokens()).collect();
    admit(sel, slots_per_expert, &visit)
}

/// Batch-prioritized: visit tokens in descending priority-score order; the
/// same order is reused for every rank round.
pub fn ref_bpr(sel: &TopKSelection, slots_per_expert: usize, mode: PriorityMode) -> RefTable {
    let order = ref_priority_order(&ref_scores(sel, mode));
    admit(sel, slots_per_expert, &order)
}

/// Skip-patch: keep only the top round(keep_fraction * T) tokens by priority
/// score; discarded tokens fail all of their attempts outright.
pub fn ref_skip_patch(
    sel: &TopKSelection,
    slots_per_expert: usize,
    keep_fraction: f64,
    mode: PriorityMode,
) -> RefTable {
    assert!(keep_fraction > 0.0 && keep_fraction < 1.0);
    let order = ref_priority_order(&ref_scores(sel, mode));
    let kept = round_half_away(keep_fraction * sel.num_tokens() as f64) as usize;
    admit(sel, slots_per_expert, &order[..kept.min(order.len())])
}
