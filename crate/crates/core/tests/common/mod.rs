//! Shared fixtures for the acceptance suite: the frozen toy-experiment
//! recipe, a bank of trained models reused across criteria, and the random
//! allocation instances shared by the oracle and safety checks.

pub mod oracle;

use std::sync::OnceLock;
use std::time::Instant;

use vmoe::allocator::{buffer_capacity, PriorityMode};
use vmoe::model::data::synthetic;
use vmoe::model::train::TrainOutput;
use vmoe::model::{
    evaluate, train, Dataset, EvalOptions, ModelConfig, ModelParams, Placement, SyntheticSpec,
    TrainConfig,
};
use vmoe::moe::GatingOrdering;
use vmoe::numkit::stream;
use vmoe::numkit::tensor::softmax_rows;
use vmoe::numkit::{sample_gaussian, RngStream};
use vmoe::router::{legacy_softmax_of_topk, top_k_select, GateMatrix, TopKSelection};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const EVAL_BATCH: usize = 64;

/// Two difficulty settings of the synthetic arrangement task. The noisier
/// one leaves headroom below 100% accuracy so accuracy-sensitive checks can
/// resolve differences; the cleaner one trains faster and is used where only
/// broad behavior matters.
pub const EASY_NOISE: f64 = 1.0;
pub const HARD_NOISE: f64 = 1.75;
pub const EASY_STEPS: usize = 400;
pub const HARD_STEPS: usize = 600;

const TRAIN_PER_CLASS: usize = 64;
const EVAL_PER_CLASS: usize = 32;

/// The toy architecture every trained-model criterion uses: 8x8 single-channel
/// images in 4x4 patches, a 4-block transformer of width 32 with 4 experts in
/// every other block.
pub fn base_arch(k: usize) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 32,
        blocks: 4,
        heads: 4,
        mlp_dim: 64,
        num_experts: 4,
        k,
        capacity_ratio: 1.05,
        placement: Placement::Every2,
        num_classes: 8,
    }
}

/// A smaller variant for gradient checks and determinism round-trips, where
/// model quality is irrelevant and speed matters.
pub fn tiny_arch(k: usize, capacity_ratio: f64) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 16,
        blocks: 2,
        heads: 2,
        mlp_dim: 32,
        num_experts: 4,
        k,
        capacity_ratio,
        placement: Placement::Every2,
        num_classes: 8,
    }
}

pub fn train_set(seed: u64, noise_std: f64) -> Dataset {
    synthetic(&SyntheticSpec { per_class: TRAIN_PER_CLASS, noise_std, seed })
}

/// Held-out set: same distribution, disjoint draw (offset seed).
pub fn eval_set(seed: u64, noise_std: f64) -> Dataset {
    synthetic(&SyntheticSpec { per_class: EVAL_PER_CLASS, noise_std, seed: seed + 1 })
}

pub fn train_recipe(
    steps: usize,
    lambda: f64,
    ordering: GatingOrdering,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 64,
        base_lr: 1e-3,
        weight_decay: 1e-4,
        lambda,
        policy: vmoe::allocator::AllocationPolicy::Vanilla,
        ordering,
        seed,
        divergence_threshold: 1e4,
    }
}

fn train_toy(
    k: usize,
    lambda: f64,
    ordering: GatingOrdering,
    noise_std: f64,
    steps: usize,
    seed: u64,
    tag: &str,
) -> TrainOutput {
    let started = Instant::now();
    let out = train(
        &train_set(seed, noise_std),
        &base_arch(k),
        &train_recipe(steps, lambda, ordering, seed),
    )
    .expect("toy training must complete");
    eprintln!("  trained {tag} seed {seed} in {:.1}s", started.elapsed().as_secs_f64());
    out
}

/// Every model the accuracy criteria share, trained once per process.
pub struct Bank {
    /// Easy task, k=1, balancing on.
    pub easy_k1: Vec<TrainOutput>,
    /// Easy task, k=1, balancing off (lambda = 0).
    pub easy_k1_nolb: Vec<TrainOutput>,
    /// Easy task, k=2, balancing on.
    pub easy_k2: Vec<TrainOutput>,
    /// Hard task, k=2, softmax-then-top-k gating.
    pub hard_k2: Vec<TrainOutput>,
    /// Hard task, k=2, legacy top-k-then-softmax gating.
    pub hard_k2_legacy: Vec<TrainOutput>,
}

static BANK: OnceLock<Bank> = OnceLock::new();

pub fn bank() -> &'static Bank {
    BANK.get_or_init(|| {
        let started = Instant::now();
        eprintln!("training shared model bank (25 runs, several minutes)...");
        let softmax_first = GatingOrdering::TopKOfSoftmax;
        let legacy_order = GatingOrdering::SoftmaxOfTopK;
        let bank = Bank {
            easy_k1: SEEDS
                .iter()
                .map(|&s| train_toy(1, 0.01, softmax_first, EASY_NOISE, EASY_STEPS, s, "easy k=1"))
                .collect(),
            easy_k1_nolb: SEEDS
                .iter()
                .map(|&s| {
                    train_toy(1, 0.0, softmax_first, EASY_NOISE, EASY_STEPS, s, "easy k=1 no-lb")
                })
                .collect(),
            easy_k2: SEEDS
                .iter()
                .map(|&s| train_toy(2, 0.01, softmax_first, EASY_NOISE, EASY_STEPS, s, "easy k=2"))
                .collect(),
            hard_k2: SEEDS
                .iter()
                .map(|&s| train_toy(2, 0.01, softmax_first, HARD_NOISE, HARD_STEPS, s, "hard k=2"))
                .collect(),
            hard_k2_legacy: SEEDS
                .iter()
                .map(|&s| {
                    train_toy(2, 0.01, legacy_order, HARD_NOISE, HARD_STEPS, s, "hard k=2 legacy")
                })
                .collect(),
        };
        eprintln!("model bank ready in {:.0}s", started.elapsed().as_secs_f64());
        bank
    })
}

/// Held-out accuracy under the given options, on the standard eval batch.
pub fn eval_acc(params: &ModelParams, seed: u64, noise_std: f64, opts: &EvalOptions) -> f64 {
    evaluate(params, &eval_set(seed, noise_std), opts, EVAL_BATCH, None)
}

/// Freshly initialized (untrained) parameters for the toy architecture,
/// drawn exactly as a training run at this seed would draw them.
pub fn init_params(k: usize, seed: u64) -> ModelParams {
    ModelParams::init(&base_arch(k), &mut RngStream::new(seed, stream::INIT))
}

/// One random allocation problem: a top-k selection plus capacity settings.
pub struct AllocInstance {
    pub sel: TopKSelection,
    pub tokens: usize,
    pub experts: usize,
    pub k: usize,
    pub capacity_ratio: f64,
    pub slots_per_expert: usize,
    pub keep_fraction: f64,
    pub mode: PriorityMode,
}

/// Deterministic corpus of allocation problems. Sizes span T <= 64, E <= 8,
/// k <= 3, C in (0.05, 2]; every seventh instance quantizes its logits to
/// one decimal so exact ties exercise the tie-breaking rules, and every
/// fifth derives weights from the legacy gating order instead.
pub fn alloc_instances(count: usize, seed: u64) -> Vec<AllocInstance> {
    let mut rng = RngStream::new(seed, stream::ABLATION);
    (0..count)
        .map(|i| {
            let tokens = 1 + rng.uniform_usize(64);
            let experts = 1 + rng.uniform_usize(8);
            let k = 1 + rng.uniform_usize(experts.min(3));
            let capacity_ratio = 0.05 + 1.95 * rng.uniform_unit();
            let mut logits = sample_gaussian(&mut rng, vec![tokens, experts], 0.0, 1.0);
            if i % 7 == 0 {
                for v in logits.data_mut() {
                    *v = (*v * 10.0).round() / 10.0;
                }
            }
            let probs = softmax_rows(&logits);
            let gate = GateMatrix::from_parts(probs, logits.clone(), logits, false);
            let sel = if i % 5 == 0 {
                legacy_softmax_of_topk(&gate, k)
            } else {
                top_k_select(&gate, k)
            };
            let slots_per_expert = buffer_capacity(1, tokens, k, experts, capacity_ratio);
            let keep_fraction = (1 + rng.uniform_usize(99)) as f64 / 100.0;
            let mode = if i % 2 == 0 { PriorityMode::Max } else { PriorityMode::SumTopK };
            AllocInstance {
                sel,
                tokens,
                experts,
                k,
                capacity_ratio,
                slots_per_expert,
                keep_fraction,
                mode,
            }
        })
        .collect()
}

/// Median of a small sample (exact midpoint for odd lengths, lower-upper
/// average for even).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One uniform pass/fail line per criterion, shown under `--nocapture`.
pub fn report(number: usize, name: &str, detail: &str) {
    println!("criterion {number:02} {name}: PASS — {detail}");
}
