//! Mini-batch trainer: Adam with decoupled weight decay, a linearly decaying
//! learning rate, and the combined objective (cross-entropy plus the weighted
//! mean of each sparse layer's auxiliary loss).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::allocator::AllocationPolicy;
use crate::losses;
use crate::model::checkpoint::{RngSnapshot, StreamState};
use crate::model::data::Dataset;
use crate::model::vit::{correct_count, forward_graph, EvalOptions, ModelConfig, ModelParams};
use crate::moe::GatingOrdering;
use crate::numkit::{stream, RngStream, Tensor};
use crate::router::{self, RouterMode};
use crate::{Error, Result};

/// Optimization settings. Adam moment constants are fixed (0.9, 0.999, 1e-8);
/// everything that affects the learned model is here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays linearly to zero over `steps`.
    pub base_lr: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Weight of the auxiliary loss in the total objective.
    pub lambda: f64,
    pub policy: AllocationPolicy,
    pub ordering: GatingOrdering,
    pub seed: u64,
    /// A total loss above this (or any non-finite loss) aborts training.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 64,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            lambda: 0.01,
            policy: AllocationPolicy::Vanilla,
            ordering: GatingOrdering::TopKOfSoftmax,
            seed: 0,
            divergence_threshold: 1e4,
        }
    }
}

/// Per-step training record. `aux` is the unweighted mean over sparse layers
/// of 0.5 * (imp_cv2 + load_cv2); the optimized total is
/// `task_loss + lambda * aux`. `accuracy` is measured on the training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub task_loss: f64,
    pub aux: f64,
    pub imp_cv2: Vec<f64>,
    pub load_cv2: Vec<f64>,
    pub accuracy: f64,
}

/// The full training trace plus the block indices its per-layer columns
/// refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSeries {
    pub moe_blocks: Vec<usize>,
    pub rows: Vec<StepMetrics>,
}

impl MetricsSeries {
    pub fn header(&self) -> String {
        let mut cols = vec!["step".to_string(), "task_loss".into(), "aux".into()];
        for b in &self.moe_blocks {
            cols.push(format!("imp_cv2_b{b}"));
        }
        for b in &self.moe_blocks {
            cols.push(format!("load_cv2_b{b}"));
        }
        cols.push("accuracy".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header());
        out.push('\n');
        for row in &self.rows {
            let mut cols = vec![
                row.step.to_string(),
                row.task_loss.to_string(),
                row.aux.to_string(),
            ];
            for v in &row.imp_cv2 {
                cols.push(v.to_string());
            }
            for v in &row.load_cv2 {
                cols.push(v.to_string());
            }
            cols.push(row.accuracy.to_string());
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }
}

/// Trained parameters, the step-by-step metrics, and the final RNG positions
/// (so a checkpoint can resume the exact stream state).
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub metrics: MetricsSeries,
    pub rng: RngSnapshot,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: usize,
}

impl Adam {
    fn new(params: &ModelParams) -> Adam {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        Adam {
            m: params.tensors().iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
            v: params.tensors().iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
            t: 0,
        }
    }

    /// One update over every parameter; missing gradients count as zero.
    fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Option<Tensor>>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, tensor) in params.tensors_mut().iter_mut() {
            let m = self.m.get_mut(name).expect("state for every parameter");
            let v = self.v.get_mut(name).expect("state for every parameter");
            let grad = grads.get(name).and_then(|g| g.as_ref());
            let n = tensor.numel();
            for i in 0..n {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * g;
                let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                let p = tensor.data()[i];
                tensor.data_mut()[i] = p - lr * (update + weight_decay * p);
            }
        }
    }
}

/// Runs the full training loop. Deterministic given the dataset and configs:
/// parameter init draws from the init stream, router noise from the routing
/// stream, and batch order from the data stream, all keyed by
/// `train_config.seed`.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutput> {
    model_config.validate()?;
    if train_config.batch_size == 0 || train_config.batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch_size {} must lie in [1, {}]",
            train_config.batch_size,
            dataset.len()
        )));
    }
    if dataset.image_size() != model_config.image_size
        || dataset.channels() != model_config.channels
    {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            dataset.image_size(),
            dataset.image_size(),
            dataset.channels(),
            model_config.image_size,
            model_config.image_size,
            model_config.channels
        )));
    }
    if dataset.num_classes() != model_config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            dataset.num_classes(),
            model_config.num_classes
        )));
    }

    let seed = train_config.seed;
    let mut init_rng = RngStream::new(seed, stream::INIT);
    let mut routing_rng = RngStream::new(seed, stream::ROUTING_NOISE);
    let mut data_rng = RngStream::new(seed, stream::DATA);

    let mut params = ModelParams::init(model_config, &mut init_rng);
    let mut adam = Adam::new(&params);
    let moe_blocks = model_config.moe_blocks();
    let sigma = router::noise_std(model_config.num_experts);
    let opts = EvalOptions::train(train_config.policy, train_config.ordering);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    data_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut rows = Vec::with_capacity(train_config.steps);
    for step in 1..=train_config.steps {
        if cursor + train_config.batch_size > order.len() {
            data_rng.shuffle(&mut order);
            cursor = 0;
        }
        let indices = &order[cursor..cursor + train_config.batch_size];
        cursor += train_config.batch_size;
        let (images, labels) = dataset.batch(indices);

        let fwd = forward_graph(&params, &images, &opts, &mut routing_rng, None);
        let mut g = fwd.graph;
        let task = g.cross_entropy(fwd.logits, labels.clone());

        let mut aux_per_layer = Vec::with_capacity(fwd.moe_layers.len());
        let mut imp_cv2_nodes = Vec::with_capacity(fwd.moe_layers.len());
        let mut load_cv2_nodes = Vec::with_capacity(fwd.moe_layers.len());
        for (_, layer) in &fwd.moe_layers {
            let (_, imp_cv2) = losses::importance_nodes(&mut g, layer.gate_nodes.probs);
            let (_, load_cv2) = losses::load_nodes(
                &mut g,
                layer.gate_nodes.clean_logits,
                layer.gate_nodes.noisy_logits,
                model_config.k,
                sigma,
            );
            aux_per_layer.push(losses::aux_nodes(&mut g, imp_cv2, load_cv2));
            imp_cv2_nodes.push(imp_cv2);
            load_cv2_nodes.push(load_cv2);
        }
        let total = losses::total_loss_node(&mut g, task, &aux_per_layer, train_config.lambda);

        let total_value = g.scalar(total);
        if !total_value.is_finite() || total_value > train_config.divergence_threshold {
            return Err(Error::Diverged { step, loss: total_value });
        }

        let grads = g.backward(total);
        let grad_map: BTreeMap<String, Option<Tensor>> = fwd
            .leaves
            .iter()
            .map(|(name, &id)| (name.clone(), grads.wrt(id).cloned()))
            .collect();

        let aux_mean = if aux_per_layer.is_empty() {
            0.0
        } else {
            aux_per_layer.iter().map(|&a| g.scalar(a)).sum::<f64>() / aux_per_layer.len() as f64
        };
        let batch_acc =
            correct_count(g.value(fwd.logits), &labels) as f64 / labels.len() as f64;
        rows.push(StepMetrics {
            step,
            task_loss: g.scalar(task),
            aux: aux_mean,
            imp_cv2: imp_cv2_nodes.iter().map(|&n| g.scalar(n)).collect(),
            load_cv2: load_cv2_nodes.iter().map(|&n| g.scalar(n)).collect(),
            accuracy: batch_acc,
        });

        let lr = train_config.base_lr * (1.0 - (step - 1) as f64 / train_config.steps as f64);
        adam.step(&mut params, &grad_map, lr, train_config.weight_decay);
    }

    let rng = RngSnapshot {
        states: vec![
            StreamState {
                stream: stream::INIT,
                seed,
                word_pos: init_rng.word_pos(),
            },
            StreamState {
                stream: stream::ROUTING_NOISE,
                seed,
                word_pos: routing_rng.word_pos(),
            },
            StreamState {
                stream: stream::DATA,
                seed,
                word_pos: data_rng.word_pos(),
            },
        ],
    };
    Ok(TrainOutput {
        params,
        metrics: MetricsSeries { moe_blocks, rows },
        rng,
    })
}

/// Accuracy of `params` over the whole dataset, evaluated in batches of
/// `batch_images` images. `opts.mode` must be `Eval`.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    opts: &EvalOptions,
    batch_images: usize,
    mut ablation_rng: Option<&mut RngStream>,
) -> f64 {
    assert!(matches!(opts.mode, RouterMode::Eval), "evaluate requires eval mode");
    assert!(batch_images >= 1, "batch_images must be positive");
    let n = dataset.len();
    if n == 0 {
        return 0.0;
    }
    // Eval mode draws no router noise; this stream is never consumed.
    let mut routing_rng = RngStream::new(0, stream::ROUTING_NOISE);
    let mut correct = 0usize;
    let mut idx = 0usize;
    while idx < n {
        let take = batch_images.min(n - idx);
        let indices: Vec<usize> = (idx..idx + take).collect();
        let (images, labels) = dataset.batch(&indices);
        let rec = crate::model::vit::model_forward(
            params,
            &images,
            opts,
            &mut routing_rng,
            ablation_rng.as_deref_mut(),
        );
        correct += correct_count(&rec.logits, &labels);
        idx += take;
    }
    correct as f64 / n as f64
}
