//! Flat, human-editable experiment configuration. Every run is fully
//! described by one TOML file plus the optional `--seed`/`--out` overrides;
//! unknown keys are hard errors so stale configs fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vmoe::allocator::{AllocationPolicy, PriorityMode};
use vmoe::model::data::{SyntheticSpec, SYNTHETIC_CLASSES, SYNTHETIC_IMAGE_SIZE};
use vmoe::model::{EvalOptions, ModelConfig, Placement, RandomRouterKind, TrainConfig};
use vmoe::moe::GatingOrdering;

fn default_divergence_threshold() -> f64 {
    1e4
}

fn default_eval_batch_images() -> usize {
    64
}

fn default_random_router_kind() -> String {
    "gaussian".into()
}

fn default_ablation_scope() -> String {
    "cumulative".into()
}

/// One experiment, flat keys only. Model, training, dataset, and report
/// settings live side by side; subcommands read the subset they need.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    // --- model ---
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_experts: usize,
    pub k: usize,
    pub capacity_ratio: f64,
    /// "every2" (sparse odd blocks), "last_n" (requires `last_n`),
    /// or "dense" (no sparse blocks).
    pub placement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_n: Option<usize>,
    pub num_classes: usize,

    // --- training ---
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Auxiliary-loss weight.
    pub lambda: f64,
    /// "vanilla", "bpr_max", "bpr_sum", or "skip_patch=F" with keep
    /// fraction F in (0, 1].
    pub policy: String,
    /// "top_k_of_softmax" (standard) or "softmax_of_top_k" (legacy ablation).
    pub ordering: String,
    #[serde(default = "default_divergence_threshold")]
    pub divergence_threshold: f64,

    // --- synthetic dataset ---
    /// Training images per class.
    pub per_class: usize,
    pub noise_std: f64,
    /// Held-out images per class; defaults to `per_class`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_per_class: Option<usize>,

    // --- run plumbing ---
    pub seed: u64,
    pub out_dir: String,
    #[serde(default = "default_eval_batch_images")]
    pub eval_batch_images: usize,

    // --- sweep-capacity ---
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_capacities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_policies: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_k: Option<Vec<usize>>,

    // --- ablate ---
    /// "gaussian" or "permute".
    #[serde(default = "default_random_router_kind")]
    pub random_router_kind: String,
    /// "cumulative" or "single".
    #[serde(default = "default_ablation_scope")]
    pub ablation_scope: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_grid: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let placement = match self.placement.as_str() {
            "every2" => Placement::Every2,
            "dense" => Placement::LastN(0),
            "last_n" => Placement::LastN(
                self.last_n
                    .context("placement \"last_n\" requires the `last_n` key")?,
            ),
            other => bail!("unknown placement {other:?} (every2 | last_n | dense)"),
        };
        let config = ModelConfig {
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            blocks: self.blocks,
            heads: self.heads,
            mlp_dim: self.mlp_dim,
            num_experts: self.num_experts,
            k: self.k,
            capacity_ratio: self.capacity_ratio,
            placement,
            num_classes: self.num_classes,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn allocation_policy(&self) -> Result<AllocationPolicy> {
        parse_policy(&self.policy)
    }

    pub fn gating_ordering(&self) -> Result<GatingOrdering> {
        match self.ordering.as_str() {
            "top_k_of_softmax" => Ok(GatingOrdering::TopKOfSoftmax),
            "softmax_of_top_k" => Ok(GatingOrdering::SoftmaxOfTopK),
            other => bail!("unknown ordering {other:?} (top_k_of_softmax | softmax_of_top_k)"),
        }
    }

    pub fn random_kind(&self) -> Result<RandomRouterKind> {
        match self.random_router_kind.as_str() {
            "gaussian" => Ok(RandomRouterKind::Gaussian),
            "permute" => Ok(RandomRouterKind::PermuteExperts),
            other => bail!("unknown random_router_kind {other:?} (gaussian | permute)"),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            policy: self.allocation_policy()?,
            ordering: self.gating_ordering()?,
            seed: self.seed,
            divergence_threshold: self.divergence_threshold,
        })
    }

    /// Deterministic evaluation options matching the configured routing.
    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions::eval(
            self.allocation_policy()?,
            self.gating_ordering()?,
        ))
    }

    /// Training corpus, generated from the run seed.
    pub fn train_dataset(&self) -> vmoe::model::Dataset {
        vmoe::model::data::synthetic(&SyntheticSpec {
            per_class: self.per_class,
            noise_std: self.noise_std,
            seed: self.seed,
        })
    }

    /// Held-out corpus: same distribution, disjoint seed.
    pub fn eval_dataset(&self) -> vmoe::model::Dataset {
        vmoe::model::data::synthetic(&SyntheticSpec {
            per_class: self.eval_per_class.unwrap_or(self.per_class),
            noise_std: self.noise_std,
            seed: self.seed.wrapping_add(1),
        })
    }

    fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.allocation_policy()?;
        self.gating_ordering()?;
        self.random_kind()?;
        if self.image_size != SYNTHETIC_IMAGE_SIZE || self.channels != 1 {
            bail!(
                "the synthetic corpus is {s}x{s} single-channel; got image_size={}, channels={}",
                self.image_size,
                self.channels,
                s = SYNTHETIC_IMAGE_SIZE
            );
        }
        if self.num_classes != SYNTHETIC_CLASSES {
            bail!(
                "the synthetic corpus has {SYNTHETIC_CLASSES} classes; got num_classes={}",
                self.num_classes
            );
        }
        if self.per_class == 0 {
            bail!("per_class must be at least 1");
        }
        if self.eval_batch_images == 0 {
            bail!("eval_batch_images must be at least 1");
        }
        match self.ablation_scope.as_str() {
            "cumulative" | "single" => {}
            other => bail!("unknown ablation_scope {other:?} (cumulative | single)"),
        }
        Ok(())
    }
}

pub fn parse_policy(s: &str) -> Result<AllocationPolicy> {
    if let Some(frac) = s.strip_prefix("skip_patch=") {
        let keep_fraction: f64 = frac
            .parse()
            .with_context(|| format!("bad skip_patch keep fraction {frac:?}"))?;
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            bail!("skip_patch keep fraction must lie in (0, 1], got {keep_fraction}");
        }
        return Ok(AllocationPolicy::SkipPatch {
            keep_fraction,
            mode: PriorityMode::Max,
        });
    }
    match s {
        "vanilla" => Ok(AllocationPolicy::Vanilla),
        "bpr_max" => Ok(AllocationPolicy::BatchPrioritized {
            mode: PriorityMode::Max,
        }),
        "bpr_sum" => Ok(AllocationPolicy::BatchPrioritized {
            mode: PriorityMode::SumTopK,
        }),
        other => bail!("unknown policy {other:?} (vanilla | bpr_max | bpr_sum | skip_patch=F)"),
    }
}

/// A parsed config plus the derived identifiers every output must carry.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub cfg: ExperimentConfig,
    /// SHA-256 of the resolved (post-override) config serialization.
    pub hash: String,
    pub out_dir: PathBuf,
}

impl ResolvedConfig {
    /// Two comment lines prepended to every CSV output.
    pub fn csv_header(&self) -> String {
        format!("# config_hash: {}\n# seed: {}\n", self.hash, self.cfg.seed)
    }

    /// Canonical serialization of the resolved config (also what is hashed).
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.cfg).expect("config serializes")
    }
}

/// Reads, applies overrides, validates, and fingerprints a config file.
pub fn load_config(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<ResolvedConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut cfg: ExperimentConfig = toml::from_str(&text)
        .with_context(|| format!("invalid config {}", path.display()))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    if let Some(out) = out_override {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    let canonical = toml::to_string(&cfg).expect("config serializes");
    let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
    let out_dir = PathBuf::from(&cfg.out_dir);
    Ok(ResolvedConfig { cfg, hash, out_dir })
}
