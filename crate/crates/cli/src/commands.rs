//! Subcommand implementations. Each command parses inputs first, computes,
//! and only then creates the output directory and writes artifacts, so a
//! failing run leaves no partial outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vmoe::analysis::{
    ablation_series, class_expert_matrix, collect_traces, experts_per_image,
    position_expert_matrix, vary_k_eval, AblationScope,
};
use vmoe::metering::{flops_analytic, flops_counted};
use vmoe::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vmoe::model::train::{evaluate, train};
use vmoe::model::vit::{correct_count, model_forward, EvalOptions, ModelParams};
use vmoe::moe::GatingOrdering;
use vmoe::numkit::{stream, RngStream};

use crate::config::{parse_policy, ResolvedConfig};

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn load_matching_checkpoint(rc: &ResolvedConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let expected = rc.cfg.model_config()?;
    if ckpt.params.config() != &expected {
        bail!(
            "checkpoint {} was trained with a different architecture than the config",
            path.display()
        );
    }
    Ok(ckpt)
}

/// Accuracy plus total multiply-adds of a full metered pass over a dataset.
fn eval_with_flops(
    params: &ModelParams,
    dataset: &vmoe::model::Dataset,
    opts: &EvalOptions,
    batch_images: usize,
) -> (f64, u64) {
    let opts = EvalOptions {
        meter: true,
        ..opts.clone()
    };
    let mut routing = RngStream::new(0, stream::ROUTING_NOISE);
    let mut correct = 0usize;
    let mut madds = 0u64;
    let mut start = 0usize;
    while start < dataset.len() {
        let take = batch_images.min(dataset.len() - start);
        let indices: Vec<usize> = (start..start + take).collect();
        let (images, labels) = dataset.batch(&indices);
        let rec = model_forward(params, &images, &opts, &mut routing, None);
        correct += correct_count(&rec.logits, &labels);
        madds += rec.matmul_mads.values().sum::<u64>();
        start += take;
    }
    (correct as f64 / dataset.len() as f64, madds)
}

pub fn cmd_train(rc: &ResolvedConfig) -> Result<()> {
    let model_cfg = rc.cfg.model_config()?;
    let train_cfg = rc.cfg.train_config()?;
    let dataset = rc.cfg.train_dataset();
    let output = train(&dataset, &model_cfg, &train_cfg)?;

    fs::create_dir_all(&rc.out_dir)?;
    write_artifact(&rc.out_dir, "config.resolved.toml", &rc.to_toml())?;
    let metrics = format!("{}{}", rc.csv_header(), output.metrics.to_csv());
    let metrics_path = write_artifact(&rc.out_dir, "metrics.csv", &metrics)?;
    let ckpt = Checkpoint {
        params: output.params,
        rng: output.rng,
    };
    let ckpt_path = rc.out_dir.join("checkpoint.bin");
    save_checkpoint(&ckpt, &ckpt_path)?;

    let last = output.metrics.rows.last().context("no training steps ran")?;
    println!(
        "trained {} steps; final task_loss {:.4}, train-batch accuracy {:.4}",
        last.step, last.task_loss, last.accuracy
    );
    println!("wrote {} and {}", metrics_path.display(), ckpt_path.display());
    Ok(())
}

pub fn cmd_eval(rc: &ResolvedConfig, checkpoint: &Path) -> Result<()> {
    let ckpt = load_matching_checkpoint(rc, checkpoint)?;
    let opts = rc.cfg.eval_options()?;
    let dataset = rc.cfg.eval_dataset();
    let accuracy = evaluate(&ckpt.params, &dataset, &opts, rc.cfg.eval_batch_images, None);

    fs::create_dir_all(&rc.out_dir)?;
    let report = serde_json::json!({
        "config_hash": rc.hash,
        "seed": rc.cfg.seed,
        "images": dataset.len(),
        "accuracy": accuracy,
    });
    let path = write_artifact(
        &rc.out_dir,
        "eval.json",
        &format!("{:#}\n", report),
    )?;
    println!("accuracy {:.4} over {} images", accuracy, dataset.len());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_sweep_capacity(rc: &ResolvedConfig, checkpoint: &Path) -> Result<()> {
    let ckpt = load_matching_checkpoint(rc, checkpoint)?;
    let base = rc.cfg.eval_options()?;
    let dataset = rc.cfg.eval_dataset();

    let capacities = rc
        .cfg
        .sweep_capacities
        .clone()
        .unwrap_or_else(|| vec![0.2, 0.3, 0.4, 0.5, 0.75, 1.0, 1.05]);
    let policies = rc
        .cfg
        .sweep_policies
        .clone()
        .unwrap_or_else(|| vec!["vanilla".into(), "bpr_max".into()]);
    let ks = rc.cfg.sweep_k.clone().unwrap_or_else(|| vec![rc.cfg.k]);

    let mut csv = format!("{}policy,capacity_ratio,k,accuracy,flops\n", rc.csv_header());
    for policy_name in &policies {
        let policy = parse_policy(policy_name)?;
        for &k in &ks {
            if k == 0 || k > rc.cfg.num_experts {
                bail!("sweep_k entry {k} out of range for {} experts", rc.cfg.num_experts);
            }
            for &c in &capacities {
                if c <= 0.0 {
                    bail!("sweep capacity ratio must be positive, got {c}");
                }
                let opts = EvalOptions {
                    policy,
                    k_override: Some(k),
                    c_override: Some(c),
                    ..base.clone()
                };
                let (accuracy, madds) =
                    eval_with_flops(&ckpt.params, &dataset, &opts, rc.cfg.eval_batch_images);
                csv.push_str(&format!(
                    "{policy_name},{c},{k},{accuracy},{flops}\n",
                    flops = 2 * madds
                ));
            }
        }
    }

    fs::create_dir_all(&rc.out_dir)?;
    let path = write_artifact(&rc.out_dir, "capacity_sweep.csv", &csv)?;
    println!(
        "swept {} grid points; wrote {}",
        policies.len() * ks.len() * capacities.len(),
        path.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblateMode {
    #[value(name = "routing_order")]
    RoutingOrder,
    #[value(name = "random_router")]
    RandomRouter,
    #[value(name = "vary_k")]
    VaryK,
}

pub fn cmd_ablate(rc: &ResolvedConfig, mode: AblateMode, checkpoint: Option<&Path>) -> Result<()> {
    match mode {
        AblateMode::RoutingOrder => ablate_routing_order(rc),
        AblateMode::RandomRouter => {
            let path = checkpoint.context("--checkpoint is required for random_router")?;
            ablate_random_router(rc, path)
        }
        AblateMode::VaryK => {
            let path = checkpoint.context("--checkpoint is required for vary_k")?;
            ablate_vary_k(rc, path)
        }
    }
}

/// Trains two models identical except for the gating order and reports both.
fn ablate_routing_order(rc: &ResolvedConfig) -> Result<()> {
    let model_cfg = rc.cfg.model_config()?;
    let dataset = rc.cfg.train_dataset();
    let eval_set = rc.cfg.eval_dataset();
    let mut rows = Vec::new();
    for (name, ordering) in [
        ("top_k_of_softmax", GatingOrdering::TopKOfSoftmax),
        ("softmax_of_top_k", GatingOrdering::SoftmaxOfTopK),
    ] {
        let train_cfg = vmoe::model::TrainConfig {
            ordering,
            ..rc.cfg.train_config()?
        };
        let output = train(&dataset, &model_cfg, &train_cfg)?;
        let opts = EvalOptions {
            ordering,
            ..rc.cfg.eval_options()?
        };
        let accuracy = evaluate(
            &output.params,
            &eval_set,
            &opts,
            rc.cfg.eval_batch_images,
            None,
        );
        let last = output.metrics.rows.last().context("no training steps ran")?;
        rows.push(format!("{name},{accuracy},{}", last.task_loss));
    }

    fs::create_dir_all(&rc.out_dir)?;
    let csv = format!(
        "{}ordering,eval_accuracy,final_task_loss\n{}\n",
        rc.csv_header(),
        rows.join("\n")
    );
    let path = write_artifact(&rc.out_dir, "ablate_routing_order.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Replaces trained routers with random ones, layer by layer.
fn ablate_random_router(rc: &ResolvedConfig, checkpoint: &Path) -> Result<()> {
    let ckpt = load_matching_checkpoint(rc, checkpoint)?;
    let kind = rc.cfg.random_kind()?;
    let opts = rc.cfg.eval_options()?;
    let dataset = rc.cfg.eval_dataset();
    let moe_blocks = ckpt.params.config().moe_blocks();
    if moe_blocks.is_empty() {
        bail!("the checkpointed model has no sparse layers to ablate");
    }
    let scopes: Vec<AblationScope> = match rc.cfg.ablation_scope.as_str() {
        "cumulative" => moe_blocks.iter().map(|&b| AblationScope::Cumulative(b)).collect(),
        "single" => moe_blocks.iter().map(|&b| AblationScope::Single(b)).collect(),
        other => bail!("unknown ablation_scope {other:?}"),
    };
    let points = ablation_series(
        &ckpt.params,
        &dataset,
        kind,
        &scopes,
        &opts,
        rc.cfg.eval_batch_images,
        rc.cfg.seed,
    )?;

    fs::create_dir_all(&rc.out_dir)?;
    let mut csv = format!(
        "{}kind,scope,layer,layers_randomized,accuracy\n",
        rc.csv_header()
    );
    for (scope, point) in scopes.iter().zip(&points) {
        let layer = match scope {
            AblationScope::Single(b) | AblationScope::Cumulative(b) => *b,
        };
        let layers = point
            .layers
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join("|");
        csv.push_str(&format!(
            "{},{},{layer},{layers},{}\n",
            rc.cfg.random_router_kind, rc.cfg.ablation_scope, point.accuracy
        ));
    }
    let path = write_artifact(&rc.out_dir, "ablate_random_router.csv", &csv)?;
    println!("wrote {} ({} rows)", path.display(), points.len());
    Ok(())
}

/// Evaluates the checkpoint at each k' in the grid.
fn ablate_vary_k(rc: &ResolvedConfig, checkpoint: &Path) -> Result<()> {
    let ckpt = load_matching_checkpoint(rc, checkpoint)?;
    let opts = rc.cfg.eval_options()?;
    let dataset = rc.cfg.eval_dataset();
    let grid = rc
        .cfg
        .k_grid
        .clone()
        .unwrap_or_else(|| (1..=rc.cfg.num_experts).collect());
    let series = vary_k_eval(
        &ckpt.params,
        &dataset,
        &grid,
        &opts,
        rc.cfg.eval_batch_images,
    )?;

    fs::create_dir_all(&rc.out_dir)?;
    let mut csv = format!("{}k,accuracy\n", rc.csv_header());
    for (k, accuracy) in &series {
        csv.push_str(&format!("{k},{accuracy}\n"));
    }
    let path = write_artifact(&rc.out_dir, "ablate_vary_k.csv", &csv)?;
    println!("wrote {} ({} rows)", path.display(), series.len());
    Ok(())
}

pub fn cmd_analyze(rc: &ResolvedConfig, checkpoint: &Path) -> Result<()> {
    let ckpt = load_matching_checkpoint(rc, checkpoint)?;
    let opts = rc.cfg.eval_options()?;
    let dataset = rc.cfg.eval_dataset();
    let trace = collect_traces(&ckpt.params, &dataset, &opts, rc.cfg.eval_batch_images);

    fs::create_dir_all(&rc.out_dir)?;
    let mut written = vec![write_artifact(
        &rc.out_dir,
        "trace.csv",
        &format!("{}{}", rc.csv_header(), trace.to_csv()),
    )?];
    for &layer in &trace.layers {
        let class = class_expert_matrix(&trace, layer)?;
        written.push(write_artifact(
            &rc.out_dir,
            &format!("class_expert_b{layer}.csv"),
            &format!("{}{}", rc.csv_header(), class.to_csv("class")),
        )?);
        let position = position_expert_matrix(&trace, layer)?;
        written.push(write_artifact(
            &rc.out_dir,
            &format!("position_expert_b{layer}.csv"),
            &format!("{}{}", rc.csv_header(), position.to_csv("position")),
        )?);
        let hist = experts_per_image(&trace, layer)?;
        let json = serde_json::json!({
            "config_hash": rc.hash,
            "seed": rc.cfg.seed,
            "layer": hist.layer,
            "images": hist.images,
            "counts": hist
                .counts
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect::<std::collections::BTreeMap<String, usize>>(),
        });
        written.push(write_artifact(
            &rc.out_dir,
            &format!("experts_per_image_b{layer}.json"),
            &format!("{:#}\n", json),
        )?);
    }
    println!(
        "analyzed {} sparse layers over {} images; wrote {} files to {}",
        trace.layers.len(),
        dataset.len(),
        written.len(),
        rc.out_dir.display()
    );
    Ok(())
}

pub fn cmd_flops(rc: &ResolvedConfig) -> Result<()> {
    let model_cfg = rc.cfg.model_config()?;
    let dataset = rc.cfg.eval_dataset();
    let images = rc.cfg.batch_size.min(dataset.len());
    let analytic = flops_analytic(&model_cfg, images, rc.cfg.k, rc.cfg.capacity_ratio);

    // Metered forward over one batch (a single allocation group) must agree.
    let indices: Vec<usize> = (0..images).collect();
    let (batch, _) = dataset.batch(&indices);
    let opts = EvalOptions {
        meter: true,
        ..rc.cfg.eval_options()?
    };
    let mut routing = RngStream::new(0, stream::ROUTING_NOISE);
    let rec = model_forward(&ckpt_free_params(rc, &model_cfg)?, &batch, &opts, &mut routing, None);
    let counted = flops_counted(&rec.matmul_mads, images, images * model_cfg.seq_len());

    fs::create_dir_all(&rc.out_dir)?;
    let json = serde_json::json!({
        "config_hash": rc.hash,
        "seed": rc.cfg.seed,
        "analytic": analytic,
        "counted": counted,
        "match": analytic == counted,
    });
    let path = write_artifact(&rc.out_dir, "flops.json", &format!("{:#}\n", json))?;
    println!(
        "total {} FLOPs over {images} images ({} per image); counted == analytic: {}",
        analytic.total_flops,
        analytic.flops_per_image,
        analytic == counted
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Fresh seeded parameters for metering; FLOPs do not depend on values.
fn ckpt_free_params(
    rc: &ResolvedConfig,
    model_cfg: &vmoe::model::ModelConfig,
) -> Result<ModelParams> {
    let mut rng = RngStream::new(rc.cfg.seed, stream::INIT);
    Ok(ModelParams::init(model_cfg, &mut rng))
}
