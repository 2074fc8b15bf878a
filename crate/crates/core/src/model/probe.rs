//! Few-shot linear probe: ridge regression from frozen pre-logits class-token
//! features to one-hot labels, the standard cheap test of representation
//! quality.

use crate::model::data::Dataset;
use crate::model::vit::{model_forward, EvalOptions, ModelParams};
use crate::numkit::{linalg, stream, RngStream, Tensor};
use crate::router::RouterMode;

/// Probe accuracies on the fitting set and the held-out set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub accuracy: f64,
}

/// Pre-logits class-token features for every example, extracted in batches.
/// `opts.mode` must be `Eval`.
pub fn extract_features(
    params: &ModelParams,
    dataset: &Dataset,
    opts: &EvalOptions,
    batch_images: usize,
) -> Tensor {
    assert!(matches!(opts.mode, RouterMode::Eval), "feature extraction runs in eval mode");
    assert!(batch_images >= 1);
    let n = dataset.len();
    let mut routing_rng = RngStream::new(0, stream::ROUTING_NOISE);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut idx = 0usize;
    while idx < n {
        let take = batch_images.min(n - idx);
        let indices: Vec<usize> = (idx..idx + take).collect();
        let (images, _) = dataset.batch(&indices);
        let rec = model_forward(params, &images, opts, &mut routing_rng, None);
        for r in 0..take {
            rows.push(rec.features.row(r).to_vec());
        }
        idx += take;
    }
    Tensor::from_rows(&rows)
}

fn with_bias(features: &Tensor) -> Tensor {
    let (n, d) = (features.rows(), features.cols());
    let mut out = Tensor::zeros(vec![n, d + 1]);
    for r in 0..n {
        for c in 0..d {
            out.set(r, c, features.at(r, c));
        }
        out.set(r, d, 1.0);
    }
    out
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut y = Tensor::zeros(vec![labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        y.set(r, l, 1.0);
    }
    y
}

fn predict(features_bias: &Tensor, weights: &Tensor) -> Vec<usize> {
    let scores = crate::numkit::tensor::matmul(features_bias, weights);
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn fraction_correct(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// The first `shots` stored examples of each class in `fit_set` (its storage
/// order), or everything when `shots` is `None`.
fn shot_indices(fit_set: &Dataset, shots: Option<usize>) -> Vec<usize> {
    match shots {
        None => (0..fit_set.len()).collect(),
        Some(s) => {
            let mut counts = vec![0usize; fit_set.num_classes()];
            let mut keep = Vec::new();
            for (i, &label) in fit_set.labels().iter().enumerate() {
                if counts[label] < s {
                    counts[label] += 1;
                    keep.push(i);
                }
            }
            keep
        }
    }
}

/// Fits a ridge probe (`alpha` is the L2 strength) on up to `shots` examples
/// per class of `fit_set` and scores it on `eval_set`. The backbone is
/// frozen; only the linear map is learned.
pub fn linear_probe(
    params: &ModelParams,
    fit_set: &Dataset,
    eval_set: &Dataset,
    shots: Option<usize>,
    alpha: f64,
    opts: &EvalOptions,
    batch_images: usize,
) -> ProbeResult {
    assert!(alpha > 0.0, "ridge strength must be positive");
    assert_eq!(
        fit_set.num_classes(),
        eval_set.num_classes(),
        "fit and eval sets must agree on classes"
    );
    let keep = shot_indices(fit_set, shots);
    assert!(!keep.is_empty(), "probe needs at least one fitting example");
    let fit = fit_set.subset(&keep);

    let fit_features = with_bias(&extract_features(params, &fit, opts, batch_images));
    let eval_features = with_bias(&extract_features(params, eval_set, opts, batch_images));
    let targets = one_hot(fit.labels(), fit.num_classes());
    let weights = linalg::ridge_fit(&fit_features, &targets, alpha);

    let train_pred = predict(&fit_features, &weights);
    let eval_pred = predict(&eval_features, &weights);
    ProbeResult {
        train_accuracy: fraction_correct(&train_pred, fit.labels()),
        accuracy: fraction_correct(&eval_pred, eval_set.labels()),
    }
}
