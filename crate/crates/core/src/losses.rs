//! Auxiliary load-balancing losses and the total training objective.
//!
//! Two pressures keep the router honest: the importance loss penalizes
//! uneven total gate mass per expert, and the load loss penalizes uneven
//! expected assignment counts, smoothed by asking how likely each expert
//! would clear the per-token selection threshold under a fresh noise draw.
//! Both are squared coefficients of variation; the auxiliary loss is their
//! average, added to the task loss with weight lambda.

use crate::numkit::graph::{Graph, NodeId};
use crate::router::GateMatrix;
use crate::{Error, Result};

/// Weight of the auxiliary loss in the total objective.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.01 }
    }
}

/// Per-layer balance diagnostics.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AuxLossReport {
    pub imp: Vec<f64>,
    pub load: Vec<f64>,
    pub imp_cv2: f64,
    pub load_cv2: f64,
    pub aux: f64,
}

/// Tape version of the importance loss. Returns (imp `[1, E]`, imp_cv2).
pub fn importance_nodes(g: &mut Graph, probs: NodeId) -> (NodeId, NodeId) {
    let imp = g.sum_axis0(probs);
    let cv2 = g.cv_squared(imp);
    (imp, cv2)
}

/// Tape version of the load loss. Returns (load `[1, E]`, load_cv2).
///
/// Per token the threshold is the k-th largest *noisy* logit; expert i's
/// admission probability under a fresh noise draw is
/// `p_i = 1 - Phi((threshold - clean_i) / sigma)`, computed as
/// `Phi((clean_i - threshold) / sigma)`.
pub fn load_nodes(
    g: &mut Graph,
    clean_logits: NodeId,
    noisy_logits: NodeId,
    k: usize,
    sigma: f64,
) -> (NodeId, NodeId) {
    assert!(sigma > 0.0, "sigma must be positive");
    let threshold = g.kth_max_rows(noisy_logits, k);
    let centered = g.sub_col_vec(clean_logits, threshold);
    let z = g.scale(centered, 1.0 / sigma);
    let p = g.normal_cdf(z);
    let load = g.sum_axis0(p);
    let cv2 = g.cv_squared(load);
    (load, cv2)
}

/// Tape version of `aux = 0.5 * imp_cv2 + 0.5 * load_cv2`.
pub fn aux_nodes(g: &mut Graph, imp_cv2: NodeId, load_cv2: NodeId) -> NodeId {
    let s = g.add(imp_cv2, load_cv2);
    g.scale(s, 0.5)
}

/// Tape version of the total objective: task + lambda * mean(per-layer aux).
pub fn total_loss_node(g: &mut Graph, task: NodeId, aux_per_layer: &[NodeId], lambda: f64) -> NodeId {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    if aux_per_layer.is_empty() || lambda == 0.0 {
        return task;
    }
    let mut acc = aux_per_layer[0];
    for &a in &aux_per_layer[1..] {
        acc = g.add(acc, a);
    }
    let mean = g.scale(acc, 1.0 / aux_per_layer.len() as f64);
    let weighted = g.scale(mean, lambda);
    g.add(task, weighted)
}

/// Importance of each expert (summed gate mass) and its squared CV.
pub fn importance_loss(gate: &GateMatrix) -> (Vec<f64>, f64) {
    let mut g = Graph::new();
    let probs = g.leaf(gate.probs().clone());
    let (imp, cv2) = importance_nodes(&mut g, probs);
    (g.value(imp).data().to_vec(), g.scalar(cv2))
}

/// Expected assignment mass of each expert and its squared CV.
///
/// Fails on gates computed without routing noise: the threshold is defined
/// over the noisy scores actually drawn during the forward pass.
pub fn load_loss(gate: &GateMatrix, k: usize, sigma: f64) -> Result<(Vec<f64>, f64)> {
    if !gate.noise_applied() {
        return Err(Error::NoiseFreeLoad(
            "gates were computed in eval mode (no realized noise draw)".into(),
        ));
    }
    assert!(k >= 1 && k <= gate.num_experts(), "k out of range");
    let mut g = Graph::new();
    let clean = g.leaf(gate.clean_logits().clone());
    let noisy = g.leaf(gate.noisy_logits().clone());
    let (load, cv2) = load_nodes(&mut g, clean, noisy, k, sigma);
    Ok((g.value(load).data().to_vec(), g.scalar(cv2)))
}

/// Both balance losses in one report.
pub fn aux_report(gate: &GateMatrix, k: usize, sigma: f64) -> Result<AuxLossReport> {
    let (imp, imp_cv2) = importance_loss(gate);
    let (load, load_cv2) = load_loss(gate, k, sigma)?;
    let aux = 0.5 * (imp_cv2 + load_cv2);
    Ok(AuxLossReport { imp, load, imp_cv2, load_cv2, aux })
}

/// Total objective: task loss plus lambda times the mean per-layer aux loss.
pub fn total_loss(task_loss: f64, aux_per_layer: &[f64], lambda: f64) -> f64 {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    if aux_per_layer.is_empty() || lambda == 0.0 {
        return task_loss;
    }
    let sum: f64 = aux_per_layer.iter().sum();
    task_loss + lambda * (sum * (1.0 / aux_per_layer.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng::RngStream;
    use crate::numkit::sample_gaussian;
    use crate::numkit::special::std_normal_cdf;
    use crate::numkit::tensor::{self, Tensor};
    use crate::router::{gates, noise_std, RouterMode, RouterParams};

    fn gate_probs_only(rows: &[Vec<f64>]) -> GateMatrix {
        // Synthetic gate values with placeholder logits; fine for the
        // importance loss, which reads only probs.
        let probs = Tensor::from_rows(rows);
        let zeros = Tensor::zeros(probs.shape().to_vec());
        GateMatrix::from_parts(probs, zeros.clone(), zeros, false)
    }

    fn gate_with_noise(clean_rows: &[Vec<f64>], noise_rows: &[Vec<f64>]) -> GateMatrix {
        let clean = Tensor::from_rows(clean_rows);
        let noise = Tensor::from_rows(noise_rows);
        let noisy = clean.zip(&noise, |a, b| a + b);
        let probs = tensor::softmax_rows(&noisy);
        GateMatrix::from_parts(probs, clean, noisy, true)
    }

    #[test]
    fn uniform_gates_have_zero_importance_cv() {
        let gate = gate_probs_only(&[vec![0.25; 4], vec![0.25; 4], vec![0.25; 4]]);
        let (imp, cv2) = importance_loss(&gate);
        assert_eq!(imp, vec![0.75; 4]);
        assert_eq!(cv2, 0.0);
    }

    #[test]
    fn balanced_mass_with_unbalanced_selection_still_scores_zero() {
        // Columns all sum to 1 even though the argmax picks expert 0 twice
        // and expert 2 never.
        let gate = gate_probs_only(&[
            vec![0.5, 0.3, 0.2],
            vec![0.5, 0.2, 0.3],
            vec![0.0, 0.5, 0.5],
        ]);
        let (imp, cv2) = importance_loss(&gate);
        for v in &imp {
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert!(cv2 < 1e-24);
    }

    #[test]
    fn importance_matches_hand_computed_cv() {
        let gate = gate_probs_only(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (imp, cv2) = importance_loss(&gate);
        assert_eq!(imp, vec![1.0, 1.0]);
        assert_eq!(cv2, 0.0);

        let gate = gate_probs_only(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let (imp, cv2) = importance_loss(&gate);
        assert_eq!(imp, vec![2.0, 0.0]);
        assert!((cv2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_tie_puts_both_experts_at_one_half() {
        let a = 0.8;
        let gate = gate_with_noise(&[vec![a, a]], &[vec![0.0, 0.0]]);
        let (load, _) = load_loss(&gate, 1, 0.5).unwrap();
        assert!((load[0] - 0.5).abs() < 1e-15);
        assert!((load[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn expert_at_threshold_with_zero_noise_has_probability_half() {
        let gate = gate_with_noise(&[vec![0.3, 0.9]], &[vec![0.0, 0.0]]);
        // k=2: threshold is the second-largest noisy logit, 0.3 — expert 0
        // sits exactly at it.
        let (load, _) = load_loss(&gate, 2, 0.5).unwrap();
        assert!((load[0] - 0.5).abs() < 1e-15);
        let expect1 = std_normal_cdf((0.9 - 0.3) / 0.5);
        assert!((load[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn load_loss_rejects_noise_free_gates() {
        let gate = gate_probs_only(&[vec![0.5, 0.5]]);
        match load_loss(&gate, 1, 0.5) {
            Err(Error::NoiseFreeLoad(_)) => {}
            other => panic!("expected NoiseFreeLoad, got {other:?}"),
        }
    }

    #[test]
    fn load_is_monotone_in_clean_logits() {
        let mut rng = RngStream::new(51, 0);
        for _ in 0..20 {
            let clean = sample_gaussian(&mut rng, vec![5, 4], 0.0, 1.0);
            let noise = sample_gaussian(&mut rng, vec![5, 4], 0.0, 0.25);
            let rows = |t: &Tensor| -> Vec<Vec<f64>> {
                (0..5).map(|r| t.row(r).to_vec()).collect()
            };
            let gate = gate_with_noise(&rows(&clean), &rows(&noise));
            let k = 1 + rng.uniform_usize(4);
            let (load, _) = load_loss(&gate, k, 0.25).unwrap();

            let target = rng.uniform_usize(4);
            let mut bumped_rows = rows(&clean);
            for row in bumped_rows.iter_mut() {
                row[target] += 0.1;
            }
            let gate2 = gate_with_noise(&bumped_rows, &rows(&noise));
            let (load2, _) = load_loss(&gate2, k, 0.25).unwrap();
            assert!(load2[target] >= load[target] - 1e-12);
        }
    }

    #[test]
    fn cv2_values_are_invariant_under_expert_permutation() {
        let mut rng = RngStream::new(52, 0);
        let clean = sample_gaussian(&mut rng, vec![6, 4], 0.0, 1.0);
        let noise = sample_gaussian(&mut rng, vec![6, 4], 0.0, 0.25);
        let rows = |t: &Tensor, perm: &[usize]| -> Vec<Vec<f64>> {
            (0..6)
                .map(|r| perm.iter().map(|&c| t.at(r, c)).collect())
                .collect()
        };
        let id = [0, 1, 2, 3];
        let perm = [2, 0, 3, 1];
        let g1 = gate_with_noise(&rows(&clean, &id), &rows(&noise, &id));
        let g2 = gate_with_noise(&rows(&clean, &perm), &rows(&noise, &perm));
        let (_, imp1) = importance_loss(&g1);
        let (_, imp2) = importance_loss(&g2);
        assert!((imp1 - imp2).abs() < 1e-12);
        let (_, load1) = load_loss(&g1, 2, 0.25).unwrap();
        let (_, load2) = load_loss(&g2, 2, 0.25).unwrap();
        assert!((load1 - load2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.7, &[0.3, 0.5], 0.0), 1.7);
        assert_eq!(total_loss(1.7, &[], 0.01), 1.7);
        // Perfect balance at every layer adds nothing.
        assert_eq!(total_loss(0.9, &[0.0, 0.0], 0.01), 0.9);
        let total = total_loss(1.0, &[0.2, 0.4], 0.01);
        assert!((total - 1.003).abs() < 1e-15);
    }

    /// Finite-difference check of both losses with respect to the router
    /// weights, with the realized noise held fixed.
    #[test]
    fn balance_loss_gradients_match_finite_differences() {
        let mut rng = RngStream::new(53, 0);
        let x = sample_gaussian(&mut rng, vec![6, 3], 0.0, 1.0);
        let w = sample_gaussian(&mut rng, vec![4, 3], 0.0, 1.0);
        let noise = sample_gaussian(&mut rng, vec![6, 4], 0.0, 0.25);
        let sigma = noise_std(4);

        for which in ["imp", "load"] {
            let build = |g: &mut Graph, w_node: NodeId| -> NodeId {
                let x_node = g.leaf(x.clone());
                let n_node = g.leaf(noise.clone());
                let wt = g.transpose(w_node);
                let clean = g.matmul(x_node, wt);
                let noisy = g.add(clean, n_node);
                if which == "imp" {
                    let probs = g.softmax_rows(noisy);
                    importance_nodes(g, probs).1
                } else {
                    load_nodes(g, clean, noisy, 2, sigma).1
                }
            };
            let mut g = Graph::new();
            let w_node = g.leaf(w.clone());
            let loss = build(&mut g, w_node);
            let grads = g.backward(loss);
            let analytic = grads.wrt(w_node).unwrap();

            let step = 1e-5;
            for e in 0..w.numel() {
                let eval = |delta: f64| {
                    let mut w2 = w.clone();
                    w2.data_mut()[e] += delta;
                    let mut g2 = Graph::new();
                    let w_node2 = g2.leaf(w2);
                    let l = build(&mut g2, w_node2);
                    g2.scalar(l)
                };
                let numeric = (eval(step) - eval(-step)) / (2.0 * step);
                let a = analytic.data()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{which} entry {e}: {a} vs {numeric} (rel {rel})");
            }
        }
    }

    /// Tensor-level and tape-level loss values agree bit for bit (they run
    /// the same graph code).
    #[test]
    fn wrapper_and_graph_paths_agree() {
        let mut rng = RngStream::new(54, 0);
        let w = sample_gaussian(&mut rng, vec![4, 3], 0.0, 1.0);
        let x = sample_gaussian(&mut rng, vec![8, 3], 0.0, 1.0);
        let params = RouterParams::new(w.clone());
        let mut noise_rng = RngStream::new(54, 1);
        let gate = gates(&x, &params, RouterMode::Train, &mut noise_rng);

        let (imp_vec, imp_cv2) = importance_loss(&gate);
        let (load_vec, load_cv2) = load_loss(&gate, 2, noise_std(4)).unwrap();

        let mut g = Graph::new();
        let clean = g.leaf(gate.clean_logits().clone());
        let noisy = g.leaf(gate.noisy_logits().clone());
        let probs = g.leaf(gate.probs().clone());
        let (imp_n, imp_cv2_n) = importance_nodes(&mut g, probs);
        let (load_n, load_cv2_n) = load_nodes(&mut g, clean, noisy, 2, noise_std(4));
        assert_eq!(g.value(imp_n).data(), &imp_vec[..]);
        assert_eq!(g.value(load_n).data(), &load_vec[..]);
        assert_eq!(g.scalar(imp_cv2_n), imp_cv2);
        assert_eq!(g.scalar(load_cv2_n), load_cv2);
    }
}
