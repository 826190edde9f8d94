//! Structure-entropy regularization: the class-level entropy of each
//! layer's aggregation weights, its warm-up schedule, and the combined
//! training objective.
//!
//! The regularizer views a layer's aggregation matrix `Ω = (ω_vu)` as a
//! weighted graph partitioned into classes by a soft assignment
//! `P (n × c)` — one-hot rows for labeled nodes, model posterior rows
//! for the rest. With weighted degrees `d_v = Σ_u ω_vu`, total volume
//! `V = Σ_v d_v`, class volumes `vol_j = Σ_v P_vj d_v`, and class cut
//! weights `g_j = Σ_vu ω_vu P_vj (1 − P_uj)`, the per-layer loss is
//!
//! ```text
//! L_SE = −Σ_j (g_j / V) · ln(vol_j / V)
//! ```
//!
//! Minimizing it concentrates aggregation mass inside classes (shrink
//! the cuts `g_j`) while keeping class volumes balanced enough that the
//! log factors stay moderate. The differentiable evaluation lives on the
//! tape ([`Tape::struct_entropy`]); this module provides the literal
//! reference implementation used as a test oracle, the schedule, the
//! objective composition, and the per-layer plumbing from a recorded
//! forward pass.

use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{AggregationHead, ForwardRecord, GraphContext};
use crate::tensor::{CsrMatrix, DenseMatrix};

/// Options controlling the regularizer during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SerOptions {
    /// Regularization strength `λ ≥ 0`; 0 disables the term entirely.
    pub lambda: f64,
    /// Threshold used by the structure-usage diagnostics.
    pub tau: f64,
    /// Epochs over which the term ramps in linearly.
    pub warmup_epochs: usize,
    /// Ablation: collapse the class level by replacing `P` with a single
    /// all-ones column. Every cut weight is then zero, so the loss is
    /// identically 0 — the term is carried but cannot shape anything.
    pub collapse_classes: bool,
    /// Ablation: observe the loss but detach its gradient from the
    /// aggregation weights, so only the posterior rows of `P` receive
    /// pressure.
    pub detach_omega: bool,
    /// Stop gradients through the posterior rows of `P` (labeled rows
    /// are constant one-hots either way).
    pub stop_grad_posterior: bool,
}

impl Default for SerOptions {
    fn default() -> Self {
        SerOptions {
            lambda: 0.0,
            tau: crate::complexity::DEFAULT_TAU,
            warmup_epochs: 50,
            collapse_classes: false,
            detach_omega: false,
            stop_grad_posterior: false,
        }
    }
}

/// Linear warm-up ramp: `min(1, epoch/warmup_epochs)`; 1 when no warm-up
/// is configured.
#[must_use]
pub fn warmup_factor(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        return 1.0;
    }
    (epoch as f64 / warmup_epochs as f64).min(1.0)
}

/// Combined objective `L_CLS + warmup·λ·Σ_k L_SE^(k)` on the tape.
///
/// When the regularizer is inactive (`λ = 0`, warm-up factor 0, or no
/// layer losses) the classification loss variable is returned unchanged,
/// so a `λ = 0` run records exactly the same tape as one with the
/// regularizer code removed.
///
/// # Errors
///
/// Returns [`Error::Invalid`] for negative `λ` or a warm-up factor
/// outside `[0, 1]`; propagates shape errors from the tape.
pub fn total_loss(
    tape: &mut Tape,
    ce_loss: Var,
    se_losses: &[Var],
    lambda: f64,
    warmup: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!(
            "regularization strength must be nonnegative, got {lambda}"
        )));
    }
    if !(0.0..=1.0).contains(&warmup) {
        return Err(Error::invalid(format!(
            "warm-up factor must lie in [0,1], got {warmup}"
        )));
    }
    let weight = lambda * warmup;
    if weight == 0.0 || se_losses.is_empty() {
        return Ok(ce_loss);
    }
    let mut se_sum = se_losses[0];
    for &se in &se_losses[1..] {
        se_sum = tape.add(se_sum, se)?;
    }
    let scaled = tape.scale(se_sum, weight);
    tape.add(ce_loss, scaled)
}

/// Records the per-layer structural-entropy losses of a forward pass.
///
/// Builds the class assignment from the record's logits (one-hot where
/// `train_mask` is set, softmax posterior elsewhere — or a single
/// all-ones column under the class-collapse ablation), extracts each
/// layer's head-averaged aggregation weights, and evaluates the entropy.
/// Layers with fixed propagation (plain GCN) contribute a constant-`Ω`
/// term whose gradient flows only through `P`.
///
/// # Errors
///
/// Returns [`Error::Invalid`] when a layer has dense global-scope
/// attention (no edge support to regularize) and propagates shape
/// errors from the tape.
pub fn layer_entropy_losses(
    tape: &mut Tape,
    record: &ForwardRecord,
    ctx: &GraphContext,
    labels: &Rc<Vec<usize>>,
    train_mask: &Rc<Vec<bool>>,
    opts: &SerOptions,
) -> Result<Vec<Var>> {
    let n = ctx.n_nodes();
    let p = if opts.collapse_classes {
        tape.constant(DenseMatrix::from_fn(n, 1, |_, _| 1.0))
    } else {
        tape.class_posterior(
            record.logits,
            Rc::clone(labels),
            Rc::clone(train_mask),
            opts.stop_grad_posterior,
        )?
    };

    let mut losses = Vec::with_capacity(record.layers.len());
    for layer in &record.layers {
        let all_fixed = layer
            .heads
            .iter()
            .all(|h| matches!(h, AggregationHead::Fixed(_)));
        let (omega, pattern) = if all_fixed {
            let values = DenseMatrix::from_vec(
                ctx.pattern.n_directed(),
                1,
                ctx.a_hat_edge_values.as_ref().clone(),
            )?;
            (tape.constant(values), Rc::clone(&ctx.pattern))
        } else {
            layer.mean_edge_var(tape)?
        };
        losses.push(tape.struct_entropy(omega, p, pattern, opts.detach_omega)?);
    }
    Ok(losses)
}

/// Literal reference evaluation of the structural entropy by explicit
/// loops over the stored entries of `Ω` and all classes — the oracle the
/// fused tape implementation is tested against.
///
/// # Errors
///
/// Returns [`Error::Invalid`] if shapes disagree, any weight is
/// negative, or the total volume is zero (degenerate structure).
pub fn structural_entropy_reference(omega: &CsrMatrix, p: &DenseMatrix) -> Result<f64> {
    let n = omega.n_rows();
    let c = p.cols();
    if omega.n_cols() != n || p.rows() != n {
        return Err(Error::invalid(format!(
            "omega is {}x{}, P is {}x{}; need square omega with matching P rows",
            omega.n_rows(),
            omega.n_cols(),
            p.rows(),
            p.cols()
        )));
    }

    // Weighted degree of every destination node.
    let mut degree = vec![0.0f64; n];
    for v in 0..n {
        for (_, w) in omega.row_entries(v) {
            if w < 0.0 {
                return Err(Error::invalid(format!(
                    "aggregation weight {w} is negative"
                )));
            }
            degree[v] += w;
        }
    }
    let volume: f64 = degree.iter().sum();
    if volume <= 0.0 {
        return Err(Error::invalid(
            "structural entropy is degenerate: aggregation weights have zero total volume",
        ));
    }

    let mut loss = 0.0;
    for j in 0..c {
        // Volume of class j under the soft assignment.
        let mut vol_j = 0.0;
        for v in 0..n {
            vol_j += p.get(v, j) * degree[v];
        }
        // Cut weight of class j: mass entering v's share of class j from
        // endpoints outside it.
        let mut cut_j = 0.0;
        for v in 0..n {
            for (u, w) in omega.row_entries(v) {
                cut_j += w * p.get(v, j) * (1.0 - p.get(u, j));
            }
        }
        // A class with zero volume has zero cut weight; its term is the
        // x·ln(x) → 0 limit.
        if vol_j > 0.0 {
            loss -= cut_j / volume * (vol_j / volume).ln();
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::struct_entropy_forward;
    use crate::complexity::cross_class_ratio;
    use crate::graph::{sbm_generate, Graph};
    use crate::models::{stage_params, GcnConfig, GcnModel, Model};
    use crate::stats::spearman;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Uniform two-node aggregation: both nodes split their unit mass
    /// between themselves and the other node.
    fn two_node_uniform() -> CsrMatrix {
        CsrMatrix::from_triplets(
            2,
            2,
            &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)],
        )
        .unwrap()
    }

    #[test]
    fn two_node_hand_computation() {
        // vol(V)=2, vol(C1)=vol(C2)=1, g1=g2=1/2:
        // loss = −2·(1/4)·ln(1/2) = ln(2)/2 ≈ 0.34657.
        let p = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = structural_entropy_reference(&two_node_uniform(), &p).unwrap();
        assert_close(loss, 0.5 * 2.0f64.ln(), 1e-12);
        assert_close(loss, 0.34657, 1e-5);
    }

    #[test]
    fn single_class_and_block_diagonal_are_zero() {
        let p1 = DenseMatrix::from_fn(2, 1, |_, _| 1.0);
        assert_close(
            structural_entropy_reference(&two_node_uniform(), &p1).unwrap(),
            0.0,
            1e-15,
        );

        // Two disconnected blocks, hard aligned assignment → no cuts.
        let omega = CsrMatrix::from_triplets(
            4,
            4,
            &[
                (0, 0, 0.5),
                (0, 1, 0.5),
                (1, 0, 0.5),
                (1, 1, 0.5),
                (2, 2, 0.7),
                (2, 3, 0.3),
                (3, 2, 0.4),
                (3, 3, 0.6),
            ],
        )
        .unwrap();
        let p = DenseMatrix::from_vec(
            4,
            2,
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        assert_close(structural_entropy_reference(&omega, &p).unwrap(), 0.0, 1e-15);
    }

    #[test]
    fn zero_volume_is_a_degenerate_structure_error() {
        let omega = CsrMatrix::from_triplets(2, 2, &[(0, 1, 0.0), (1, 0, 0.0)]).unwrap();
        let p = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            structural_entropy_reference(&omega, &p),
            Err(Error::Invalid(_))
        ));

        // The differentiable op rejects it the same way.
        let g = Graph::new(DenseMatrix::zeros(2, 1), vec![(0, 1)], vec![0, 1], 2).unwrap();
        let pattern = Rc::new(g.edge_pattern());
        let mut tape = Tape::new();
        let w = tape.constant(DenseMatrix::zeros(pattern.n_directed(), 1));
        let pv = tape.constant(p);
        assert!(matches!(
            tape.struct_entropy(w, pv, pattern, false),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn scale_invariance_in_omega() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = sbm_generate(&[5, 5], 0.6, 0.3, 3, 1.0, 5).unwrap();
        let pattern = g.edge_pattern();
        let mut trips = Vec::new();
        for e in 0..pattern.n_directed() {
            trips.push((
                pattern.row()[e],
                pattern.col()[e],
                rng.gen_range(0.1..1.0),
            ));
        }
        let omega = CsrMatrix::from_triplets(g.n_nodes(), g.n_nodes(), &trips).unwrap();
        let mut scaled = omega.clone();
        for v in scaled.values_mut() {
            *v *= 37.5;
        }
        let p = DenseMatrix::from_fn(g.n_nodes(), 2, |v, j| {
            if (g.labels()[v] == j) ^ (v % 3 == 0) {
                0.8
            } else {
                0.2
            }
        });
        let a = structural_entropy_reference(&omega, &p).unwrap();
        let b = structural_entropy_reference(&scaled, &p).unwrap();
        assert_close(a, b, 1e-9);
    }

    #[test]
    fn reference_matches_fused_forward_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for trial in 0..50 {
            let n1 = rng.gen_range(3..16);
            let n2 = rng.gen_range(3..16);
            let g = sbm_generate(&[n1, n2], 0.5, 0.3, 2, 1.0, 500 + trial).unwrap();
            let pattern = g.edge_pattern();
            let c = rng.gen_range(1..5usize);

            let mut w = DenseMatrix::zeros(pattern.n_directed(), 1);
            for e in 0..pattern.n_directed() {
                w.set(e, 0, rng.gen_range(0.0..1.0));
            }
            // Random soft rows summing to 1.
            let mut p = DenseMatrix::zeros(g.n_nodes(), c);
            for v in 0..g.n_nodes() {
                let mut sum = 0.0;
                for j in 0..c {
                    let x: f64 = rng.gen_range(0.01..1.0);
                    p.set(v, j, x);
                    sum += x;
                }
                for j in 0..c {
                    p.set(v, j, p.get(v, j) / sum);
                }
            }

            let fused = struct_entropy_forward(&w, &p, &pattern);
            let omega = pattern.csr_with_values(w.data());
            let reference = structural_entropy_reference(&omega, &p).unwrap();
            assert_close(fused, reference, 1e-10);
            assert!(reference >= -1e-12, "entropy must be nonnegative");
        }
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_close(warmup_factor(0, 50), 0.0, 0.0);
        assert_close(warmup_factor(25, 50), 0.5, 1e-15);
        assert_close(warmup_factor(50, 50), 1.0, 0.0);
        assert_close(warmup_factor(300, 50), 1.0, 0.0);
        assert_close(warmup_factor(0, 0), 1.0, 0.0);
    }

    #[test]
    fn total_loss_composes_and_skips_when_inactive() {
        let mut tape = Tape::new();
        let ce = tape.constant(DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap());
        let se1 = tape.constant(DenseMatrix::from_vec(1, 1, vec![0.3]).unwrap());
        let se2 = tape.constant(DenseMatrix::from_vec(1, 1, vec![0.1]).unwrap());

        // Inactive paths return the CE variable itself — no extra nodes.
        assert_eq!(total_loss(&mut tape, ce, &[se1, se2], 0.0, 1.0).unwrap(), ce);
        assert_eq!(total_loss(&mut tape, ce, &[se1, se2], 0.5, 0.0).unwrap(), ce);
        assert_eq!(total_loss(&mut tape, ce, &[], 0.5, 1.0).unwrap(), ce);
        let len_before = tape.len();
        let _ = total_loss(&mut tape, ce, &[se1, se2], 0.0, 1.0).unwrap();
        assert_eq!(tape.len(), len_before, "inactive composition must not grow the tape");

        // 1.0 + 0.5·1.0·(0.3+0.1) = 1.2.
        let combined = total_loss(&mut tape, ce, &[se1, se2], 0.5, 1.0).unwrap();
        assert_close(tape.value(combined).get(0, 0), 1.2, 1e-12);

        // Half warm-up halves the added mass.
        let half = total_loss(&mut tape, ce, &[se1, se2], 0.5, 0.5).unwrap();
        assert_close(tape.value(half).get(0, 0), 1.1, 1e-12);

        assert!(total_loss(&mut tape, ce, &[se1], -0.1, 1.0).is_err());
        assert!(total_loss(&mut tape, ce, &[se1], 0.5, 1.5).is_err());
    }

    #[test]
    fn fixed_propagation_layers_contribute_through_the_posterior() {
        // Plain GCN: Ω = Â is constant, so the entropy gradient reaches
        // the weights only through P's posterior rows.
        let g = sbm_generate(&[5, 5], 0.6, 0.2, 3, 1.0, 77).unwrap();
        let model = GcnModel::new(
            &GcnConfig {
                hidden: 4,
                dropout: 0.0,
                masked: false,
                renormalize: true,
            },
            3,
            2,
            0,
            9,
        )
        .unwrap();
        let ctx = GraphContext::new(&g);
        let labels = Rc::new(g.labels().to_vec());
        let mut mask = vec![false; g.n_nodes()];
        mask[0] = true;
        mask[5] = true;
        let mask = Rc::new(mask);

        let mut tape = Tape::new();
        let staged = stage_params(&model, &mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = model
            .forward(&mut tape, &staged, &ctx, false, &mut rng)
            .unwrap();
        let opts = SerOptions {
            lambda: 1.0,
            ..SerOptions::default()
        };
        let losses = layer_entropy_losses(&mut tape, &rec, &ctx, &labels, &mask, &opts).unwrap();
        assert_eq!(losses.len(), 2);
        for &l in &losses {
            assert!(tape.value(l).get(0, 0) >= 0.0);
        }
        let total = total_loss(&mut tape, losses[0], &losses[1..], 1.0, 1.0).unwrap();
        tape.backward(total).unwrap();
        let g1 = tape.grad_or_zeros(staged[0]);
        assert!(
            g1.max_abs() > 0.0,
            "posterior path must carry gradient into the weights"
        );

        // Stop-gradient ablation cuts that path: constant Ω and frozen P
        // leave nothing differentiable.
        let mut tape2 = Tape::new();
        let staged2 = stage_params(&model, &mut tape2);
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let rec2 = model
            .forward(&mut tape2, &staged2, &ctx, false, &mut rng2)
            .unwrap();
        let frozen = SerOptions {
            lambda: 1.0,
            stop_grad_posterior: true,
            ..SerOptions::default()
        };
        let losses2 =
            layer_entropy_losses(&mut tape2, &rec2, &ctx, &labels, &mask, &frozen).unwrap();
        let total2 = total_loss(&mut tape2, losses2[0], &losses2[1..], 1.0, 1.0).unwrap();
        tape2.backward(total2).unwrap();
        assert_close(tape2.grad_or_zeros(staged2[0]).max_abs(), 0.0, 0.0);
    }

    #[test]
    fn collapsed_class_tree_zeroes_the_loss() {
        let g = sbm_generate(&[5, 5], 0.6, 0.3, 3, 1.0, 81).unwrap();
        let model = GcnModel::new(
            &GcnConfig {
                hidden: 4,
                dropout: 0.0,
                masked: true,
                renormalize: true,
            },
            3,
            2,
            g.n_edges(),
            13,
        )
        .unwrap();
        let ctx = GraphContext::new(&g);
        let labels = Rc::new(g.labels().to_vec());
        let mask = Rc::new(vec![true; g.n_nodes()]);
        let mut tape = Tape::new();
        let staged = stage_params(&model, &mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = model
            .forward(&mut tape, &staged, &ctx, false, &mut rng)
            .unwrap();
        let opts = SerOptions {
            lambda: 1.0,
            collapse_classes: true,
            ..SerOptions::default()
        };
        let losses = layer_entropy_losses(&mut tape, &rec, &ctx, &labels, &mask, &opts).unwrap();
        for &l in &losses {
            assert_close(tape.value(l).get(0, 0), 0.0, 1e-15);
        }
    }

    #[test]
    fn minimizing_entropy_alone_prunes_cross_class_mass() {
        // Gradient descent on free mask logits with the entropy as the
        // only objective should steadily concentrate aggregation mass
        // inside the two blocks.
        let g = sbm_generate(&[10, 10], 0.7, 0.25, 3, 1.0, 91).unwrap();
        let ctx = GraphContext::new(&g);
        let labels = Rc::new(g.labels().to_vec());
        let one_hot = DenseMatrix::from_fn(g.n_nodes(), 2, |v, j| {
            if labels[v] == j {
                1.0
            } else {
                0.0
            }
        });

        let mut logits = DenseMatrix::zeros(g.n_edges(), 1);
        let mut ratios = Vec::new();
        let steps = 400;
        for step in 0..=steps {
            let mut tape = Tape::new();
            let lv = tape.param(logits.clone());
            let gate = tape.edge_gate(lv, Rc::clone(&ctx.pattern)).unwrap();
            let base = tape.constant(
                DenseMatrix::from_vec(
                    ctx.pattern.n_directed(),
                    1,
                    ctx.a_hat_edge_values.as_ref().clone(),
                )
                .unwrap(),
            );
            let gated = tape.elementwise_mul(gate, base).unwrap();
            let omega = tape.edge_normalize(gated, Rc::clone(&ctx.pattern)).unwrap();
            let p = tape.constant(one_hot.clone());
            let loss = tape
                .struct_entropy(omega, p, Rc::clone(&ctx.pattern), false)
                .unwrap();

            if step % 40 == 0 {
                let m = ctx
                    .pattern
                    .csr_with_values(tape.value(omega).data());
                ratios.push(cross_class_ratio(&m, g.labels()).unwrap());
            }
            if step == steps {
                break;
            }
            tape.backward(loss).unwrap();
            let grad = tape.grad_or_zeros(lv);
            for e in 0..g.n_edges() {
                logits.set(e, 0, logits.get(e, 0) - 10.0 * grad.get(e, 0));
            }
        }

        let first = ratios[0];
        let last = *ratios.last().unwrap();
        assert!(
            last < 0.5 * first,
            "cross-class mass should shrink: {ratios:?}"
        );
        let steps_axis: Vec<f64> = (0..ratios.len()).map(|i| i as f64).collect();
        let rho = spearman(&steps_axis, &ratios);
        assert!(rho < -0.9, "expected a strong downward trend, rho={rho}, {ratios:?}");
    }
}
