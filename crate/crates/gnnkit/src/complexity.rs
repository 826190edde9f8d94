//! Structural-complexity measures, closed-form generalization-bound
//! evaluators, and structure-usage metrics.
//!
//! The central quantity is the *effective edge count* η of an aggregation
//! matrix: how many entries actually participate in neighborhood
//! aggregation. For a fixed operator like `Â` that is its number of
//! nonzeros; for attention it is the number of weights at or above a
//! threshold τ (attention rows are dense on their support, so an exact
//! zero count would be vacuous). Multi-head layers aggregate by summing
//! per-head counts.
//!
//! The bound evaluators return the *gap* portion of high-probability
//! excess-risk bounds — the structural term plus the confidence term
//! `√(2·ln(2/δ)/n)` — excluding the empirical risk, which composes
//! additively and is reported separately by callers.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{ForwardRecord, LayerAggregation, Model};
use crate::tensor::{spectral_norm_dense, CsrMatrix, DenseMatrix};

/// Default threshold for effective-edge counts and ratios.
pub const DEFAULT_TAU: f64 = 1e-2;

/// Lipschitz constant of softmax cross-entropy in the logits under the
/// ℓ₂ norm (the standard √2 bound), used when no value is supplied.
pub const DEFAULT_LOSS_LIPSCHITZ: f64 = std::f64::consts::SQRT_2;

/// Constants entering the generalization-bound evaluators.
///
/// All norms are spectral (operator) norms. `r0`, `r_tilde`, and
/// `pi_norm` only matter for the transformer bound; set them to 1 for
/// the GCN/GAT bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Loss Lipschitz constant `L`.
    pub l: f64,
    /// Feature-norm bound `B = max_i ‖x_i‖₂`.
    pub b: f64,
    /// First-layer weight bound `R₁`.
    pub r1: f64,
    /// Second-layer weight bound `R₂`.
    pub r2: f64,
    /// Value-projection bound `R₀` (transformer).
    pub r0: f64,
    /// Output-projection bound `R̃` (transformer).
    pub r_tilde: f64,
    /// Normalization-operator Lipschitz constant `Π_Norm` (transformer).
    pub pi_norm: f64,
    /// Labeled-sample count `m`.
    pub m: usize,
    /// Node count `n`.
    pub n: usize,
    /// Confidence level `δ`.
    pub delta: f64,
    /// Attention head count `Δ`.
    pub heads: usize,
}

impl BoundInputs {
    /// Checks the preconditions shared by every bound.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Invalid`] unless every constant is positive,
    /// `δ ∈ (0,1)`, and `m ≤ n`.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l", self.l),
            ("b", self.b),
            ("r1", self.r1),
            ("r2", self.r2),
            ("r0", self.r0),
            ("r_tilde", self.r_tilde),
            ("pi_norm", self.pi_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "bound constant {name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.m == 0 || self.heads == 0 {
            return Err(Error::invalid("m and heads must be positive"));
        }
        if self.m > self.n {
            return Err(Error::invalid(format!(
                "labeled count m={} exceeds node count n={}",
                self.m, self.n
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// The confidence term `√(2·ln(2/δ)/n)` shared by every bound.
    #[must_use]
    pub fn confidence_term(&self) -> f64 {
        (2.0 * (2.0 / self.delta).ln() / self.n as f64).sqrt()
    }
}

/// Effective edge count of a fixed aggregation operator: nonzeros of
/// `Â` with magnitude strictly above `eps` (use 0 for exact nonzeros).
#[must_use]
pub fn eta_fixed(a_hat: &CsrMatrix, eps: f64) -> usize {
    a_hat.l0_count(eps)
}

/// Effective edge count of an attention matrix: entries with weight
/// `≥ tau` among the stored support.
///
/// # Errors
///
/// Returns [`Error::Invalid`] unless `tau > 0` (attention weights are
/// all positive, so a nonpositive threshold would count everything).
pub fn eta_thresholded(attention: &CsrMatrix, tau: f64) -> Result<usize> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!(
            "attention threshold tau must be positive, got {tau}"
        )));
    }
    Ok(attention.values().iter().filter(|&&v| v >= tau).count())
}

/// Aggregated multi-head effective edge count: sum of per-head
/// thresholded counts.
///
/// # Errors
///
/// Returns [`Error::Invalid`] unless `tau > 0`.
pub fn eta_multihead(heads: &[CsrMatrix], tau: f64) -> Result<usize> {
    let mut total = 0;
    for h in heads {
        total += eta_thresholded(h, tau)?;
    }
    Ok(total)
}

/// Excess-risk gap bound for a two-layer GCN with fixed aggregation:
/// `2·L·R₁·R₂·B·η/√m + √(2·ln(2/δ)/n)`.
///
/// # Errors
///
/// Returns [`Error::Invalid`] if `bi` violates its invariants.
pub fn bound_gcn(bi: &BoundInputs, eta: usize) -> Result<f64> {
    bi.validate()?;
    let structural = 2.0 * bi.l * bi.r1 * bi.r2 * bi.b * eta as f64 / (bi.m as f64).sqrt();
    Ok(structural + bi.confidence_term())
}

/// Tighter GCN variant with `√η` in place of `η`, which follows from
/// carrying the chain `‖Â‖₂ ≤ ‖Â‖_∞·√‖Â‖₀ ≤ √η` through the same
/// argument instead of relaxing to the linear count.
///
/// # Errors
///
/// Returns [`Error::Invalid`] if `bi` violates its invariants.
pub fn bound_gcn_sqrt(bi: &BoundInputs, eta: usize) -> Result<f64> {
    bi.validate()?;
    let structural = 2.0 * bi.l * bi.r1 * bi.r2 * bi.b * (eta as f64).sqrt() / (bi.m as f64).sqrt();
    Ok(structural + bi.confidence_term())
}

/// Excess-risk gap bound for a two-layer single-head GAT:
/// `2·L·R₁·R₂·B·√(η₁·η₂/m) + √(2·ln(2/δ)/n)` with per-layer thresholded
/// counts `η₁`, `η₂`.
///
/// # Errors
///
/// Returns [`Error::Invalid`] if `bi` violates its invariants.
pub fn bound_gat(bi: &BoundInputs, eta1: usize, eta2: usize) -> Result<f64> {
    bi.validate()?;
    let structural =
        2.0 * bi.l * bi.r1 * bi.r2 * bi.b * ((eta1 * eta2) as f64 / bi.m as f64).sqrt();
    Ok(structural + bi.confidence_term())
}

/// Multi-head GAT variant of [`bound_gat`]: per-layer counts are the
/// head-aggregated `η_MH` and the structural term gains a `1/√Δ`:
/// `2·L·R₁·R₂·B·√(η_MH⁽¹⁾·η_MH⁽²⁾/(m·Δ)) + √(2·ln(2/δ)/n)`.
///
/// # Errors
///
/// Returns [`Error::Invalid`] if `bi` violates its invariants.
pub fn bound_gat_multihead(bi: &BoundInputs, eta_mh1: usize, eta_mh2: usize) -> Result<f64> {
    bi.validate()?;
    let structural = 2.0
        * bi.l
        * bi.r1
        * bi.r2
        * bi.b
        * ((eta_mh1 * eta_mh2) as f64 / (bi.m * bi.heads) as f64).sqrt();
    Ok(structural + bi.confidence_term())
}

/// Excess-risk gap bound for a single-layer Graph Transformer:
/// `(8·Π²·L·B·(1+R₂R₁)/√m)·(1 + R₀·R̃·√(Δ·η)) + √(2·ln(2/δ)/n)` with
/// `η` the head-aggregated thresholded count of layer 1.
///
/// # Errors
///
/// Returns [`Error::Invalid`] if `bi` violates its invariants.
pub fn bound_gt(bi: &BoundInputs, eta_mht1: usize) -> Result<f64> {
    bi.validate()?;
    let front =
        8.0 * bi.pi_norm * bi.pi_norm * bi.l * bi.b * (1.0 + bi.r2 * bi.r1) / (bi.m as f64).sqrt();
    let factor = 1.0 + bi.r0 * bi.r_tilde * ((bi.heads * eta_mht1) as f64).sqrt();
    Ok(front * factor + bi.confidence_term())
}

/// Fraction of off-diagonal aggregation weights at or above `tau`
/// within the stored off-diagonal support. Returns 0 when the support
/// has no off-diagonal entries (an edgeless graph uses no edges).
///
/// # Errors
///
/// Returns [`Error::Invalid`] unless `tau > 0`.
pub fn effective_edge_ratio(omega: &CsrMatrix, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!(
            "effective-edge threshold tau must be positive, got {tau}"
        )));
    }
    let mut candidates = 0usize;
    let mut kept = 0usize;
    for v in 0..omega.n_rows() {
        for (u, w) in omega.row_entries(v) {
            if u == v {
                continue;
            }
            candidates += 1;
            if w >= tau {
                kept += 1;
            }
        }
    }
    if candidates == 0 {
        return Ok(0.0);
    }
    Ok(kept as f64 / candidates as f64)
}

/// Fraction of off-diagonal aggregation mass that crosses class
/// boundaries: `Σ_{class(v)≠class(u)} ω_vu / Σ_{v≠u} ω_vu`. Returns 0
/// when there is no off-diagonal mass.
///
/// # Errors
///
/// Returns [`Error::Invalid`] if `classes` does not cover every row.
pub fn cross_class_ratio(omega: &CsrMatrix, classes: &[usize]) -> Result<f64> {
    if classes.len() != omega.n_rows() {
        return Err(Error::invalid(format!(
            "class vector covers {} nodes, aggregation matrix has {} rows",
            classes.len(),
            omega.n_rows()
        )));
    }
    let mut total = 0.0;
    let mut cross = 0.0;
    for v in 0..omega.n_rows() {
        for (u, w) in omega.row_entries(v) {
            if u == v {
                continue;
            }
            total += w;
            if classes[v] != classes[u] {
                cross += w;
            }
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(cross / total)
}

/// Per-node class assignment used by the structure-usage metrics:
/// ground-truth labels where `train_mask` is set, argmax of the logits
/// row elsewhere (ties broken toward the lowest class index).
#[must_use]
pub fn node_classes(labels: &[usize], train_mask: &[bool], logits: &DenseMatrix) -> Vec<usize> {
    (0..labels.len())
        .map(|v| {
            if train_mask[v] {
                labels[v]
            } else {
                argmax(logits.row(v))
            }
        })
        .collect()
}

/// Index of the largest entry, lowest index on ties.
#[must_use]
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Absolute difference between test and train error rates.
#[must_use]
pub fn generalization_gap(train_error: f64, test_error: f64) -> f64 {
    (test_error - train_error).abs()
}

/// Structural-complexity summary of one forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// Nonzero count of the fixed operator `Â`.
    pub eta: usize,
    /// Thresholded count per layer and head.
    pub eta_tau: Vec<Vec<usize>>,
    /// Head-aggregated thresholded count per layer.
    pub eta_mh: Vec<usize>,
    /// Mean over layers of the off-diagonal effective-edge fraction of
    /// the head-averaged aggregation.
    pub effective_edge_ratio: f64,
    /// Mean over layers of the cross-class aggregation-mass fraction of
    /// the head-averaged aggregation.
    pub cross_class_ratio: f64,
    /// Threshold the counts and ratios were computed at.
    pub tau: f64,
}

/// Head-averaged aggregation matrix of a layer (all heads materialized
/// on their stored support, then averaged entrywise).
#[must_use]
pub fn layer_mean_omega(tape: &Tape, layer: &LayerAggregation) -> CsrMatrix {
    let mut mean = layer.heads[0].to_csr(tape);
    for head in &layer.heads[1..] {
        let m = head.to_csr(tape);
        for (dst, src) in mean.values_mut().iter_mut().zip(m.values()) {
            *dst += src;
        }
    }
    let k = layer.heads.len() as f64;
    for v in mean.values_mut() {
        *v /= k;
    }
    mean
}

/// Builds a [`ComplexityReport`] from a recorded forward pass.
///
/// `classes` should come from [`node_classes`] so labeled nodes use
/// ground truth and the rest use model predictions.
///
/// # Errors
///
/// Returns [`Error::Invalid`] unless `tau > 0` and `classes` covers
/// every node.
pub fn complexity_report(
    tape: &Tape,
    record: &ForwardRecord,
    a_hat: &CsrMatrix,
    classes: &[usize],
    tau: f64,
) -> Result<ComplexityReport> {
    let mut eta_tau = Vec::with_capacity(record.layers.len());
    let mut eta_mh = Vec::with_capacity(record.layers.len());
    let mut eff_sum = 0.0;
    let mut cross_sum = 0.0;
    for layer in &record.layers {
        let mut per_head = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            per_head.push(eta_thresholded(&head.to_csr(tape), tau)?);
        }
        eta_mh.push(per_head.iter().sum());
        eta_tau.push(per_head);

        let omega = layer_mean_omega(tape, layer);
        eff_sum += effective_edge_ratio(&omega, tau)?;
        cross_sum += cross_class_ratio(&omega, classes)?;
    }
    let layers = record.layers.len() as f64;
    Ok(ComplexityReport {
        eta: eta_fixed(a_hat, 0.0),
        eta_tau,
        eta_mh,
        effective_edge_ratio: eff_sum / layers,
        cross_class_ratio: cross_sum / layers,
        tau,
    })
}

/// Number of samples drawn by the normalization Lipschitz probe.
const PI_NORM_SAMPLES: usize = 256;

/// Floor applied to measured norms so [`BoundInputs::validate`] holds
/// even for all-zero weights.
const NORM_FLOOR: f64 = 1e-12;

/// Measures [`BoundInputs`] on a trained model: `B` as the largest
/// feature row norm, the `R` constants as spectral norms of the
/// relevant weight matrices, and (for the transformer) `Π_Norm` as a
/// sampled lower estimate of the layer-normalization Lipschitz
/// constant. The loss constant is [`DEFAULT_LOSS_LIPSCHITZ`].
///
/// Per architecture:
/// * `gcn` — `R₁ = ‖W₁‖₂`, `R₂ = ‖W₂‖₂`.
/// * `gat` — `R_k` is the largest per-head projection norm of layer k;
///   `heads` is layer 1's head count.
/// * `gt` — constants are read off layer 1: `R₁ = ‖FFN₁‖₂`,
///   `R₂ = ‖FFN₂‖₂`, `R₀ = max_δ ‖V⁽¹ᐧδ⁾‖₂`, `R̃ = ‖O¹‖₂`.
///
/// # Errors
///
/// Returns [`Error::Invalid`] for an unknown architecture tag or
/// infeasible `m`/`delta`.
pub fn empirical_bound_inputs(
    model: &dyn Model,
    features: &DenseMatrix,
    m: usize,
    delta: f64,
) -> Result<BoundInputs> {
    let spectral = |w: &DenseMatrix| spectral_norm_dense(w, 10_000, 1e-12).value.max(NORM_FLOOR);
    let names = model.param_names();
    let params = model.params();
    let by_name = |pred: &dyn Fn(&str) -> bool| -> Vec<&DenseMatrix> {
        names
            .iter()
            .zip(&params)
            .filter(|(n, _)| pred(n))
            .map(|(_, p)| *p)
            .collect()
    };
    let max_spectral = |ws: &[&DenseMatrix]| ws.iter().map(|w| spectral(w)).fold(NORM_FLOOR, f64::max);

    let (r1, r2, r0, r_tilde, pi_norm, heads) = match model.arch() {
        "gcn" => (
            spectral(params[0]),
            spectral(params[1]),
            1.0,
            1.0,
            1.0,
            1,
        ),
        "gat" => {
            let l1: Vec<&DenseMatrix> = by_name(&|n| n.starts_with("l1_") && n.ends_with("_w"));
            let l2: Vec<&DenseMatrix> = by_name(&|n| n.starts_with("l2_") && n.ends_with("_w"));
            (max_spectral(&l1), max_spectral(&l2), 1.0, 1.0, 1.0, l1.len())
        }
        "gt" => {
            let v: Vec<&DenseMatrix> = by_name(&|n| n.starts_with("l0_h") && n.ends_with("_v"));
            let heads = v.len();
            (
                spectral(by_name(&|n| n == "l0_ffn1")[0]),
                spectral(by_name(&|n| n == "l0_ffn2")[0]),
                max_spectral(&v),
                spectral(by_name(&|n| n == "l0_o")[0]),
                sampled_layer_norm_lipschitz(
                    by_name(&|n| n == "l0_norm1_gain")[0],
                    PI_NORM_SAMPLES,
                ),
                heads,
            )
        }
        other => {
            return Err(Error::invalid(format!(
                "no bound-input recipe for architecture '{other}'"
            )))
        }
    };
    let bi = BoundInputs {
        l: DEFAULT_LOSS_LIPSCHITZ,
        b: features.max_row_norm().max(NORM_FLOOR),
        r1,
        r2,
        r0,
        r_tilde,
        pi_norm,
        m,
        n: features.rows(),
        delta,
        heads,
    };
    bi.validate()?;
    Ok(bi)
}

/// Sampled lower estimate of the Lipschitz constant of layer
/// normalization with the given gain row: the largest observed
/// `‖LN(x) − LN(y)‖ / ‖x − y‖` over seeded random pairs at several
/// scales. Deterministic.
#[must_use]
pub fn sampled_layer_norm_lipschitz(gain: &DenseMatrix, samples: usize) -> f64 {
    use crate::autodiff::LAYER_NORM_EPS;
    use rand::{Rng, SeedableRng};
    let d = gain.cols();
    let normalize = |x: &[f64], out: &mut [f64]| {
        let mean: f64 = x.iter().sum::<f64>() / d as f64;
        let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            out[j] = (x[j] - mean) * inv * gain.get(0, j);
        }
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x4c69_7073);
    let mut best: f64 = NORM_FLOOR;
    let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
    let (mut lx, mut ly) = (vec![0.0; d], vec![0.0; d]);
    for s in 0..samples {
        // Cycle through scales: the normalization is most expansive for
        // small inputs, where the eps floor dominates the variance.
        let scale = [1e-3, 1e-2, 0.1, 1.0, 10.0][s % 5];
        for j in 0..d {
            x[j] = rng.gen_range(-1.0..1.0) * scale;
            y[j] = x[j] + rng.gen_range(-1e-3..1e-3) * scale;
        }
        normalize(&x, &mut lx);
        normalize(&y, &mut ly);
        let num: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    best
}

/// Convenience: `Â`'s nonzero count together with its spectral norm,
/// checking the chain `‖Â‖₂ ≤ √η` the bound arguments rely on.
///
/// # Errors
///
/// Propagates validation errors from the graph's normalization.
pub fn a_hat_chain_check(g: &Graph) -> Result<(usize, f64, bool)> {
    let ops = g.normalize();
    let eta = eta_fixed(ops.a_hat(), 0.0);
    let sigma = crate::tensor::spectral_norm_sparse(ops.a_hat(), 10_000, 1e-12).value;
    Ok((eta, sigma, sigma <= (eta as f64).sqrt() + 1e-9))
}
