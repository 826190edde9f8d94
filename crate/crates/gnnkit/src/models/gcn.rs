//! Two-layer graph convolutional network, optionally with a learnable
//! per-edge mask.
//!
//! The plain model is `logits = Â · ReLU(Â · X W₁) · W₂` (Kipf & Welling,
//! ICLR 2017; no biases). With masking enabled, each undirected edge
//! carries a logit whose sigmoid gates the corresponding entries of `Â`
//! (self-loops stay fixed at 1), and the gated weights are renormalized
//! per destination so each node keeps the incoming mass it had under `Â`.
//! One mask is shared by both layers, so the propagation operator
//! `Ω = (ω_vu)` is the same in each.

use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

use super::{
    glorot, init_rng, AggregationHead, ForwardRecord, GraphContext, LayerAggregation, Model,
};

/// Hyperparameters of [`GcnModel`].
#[derive(Debug, Clone)]
pub struct GcnConfig {
    /// Hidden width of the first layer.
    pub hidden: usize,
    /// Dropout rate applied to the input and hidden features during
    /// training.
    pub dropout: f64,
    /// Whether edges carry learnable sigmoid gates.
    pub masked: bool,
    /// With masking: renormalize gated weights to preserve each node's
    /// incoming mass under `Â` (recommended). When `false` the gated
    /// weights `M_vu · Â_vu` are used verbatim.
    pub renormalize: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            hidden: 64,
            dropout: 0.5,
            masked: false,
            renormalize: true,
        }
    }
}

/// Two-layer GCN parameters.
pub struct GcnModel {
    config: GcnConfig,
    w1: DenseMatrix,
    w2: DenseMatrix,
    mask_logits: Option<DenseMatrix>,
}

/// Initial value of every mask logit: `sigmoid(2) ≈ 0.88`, so training
/// starts close to the unmasked operator and prunes from there.
const MASK_LOGIT_INIT: f64 = 2.0;

impl GcnModel {
    /// Initializes Glorot-uniform weights (and mask logits when masking
    /// is enabled) deterministically from `seed`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Invalid`] on zero-sized dimensions.
    pub fn new(
        config: &GcnConfig,
        in_dim: usize,
        out_dim: usize,
        n_undirected: usize,
        seed: u64,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || config.hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let mut rng = init_rng(seed);
        let w1 = glorot(in_dim, config.hidden, &mut rng);
        let w2 = glorot(config.hidden, out_dim, &mut rng);
        let mask_logits = config
            .masked
            .then(|| DenseMatrix::from_fn(n_undirected, 1, |_, _| MASK_LOGIT_INIT));
        Ok(GcnModel {
            config: config.clone(),
            w1,
            w2,
            mask_logits,
        })
    }

    /// Model configuration.
    #[must_use]
    pub fn config(&self) -> &GcnConfig {
        &self.config
    }

    /// Records the shared propagation weights `ω` for masked mode.
    fn masked_omega(&self, tape: &mut Tape, staged_mask: Var, ctx: &GraphContext) -> Result<Var> {
        let pattern = Rc::clone(&ctx.pattern);
        let gate = tape.edge_gate(staged_mask, Rc::clone(&pattern))?;
        let base = tape.constant(
            DenseMatrix::from_vec(
                pattern.n_directed(),
                1,
                ctx.a_hat_edge_values.as_ref().clone(),
            )
            .expect("edge values as column"),
        );
        let gated = tape.elementwise_mul(gate, base)?;
        if !self.config.renormalize {
            return Ok(gated);
        }
        let normalized = tape.edge_normalize(gated, Rc::clone(&pattern))?;
        let mass = tape.constant(
            DenseMatrix::from_fn(pattern.n_directed(), 1, |e, _| {
                ctx.row_mass[pattern.row()[e]]
            }),
        );
        tape.elementwise_mul(normalized, mass)
    }
}

impl Model for GcnModel {
    fn arch(&self) -> &'static str {
        "gcn"
    }

    fn params(&self) -> Vec<&DenseMatrix> {
        let mut out = vec![&self.w1, &self.w2];
        if let Some(m) = &self.mask_logits {
            out.push(m);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = vec![&mut self.w1, &mut self.w2];
        if let Some(m) = &mut self.mask_logits {
            out.push(m);
        }
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = vec!["w1".to_string(), "w2".to_string()];
        if self.mask_logits.is_some() {
            out.push("mask_logits".to_string());
        }
        out
    }

    fn forward(
        &self,
        tape: &mut Tape,
        staged: &[Var],
        ctx: &GraphContext,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardRecord> {
        let (w1, w2) = (staged[0], staged[1]);
        let omega = if self.config.masked {
            Some(self.masked_omega(tape, staged[2], ctx)?)
        } else {
            None
        };

        let mut x = tape.constant(ctx.features.clone());
        if training {
            x = tape.dropout(x, self.config.dropout, rng)?;
        }
        let xw1 = tape.matmul(x, w1)?;
        let h1_pre = match omega {
            Some(w) => tape.edge_aggregate(w, xw1, Rc::clone(&ctx.pattern))?,
            None => tape.spmm(Rc::clone(&ctx.a_hat), xw1)?,
        };
        let h1 = tape.relu(h1_pre);
        let mut h = h1;
        if training {
            h = tape.dropout(h, self.config.dropout, rng)?;
        }
        let hw2 = tape.matmul(h, w2)?;
        let logits = match omega {
            Some(w) => tape.edge_aggregate(w, hw2, Rc::clone(&ctx.pattern))?,
            None => tape.spmm(Rc::clone(&ctx.a_hat), hw2)?,
        };

        let layer = |omega: Option<Var>| LayerAggregation {
            heads: vec![match omega {
                Some(var) => AggregationHead::EdgeValues {
                    var,
                    pattern: Rc::clone(&ctx.pattern),
                },
                None => AggregationHead::Fixed(Rc::clone(&ctx.a_hat)),
            }],
        };
        Ok(ForwardRecord {
            logits,
            hidden: vec![h1, logits],
            layers: vec![layer(omega), layer(omega)],
        })
    }
}
