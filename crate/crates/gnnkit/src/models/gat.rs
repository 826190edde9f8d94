//! Two-layer graph attention network (Veličković et al., ICLR 2018).
//!
//! Layer 1 runs `heads1` independent attention heads whose ReLU outputs
//! are concatenated; layer 2 runs `heads2` heads (one by default) whose
//! outputs are averaged into the logits. Scores use the canonical
//! concatenation form `LeakyReLU(aᵀ[W h_v ∥ W h_u])`, split here as
//! `a_lᵀ(W h)_v + a_rᵀ(W h)_u` with `v` the attending destination, and
//! are normalized by a softmax over `{v} ∪ N(v)` (self-loops are always
//! candidates).

use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

use super::{
    glorot, init_rng, AggregationHead, ForwardRecord, GraphContext, LayerAggregation, Model,
};

/// Hyperparameters of [`GatModel`].
#[derive(Debug, Clone)]
pub struct GatConfig {
    /// Attention heads in layer 1 (outputs concatenated).
    pub heads1: usize,
    /// Output width of each layer-1 head.
    pub head_dim: usize,
    /// Attention heads in layer 2 (outputs averaged).
    pub heads2: usize,
    /// Dropout rate on input and hidden features during training.
    pub dropout: f64,
    /// Negative-side slope of the score nonlinearity.
    pub leaky_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            heads1: 8,
            head_dim: 8,
            heads2: 1,
            dropout: 0.5,
            leaky_slope: 0.2,
        }
    }
}

/// One attention head's parameters: a projection and the two halves of
/// the score vector.
struct Head {
    w: DenseMatrix,
    a_left: DenseMatrix,
    a_right: DenseMatrix,
}

impl Head {
    fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            w: glorot(in_dim, out_dim, rng),
            a_left: glorot(out_dim, 1, rng),
            a_right: glorot(out_dim, 1, rng),
        }
    }
}

/// Two-layer GAT parameters.
pub struct GatModel {
    config: GatConfig,
    layer1: Vec<Head>,
    layer2: Vec<Head>,
}

impl GatModel {
    /// Initializes all heads Glorot-uniform, deterministically from
    /// `seed`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Invalid`] on zero head counts or dimensions.
    pub fn new(config: &GatConfig, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if config.heads1 == 0 || config.heads2 == 0 || config.head_dim == 0 {
            return Err(Error::invalid("head counts and head_dim must be positive"));
        }
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let mut rng = init_rng(seed);
        let layer1: Vec<Head> = (0..config.heads1)
            .map(|_| Head::new(in_dim, config.head_dim, &mut rng))
            .collect();
        let hidden = config.heads1 * config.head_dim;
        let layer2: Vec<Head> = (0..config.heads2)
            .map(|_| Head::new(hidden, out_dim, &mut rng))
            .collect();
        Ok(GatModel {
            config: config.clone(),
            layer1,
            layer2,
        })
    }

    /// Model configuration.
    #[must_use]
    pub fn config(&self) -> &GatConfig {
        &self.config
    }

    /// Runs one head: project, score, softmax over neighborhoods,
    /// aggregate. Returns the aggregated features and the attention
    /// weights.
    fn run_head(
        &self,
        tape: &mut Tape,
        x: Var,
        w: Var,
        a_left: Var,
        a_right: Var,
        ctx: &GraphContext,
    ) -> Result<(Var, Var)> {
        let hw = tape.matmul(x, w)?;
        let left = tape.matmul(hw, a_left)?;
        let right = tape.matmul(hw, a_right)?;
        let scores = tape.edge_pair_scores(left, right, Rc::clone(&ctx.pattern))?;
        let scores = tape.leaky_relu(scores, self.config.leaky_slope);
        let alpha = tape.masked_row_softmax(scores, Rc::clone(&ctx.pattern))?;
        let agg = tape.edge_aggregate(alpha, hw, Rc::clone(&ctx.pattern))?;
        Ok((agg, alpha))
    }
}

impl Model for GatModel {
    fn arch(&self) -> &'static str {
        "gat"
    }

    fn params(&self) -> Vec<&DenseMatrix> {
        self.layer1
            .iter()
            .chain(&self.layer2)
            .flat_map(|h| [&h.w, &h.a_left, &h.a_right])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layer1
            .iter_mut()
            .chain(&mut self.layer2)
            .flat_map(|h| [&mut h.w, &mut h.a_left, &mut h.a_right])
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        let name = |layer: usize, head: usize| {
            [
                format!("l{layer}_h{head}_w"),
                format!("l{layer}_h{head}_a_left"),
                format!("l{layer}_h{head}_a_right"),
            ]
        };
        (0..self.layer1.len())
            .flat_map(|h| name(1, h))
            .chain((0..self.layer2.len()).flat_map(|h| name(2, h)))
            .collect()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        staged: &[Var],
        ctx: &GraphContext,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardRecord> {
        let mut x = tape.constant(ctx.features.clone());
        if training {
            x = tape.dropout(x, self.config.dropout, rng)?;
        }

        let mut outs = Vec::with_capacity(self.config.heads1);
        let mut alphas1 = Vec::with_capacity(self.config.heads1);
        for h in 0..self.config.heads1 {
            let base = 3 * h;
            let (agg, alpha) =
                self.run_head(tape, x, staged[base], staged[base + 1], staged[base + 2], ctx)?;
            outs.push(tape.relu(agg));
            alphas1.push(alpha);
        }
        let h1 = tape.concat_cols(&outs)?;

        let mut hd = h1;
        if training {
            hd = tape.dropout(hd, self.config.dropout, rng)?;
        }
        let mut alphas2 = Vec::with_capacity(self.config.heads2);
        let mut sum: Option<Var> = None;
        for h in 0..self.config.heads2 {
            let base = 3 * (self.config.heads1 + h);
            let (agg, alpha) =
                self.run_head(tape, hd, staged[base], staged[base + 1], staged[base + 2], ctx)?;
            alphas2.push(alpha);
            sum = Some(match sum {
                Some(s) => tape.add(s, agg)?,
                None => agg,
            });
        }
        let logits = tape.scale(sum.expect("heads2 >= 1"), 1.0 / self.config.heads2 as f64);

        let to_layer = |alphas: Vec<Var>| LayerAggregation {
            heads: alphas
                .into_iter()
                .map(|var| AggregationHead::EdgeValues {
                    var,
                    pattern: Rc::clone(&ctx.pattern),
                })
                .collect(),
        };
        Ok(ForwardRecord {
            logits,
            hidden: vec![h1, logits],
            layers: vec![to_layer(alphas1), to_layer(alphas2)],
        })
    }
}
