//! Training loop: stratified splits, Adam with decoupled weight decay,
//! early stopping on validation accuracy, and per-epoch metric records.
//!
//! One epoch records the forward pass on a fresh tape, adds the
//! structure-entropy term when it is active, backpropagates, and applies
//! one optimizer step; a second dropout-free pass then measures
//! accuracies, losses, and the structure-usage metrics. The model with
//! the best validation accuracy seen so far is kept and returned.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::autodiff::Tape;
use crate::complexity::{argmax, cross_class_ratio, effective_edge_ratio, layer_mean_omega, node_classes};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{
    stage_params, AttentionScope, GatConfig, GatModel, GcnConfig, GcnModel, GraphContext,
    GtConfig, GtModel, Model,
};
use crate::ser::{layer_entropy_losses, total_loss, warmup_factor, SerOptions};
use crate::tensor::DenseMatrix;

/// Architecture selection with per-architecture shape hyperparameters.
/// Dropout lives in [`TrainConfig`] since every architecture shares it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelSpec {
    /// Two-layer GCN, optionally with learnable edge masks.
    Gcn {
        /// Hidden width.
        hidden: usize,
        /// Learnable sigmoid edge gates.
        masked: bool,
        /// Mass-preserving renormalization of the gated operator.
        renormalize: bool,
    },
    /// Two-layer GAT.
    Gat {
        /// Layer-1 head count.
        heads1: usize,
        /// Per-head output width of layer 1.
        head_dim: usize,
        /// Layer-2 head count.
        heads2: usize,
    },
    /// Graph Transformer.
    Gt {
        /// Model width.
        d_model: usize,
        /// Heads per layer.
        heads: usize,
        /// Layer count.
        layers: usize,
        /// Attend over all nodes instead of neighborhoods.
        global_scope: bool,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Gcn {
            hidden: 64,
            masked: false,
            renormalize: true,
        }
    }
}

impl ModelSpec {
    /// Short architecture tag matching [`Model::arch`].
    #[must_use]
    pub fn arch(&self) -> &'static str {
        match self {
            ModelSpec::Gcn { .. } => "gcn",
            ModelSpec::Gat { .. } => "gat",
            ModelSpec::Gt { .. } => "gt",
        }
    }

    /// Instantiates the model with fresh seeded parameters.
    ///
    /// # Errors
    ///
    /// Propagates the constructors' dimension validation.
    pub fn build(
        &self,
        in_dim: usize,
        out_dim: usize,
        n_undirected: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Box<dyn Model>> {
        Ok(match *self {
            ModelSpec::Gcn {
                hidden,
                masked,
                renormalize,
            } => Box::new(GcnModel::new(
                &GcnConfig {
                    hidden,
                    dropout,
                    masked,
                    renormalize,
                },
                in_dim,
                out_dim,
                n_undirected,
                seed,
            )?),
            ModelSpec::Gat {
                heads1,
                head_dim,
                heads2,
            } => Box::new(GatModel::new(
                &GatConfig {
                    heads1,
                    head_dim,
                    heads2,
                    dropout,
                    leaky_slope: 0.2,
                },
                in_dim,
                out_dim,
                seed,
            )?),
            ModelSpec::Gt {
                d_model,
                heads,
                layers,
                global_scope,
            } => Box::new(GtModel::new(
                &GtConfig {
                    d_model,
                    heads,
                    layers,
                    dropout,
                    scope: if global_scope {
                        AttentionScope::Global
                    } else {
                        AttentionScope::Neighborhood
                    },
                },
                in_dim,
                out_dim,
                seed,
            )?),
        })
    }
}

/// Node-budget of each stratified split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Training nodes drawn per class.
    pub labeled_per_class: usize,
    /// Validation-set size.
    pub n_val: usize,
    /// Test-set size.
    pub n_test: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            labeled_per_class: 20,
            n_val: 500,
            n_test: 1000,
        }
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Architecture and its shape hyperparameters.
    pub model: ModelSpec,
    /// Adam learning rate.
    pub lr: f64,
    /// Decoupled weight-decay coefficient (skipped for edge-mask logits
    /// and normalization parameters).
    pub weight_decay: f64,
    /// Dropout rate during training.
    pub dropout: f64,
    /// Epoch cap.
    pub epochs: usize,
    /// Early-stopping patience in epochs without a new best validation
    /// accuracy.
    pub patience: usize,
    /// Seed for parameter initialization, dropout, and splits.
    pub seed: u64,
    /// Restore the best-validation snapshot at the end of training
    /// (standard protocol). Disable to keep the final-epoch parameters,
    /// e.g. when studying late-training overfitting.
    #[serde(default = "default_restore_best")]
    pub restore_best: bool,
    /// Structure-entropy regularization options.
    pub ser: SerOptions,
    /// Split sizes used when the graph carries no masks of its own.
    pub split: SplitSpec,
}

fn default_restore_best() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelSpec::default(),
            lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            epochs: 300,
            patience: 50,
            seed: 0,
            restore_best: true,
            ser: SerOptions::default(),
            split: SplitSpec::default(),
        }
    }
}

/// One epoch's metrics, serialized as a JSON line in run logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Epoch index, 0-based.
    pub epoch: usize,
    /// Accuracy on the training mask.
    pub train_acc: f64,
    /// Accuracy on the validation mask.
    pub val_acc: f64,
    /// Accuracy on the test mask.
    pub test_acc: f64,
    /// Mean cross-entropy on the training mask (dropout-free pass).
    pub ce_loss: f64,
    /// Structural entropy per layer (empty when the regularizer is off).
    pub se_loss: Vec<f64>,
    /// Mean off-diagonal effective-edge fraction over layers.
    pub effective_edge_ratio: f64,
    /// Mean cross-class aggregation-mass fraction over layers.
    pub cross_class_ratio: f64,
    /// |test error − train error|.
    pub generalization_gap: f64,
}

/// A finished run: the trained model and its trace.
pub struct TrainResult {
    /// Model with the best-validation parameters restored, or the
    /// final-epoch parameters when `restore_best` is off.
    pub model: Box<dyn Model>,
    /// Per-epoch metrics, one entry per executed epoch.
    pub records: Vec<EpochRecord>,
    /// Epoch with the highest validation accuracy.
    pub best_epoch: usize,
}

/// Adam with decoupled weight decay (Loshchilov & Hutter, ICLR 2019).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
}

impl Adam {
    /// Fresh state for parameters of the given shapes.
    #[must_use]
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
        }
    }

    /// One update step. `decay_param[i]` controls whether weight decay
    /// applies to parameter `i` (mask logits and normalization
    /// parameters are customarily exempt).
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] if counts or shapes disagree with the
    /// state.
    pub fn step(
        &mut self,
        params: &mut [&mut DenseMatrix],
        grads: &[DenseMatrix],
        decay_param: &[bool],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != self.m.len()
            || decay_param.len() != self.m.len()
        {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "state holds {} parameters, got {} params / {} grads / {} decay flags",
                    self.m.len(),
                    params.len(),
                    grads.len(),
                    decay_param.len()
                ),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let p = params[i].data_mut();
            let g = grads[i].data();
            if p.len() != g.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i}: {} values vs {} gradient values", p.len(), g.len()),
                ));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let decay = if decay_param[i] { weight_decay } else { 0.0 };
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * p[k]);
            }
        }
        Ok(())
    }
}

/// Stratified masks: `labeled_per_class` training nodes per class, then
/// `n_val` validation and `n_test` test nodes from the shuffled
/// remainder. Deterministic under `seed`.
///
/// # Errors
///
/// Returns [`Error::Invalid`] when a class has too few nodes or the
/// remainder cannot cover the validation and test budgets.
pub fn make_splits(
    g: &Graph,
    labeled_per_class: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<bool>, Vec<bool>, Vec<bool>)> {
    let n = g.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];

    for class in 0..g.num_classes() {
        let mut members: Vec<usize> = (0..n).filter(|&v| g.labels()[v] == class).collect();
        if members.len() < labeled_per_class {
            return Err(Error::invalid(format!(
                "class {class} has {} nodes, cannot label {labeled_per_class} of them",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for &v in &members[..labeled_per_class] {
            train[v] = true;
        }
    }

    let mut rest: Vec<usize> = (0..n).filter(|&v| !train[v]).collect();
    if rest.len() < n_val + n_test {
        return Err(Error::invalid(format!(
            "{} unlabeled nodes cannot cover {n_val} validation + {n_test} test nodes",
            rest.len()
        )));
    }
    rest.shuffle(&mut rng);
    for &v in &rest[..n_val] {
        val[v] = true;
    }
    for &v in &rest[n_val..n_val + n_test] {
        test[v] = true;
    }
    Ok((train, val, test))
}

/// Accuracy and mean cross-entropy of a model on the masked nodes
/// (dropout-free forward pass).
///
/// # Errors
///
/// Returns [`Error::Invalid`] on an empty mask and propagates forward
/// errors.
pub fn evaluate(
    model: &dyn Model,
    ctx: &GraphContext,
    labels: &[usize],
    mask: &[bool],
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let staged = stage_params(model, &mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rec = model.forward(&mut tape, &staged, ctx, false, &mut rng)?;
    let logits = tape.value(rec.logits).clone();
    metrics_on_mask(&logits, labels, mask)
}

/// Accuracy and mean cross-entropy of precomputed logits on a mask.
///
/// # Errors
///
/// Returns [`Error::Invalid`] on an empty mask.
pub fn metrics_on_mask(logits: &DenseMatrix, labels: &[usize], mask: &[bool]) -> Result<(f64, f64)> {
    let mut count = 0usize;
    let mut correct = 0usize;
    let mut ce_sum = 0.0;
    for v in 0..logits.rows() {
        if !mask[v] {
            continue;
        }
        count += 1;
        let row = logits.row(v);
        if argmax(row) == labels[v] {
            correct += 1;
        }
        // Stable log-softmax at the label.
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        ce_sum += lse - row[labels[v]];
    }
    if count == 0 {
        return Err(Error::invalid("evaluation mask selects no nodes"));
    }
    Ok((correct as f64 / count as f64, ce_sum / count as f64))
}

/// Runs one full training session on `g` per `config`.
///
/// Masks come from the graph when it carries any training nodes, and
/// from [`make_splits`] with `config.split` otherwise. Finishes early
/// after `patience` epochs without a new best validation accuracy and
/// returns the best-validation parameters.
///
/// # Errors
///
/// Returns [`Error::Divergence`] when a loss or parameter becomes
/// non-finite, and propagates configuration and shape errors.
pub fn train(g: &Graph, config: &TrainConfig) -> Result<TrainResult> {
    let (train_mask, val_mask, test_mask) = if g.train_mask().iter().any(|&b| b) {
        (
            g.train_mask().to_vec(),
            g.val_mask().to_vec(),
            g.test_mask().to_vec(),
        )
    } else {
        make_splits(
            g,
            config.split.labeled_per_class,
            config.split.n_val,
            config.split.n_test,
            config.seed,
        )?
    };

    let ctx = GraphContext::new(g);
    let labels = Rc::new(g.labels().to_vec());
    let train_mask = Rc::new(train_mask);

    let mut model = config.model.build(
        g.feature_dim(),
        g.num_classes(),
        g.n_edges(),
        config.dropout,
        config.seed,
    )?;
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| (p.rows(), p.cols())).collect();
    let decay_param: Vec<bool> = model
        .param_names()
        .iter()
        .map(|n| !(n.contains("mask_logits") || n.contains("norm")))
        .collect();
    let mut adam = Adam::new(&shapes);
    // Separate stream from parameter init so dropout draws never alias
    // the initialization sequence.
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);

    let ser_active = config.ser.lambda > 0.0;
    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<DenseMatrix> = model.params().into_iter().cloned().collect();
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        // Optimization pass (dropout on).
        let mut tape = Tape::new();
        let staged = stage_params(model.as_ref(), &mut tape);
        let rec = model.forward(&mut tape, &staged, &ctx, true, &mut dropout_rng)?;
        let ce = tape.cross_entropy_with_logits(rec.logits, Rc::clone(&labels), Rc::clone(&train_mask))?;
        let loss = if ser_active {
            let se = layer_entropy_losses(&mut tape, &rec, &ctx, &labels, &train_mask, &config.ser)?;
            let wf = warmup_factor(epoch, config.ser.warmup_epochs);
            total_loss(&mut tape, ce, &se, config.ser.lambda, wf)?
        } else {
            ce
        };
        let loss_value = tape.value(loss).get(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became {loss_value} at epoch {epoch}"
            )));
        }
        tape.backward(loss)?;
        let grads: Vec<DenseMatrix> = staged.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        let mut params = model.params_mut();
        adam.step(&mut params, &grads, &decay_param, config.lr, config.weight_decay)?;
        drop(params);
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::Divergence(format!(
                "parameters became non-finite at epoch {epoch}"
            )));
        }

        // Measurement pass (dropout off).
        let mut eval_tape = Tape::new();
        let eval_staged = stage_params(model.as_ref(), &mut eval_tape);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
        let eval_rec = model.forward(&mut eval_tape, &eval_staged, &ctx, false, &mut eval_rng)?;
        let logits = eval_tape.value(eval_rec.logits).clone();
        let (train_acc, ce_loss) = metrics_on_mask(&logits, &labels, &train_mask)?;
        let (val_acc, _) = metrics_on_mask(&logits, &labels, &val_mask)?;
        let (test_acc, _) = metrics_on_mask(&logits, &labels, &test_mask)?;

        let se_loss: Vec<f64> = if ser_active {
            let se = layer_entropy_losses(
                &mut eval_tape,
                &eval_rec,
                &ctx,
                &labels,
                &train_mask,
                &config.ser,
            )?;
            se.iter().map(|&v| eval_tape.value(v).get(0, 0)).collect()
        } else {
            Vec::new()
        };

        let classes = node_classes(&labels, &train_mask, &logits);
        let mut eff_sum = 0.0;
        let mut cross_sum = 0.0;
        for layer in &eval_rec.layers {
            let omega = layer_mean_omega(&eval_tape, layer);
            eff_sum += effective_edge_ratio(&omega, config.ser.tau)?;
            cross_sum += cross_class_ratio(&omega, &classes)?;
        }
        let n_layers = eval_rec.layers.len() as f64;

        records.push(EpochRecord {
            epoch,
            train_acc,
            val_acc,
            test_acc,
            ce_loss,
            se_loss,
            effective_edge_ratio: eff_sum / n_layers,
            cross_class_ratio: cross_sum / n_layers,
            generalization_gap: crate::complexity::generalization_gap(
                1.0 - train_acc,
                1.0 - test_acc,
            ),
        });

        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best_params = model.params().into_iter().cloned().collect();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    if config.restore_best {
        for (dst, src) in model.params_mut().into_iter().zip(&best_params) {
            *dst = src.clone();
        }
    }
    Ok(TrainResult {
        model,
        records,
        best_epoch,
    })
}
