//! Graph Transformer: stacked multi-head self-attention layers with
//! residual connections, layer normalization, and a position-wise
//! feed-forward network, followed by a linear classifier.
//!
//! Per layer and head, scores are scaled dot products
//! `(Q h_v)ᵀ(K h_u) / √d_δ`. In `Neighborhood` scope the softmax runs
//! over `{v} ∪ N(v)` (self-loops are always candidates), so the
//! aggregation stays on the graph's edge support; in `Global` scope every
//! node attends to every node. A learned input projection lifts raw
//! features to the model width and a learned output matrix maps the final
//! state to class logits. No positional encodings are used.

use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

use super::{
    glorot, init_rng, AggregationHead, ForwardRecord, GraphContext, LayerAggregation, Model,
};

/// Which nodes each node may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScope {
    /// Softmax over the self-loop-augmented neighborhood (default).
    Neighborhood,
    /// Softmax over all nodes (dense `n × n` attention).
    Global,
}

/// Hyperparameters of [`GtModel`].
#[derive(Debug, Clone)]
pub struct GtConfig {
    /// Model width `d̃` (must be divisible by `heads`).
    pub d_model: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Number of transformer layers.
    pub layers: usize,
    /// Dropout rate on each layer's input during training.
    pub dropout: f64,
    /// Attention scope.
    pub scope: AttentionScope,
}

impl Default for GtConfig {
    fn default() -> Self {
        GtConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            dropout: 0.5,
            scope: AttentionScope::Neighborhood,
        }
    }
}

/// One transformer layer's parameters.
struct Layer {
    /// Per-head `d̃ × d_δ` projections, in q/k/v triples.
    qkv: Vec<[DenseMatrix; 3]>,
    o: DenseMatrix,
    ffn1: DenseMatrix,
    ffn2: DenseMatrix,
    norm1_gain: DenseMatrix,
    norm1_bias: DenseMatrix,
    norm2_gain: DenseMatrix,
    norm2_bias: DenseMatrix,
}

impl Layer {
    fn new(d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let dh = d_model / heads;
        Layer {
            qkv: (0..heads)
                .map(|_| {
                    [
                        glorot(d_model, dh, rng),
                        glorot(d_model, dh, rng),
                        glorot(d_model, dh, rng),
                    ]
                })
                .collect(),
            o: glorot(d_model, d_model, rng),
            ffn1: glorot(d_model, 2 * d_model, rng),
            ffn2: glorot(2 * d_model, d_model, rng),
            norm1_gain: DenseMatrix::from_fn(1, d_model, |_, _| 1.0),
            norm1_bias: DenseMatrix::zeros(1, d_model),
            norm2_gain: DenseMatrix::from_fn(1, d_model, |_, _| 1.0),
            norm2_bias: DenseMatrix::zeros(1, d_model),
        }
    }

    /// Parameters per layer on the staging tape: 3 per head plus o,
    /// ffn1/ffn2, and the two norm gain/bias pairs.
    fn n_params(heads: usize) -> usize {
        3 * heads + 7
    }
}

/// Graph Transformer parameters.
pub struct GtModel {
    config: GtConfig,
    w_in: DenseMatrix,
    layers: Vec<Layer>,
    w_out: DenseMatrix,
}

impl GtModel {
    /// Initializes projections Glorot-uniform (norm gains 1, biases 0),
    /// deterministically from `seed`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Invalid`] if `d_model` is not divisible by
    /// `heads` or any dimension is zero.
    pub fn new(config: &GtConfig, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if config.d_model == 0 || config.heads == 0 || config.layers == 0 {
            return Err(Error::invalid("d_model, heads, and layers must be positive"));
        }
        if !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be divisible by heads {}",
                config.d_model, config.heads
            )));
        }
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let mut rng = init_rng(seed);
        let w_in = glorot(in_dim, config.d_model, &mut rng);
        let layers: Vec<Layer> = (0..config.layers)
            .map(|_| Layer::new(config.d_model, config.heads, &mut rng))
            .collect();
        let w_out = glorot(config.d_model, out_dim, &mut rng);
        Ok(GtModel {
            config: config.clone(),
            w_in,
            layers,
            w_out,
        })
    }

    /// Model configuration.
    #[must_use]
    pub fn config(&self) -> &GtConfig {
        &self.config
    }
}

impl Model for GtModel {
    fn arch(&self) -> &'static str {
        "gt"
    }

    fn params(&self) -> Vec<&DenseMatrix> {
        let mut out: Vec<&DenseMatrix> = vec![&self.w_in];
        for l in &self.layers {
            for qkv in &l.qkv {
                out.extend(qkv.iter());
            }
            out.extend([
                &l.o,
                &l.ffn1,
                &l.ffn2,
                &l.norm1_gain,
                &l.norm1_bias,
                &l.norm2_gain,
                &l.norm2_bias,
            ]);
        }
        out.push(&self.w_out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = vec![&mut self.w_in];
        for l in &mut self.layers {
            for qkv in &mut l.qkv {
                out.extend(qkv.iter_mut());
            }
            out.extend([
                &mut l.o,
                &mut l.ffn1,
                &mut l.ffn2,
                &mut l.norm1_gain,
                &mut l.norm1_bias,
                &mut l.norm2_gain,
                &mut l.norm2_bias,
            ]);
        }
        out.push(&mut self.w_out);
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = vec!["w_in".to_string()];
        for (k, l) in self.layers.iter().enumerate() {
            for h in 0..l.qkv.len() {
                out.push(format!("l{k}_h{h}_q"));
                out.push(format!("l{k}_h{h}_k"));
                out.push(format!("l{k}_h{h}_v"));
            }
            for suffix in [
                "o",
                "ffn1",
                "ffn2",
                "norm1_gain",
                "norm1_bias",
                "norm2_gain",
                "norm2_bias",
            ] {
                out.push(format!("l{k}_{suffix}"));
            }
        }
        out.push("w_out".to_string());
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
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let x = tape.constant(ctx.features.clone());
        let mut h = tape.matmul(x, staged[0])?;

        let mut hidden = Vec::with_capacity(self.config.layers + 1);
        let mut layer_records = Vec::with_capacity(self.config.layers);
        for k in 0..self.config.layers {
            let base = 1 + k * Layer::n_params(heads);
            let mut hd = h;
            if training {
                hd = tape.dropout(hd, self.config.dropout, rng)?;
            }

            let mut head_outs = Vec::with_capacity(heads);
            let mut head_records = Vec::with_capacity(heads);
            for hh in 0..heads {
                let q = staged[base + 3 * hh];
                let kk = staged[base + 3 * hh + 1];
                let v = staged[base + 3 * hh + 2];
                let qh = tape.matmul(hd, q)?;
                let kh = tape.matmul(hd, kk)?;
                let vh = tape.matmul(hd, v)?;
                match self.config.scope {
                    AttentionScope::Neighborhood => {
                        let s = tape.edge_dot_scores(qh, kh, Rc::clone(&ctx.pattern), scale)?;
                        let alpha = tape.masked_row_softmax(s, Rc::clone(&ctx.pattern))?;
                        head_outs.push(tape.edge_aggregate(alpha, vh, Rc::clone(&ctx.pattern))?);
                        head_records.push(AggregationHead::EdgeValues {
                            var: alpha,
                            pattern: Rc::clone(&ctx.pattern),
                        });
                    }
                    AttentionScope::Global => {
                        let s = tape.matmul_nt(qh, kh)?;
                        let s = tape.scale(s, scale);
                        let alpha = tape.row_softmax(s);
                        head_outs.push(tape.matmul(alpha, vh)?);
                        head_records.push(AggregationHead::Dense(alpha));
                    }
                }
            }
            let cat = tape.concat_cols(&head_outs)?;
            let attn = tape.matmul(cat, staged[base + 3 * heads])?;

            let res1 = tape.add(h, attn)?;
            let u = tape.layer_norm(
                res1,
                staged[base + 3 * heads + 3],
                staged[base + 3 * heads + 4],
            )?;
            let f1 = tape.matmul(u, staged[base + 3 * heads + 1])?;
            let f1 = tape.relu(f1);
            let f2 = tape.matmul(f1, staged[base + 3 * heads + 2])?;
            let res2 = tape.add(u, f2)?;
            h = tape.layer_norm(
                res2,
                staged[base + 3 * heads + 5],
                staged[base + 3 * heads + 6],
            )?;

            hidden.push(h);
            layer_records.push(LayerAggregation {
                heads: head_records,
            });
        }

        let logits = tape.matmul(h, staged[staged.len() - 1])?;
        hidden.push(logits);
        Ok(ForwardRecord {
            logits,
            hidden,
            layers: layer_records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::LAYER_NORM_EPS;
    use crate::graph::{sbm_generate, Graph};
    use crate::models::stage_params;
    use rand::{Rng, SeedableRng};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn eval_forward(model: &GtModel, g: &Graph) -> (Tape, ForwardRecord) {
        let ctx = GraphContext::new(g);
        let mut tape = Tape::new();
        let staged = stage_params(model, &mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = model
            .forward(&mut tape, &staged, &ctx, false, &mut rng)
            .unwrap();
        (tape, rec)
    }

    fn small_config(scope: AttentionScope) -> GtConfig {
        GtConfig {
            d_model: 6,
            heads: 2,
            layers: 1,
            dropout: 0.0,
            scope,
        }
    }

    /// Reference layer norm matching the recorded op.
    fn layer_norm_ref(x: &DenseMatrix, gain: &DenseMatrix, bias: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
            let row = x.row(i);
            let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
            let var: f64 =
                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            (x.get(i, j) - mean) / (var + LAYER_NORM_EPS).sqrt() * gain.get(0, j) + bias.get(0, j)
        })
    }

    #[test]
    fn rejects_indivisible_head_split() {
        let err = GtModel::new(
            &GtConfig {
                d_model: 7,
                heads: 2,
                layers: 1,
                dropout: 0.0,
                scope: AttentionScope::Neighborhood,
            },
            3,
            2,
            1,
        );
        assert!(matches!(err, Err(Error::Invalid(_))));
    }

    #[test]
    fn zero_value_and_output_projections_leave_norm_ffn_path() {
        // With V = O = 0 the attention branch contributes nothing:
        // h¹ = Norm₂(u + FFN(u)) where u = Norm₁(X·W_in).
        let g = sbm_generate(&[4, 4], 0.5, 0.3, 3, 1.0, 67).unwrap();
        let mut model = GtModel::new(&small_config(AttentionScope::Neighborhood), 3, 2, 19).unwrap();
        {
            let names = model.param_names();
            for (name, p) in names.iter().zip(model.params_mut()) {
                if name.ends_with("_v") || name.ends_with("_o") {
                    *p = DenseMatrix::zeros(p.rows(), p.cols());
                }
            }
        }
        let (tape, rec) = eval_forward(&model, &g);

        let h0 = g.features().matmul(&model.w_in).unwrap();
        let l = &model.layers[0];
        let u = layer_norm_ref(&h0, &l.norm1_gain, &l.norm1_bias);
        let f = u
            .matmul(&l.ffn1)
            .unwrap()
            .map(|v| v.max(0.0))
            .matmul(&l.ffn2)
            .unwrap();
        let mut res = u.clone();
        res.add_assign(&f);
        let h1 = layer_norm_ref(&res, &l.norm2_gain, &l.norm2_bias);
        let logits_ref = h1.matmul(&model.w_out).unwrap();
        let got = tape.value(rec.logits);
        for (a, b) in got.data().iter().zip(logits_ref.data()) {
            assert_close(*a, *b, 1e-10);
        }
    }

    #[test]
    fn single_node_attends_to_itself() {
        let x = DenseMatrix::from_vec(1, 3, vec![0.4, -1.0, 2.0]).unwrap();
        let g = Graph::new(x, vec![], vec![0], 1).unwrap();
        let model = GtModel::new(&small_config(AttentionScope::Neighborhood), 3, 2, 23).unwrap();
        let (tape, rec) = eval_forward(&model, &g);
        for head in &rec.layers[0].heads {
            let m = head.to_csr(&tape);
            assert_eq!(m.nnz(), 1);
            assert_close(m.values()[0], 1.0, 1e-15);
        }
        assert!(tape.value(rec.logits).all_finite());
    }

    #[test]
    fn neighborhood_and_global_scopes_agree_on_complete_graph() {
        let n = 5;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                edges.push((u, v));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0));
        let g = Graph::new(x, edges, vec![0; n], 1).unwrap();

        let local = GtModel::new(&small_config(AttentionScope::Neighborhood), 4, 3, 29).unwrap();
        let mut global = GtModel::new(&small_config(AttentionScope::Global), 4, 3, 29).unwrap();
        for (dst, src) in global.params_mut().into_iter().zip(local.params()) {
            *dst = src.clone();
        }
        let (tl, rl) = eval_forward(&local, &g);
        let (tg, rg) = eval_forward(&global, &g);
        for (a, b) in tl
            .value(rl.logits)
            .data()
            .iter()
            .zip(tg.value(rg.logits).data())
        {
            assert_close(*a, *b, 1e-10);
        }
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let g = sbm_generate(&[5, 5], 0.5, 0.3, 3, 1.0, 71).unwrap();
        let mut model = GtModel::new(&small_config(AttentionScope::Neighborhood), 3, 2, 31).unwrap();
        {
            let names = model.param_names();
            for (name, p) in names.iter().zip(model.params_mut()) {
                if name.ends_with("_q") {
                    *p = DenseMatrix::zeros(p.rows(), p.cols());
                }
            }
        }
        let (tape, rec) = eval_forward(&model, &g);
        let pattern = g.edge_pattern();
        for head in &rec.layers[0].heads {
            let m = head.to_csr(&tape);
            for v in 0..g.n_nodes() {
                let seg = pattern.row_range(v).len() as f64;
                for (_, w) in m.row_entries(v) {
                    assert_close(w, 1.0 / seg, 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_in_both_scopes() {
        let g = sbm_generate(&[5, 5], 0.5, 0.3, 3, 1.0, 73).unwrap();
        for scope in [AttentionScope::Neighborhood, AttentionScope::Global] {
            let model = GtModel::new(&small_config(scope), 3, 2, 37).unwrap();
            let (tape, rec) = eval_forward(&model, &g);
            for layer in &rec.layers {
                for head in &layer.heads {
                    let m = head.to_csr(&tape);
                    for v in 0..g.n_nodes() {
                        let mut sum = 0.0;
                        for (_, w) in m.row_entries(v) {
                            assert!(w >= 0.0);
                            sum += w;
                        }
                        assert_close(sum, 1.0, 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn global_scope_has_no_edge_pattern_weights() {
        let g = sbm_generate(&[4, 4], 0.5, 0.3, 3, 1.0, 79).unwrap();
        let model = GtModel::new(&small_config(AttentionScope::Global), 3, 2, 41).unwrap();
        let ctx = GraphContext::new(&g);
        let mut tape = Tape::new();
        let staged = stage_params(&model, &mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = model
            .forward(&mut tape, &staged, &ctx, false, &mut rng)
            .unwrap();
        assert!(matches!(
            rec.layers[0].mean_edge_var(&mut tape),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = sbm_generate(&[3, 3], 0.7, 0.4, 3, 1.0, 83).unwrap();
        let config = GtConfig {
            d_model: 4,
            heads: 2,
            layers: 1,
            dropout: 0.0,
            scope: AttentionScope::Neighborhood,
        };
        let model = GtModel::new(&config, 3, 2, 43).unwrap();
        let ctx = GraphContext::new(&g);
        let labels = Rc::new(g.labels().to_vec());
        let mask = Rc::new(vec![true; g.n_nodes()]);

        let loss_of = |params: &[DenseMatrix]| -> (Tape, Vec<Var>, Var) {
            let mut m = GtModel::new(&config, 3, 2, 43).unwrap();
            for (dst, src) in m.params_mut().into_iter().zip(params) {
                *dst = src.clone();
            }
            let mut tape = Tape::new();
            let staged = stage_params(&m, &mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let rec = m.forward(&mut tape, &staged, &ctx, false, &mut rng).unwrap();
            let loss = tape
                .cross_entropy_with_logits(rec.logits, Rc::clone(&labels), Rc::clone(&mask))
                .unwrap();
            (tape, staged, loss)
        };

        let base: Vec<DenseMatrix> = model.params().into_iter().cloned().collect();
        let (mut tape, staged, loss) = loss_of(&base);
        tape.backward(loss).unwrap();
        let grads: Vec<DenseMatrix> = staged.iter().map(|&v| tape.grad_or_zeros(v)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (which, p) in base.iter().enumerate() {
            for _ in 0..3 {
                let i = rng.gen_range(0..p.rows());
                let j = rng.gen_range(0..p.cols());
                let h = 1e-5;
                let mut plus = base.clone();
                plus[which].set(i, j, p.get(i, j) + h);
                let mut minus = base.clone();
                minus[which].set(i, j, p.get(i, j) - h);
                let (tp, _, lp) = loss_of(&plus);
                let (tm, _, lm) = loss_of(&minus);
                let fd = (tp.value(lp).get(0, 0) - tm.value(lm).get(0, 0)) / (2.0 * h);
                let ad = grads[which].get(i, j);
                assert!(
                    (ad - fd).abs() / fd.abs().max(1.0) < 1e-4,
                    "param {which} ({i},{j}): ad {ad} vs fd {fd}"
                );
            }
        }
    }
}
