//! Transformer encoder classifier built directly on the autodiff tape.
//!
//! Post-norm residual blocks: `x <- LN(x + Attn(x))`, `x <- LN(x + FF(x))`,
//! GELU feed-forward, multi-head attention over contiguous head slices.
//! Position 0 carries the classification token; its post-block hidden state
//! is recorded for every physical layer so intermediate representations can
//! be matched during distillation.

use serde::{Deserialize, Serialize};

use crate::error::{KdError, Result};
use crate::numkit::{ops, ParamId, Tape, Tensor, Var};
use crate::sps::{resolve_layer_params, ParamStore, SharingPlan};

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub num_physical_layers: usize,
    pub num_classes: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("num_physical_layers", self.num_physical_layers),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(KdError::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(KdError::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Handles for one stored encoder layer. Copyable: these are ids into a
/// `TensorStore`, not the weights themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
    pub ln1_scale: ParamId,
    pub ln1_shift: ParamId,
    pub ln2_scale: ParamId,
    pub ln2_shift: ParamId,
}

impl LayerParams {
    /// The query/key role shuffle: W_Q and W_K (and biases) trade places.
    pub fn swap_qk(self) -> Self {
        LayerParams {
            w_q: self.w_k,
            b_q: self.b_k,
            w_k: self.w_q,
            b_k: self.b_q,
            ..self
        }
    }

    pub fn all_ids(&self) -> [ParamId; 16] {
        [
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o,
            self.w_ff1, self.b_ff1, self.w_ff2, self.b_ff2, self.ln1_scale, self.ln1_shift,
            self.ln2_scale, self.ln2_shift,
        ]
    }
}

/// Embeddings, stored layer sets, and the classification head.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layer_sets: Vec<LayerParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Result of a plain (inference) forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Post-block hidden state at position 0, one per physical layer.
    pub hidden_states: Vec<Vec<f64>>,
}

/// Tape handles from a traced forward pass; used to build training losses.
pub struct TracedForward {
    pub logits: Var,
    pub hidden_states: Vec<Var>,
}

/// softmax(Q Kᵀ / sqrt(d_k)) V for a single head, untraced.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, dk) = q.dims2();
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(KdError::shape(
            "scaled_dot_attention",
            format!("{:?}, {:?}, {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let kt = ops::transpose_slices(k.data(), n, dk);
    let mut scores = ops::matmul_slices(q.data(), n, dk, &kt, n);
    let scale = 1.0 / (dk as f64).sqrt();
    for s in &mut scores {
        *s *= scale;
    }
    let attn = ops::softmax_rows_slices(&scores, n, n)?;
    let out = ops::matmul_slices(&attn, n, n, v.data(), dk);
    Tensor::new(vec![n, dk], out)
}

fn validate_tokens(config: &EncoderConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(KdError::invalid("encoder_forward", "empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(KdError::invalid(
            "encoder_forward",
            format!("sequence length {} exceeds max {}", tokens.len(), config.max_seq_len),
        ));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(KdError::invalid(
            "encoder_forward",
            format!("token id {bad} outside vocabulary of {}", config.vocab_size),
        ));
    }
    Ok(())
}

fn encoder_block(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LayerParams,
    x: Var,
    config: &EncoderConfig,
) -> Result<Var> {
    let dk = config.head_dim();

    let w_q = tape.param(&store.tensors, layer.w_q);
    let b_q = tape.param(&store.tensors, layer.b_q);
    let w_k = tape.param(&store.tensors, layer.w_k);
    let b_k = tape.param(&store.tensors, layer.b_k);
    let w_v = tape.param(&store.tensors, layer.w_v);
    let b_v = tape.param(&store.tensors, layer.b_v);

    let q_all = tape.matmul(x, w_q)?;
    let q_all = tape.add_row_bias(q_all, b_q)?;
    let k_all = tape.matmul(x, w_k)?;
    let k_all = tape.add_row_bias(k_all, b_k)?;
    let v_all = tape.matmul(x, w_v)?;
    let v_all = tape.add_row_bias(v_all, b_v)?;

    let mut head_outputs = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let q = tape.slice_cols(q_all, h * dk, dk)?;
        let k = tape.slice_cols(k_all, h * dk, dk)?;
        let v = tape.slice_cols(v_all, h * dk, dk)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        head_outputs.push(tape.matmul(attn, v)?);
    }
    let context = tape.concat_cols(&head_outputs)?;

    let w_o = tape.param(&store.tensors, layer.w_o);
    let b_o = tape.param(&store.tensors, layer.b_o);
    let attn_out = tape.matmul(context, w_o)?;
    let attn_out = tape.add_row_bias(attn_out, b_o)?;

    let ln1_scale = tape.param(&store.tensors, layer.ln1_scale);
    let ln1_shift = tape.param(&store.tensors, layer.ln1_shift);
    let residual = tape.add(x, attn_out)?;
    let x = tape.layer_norm_rows(residual, ln1_scale, ln1_shift, LAYER_NORM_EPS)?;

    let w_ff1 = tape.param(&store.tensors, layer.w_ff1);
    let b_ff1 = tape.param(&store.tensors, layer.b_ff1);
    let w_ff2 = tape.param(&store.tensors, layer.w_ff2);
    let b_ff2 = tape.param(&store.tensors, layer.b_ff2);
    let hidden = tape.matmul(x, w_ff1)?;
    let hidden = tape.add_row_bias(hidden, b_ff1)?;
    let hidden = tape.gelu(hidden);
    let ff_out = tape.matmul(hidden, w_ff2)?;
    let ff_out = tape.add_row_bias(ff_out, b_ff2)?;

    let ln2_scale = tape.param(&store.tensors, layer.ln2_scale);
    let ln2_shift = tape.param(&store.tensors, layer.ln2_shift);
    let residual = tape.add(x, ff_out)?;
    tape.layer_norm_rows(residual, ln2_scale, ln2_shift, LAYER_NORM_EPS)
}

/// Record a full forward pass on `tape`, returning handles to the logits and
/// per-layer classification-position hidden states.
pub fn forward_traced(
    tape: &mut Tape,
    store: &ParamStore,
    plan: &SharingPlan,
    tokens: &[usize],
) -> Result<TracedForward> {
    let config = &store.config;
    validate_tokens(config, tokens)?;
    if plan.num_param_sets != store.model.layer_sets.len() {
        return Err(KdError::invalid(
            "encoder_forward",
            format!(
                "plan expects {} parameter sets, store has {}",
                plan.num_param_sets,
                store.model.layer_sets.len()
            ),
        ));
    }

    let tok_emb = tape.param(&store.tensors, store.model.tok_emb);
    let pos_emb = tape.param(&store.tensors, store.model.pos_emb);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.gather_rows(tok_emb, tokens)?;
    let pos = tape.gather_rows(pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let mut hidden_states = Vec::with_capacity(plan.len());
    for layer_ix in 0..plan.len() {
        let layer = resolve_layer_params(store, plan, layer_ix);
        x = encoder_block(tape, store, &layer, x, config)?;
        hidden_states.push(tape.row(x, 0)?);
    }

    let cls = tape.row(x, 0)?;
    let cls_mat = tape.reshape(cls, vec![1, config.hidden_dim])?;
    let head_w = tape.param(&store.tensors, store.model.head_w);
    let head_b = tape.param(&store.tensors, store.model.head_b);
    let logits_mat = tape.matmul(cls_mat, head_w)?;
    let logits_mat = tape.add_row_bias(logits_mat, head_b)?;
    let logits = tape.reshape(logits_mat, vec![config.num_classes])?;

    Ok(TracedForward { logits, hidden_states })
}

/// Pure inference: run the traced forward on a scratch tape and extract the
/// values. Output depends only on (store, plan, tokens).
pub fn encoder_forward(
    store: &ParamStore,
    plan: &SharingPlan,
    tokens: &[usize],
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let traced = forward_traced(&mut tape, store, plan, tokens)?;
    Ok(ForwardOutput {
        logits: tape.value(traced.logits).to_vec(),
        hidden_states: traced
            .hidden_states
            .iter()
            .map(|&h| tape.value(h).to_vec())
            .collect(),
    })
}
