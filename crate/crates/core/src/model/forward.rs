//! Graph-building forward passes: batched encoder/decoder, the category head
//! on the leading global token, and greedy decoding.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::{
    AttentionParams, DecoderLayerParams, EncoderLayerParams, FeedForwardParams, LayerNormParams,
    ModelConfig, ModelError, ModelParameters,
};
use crate::tensor::{Real, Tape, Var};
use crate::tokenizer::{BOS_ID, CLS_ID, EOS_ID};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Var,
    pub bk: Var,
    pub bv: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerVars {
    pub ln1: LayerNormVars,
    pub attn: AttentionVars,
    pub ln2: LayerNormVars,
    pub ffn: FeedForwardVars,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerVars {
    pub ln1: LayerNormVars,
    pub self_attn: AttentionVars,
    pub ln2: LayerNormVars,
    pub cross_attn: AttentionVars,
    pub ln3: LayerNormVars,
    pub ffn: FeedForwardVars,
}

/// Tape handles for every parameter array, mirroring [`ModelParameters`].
pub struct ParamVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub encoder_layers: Vec<EncoderLayerVars>,
    pub encoder_norm: LayerNormVars,
    pub decoder_layers: Vec<DecoderLayerVars>,
    pub decoder_norm: LayerNormVars,
    pub output_projection: Var,
    pub aux_head_weight: Var,
    pub aux_head_bias: Var,
}

/// Copy parameters onto a tape as leaves, so gradients can be read back.
pub fn stage_params<T: Real>(tape: &Tape<T>, params: &ModelParameters<T>) -> ParamVars {
    let ln = |p: &LayerNormParams<T>| LayerNormVars {
        gamma: tape.leaf(p.gamma.clone()),
        beta: tape.leaf(p.beta.clone()),
    };
    let attn = |p: &AttentionParams<T>| AttentionVars {
        wq: tape.leaf(p.wq.clone()),
        wk: tape.leaf(p.wk.clone()),
        wv: tape.leaf(p.wv.clone()),
        wo: tape.leaf(p.wo.clone()),
        bq: tape.leaf(p.bq.clone()),
        bk: tape.leaf(p.bk.clone()),
        bv: tape.leaf(p.bv.clone()),
        bo: tape.leaf(p.bo.clone()),
    };
    let ffn = |p: &FeedForwardParams<T>| FeedForwardVars {
        w1: tape.leaf(p.w1.clone()),
        b1: tape.leaf(p.b1.clone()),
        w2: tape.leaf(p.w2.clone()),
        b2: tape.leaf(p.b2.clone()),
    };
    ParamVars {
        token_embedding: tape.leaf(params.token_embedding.clone()),
        position_embedding: tape.leaf(params.position_embedding.clone()),
        encoder_layers: params
            .encoder_layers
            .iter()
            .map(|l| EncoderLayerVars { ln1: ln(&l.ln1), attn: attn(&l.attn), ln2: ln(&l.ln2), ffn: ffn(&l.ffn) })
            .collect(),
        encoder_norm: ln(&params.encoder_norm),
        decoder_layers: params
            .decoder_layers
            .iter()
            .map(|l| DecoderLayerVars {
                ln1: ln(&l.ln1),
                self_attn: attn(&l.self_attn),
                ln2: ln(&l.ln2),
                cross_attn: attn(&l.cross_attn),
                ln3: ln(&l.ln3),
                ffn: ffn(&l.ffn),
            })
            .collect(),
        decoder_norm: ln(&params.decoder_norm),
        output_projection: tape.leaf(params.output_projection.clone()),
        aux_head_weight: tape.leaf(params.aux_head_weight.clone()),
        aux_head_bias: tape.leaf(params.aux_head_bias.clone()),
    }
}

/// Read gradients for every staged parameter back out of the tape, packed in
/// a parameter-shaped container (zeros where a parameter was unused).
pub fn collect_grads<T: Real>(
    tape: &Tape<T>,
    vars: &ParamVars,
    like: &ModelParameters<T>,
) -> ModelParameters<T> {
    let take = |v: Var, shape: &Array2<T>| {
        tape.grad(v).unwrap_or_else(|| Array2::zeros(shape.dim()))
    };
    let ln = |v: &LayerNormVars, p: &LayerNormParams<T>| LayerNormParams {
        gamma: take(v.gamma, &p.gamma),
        beta: take(v.beta, &p.beta),
    };
    let attn = |v: &AttentionVars, p: &AttentionParams<T>| AttentionParams {
        wq: take(v.wq, &p.wq),
        wk: take(v.wk, &p.wk),
        wv: take(v.wv, &p.wv),
        wo: take(v.wo, &p.wo),
        bq: take(v.bq, &p.bq),
        bk: take(v.bk, &p.bk),
        bv: take(v.bv, &p.bv),
        bo: take(v.bo, &p.bo),
    };
    let ffn = |v: &FeedForwardVars, p: &FeedForwardParams<T>| FeedForwardParams {
        w1: take(v.w1, &p.w1),
        b1: take(v.b1, &p.b1),
        w2: take(v.w2, &p.w2),
        b2: take(v.b2, &p.b2),
    };
    ModelParameters {
        token_embedding: take(vars.token_embedding, &like.token_embedding),
        position_embedding: take(vars.position_embedding, &like.position_embedding),
        encoder_layers: vars
            .encoder_layers
            .iter()
            .zip(&like.encoder_layers)
            .map(|(v, p)| EncoderLayerParams {
                ln1: ln(&v.ln1, &p.ln1),
                attn: attn(&v.attn, &p.attn),
                ln2: ln(&v.ln2, &p.ln2),
                ffn: ffn(&v.ffn, &p.ffn),
            })
            .collect(),
        encoder_norm: ln(&vars.encoder_norm, &like.encoder_norm),
        decoder_layers: vars
            .decoder_layers
            .iter()
            .zip(&like.decoder_layers)
            .map(|(v, p)| DecoderLayerParams {
                ln1: ln(&v.ln1, &p.ln1),
                self_attn: attn(&v.self_attn, &p.self_attn),
                ln2: ln(&v.ln2, &p.ln2),
                cross_attn: attn(&v.cross_attn, &p.cross_attn),
                ln3: ln(&v.ln3, &p.ln3),
                ffn: ffn(&v.ffn, &p.ffn),
            })
            .collect(),
        decoder_norm: ln(&vars.decoder_norm, &like.decoder_norm),
        output_projection: take(vars.output_projection, &like.output_projection),
        aux_head_weight: take(vars.aux_head_weight, &like.aux_head_weight),
        aux_head_bias: take(vars.aux_head_bias, &like.aux_head_bias),
    }
}

/// A padded batch of equal-length rows, flattened row-major.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    /// Per flattened position; false marks padding.
    pub real: Vec<bool>,
    pub any_padding: bool,
}

impl BatchInput {
    pub fn from_sequences(seqs: &[&[u32]], pad_id: u32) -> BatchInput {
        let batch = seqs.len();
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(batch * seq_len);
        let mut real = Vec::with_capacity(batch * seq_len);
        let mut any_padding = false;
        for seq in seqs {
            for &id in *seq {
                ids.push(id as usize);
                real.push(true);
            }
            for _ in seq.len()..seq_len {
                ids.push(pad_id as usize);
                real.push(false);
                any_padding = true;
            }
        }
        BatchInput { ids, batch, seq_len, real, any_padding }
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.batch == 0 || self.seq_len == 0 {
            return Err(ModelError::EmptyInput);
        }
        if self.seq_len > cfg.max_len {
            return Err(ModelError::SequenceTooLong { len: self.seq_len, max: cfg.max_len });
        }
        for &id in &self.ids {
            if id >= cfg.vocab_size {
                return Err(ModelError::IdOutOfRange { id: id as u32, vocab: cfg.vocab_size });
            }
        }
        Ok(())
    }
}

/// Hooks threaded through a forward pass: a dropout RNG when training, and an
/// optional sink that captures every attention distribution.
#[derive(Default)]
pub struct ForwardOpts<'a, T: Real> {
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub attn_trace: Option<&'a mut Vec<Array2<T>>>,
}

impl<T: Real> ForwardOpts<'_, T> {
    pub fn eval() -> Self {
        ForwardOpts { dropout_rng: None, attn_trace: None }
    }
}

pub struct EncodedBatch {
    /// (batch * seq_len, d_model), already final-normalized.
    pub hidden: Var,
    pub batch: usize,
    pub seq_len: usize,
    /// Copied from the input batch; drives cross-attention padding masks.
    pub real: Vec<bool>,
}

impl EncodedBatch {
    /// Row indices of each sequence's leading token in the flattened hidden.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len).collect()
    }
}

fn maybe_dropout<T: Real>(tape: &Tape<T>, x: Var, cfg: &ModelConfig, opts: &mut ForwardOpts<T>) -> Var {
    match opts.dropout_rng.as_deref_mut() {
        Some(rng) if cfg.dropout > 0.0 => tape.dropout(x, cfg.dropout, rng),
        _ => x,
    }
}

fn embed<T: Real>(
    tape: &Tape<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    input: &BatchInput,
    opts: &mut ForwardOpts<T>,
) -> Var {
    let tokens = tape.gather_rows(vars.token_embedding, &input.ids);
    let pos_idx: Vec<usize> = (0..input.batch).flat_map(|_| 0..input.seq_len).collect();
    let positions = tape.gather_rows(vars.position_embedding, &pos_idx);
    let x = tape.add(tokens, positions);
    maybe_dropout(tape, x, cfg, opts)
}

/// Multi-head attention. `q_in` is (batch*lq, d); `kv_in` is (batch*lk, d);
/// `masks` holds one additive (lq, lk) mask per batch item.
fn multi_head_attention<T: Real>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    attn: &AttentionVars,
    q_in: Var,
    kv_in: Var,
    batch: usize,
    lq: usize,
    lk: usize,
    masks: Option<&[Array2<T>]>,
    opts: &mut ForwardOpts<T>,
) -> Var {
    let d = cfg.d_model;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let q = tape.linear(q_in, attn.wq, Some(attn.bq));
    let k = tape.linear(kv_in, attn.wk, Some(attn.bk));
    let v = tape.linear(kv_in, attn.wv, Some(attn.bv));

    let mut per_item = Vec::with_capacity(batch);
    for b in 0..batch {
        let qb = tape.slice_rows(q, b * lq, (b + 1) * lq);
        let kb = tape.slice_rows(k, b * lk, (b + 1) * lk);
        let vb = tape.slice_rows(v, b * lk, (b + 1) * lk);
        let mask = masks.map(|m| &m[b]);
        let mut heads_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(qb, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(kb, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(vb, h * dh, (h + 1) * dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scaled, mask);
            if let Some(trace) = opts.attn_trace.as_deref_mut() {
                trace.push(tape.value(probs).clone());
            }
            heads_out.push(tape.matmul(probs, vh));
        }
        per_item.push(tape.concat_cols(&heads_out));
    }
    let merged = tape.concat_rows(&per_item);
    tape.linear(merged, attn.wo, Some(attn.bo))
}

fn feed_forward<T: Real>(
    tape: &Tape<T>,
    ffn: &FeedForwardVars,
    x: Var,
) -> Var {
    let h = tape.linear(x, ffn.w1, Some(ffn.b1));
    let h = tape.gelu(h);
    tape.linear(h, ffn.w2, Some(ffn.b2))
}

/// Additive key-padding masks, one (lq, lk) matrix per batch item; `None`
/// when nothing is padded.
fn padding_masks<T: Real>(real_k: &[bool], batch: usize, lq: usize, lk: usize) -> Option<Vec<Array2<T>>> {
    let neg = T::from_f64(MASK_NEG);
    let mut masks = Vec::with_capacity(batch);
    let mut any = false;
    for b in 0..batch {
        let mut m = Array2::zeros((lq, lk));
        for j in 0..lk {
            if !real_k[b * lk + j] {
                any = true;
                for i in 0..lq {
                    m[[i, j]] = neg;
                }
            }
        }
        masks.push(m);
    }
    any.then_some(masks)
}

/// Causal masks (positions attend only to <= their index), merged with key
/// padding when present.
fn causal_masks<T: Real>(target: &BatchInput) -> Vec<Array2<T>> {
    let neg = T::from_f64(MASK_NEG);
    let l = target.seq_len;
    let mut base = Array2::zeros((l, l));
    for i in 0..l {
        for j in i + 1..l {
            base[[i, j]] = neg;
        }
    }
    (0..target.batch)
        .map(|b| {
            let mut m = base.clone();
            if target.any_padding {
                for j in 0..l {
                    if !target.real[b * l + j] {
                        for i in 0..l {
                            m[[i, j]] = neg;
                        }
                    }
                }
            }
            m
        })
        .collect()
}

/// Pre-norm encoder over a batch: embeddings, then per layer self-attention
/// and feed-forward with residuals, then a final normalization.
pub fn encode_batch<T: Real>(
    tape: &Tape<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    input: &BatchInput,
    opts: &mut ForwardOpts<T>,
) -> Result<EncodedBatch, ModelError> {
    input.validate(cfg)?;
    let masks = if input.any_padding {
        padding_masks::<T>(&input.real, input.batch, input.seq_len, input.seq_len)
    } else {
        None
    };
    let mut x = embed(tape, vars, cfg, input, opts);
    for layer in &vars.encoder_layers {
        let normed = tape.layer_norm(x, layer.ln1.gamma, layer.ln1.beta, LN_EPS);
        let attn_out = multi_head_attention(
            tape,
            cfg,
            &layer.attn,
            normed,
            normed,
            input.batch,
            input.seq_len,
            input.seq_len,
            masks.as_deref(),
            opts,
        );
        let attn_out = maybe_dropout(tape, attn_out, cfg, opts);
        x = tape.add(x, attn_out);
        let normed = tape.layer_norm(x, layer.ln2.gamma, layer.ln2.beta, LN_EPS);
        let ffn_out = feed_forward(tape, &layer.ffn, normed);
        let ffn_out = maybe_dropout(tape, ffn_out, cfg, opts);
        x = tape.add(x, ffn_out);
    }
    let hidden = tape.layer_norm(x, vars.encoder_norm.gamma, vars.encoder_norm.beta, LN_EPS);
    Ok(EncodedBatch { hidden, batch: input.batch, seq_len: input.seq_len, real: input.real.clone() })
}

/// Decoder over a batch of shifted targets: causal self-attention, then
/// cross-attention over the encoded batch, then feed-forward; returns logits
/// of shape (batch * target_len, vocab).
pub fn decode_batch<T: Real>(
    tape: &Tape<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    target: &BatchInput,
    encoded: &EncodedBatch,
    opts: &mut ForwardOpts<T>,
) -> Result<Var, ModelError> {
    target.validate(cfg)?;
    assert_eq!(target.batch, encoded.batch, "decoder and encoder batch sizes differ");
    let self_masks = causal_masks::<T>(target);
    let cross_masks =
        padding_masks::<T>(&encoded.real, target.batch, target.seq_len, encoded.seq_len);

    let mut x = embed(tape, vars, cfg, target, opts);
    for layer in &vars.decoder_layers {
        let normed = tape.layer_norm(x, layer.ln1.gamma, layer.ln1.beta, LN_EPS);
        let self_out = multi_head_attention(
            tape,
            cfg,
            &layer.self_attn,
            normed,
            normed,
            target.batch,
            target.seq_len,
            target.seq_len,
            Some(&self_masks),
            opts,
        );
        let self_out = maybe_dropout(tape, self_out, cfg, opts);
        x = tape.add(x, self_out);

        let normed = tape.layer_norm(x, layer.ln2.gamma, layer.ln2.beta, LN_EPS);
        let cross_out = multi_head_attention(
            tape,
            cfg,
            &layer.cross_attn,
            normed,
            encoded.hidden,
            target.batch,
            target.seq_len,
            encoded.seq_len,
            cross_masks.as_deref(),
            opts,
        );
        let cross_out = maybe_dropout(tape, cross_out, cfg, opts);
        x = tape.add(x, cross_out);

        let normed = tape.layer_norm(x, layer.ln3.gamma, layer.ln3.beta, LN_EPS);
        let ffn_out = feed_forward(tape, &layer.ffn, normed);
        let ffn_out = maybe_dropout(tape, ffn_out, cfg, opts);
        x = tape.add(x, ffn_out);
    }
    let x = tape.layer_norm(x, vars.decoder_norm.gamma, vars.decoder_norm.beta, LN_EPS);
    let logits = if cfg.tie_embeddings {
        let wt = tape.transpose(vars.token_embedding);
        tape.matmul(x, wt)
    } else {
        tape.matmul(x, vars.output_projection)
    };
    Ok(logits)
}

/// Category head on a staged tape: probabilities from the global-token row.
pub fn classify_batch<T: Real>(tape: &Tape<T>, vars: &ParamVars, encoded: &EncodedBatch) -> Var {
    let cls = tape.gather_rows(encoded.hidden, &encoded.cls_rows());
    let logits = tape.linear(cls, vars.aux_head_weight, Some(vars.aux_head_bias));
    tape.softmax_rows(logits, None)
}

/// Final hidden states for one sequence, with the leading-token embedding
/// split out for the category head.
pub struct EncoderOutput<T: Real> {
    pub hidden: Array2<T>,
    pub cls_embedding: Vec<T>,
}

/// Encode a single sequence. The leading token is expected to be `[CLS]`.
pub fn encode_sequence<T: Real>(
    params: &ModelParameters<T>,
    cfg: &ModelConfig,
    input_ids: &[u32],
    train_mode: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput<T>, ModelError> {
    if input_ids.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    debug_assert_eq!(input_ids[0], CLS_ID, "encoder input must start with [CLS]");
    let tape = Tape::new();
    let vars = stage_params(&tape, params);
    let batch = BatchInput::from_sequences(&[input_ids], 0);
    let mut opts = ForwardOpts {
        dropout_rng: if train_mode { dropout_rng.as_deref_mut() } else { None },
        attn_trace: None,
    };
    let encoded = encode_batch(&tape, &vars, cfg, &batch, &mut opts)?;
    let hidden = tape.value(encoded.hidden).clone();
    let cls_embedding = hidden.row(0).to_vec();
    Ok(EncoderOutput { hidden, cls_embedding })
}

/// Decoder logits for one shifted target sequence against fixed encoder
/// hidden states. The target is expected to start with `[BOS]`.
pub fn decoder_forward<T: Real>(
    params: &ModelParameters<T>,
    cfg: &ModelConfig,
    target_ids: &[u32],
    encoder_hidden: &Array2<T>,
    train_mode: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Array2<T>, ModelError> {
    if target_ids.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    debug_assert_eq!(target_ids[0], BOS_ID, "decoder input must start with [BOS]");
    let tape = Tape::new();
    let vars = stage_params(&tape, params);
    let enc_len = encoder_hidden.nrows();
    let encoded = EncodedBatch {
        hidden: tape.leaf(encoder_hidden.clone()),
        batch: 1,
        seq_len: enc_len,
        real: vec![true; enc_len],
    };
    let batch = BatchInput::from_sequences(&[target_ids], 0);
    let mut opts = ForwardOpts {
        dropout_rng: if train_mode { dropout_rng.as_deref_mut() } else { None },
        attn_trace: None,
    };
    let logits = decode_batch(&tape, &vars, cfg, &batch, &encoded, &mut opts)?;
    let out = tape.value(logits).clone();
    Ok(out)
}

/// Softmax probabilities over categories from a global-token embedding.
pub fn classify_category<T: Real>(params: &ModelParameters<T>, cls_embedding: &[T]) -> Vec<T> {
    let c = params.aux_head_weight.ncols();
    let mut logits = vec![T::zero(); c];
    for (j, logit) in logits.iter_mut().enumerate() {
        let mut acc = params.aux_head_bias[[0, j]];
        for (k, &x) in cls_embedding.iter().enumerate() {
            acc = acc + x * params.aux_head_weight[[k, j]];
        }
        *logit = acc;
    }
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum = sum + *l;
    }
    logits.iter().map(|&l| l / sum).collect()
}

/// Argmax with ties broken toward the smallest id.
fn argmax_row<T: Real>(row: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy generation from `[BOS]`: append the argmax token each step, stop at
/// `[EOS]` or after `max_steps` emitted tokens. Returns the emitted tokens
/// (including the terminating `[EOS]`, excluding `[BOS]`).
pub fn greedy_decode<T: Real>(
    params: &ModelParameters<T>,
    cfg: &ModelConfig,
    encoder_output: &EncoderOutput<T>,
    max_steps: usize,
) -> Vec<u32> {
    let mut prefix = vec![BOS_ID];
    let mut out = Vec::new();
    for _ in 0..max_steps {
        let logits = decoder_forward(params, cfg, &prefix, &encoder_output.hidden, false, None)
            .expect("prefix stays within configured bounds");
        let last = logits.row(logits.nrows() - 1);
        let next = argmax_row(last.as_slice().expect("row is contiguous"));
        out.push(next);
        if next == EOS_ID {
            break;
        }
        if prefix.len() >= cfg.max_len {
            break;
        }
        prefix.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, zero_params};
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 23,
            d_model: 16,
            num_heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 32,
            max_len: 24,
            num_categories: 3,
            dropout: 0.0,
            tie_embeddings: false,
        }
    }

    fn encode_ids<T: Real>(
        params: &ModelParameters<T>,
        cfg: &ModelConfig,
        ids: &[u32],
    ) -> EncoderOutput<T> {
        encode_sequence(params, cfg, ids, false, None).unwrap()
    }

    #[test]
    fn single_cls_token_encodes() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 1).unwrap();
        let out = encode_ids(&params, &cfg, &[CLS_ID]);
        assert_eq!(out.hidden.dim(), (1, 16));
        assert!(out.hidden.iter().all(|v| v.is_finite()));
        assert_eq!(out.cls_embedding.len(), 16);
    }

    #[test]
    fn position_embeddings_break_permutation_symmetry() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 2).unwrap();
        let a = encode_ids(&params, &cfg, &[CLS_ID, 7, 9, 12]);
        let b = encode_ids(&params, &cfg, &[CLS_ID, 9, 7, 12]);
        let diff = (&a.hidden - &b.hidden).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff > 1e-6, "swapping tokens changed nothing (diff {diff})");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 3).unwrap();
        let tape = Tape::new();
        let vars = stage_params(&tape, &params);
        let input = BatchInput::from_sequences(&[&[CLS_ID, 5, 6, 7, 8]], 0);
        let mut trace = Vec::new();
        let mut opts = ForwardOpts { dropout_rng: None, attn_trace: Some(&mut trace) };
        encode_batch(&tape, &vars, &cfg, &input, &mut opts).unwrap();
        assert_eq!(trace.len(), cfg.encoder_layers * cfg.num_heads);
        for probs in &trace {
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_rejects_bad_inputs() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 4).unwrap();
        let long: Vec<u32> = std::iter::once(CLS_ID).chain((0..30).map(|_| 5)).collect();
        assert!(matches!(
            encode_sequence(&params, &cfg, &long, false, None),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(matches!(
            encode_sequence(&params, &cfg, &[CLS_ID, 99], false, None),
            Err(ModelError::IdOutOfRange { id: 99, .. })
        ));
        assert!(matches!(
            encode_sequence(&params, &cfg, &[], false, None),
            Err(ModelError::EmptyInput)
        ));
    }

    #[test]
    fn classify_zero_head_is_uniform() {
        let cfg = small_cfg();
        let mut params: ModelParameters<f64> = init_params(&cfg, 5).unwrap();
        params.aux_head_weight.fill(0.0);
        params.aux_head_bias.fill(0.0);
        let probs = classify_category(&params, &vec![0.3; 16]);
        for p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_probabilities_normalize() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 6).unwrap();
        let out = encode_ids(&params, &cfg, &[CLS_ID, 3, 4]);
        let probs = classify_category(&params, &out.cls_embedding);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn classify_known_logits() {
        // Craft logits [2, 0]: softmax gives e^2/(e^2+1), 1/(e^2+1).
        let mut cfg = small_cfg();
        cfg.num_categories = 2;
        let mut params: ModelParameters<f64> = zero_params(&cfg);
        params.aux_head_weight[[0, 0]] = 2.0;
        let probs = classify_category(&params, &{
            let mut cls = vec![0.0; 16];
            cls[0] = 1.0;
            cls
        });
        let e2 = 2.0f64.exp();
        assert!((probs[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((probs[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!((probs[0] - 0.8808).abs() < 1e-4);
        assert!((probs[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn causal_mask_prefix_logits_bitwise_stable() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 7).unwrap();
        let enc = encode_ids(&params, &cfg, &[CLS_ID, 10, 11, 12]);
        let a = decoder_forward(&params, &cfg, &[BOS_ID, 5, 6, 7], &enc.hidden, false, None).unwrap();
        let b = decoder_forward(&params, &cfg, &[BOS_ID, 5, 6, 20], &enc.hidden, false, None).unwrap();
        for i in 0..3 {
            for j in 0..cfg.vocab_size {
                assert_eq!(a[[i, j]].to_bits(), b[[i, j]].to_bits(), "row {i} col {j} changed");
            }
        }
        // The edited position itself must differ.
        let last_diff = (0..cfg.vocab_size).any(|j| a[[3, j]] != b[[3, j]]);
        assert!(last_diff);
    }

    #[test]
    fn bos_only_decoder_shape() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 8).unwrap();
        let enc = encode_ids(&params, &cfg, &[CLS_ID, 9]);
        let logits = decoder_forward(&params, &cfg, &[BOS_ID], &enc.hidden, false, None).unwrap();
        assert_eq!(logits.dim(), (1, cfg.vocab_size));
    }

    #[test]
    fn cross_attention_reads_encoder() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 9).unwrap();
        let enc = encode_ids(&params, &cfg, &[CLS_ID, 3, 5, 7]);
        let zeros = Array2::zeros(enc.hidden.dim());
        let with_enc = decoder_forward(&params, &cfg, &[BOS_ID, 4], &enc.hidden, false, None).unwrap();
        let without = decoder_forward(&params, &cfg, &[BOS_ID, 4], &zeros, false, None).unwrap();
        let diff = (&with_enc - &without).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff > 1e-9, "cross-attention appears dead (max diff {diff})");
    }

    #[test]
    fn greedy_stops_at_forced_eos() {
        let cfg = small_cfg();
        // All-zero blocks leave the final norm's beta as the only signal; a
        // one-hot output column then forces the argmax.
        let mut params: ModelParameters<f64> = zero_params(&cfg);
        params.decoder_norm.beta.fill(1.0);
        for k in 0..cfg.d_model {
            params.output_projection[[k, EOS_ID as usize]] = 1.0;
        }
        let enc = EncoderOutput { hidden: Array2::zeros((2, cfg.d_model)), cls_embedding: vec![0.0; cfg.d_model] };
        let out = greedy_decode(&params, &cfg, &enc, 10);
        assert_eq!(out, vec![EOS_ID]);
    }

    #[test]
    fn greedy_respects_step_cap() {
        let cfg = small_cfg();
        let mut params: ModelParameters<f64> = zero_params(&cfg);
        params.decoder_norm.beta.fill(1.0);
        for k in 0..cfg.d_model {
            params.output_projection[[k, 9]] = 1.0; // a non-EOS token
        }
        let enc = EncoderOutput { hidden: Array2::zeros((2, cfg.d_model)), cls_embedding: vec![0.0; cfg.d_model] };
        let out = greedy_decode(&params, &cfg, &enc, 3);
        assert_eq!(out, vec![9, 9, 9]);
    }

    #[test]
    fn greedy_is_deterministic() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 10).unwrap();
        let enc = encode_ids(&params, &cfg, &[CLS_ID, 3, 4, 5, 6]);
        let a = greedy_decode(&params, &cfg, &enc, 8);
        let b = greedy_decode(&params, &cfg, &enc, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_logits_argmax_prefers_smallest_id() {
        let row = vec![0.0f64; 6];
        assert_eq!(argmax_row(&row), 0);
        let mut row2 = vec![0.0f64; 6];
        row2[3] = 0.5;
        row2[5] = 0.5;
        assert_eq!(argmax_row(&row2), 3);
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let mut cfg = small_cfg();
        cfg.dropout = 0.3;
        let params: ModelParameters<f64> = init_params(&cfg, 11).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(0);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let train1 =
            encode_sequence(&params, &cfg, &[CLS_ID, 4, 5], true, Some(&mut rng1)).unwrap();
        let train2 =
            encode_sequence(&params, &cfg, &[CLS_ID, 4, 5], true, Some(&mut rng2)).unwrap();
        let eval1 = encode_sequence(&params, &cfg, &[CLS_ID, 4, 5], false, None).unwrap();
        let eval2 = encode_sequence(&params, &cfg, &[CLS_ID, 4, 5], false, None).unwrap();
        assert_eq!(eval1.hidden, eval2.hidden);
        assert_ne!(train1.hidden, train2.hidden);
    }

    #[test]
    fn padded_batch_matches_individual_encoding() {
        let cfg = small_cfg();
        let params: ModelParameters<f64> = init_params(&cfg, 12).unwrap();
        let short: Vec<u32> = vec![CLS_ID, 6, 7];
        let long: Vec<u32> = vec![CLS_ID, 8, 9, 10, 11];

        let tape = Tape::new();
        let vars = stage_params(&tape, &params);
        let batch = BatchInput::from_sequences(&[&short, &long], 0);
        let mut opts = ForwardOpts::eval();
        let encoded = encode_batch(&tape, &vars, &cfg, &batch, &mut opts).unwrap();
        let batched = tape.value(encoded.hidden).clone();

        let solo_short = encode_ids(&params, &cfg, &short);
        let solo_long = encode_ids(&params, &cfg, &long);
        for (i, row) in solo_short.hidden.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((batched[[i, j]] - v).abs() < 1e-9, "short seq row {i} differs");
            }
        }
        for (i, row) in solo_long.hidden.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!(
                    (batched[[batch.seq_len + i, j]] - v).abs() < 1e-9,
                    "long seq row {i} differs"
                );
            }
        }
    }
}
