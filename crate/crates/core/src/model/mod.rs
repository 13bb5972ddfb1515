//! Encoder-decoder transformer with a classification head on the encoder's
//! leading global token. Pre-norm residual blocks, learned positions, greedy
//! decoding; forward passes build on the autodiff tape in [`crate::tensor`].

mod checkpoint;
mod forward;

pub use checkpoint::{check_compatible, load_checkpoint, save_checkpoint};
pub use forward::{
    classify_batch, classify_category, collect_grads, decode_batch, decoder_forward, encode_batch,
    encode_sequence, greedy_decode, stage_params, BatchInput, EncodedBatch, EncoderOutput,
    ForwardOpts, ParamVars,
};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range (vocab size {vocab})")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub num_categories: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Reuse the token embedding (transposed) as the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: d=128, 4 heads, 2+2 layers, 4x FFN, max 128 tokens.
    pub fn with_defaults(vocab_size: usize, num_categories: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 512,
            max_len: 128,
            num_categories,
            dropout: 0.1,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        let positive = [
            ("vocab_size", self.vocab_size),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("num_categories", self.num_categories),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T: Real> {
    pub gamma: Array2<T>,
    pub beta: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T: Real> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub bq: Array2<T>,
    pub bk: Array2<T>,
    pub bv: Array2<T>,
    pub bo: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams<T: Real> {
    pub w1: Array2<T>,
    pub b1: Array2<T>,
    pub w2: Array2<T>,
    pub b2: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T: Real> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams<T: Real> {
    pub ln1: LayerNormParams<T>,
    pub self_attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub ln3: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
}

/// Every trainable array of the model. The same struct doubles as the
/// gradient container: gradients collected from a tape come back in an
/// identically shaped `ModelParameters`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T: Real> {
    pub token_embedding: Array2<T>,
    pub position_embedding: Array2<T>,
    pub encoder_layers: Vec<EncoderLayerParams<T>>,
    pub encoder_norm: LayerNormParams<T>,
    pub decoder_layers: Vec<DecoderLayerParams<T>>,
    pub decoder_norm: LayerNormParams<T>,
    pub output_projection: Array2<T>,
    pub aux_head_weight: Array2<T>,
    pub aux_head_bias: Array2<T>,
}

struct ArrayInit<'r, T> {
    rng: &'r mut ChaCha8Rng,
    normal: Normal<f64>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> ArrayInit<'_, T> {
    /// Weight entries are drawn in f32 precision regardless of T so that a
    /// freshly initialized model round-trips bitwise through the f32
    /// checkpoint payload.
    fn weight(&mut self, rows: usize, cols: usize) -> Array2<T> {
        Array2::from_shape_fn((rows, cols), |_| {
            T::from_f64(f64::from(self.normal.sample(self.rng) as f32))
        })
    }

    fn zeros(rows: usize, cols: usize) -> Array2<T> {
        Array2::zeros((rows, cols))
    }

    fn layer_norm(d: usize) -> LayerNormParams<T> {
        LayerNormParams { gamma: Array2::ones((1, d)), beta: Array2::zeros((1, d)) }
    }

    fn attention(&mut self, d: usize) -> AttentionParams<T> {
        AttentionParams {
            wq: self.weight(d, d),
            wk: self.weight(d, d),
            wv: self.weight(d, d),
            wo: self.weight(d, d),
            bq: Self::zeros(1, d),
            bk: Self::zeros(1, d),
            bv: Self::zeros(1, d),
            bo: Self::zeros(1, d),
        }
    }

    fn ffn(&mut self, d: usize, f: usize) -> FeedForwardParams<T> {
        FeedForwardParams {
            w1: self.weight(d, f),
            b1: Self::zeros(1, f),
            w2: self.weight(f, d),
            b2: Self::zeros(1, d),
        }
    }
}

/// Zero-mean init with scale 1/sqrt(d_model) on every weight matrix; biases
/// zero, norms identity. Deterministic per seed.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParameters<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (config.d_model as f64).sqrt();
    let normal = Normal::new(0.0, scale).expect("positive std");
    let mut init = ArrayInit { rng: &mut rng, normal, _marker: std::marker::PhantomData };

    let d = config.d_model;
    let f = config.ffn_dim;
    let encoder_layers = (0..config.encoder_layers)
        .map(|_| EncoderLayerParams {
            ln1: ArrayInit::<T>::layer_norm(d),
            attn: init.attention(d),
            ln2: ArrayInit::<T>::layer_norm(d),
            ffn: init.ffn(d, f),
        })
        .collect();
    let decoder_layers = (0..config.decoder_layers)
        .map(|_| DecoderLayerParams {
            ln1: ArrayInit::<T>::layer_norm(d),
            self_attn: init.attention(d),
            ln2: ArrayInit::<T>::layer_norm(d),
            cross_attn: init.attention(d),
            ln3: ArrayInit::<T>::layer_norm(d),
            ffn: init.ffn(d, f),
        })
        .collect();

    Ok(ModelParameters {
        token_embedding: init.weight(config.vocab_size, d),
        position_embedding: init.weight(config.max_len, d),
        encoder_layers,
        encoder_norm: ArrayInit::<T>::layer_norm(d),
        decoder_layers,
        decoder_norm: ArrayInit::<T>::layer_norm(d),
        output_projection: init.weight(d, config.vocab_size),
        aux_head_weight: init.weight(d, config.num_categories),
        aux_head_bias: ArrayInit::<T>::zeros(1, config.num_categories),
    })
}

/// All-zero parameters with the shapes implied by `config`.
pub fn zero_params<T: Real>(config: &ModelConfig) -> ModelParameters<T> {
    let d = config.d_model;
    let f = config.ffn_dim;
    let zero_ln = || LayerNormParams { gamma: Array2::zeros((1, d)), beta: Array2::zeros((1, d)) };
    let zero_attn = || AttentionParams {
        wq: Array2::zeros((d, d)),
        wk: Array2::zeros((d, d)),
        wv: Array2::zeros((d, d)),
        wo: Array2::zeros((d, d)),
        bq: Array2::zeros((1, d)),
        bk: Array2::zeros((1, d)),
        bv: Array2::zeros((1, d)),
        bo: Array2::zeros((1, d)),
    };
    let zero_ffn = || FeedForwardParams {
        w1: Array2::zeros((d, f)),
        b1: Array2::zeros((1, f)),
        w2: Array2::zeros((f, d)),
        b2: Array2::zeros((1, d)),
    };
    ModelParameters {
        token_embedding: Array2::zeros((config.vocab_size, d)),
        position_embedding: Array2::zeros((config.max_len, d)),
        encoder_layers: (0..config.encoder_layers)
            .map(|_| EncoderLayerParams { ln1: zero_ln(), attn: zero_attn(), ln2: zero_ln(), ffn: zero_ffn() })
            .collect(),
        encoder_norm: zero_ln(),
        decoder_layers: (0..config.decoder_layers)
            .map(|_| DecoderLayerParams {
                ln1: zero_ln(),
                self_attn: zero_attn(),
                ln2: zero_ln(),
                cross_attn: zero_attn(),
                ln3: zero_ln(),
                ffn: zero_ffn(),
            })
            .collect(),
        decoder_norm: zero_ln(),
        output_projection: Array2::zeros((d, config.vocab_size)),
        aux_head_weight: Array2::zeros((d, config.num_categories)),
        aux_head_bias: Array2::zeros((1, config.num_categories)),
    }
}

impl<T: Real> ModelParameters<T> {
    /// Visit every named array in a stable order.
    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Array2<T>)) {
        let visit_ln = |name: String, ln: &LayerNormParams<T>, f: &mut dyn FnMut(&str, &Array2<T>)| {
            f(&format!("{name}.gamma"), &ln.gamma);
            f(&format!("{name}.beta"), &ln.beta);
        };
        let visit_attn = |name: String, a: &AttentionParams<T>, f: &mut dyn FnMut(&str, &Array2<T>)| {
            f(&format!("{name}.wq"), &a.wq);
            f(&format!("{name}.wk"), &a.wk);
            f(&format!("{name}.wv"), &a.wv);
            f(&format!("{name}.wo"), &a.wo);
            f(&format!("{name}.bq"), &a.bq);
            f(&format!("{name}.bk"), &a.bk);
            f(&format!("{name}.bv"), &a.bv);
            f(&format!("{name}.bo"), &a.bo);
        };
        let visit_ffn = |name: String, p: &FeedForwardParams<T>, f: &mut dyn FnMut(&str, &Array2<T>)| {
            f(&format!("{name}.w1"), &p.w1);
            f(&format!("{name}.b1"), &p.b1);
            f(&format!("{name}.w2"), &p.w2);
            f(&format!("{name}.b2"), &p.b2);
        };

        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for (i, layer) in self.encoder_layers.iter().enumerate() {
            visit_ln(format!("encoder.{i}.ln1"), &layer.ln1, f);
            visit_attn(format!("encoder.{i}.attn"), &layer.attn, f);
            visit_ln(format!("encoder.{i}.ln2"), &layer.ln2, f);
            visit_ffn(format!("encoder.{i}.ffn"), &layer.ffn, f);
        }
        visit_ln("encoder_norm".into(), &self.encoder_norm, f);
        for (i, layer) in self.decoder_layers.iter().enumerate() {
            visit_ln(format!("decoder.{i}.ln1"), &layer.ln1, f);
            visit_attn(format!("decoder.{i}.self_attn"), &layer.self_attn, f);
            visit_ln(format!("decoder.{i}.ln2"), &layer.ln2, f);
            visit_attn(format!("decoder.{i}.cross_attn"), &layer.cross_attn, f);
            visit_ln(format!("decoder.{i}.ln3"), &layer.ln3, f);
            visit_ffn(format!("decoder.{i}.ffn"), &layer.ffn, f);
        }
        visit_ln("decoder_norm".into(), &self.decoder_norm, f);
        f("output_projection", &self.output_projection);
        f("aux_head.weight", &self.aux_head_weight);
        f("aux_head.bias", &self.aux_head_bias);
    }

    /// Mutable visit in the same order as [`ModelParameters::for_each`].
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<T>)) {
        let visit_ln = |name: String, ln: &mut LayerNormParams<T>, f: &mut dyn FnMut(&str, &mut Array2<T>)| {
            f(&format!("{name}.gamma"), &mut ln.gamma);
            f(&format!("{name}.beta"), &mut ln.beta);
        };
        let visit_attn =
            |name: String, a: &mut AttentionParams<T>, f: &mut dyn FnMut(&str, &mut Array2<T>)| {
                f(&format!("{name}.wq"), &mut a.wq);
                f(&format!("{name}.wk"), &mut a.wk);
                f(&format!("{name}.wv"), &mut a.wv);
                f(&format!("{name}.wo"), &mut a.wo);
                f(&format!("{name}.bq"), &mut a.bq);
                f(&format!("{name}.bk"), &mut a.bk);
                f(&format!("{name}.bv"), &mut a.bv);
                f(&format!("{name}.bo"), &mut a.bo);
            };
        let visit_ffn =
            |name: String, p: &mut FeedForwardParams<T>, f: &mut dyn FnMut(&str, &mut Array2<T>)| {
                f(&format!("{name}.w1"), &mut p.w1);
                f(&format!("{name}.b1"), &mut p.b1);
                f(&format!("{name}.w2"), &mut p.w2);
                f(&format!("{name}.b2"), &mut p.b2);
            };

        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        for (i, layer) in self.encoder_layers.iter_mut().enumerate() {
            visit_ln(format!("encoder.{i}.ln1"), &mut layer.ln1, f);
            visit_attn(format!("encoder.{i}.attn"), &mut layer.attn, f);
            visit_ln(format!("encoder.{i}.ln2"), &mut layer.ln2, f);
            visit_ffn(format!("encoder.{i}.ffn"), &mut layer.ffn, f);
        }
        visit_ln("encoder_norm".into(), &mut self.encoder_norm, f);
        for (i, layer) in self.decoder_layers.iter_mut().enumerate() {
            visit_ln(format!("decoder.{i}.ln1"), &mut layer.ln1, f);
            visit_attn(format!("decoder.{i}.self_attn"), &mut layer.self_attn, f);
            visit_ln(format!("decoder.{i}.ln2"), &mut layer.ln2, f);
            visit_attn(format!("decoder.{i}.cross_attn"), &mut layer.cross_attn, f);
            visit_ln(format!("decoder.{i}.ln3"), &mut layer.ln3, f);
            visit_ffn(format!("decoder.{i}.ffn"), &mut layer.ffn, f);
        }
        visit_ln("decoder_norm".into(), &mut self.decoder_norm, f);
        f("output_projection", &mut self.output_projection);
        f("aux_head.weight", &mut self.aux_head_weight);
        f("aux_head.bias", &mut self.aux_head_bias);
    }

    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.for_each(&mut |_, a| total += a.len());
        total
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    /// FNV-1a digest over names, shapes, and value bits; used to verify that
    /// evaluation paths never mutate parameters.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        self.for_each(&mut |name, a| {
            mix(name.as_bytes());
            mix(&(a.nrows() as u64).to_le_bytes());
            mix(&(a.ncols() as u64).to_le_bytes());
            for v in a.iter() {
                mix(&v.as_f64().to_bits().to_le_bytes());
            }
        });
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::with_defaults(50, 3);
        let a: ModelParameters<f64> = init_params(&cfg, 7).unwrap();
        let b: ModelParameters<f64> = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c: ModelParameters<f64> = init_params(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes_small_config() {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            num_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 32,
            max_len: 16,
            num_categories: 3,
            dropout: 0.0,
            tie_embeddings: false,
        };
        let p: ModelParameters<f32> = init_params(&cfg, 0).unwrap();
        assert_eq!(p.token_embedding.dim(), (11, 8));
        assert_eq!(p.position_embedding.dim(), (16, 8));
        assert_eq!(p.encoder_layers[0].attn.wq.dim(), (8, 8));
        assert_eq!(p.encoder_layers[0].ffn.w1.dim(), (8, 32));
        assert_eq!(p.decoder_layers[0].cross_attn.wo.dim(), (8, 8));
        assert_eq!(p.output_projection.dim(), (8, 11));
        assert_eq!(p.aux_head_weight.dim(), (8, 3));
        assert_eq!(p.aux_head_bias.dim(), (1, 3));
        assert!(p.all_finite());
    }

    #[test]
    fn param_count_matches_analytic_formula() {
        // Independent accounting: embeddings + per-layer blocks + heads.
        let cfg = ModelConfig::with_defaults(2000, 5);
        let p: ModelParameters<f32> = init_params(&cfg, 1).unwrap();
        let (v, d, f, c, m) = (2000usize, 128usize, 512usize, 5usize, 128usize);
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let enc_layer = ln + attn + ln + ffn;
        let dec_layer = ln + attn + ln + attn + ln + ffn;
        let expected = v * d + m * d
            + 2 * enc_layer + ln
            + 2 * dec_layer + ln
            + d * v
            + d * c + c;
        assert_eq!(expected, 1_455_237);
        assert_eq!(p.num_params(), expected);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::with_defaults(100, 4);
        cfg.num_heads = 3; // does not divide 128
        assert!(matches!(init_params::<f32>(&cfg, 0), Err(ModelError::InvalidConfig(_))));
        let mut cfg = ModelConfig::with_defaults(100, 4);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checksum_detects_mutation() {
        let cfg = ModelConfig::with_defaults(40, 3);
        let mut p: ModelParameters<f32> = init_params(&cfg, 3).unwrap();
        let before = p.checksum();
        assert_eq!(before, p.checksum());
        p.aux_head_bias[[0, 0]] += 1.0;
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn visit_orders_agree() {
        let cfg = ModelConfig::with_defaults(30, 2);
        let mut p: ModelParameters<f32> = init_params(&cfg, 5).unwrap();
        let mut names = Vec::new();
        p.for_each(&mut |n, _| names.push(n.to_string()));
        let mut names_mut = Vec::new();
        p.for_each_mut(&mut |n, _| names_mut.push(n.to_string()));
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 2 + 2 * 16 + 2 + 2 * 26 + 2 + 3);
    }
}
