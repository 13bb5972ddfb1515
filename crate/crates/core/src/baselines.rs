//! Numeric-paradigm reference forecasters over raw count windows: the
//! history-mean predictor, ridge-regularized linear regression, stacked GRUs
//! with optional additive attention pooling, and a small encoder-only
//! transformer that can swap learned positions for calendar embeddings.

use chrono::Datelike;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ForecastInstance;
use crate::tensor::{Real, Tape, Var};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("degenerate design matrix: {0}")]
    DegenerateDesign(String),
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("temporal features requested but absent from a window")]
    MissingTemporal,
}

/// Calendar features for the history days plus the target day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalFeatures {
    /// 0 = Monday .. 6 = Sunday; length n+1.
    pub day_of_week: Vec<usize>,
    /// 0 = January .. 11 = December; length n+1.
    pub month: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericWindow {
    pub history: Vec<f64>,
    pub temporal: Option<TemporalFeatures>,
    pub target: f64,
}

pub fn window_from_instance(inst: &ForecastInstance) -> NumericWindow {
    let mut day_of_week = Vec::with_capacity(inst.history_counts.len() + 1);
    let mut month = Vec::with_capacity(inst.history_counts.len() + 1);
    for d in inst.history_dates() {
        day_of_week.push(d.weekday().num_days_from_monday() as usize);
        month.push(d.month0() as usize);
    }
    day_of_week.push(inst.target_date.weekday().num_days_from_monday() as usize);
    month.push(inst.target_date.month0() as usize);
    NumericWindow {
        history: inst.history_counts.iter().map(|&c| c as f64).collect(),
        temporal: Some(TemporalFeatures { day_of_week, month }),
        target: inst.target_count as f64,
    }
}

/// Rounded mean of the history window; also the parse-failure fallback.
pub fn history_mean_forecast(query: &NumericWindow) -> f64 {
    let mean = query.history.iter().sum::<f64>() / query.history.len() as f64;
    mean.round()
}

#[derive(Debug, Clone)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, query: &NumericWindow) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(&query.history)
                .map(|(c, x)| c * x)
                .sum::<f64>()
    }
}

/// Fit history -> target by least squares with a small ridge term
/// (epsilon = 1e-6) for rank safety; Cholesky on the normal equations.
pub fn fit_linear(train: &[NumericWindow]) -> Result<LinearModel, BaselineError> {
    const RIDGE: f64 = 1e-6;
    if train.is_empty() {
        return Err(BaselineError::EmptyTrainSet);
    }
    let n = train[0].history.len();
    let dim = n + 1; // affine term last
    if train.iter().any(|w| !w.target.is_finite() || w.history.iter().any(|x| !x.is_finite())) {
        return Err(BaselineError::DegenerateDesign("non-finite input".into()));
    }

    // Accumulate X'X and X'y with the intercept folded in as a ones column.
    let mut xtx = vec![vec![0.0f64; dim]; dim];
    let mut xty = vec![0.0f64; dim];
    for w in train {
        let feat = |i: usize| if i < n { w.history[i] } else { 1.0 };
        for i in 0..dim {
            xty[i] += feat(i) * w.target;
            for j in i..dim {
                xtx[i][j] += feat(i) * feat(j);
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            xtx[i][j] = xtx[j][i];
        }
        xtx[i][i] += RIDGE;
    }

    let beta = cholesky_solve(&xtx, &xty)
        .ok_or_else(|| BaselineError::DegenerateDesign("normal equations not SPD".into()))?;
    Ok(LinearModel { coefficients: beta[..n].to_vec(), intercept: beta[n] })
}

pub fn lr_forecast(train: &[NumericWindow], query: &NumericWindow) -> Result<f64, BaselineError> {
    Ok(fit_linear(train)?.predict(query))
}

fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    // forward then back substitution
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    Some(x)
}

/// Shared capacity/budget defaults across the learned baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrainConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub grad_clip: Option<f64>,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        BaselineTrainConfig {
            hidden: 64,
            layers: 2,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 32,
            early_stop_patience: 8,
            val_fraction: 0.1,
            grad_clip: Some(1.0),
        }
    }
}

/// Mean/std standardization fitted on training counts.
#[derive(Debug, Clone, Copy)]
struct Standardizer {
    mean: f64,
    std: f64,
}

impl Standardizer {
    fn fit(train: &[NumericWindow]) -> Standardizer {
        let mut values: Vec<f64> = Vec::new();
        for w in train {
            values.extend(&w.history);
            values.push(w.target);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        Standardizer { mean, std: var.sqrt().max(1e-6) }
    }

    fn norm(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    fn denorm(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Deterministic train/validation carve-out for early stopping.
fn carve_validation(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1dea);
    idx.shuffle(&mut rng);
    let n_val = ((len as f64 * fraction).round() as usize).clamp(1, len.saturating_sub(1).max(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn init_weight<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<T> {
    let normal = Normal::new(0.0, scale).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(f64::from(normal.sample(rng) as f32)))
}

// Per-layer GRU arrays in flattening order.
const GRU_PER_LAYER: usize = 9;

/// Stacked GRU over the history with an optional additive attention pool and
/// a linear head. All math runs through the autodiff tape.
pub struct GruForecaster<T: Real> {
    arrays: Vec<Array2<T>>,
    layers: usize,
    hidden: usize,
    use_attention: bool,
    norm: Standardizer,
}

impl<T: Real> GruForecaster<T> {
    /// Array layout: per layer [wz, uz, bz, wr, ur, br, wh, uh, bh], then
    /// [wa, ba, va] when attention pooling is on, then [head_w, head_b].
    fn build_arrays(hidden: usize, layers: usize, use_attention: bool, seed: u64) -> Vec<Array2<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut arrays = Vec::new();
        for layer in 0..layers {
            let input_dim = if layer == 0 { 1 } else { hidden };
            for _ in 0..3 {
                arrays.push(init_weight(&mut rng, input_dim, hidden, scale)); // w
                arrays.push(init_weight(&mut rng, hidden, hidden, scale)); // u
                arrays.push(Array2::zeros((1, hidden))); // b
            }
        }
        if use_attention {
            arrays.push(init_weight(&mut rng, hidden, hidden, scale)); // wa
            arrays.push(Array2::zeros((1, hidden))); // ba
            arrays.push(init_weight(&mut rng, hidden, 1, scale)); // va
        }
        arrays.push(init_weight(&mut rng, hidden, 1, scale)); // head_w
        arrays.push(Array2::zeros((1, 1))); // head_b
        arrays
    }

    pub fn num_params(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Forward over a batch of standardized histories (column per step).
    fn forward(tape: &Tape<T>, vars: &[Var], cfg: &GruShape, inputs: &[Vec<f64>]) -> Var {
        let batch = inputs.len();
        let steps = inputs[0].len();
        let mut layer_inputs: Vec<Var> = (0..steps)
            .map(|t| {
                let col =
                    Array2::from_shape_fn((batch, 1), |(b, _)| T::from_f64(inputs[b][t]));
                tape.leaf(col)
            })
            .collect();

        let mut top_states: Vec<Var> = Vec::new();
        for layer in 0..cfg.layers {
            let base = layer * GRU_PER_LAYER;
            let (wz, uz, bz) = (vars[base], vars[base + 1], vars[base + 2]);
            let (wr, ur, br) = (vars[base + 3], vars[base + 4], vars[base + 5]);
            let (wh, uh, bh) = (vars[base + 6], vars[base + 7], vars[base + 8]);
            let mut h = tape.leaf(Array2::zeros((batch, cfg.hidden)));
            let mut states = Vec::with_capacity(steps);
            for &x in &layer_inputs {
                let zx = tape.linear(x, wz, Some(bz));
                let zh = tape.matmul(h, uz);
                let z = tape.sigmoid(tape.add(zx, zh));
                let rx = tape.linear(x, wr, Some(br));
                let rh = tape.matmul(h, ur);
                let r = tape.sigmoid(tape.add(rx, rh));
                let hx = tape.linear(x, wh, Some(bh));
                let rh_gated = tape.mul(r, h);
                let hh = tape.matmul(rh_gated, uh);
                let cand = tape.tanh(tape.add(hx, hh));
                // h' = (1 - z) * h + z * cand
                let keep = tape.mul(z, cand);
                let neg_z = tape.scale(z, -T::one());
                let one_minus_z = tape.add_const(neg_z, &Array2::ones((batch, cfg.hidden)));
                let carried = tape.mul(one_minus_z, h);
                h = tape.add(carried, keep);
                states.push(h);
            }
            layer_inputs = states.clone();
            top_states = states;
        }

        let pooled = if cfg.use_attention {
            let base = cfg.layers * GRU_PER_LAYER;
            let (wa, ba, va) = (vars[base], vars[base + 1], vars[base + 2]);
            let scores: Vec<Var> = top_states
                .iter()
                .map(|&h| {
                    let e = tape.tanh(tape.linear(h, wa, Some(ba)));
                    tape.matmul(e, va)
                })
                .collect();
            let score_mat = tape.concat_cols(&scores); // (batch, steps)
            let alpha = tape.softmax_rows(score_mat, None);
            let mut ctx: Option<Var> = None;
            for (t, &h) in top_states.iter().enumerate() {
                let a_t = tape.slice_cols(alpha, t, t + 1);
                let weighted = tape.mul_col(h, a_t);
                ctx = Some(match ctx {
                    Some(acc) => tape.add(acc, weighted),
                    None => weighted,
                });
            }
            ctx.expect("at least one step")
        } else {
            *top_states.last().expect("at least one step")
        };

        let head = cfg.layers * GRU_PER_LAYER + if cfg.use_attention { 3 } else { 0 };
        tape.linear(pooled, vars[head], Some(vars[head + 1]))
    }

    pub fn fit(
        train: &[NumericWindow],
        use_attention: bool,
        cfg: &BaselineTrainConfig,
        seed: u64,
    ) -> Result<Self, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainSet);
        }
        let norm = Standardizer::fit(train);
        let shape = GruShape { hidden: cfg.hidden, layers: cfg.layers, use_attention };
        let arrays = Self::build_arrays(cfg.hidden, cfg.layers, use_attention, seed);
        let mut model = GruForecaster { arrays, layers: cfg.layers, hidden: cfg.hidden, use_attention, norm };

        let histories: Vec<Vec<f64>> =
            train.iter().map(|w| w.history.iter().map(|&x| norm.norm(x)).collect()).collect();
        let targets: Vec<f64> = train.iter().map(|w| norm.norm(w.target)).collect();

        fit_loop(&mut model.arrays, cfg, seed, histories.len(), &targets, |tape, vars, idx| {
            let batch: Vec<Vec<f64>> = idx.iter().map(|&i| histories[i].clone()).collect();
            Self::forward(tape, vars, &shape, &batch)
        })?;
        Ok(model)
    }

    pub fn predict(&self, query: &NumericWindow) -> f64 {
        let tape: Tape<T> = Tape::new();
        let vars: Vec<Var> = self.arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let shape = GruShape { hidden: self.hidden, layers: self.layers, use_attention: self.use_attention };
        let history: Vec<f64> = query.history.iter().map(|&x| self.norm.norm(x)).collect();
        let out = Self::forward(&tape, &vars, &shape, &[history]);
        self.norm.denorm(tape.scalar(out).as_f64())
    }
}

#[derive(Clone, Copy)]
struct GruShape {
    hidden: usize,
    layers: usize,
    use_attention: bool,
}

/// Gated recurrent baseline per the shared training contract.
pub fn recurrent_forecast(
    train: &[NumericWindow],
    query: &NumericWindow,
    use_attention: bool,
    seed: u64,
) -> Result<f64, BaselineError> {
    let model = GruForecaster::<f32>::fit(train, use_attention, &BaselineTrainConfig::default(), seed)?;
    Ok(model.predict(query))
}

/// Encoder-only transformer over the scalar history. With temporal
/// embeddings on, calendar features replace the learned position table and
/// an extra query slot carries the target day's calendar signature.
pub struct NumericTransformerForecaster<T: Real> {
    arrays: Vec<Array2<T>>,
    shape: TransformerShape,
    norm: Standardizer,
}

#[derive(Clone, Copy)]
struct TransformerShape {
    d_model: usize,
    heads: usize,
    layers: usize,
    ffn: usize,
    steps: usize,
    use_temporal: bool,
}

// Arrays per transformer layer: ln1 (2) + qkvo weights (4) + biases (4) +
// ln2 (2) + ffn (4).
const TF_PER_LAYER: usize = 16;

impl<T: Real> NumericTransformerForecaster<T> {
    /// Layout: [input_w, input_b, pos or (dow, month, query)], then per layer
    /// [g1, b1, wq, wk, wv, wo, bias_q, bias_k, bias_v, bias_o, g2, b2,
    /// fw1, fb1, fw2, fb2], then [gf, bf, head_w, head_b].
    fn build_arrays(shape: &TransformerShape, seed: u64) -> Vec<Array2<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let mut a: Vec<Array2<T>> = Vec::new();
        a.push(init_weight(&mut rng, 1, d, scale)); // input_w
        a.push(Array2::zeros((1, d))); // input_b
        if shape.use_temporal {
            a.push(init_weight(&mut rng, 7, d, scale)); // dow embeddings
            a.push(init_weight(&mut rng, 12, d, scale)); // month embeddings
            a.push(init_weight(&mut rng, 1, d, scale)); // target-slot token
        } else {
            a.push(init_weight(&mut rng, shape.steps, d, scale)); // positions
        }
        for _ in 0..shape.layers {
            a.push(Array2::ones((1, d))); // ln1 gamma
            a.push(Array2::zeros((1, d))); // ln1 beta
            a.push(init_weight(&mut rng, d, d, scale)); // wq
            a.push(init_weight(&mut rng, d, d, scale)); // wk
            a.push(init_weight(&mut rng, d, d, scale)); // wv
            a.push(init_weight(&mut rng, d, d, scale)); // wo
            for _ in 0..4 {
                a.push(Array2::zeros((1, d))); // attention biases
            }
            a.push(Array2::ones((1, d))); // ln2 gamma
            a.push(Array2::zeros((1, d))); // ln2 beta
            a.push(init_weight(&mut rng, d, shape.ffn, scale));
            a.push(Array2::zeros((1, shape.ffn)));
            a.push(init_weight(&mut rng, shape.ffn, d, scale));
            a.push(Array2::zeros((1, d)));
        }
        a.push(Array2::ones((1, d))); // final gamma
        a.push(Array2::zeros((1, d))); // final beta
        a.push(init_weight(&mut rng, d, 1, scale)); // head_w
        a.push(Array2::zeros((1, 1))); // head_b
        a
    }

    fn embed_offset(shape: &TransformerShape) -> usize {
        2 + if shape.use_temporal { 3 } else { 1 }
    }

    fn forward(
        tape: &Tape<T>,
        vars: &[Var],
        shape: &TransformerShape,
        histories: &[Vec<f64>],
        temporal: Option<&[(Vec<usize>, Vec<usize>)]>,
    ) -> Var {
        let batch = histories.len();
        let n = histories[0].len();
        let slots = if shape.use_temporal { n + 1 } else { n };
        let d = shape.d_model;

        // Scalar inputs projected to d, stacked (batch * slots, d), then the
        // positional/calendar signal added.
        let mut values = Array2::zeros((batch * slots, 1));
        for (b, h) in histories.iter().enumerate() {
            for (t, &x) in h.iter().enumerate() {
                values[[b * slots + t, 0]] = T::from_f64(x);
            }
            // the trailing query slot (temporal variant) keeps value zero
        }
        let values = tape.leaf(values);
        let projected = tape.linear(values, vars[0], Some(vars[1]));

        let with_pos = if shape.use_temporal {
            let (dow_var, month_var, query_var) = (vars[2], vars[3], vars[4]);
            let feats = temporal.expect("temporal features required");
            let mut dow_idx = Vec::with_capacity(batch * slots);
            let mut month_idx = Vec::with_capacity(batch * slots);
            for (dow, month) in feats {
                debug_assert_eq!(dow.len(), n + 1);
                dow_idx.extend_from_slice(dow);
                month_idx.extend_from_slice(month);
            }
            let dow_emb = tape.gather_rows(dow_var, &dow_idx);
            let month_emb = tape.gather_rows(month_var, &month_idx);
            let cal = tape.add(dow_emb, month_emb);
            // Query slots additionally receive the learned slot token: gather
            // from a two-row table (zero row, token row) so only target-day
            // rows pick it up.
            let zero_row = tape.leaf(Array2::zeros((1, d)));
            let table = tape.concat_rows(&[zero_row, query_var]);
            let table_idx: Vec<usize> =
                (0..batch * slots).map(|row| usize::from(row % slots == n)).collect();
            let scatter = tape.gather_rows(table, &table_idx);
            let base = tape.add(projected, cal);
            tape.add(base, scatter)
        } else {
            let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..slots).collect();
            let pos = tape.gather_rows(vars[2], &pos_idx);
            tape.add(projected, pos)
        };

        let off = Self::embed_offset(shape);
        let per_layer = TF_PER_LAYER;
        let scale = T::from_f64(1.0 / ((d / shape.heads) as f64).sqrt());
        let dh = d / shape.heads;
        let mut x = with_pos;
        for layer in 0..shape.layers {
            let b0 = off + layer * per_layer;
            let normed = tape.layer_norm(x, vars[b0], vars[b0 + 1], 1e-5);
            let q = tape.linear(normed, vars[b0 + 2], Some(vars[b0 + 6]));
            let k = tape.linear(normed, vars[b0 + 3], Some(vars[b0 + 7]));
            let v = tape.linear(normed, vars[b0 + 4], Some(vars[b0 + 8]));
            let mut items = Vec::with_capacity(batch);
            for b in 0..batch {
                let qb = tape.slice_rows(q, b * slots, (b + 1) * slots);
                let kb = tape.slice_rows(k, b * slots, (b + 1) * slots);
                let vb = tape.slice_rows(v, b * slots, (b + 1) * slots);
                let mut heads_out = Vec::with_capacity(shape.heads);
                for h in 0..shape.heads {
                    let qh = tape.slice_cols(qb, h * dh, (h + 1) * dh);
                    let kh = tape.slice_cols(kb, h * dh, (h + 1) * dh);
                    let vh = tape.slice_cols(vb, h * dh, (h + 1) * dh);
                    let kt = tape.transpose(kh);
                    let scores = tape.scale(tape.matmul(qh, kt), scale);
                    let probs = tape.softmax_rows(scores, None);
                    heads_out.push(tape.matmul(probs, vh));
                }
                items.push(tape.concat_cols(&heads_out));
            }
            let merged = tape.concat_rows(&items);
            let attn_out = tape.linear(merged, vars[b0 + 5], Some(vars[b0 + 9]));
            x = tape.add(x, attn_out);
            let normed = tape.layer_norm(x, vars[b0 + 10], vars[b0 + 11], 1e-5);
            let ff = tape.linear(normed, vars[b0 + 12], Some(vars[b0 + 13]));
            let ff = tape.gelu(ff);
            let ff = tape.linear(ff, vars[b0 + 14], Some(vars[b0 + 15]));
            x = tape.add(x, ff);
        }
        let bf = off + shape.layers * per_layer;
        let x = tape.layer_norm(x, vars[bf], vars[bf + 1], 1e-5);

        // Mean-pool each item's slots, then the scalar head.
        let pooled_items: Vec<Var> = (0..batch)
            .map(|b| {
                let xb = tape.slice_rows(x, b * slots, (b + 1) * slots);
                tape.mean_rows(xb)
            })
            .collect();
        let pooled = tape.concat_rows(&pooled_items);
        tape.linear(pooled, vars[bf + 2], Some(vars[bf + 3]))
    }

    pub fn fit(
        train: &[NumericWindow],
        use_temporal: bool,
        cfg: &BaselineTrainConfig,
        seed: u64,
    ) -> Result<Self, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainSet);
        }
        if use_temporal && train.iter().any(|w| w.temporal.is_none()) {
            return Err(BaselineError::MissingTemporal);
        }
        let norm = Standardizer::fit(train);
        let shape = TransformerShape {
            d_model: cfg.hidden,
            heads: 4,
            layers: cfg.layers,
            ffn: cfg.hidden * 4,
            steps: train[0].history.len(),
            use_temporal,
        };
        let arrays = Self::build_arrays(&shape, seed);
        let mut model = NumericTransformerForecaster { arrays, shape, norm };

        let histories: Vec<Vec<f64>> =
            train.iter().map(|w| w.history.iter().map(|&x| norm.norm(x)).collect()).collect();
        let targets: Vec<f64> = train.iter().map(|w| norm.norm(w.target)).collect();
        let temporal: Vec<(Vec<usize>, Vec<usize>)> = train
            .iter()
            .map(|w| match &w.temporal {
                Some(t) => (t.day_of_week.clone(), t.month.clone()),
                None => (Vec::new(), Vec::new()),
            })
            .collect();

        fit_loop(&mut model.arrays, cfg, seed, histories.len(), &targets, |tape, vars, idx| {
            let batch: Vec<Vec<f64>> = idx.iter().map(|&i| histories[i].clone()).collect();
            let feats: Vec<(Vec<usize>, Vec<usize>)> =
                idx.iter().map(|&i| temporal[i].clone()).collect();
            Self::forward(tape, vars, &shape, &batch, use_temporal.then_some(feats.as_slice()))
        })?;
        Ok(model)
    }

    pub fn predict(&self, query: &NumericWindow) -> f64 {
        let tape: Tape<T> = Tape::new();
        let vars: Vec<Var> = self.arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let history: Vec<f64> = query.history.iter().map(|&x| self.norm.norm(x)).collect();
        let temporal: Vec<(Vec<usize>, Vec<usize>)> = match (&query.temporal, self.shape.use_temporal) {
            (Some(t), true) => vec![(t.day_of_week.clone(), t.month.clone())],
            _ => Vec::new(),
        };
        let out = Self::forward(
            &tape,
            &vars,
            &self.shape,
            &[history],
            self.shape.use_temporal.then_some(temporal.as_slice()),
        );
        self.norm.denorm(tape.scalar(out).as_f64())
    }
}

pub fn numeric_transformer_forecast(
    train: &[NumericWindow],
    query: &NumericWindow,
    use_temporal_embedding: bool,
    seed: u64,
) -> Result<f64, BaselineError> {
    let model = NumericTransformerForecaster::<f32>::fit(
        train,
        use_temporal_embedding,
        &BaselineTrainConfig::default(),
        seed,
    )?;
    Ok(model.predict(query))
}

/// Mini-batch training loop shared by the learned baselines: adaptive-moment
/// updates, gradient clipping, early stop on held-out RMSE. The forward
/// closure receives example indices into the caller's training set.
fn fit_loop<T: Real>(
    arrays: &mut Vec<Array2<T>>,
    cfg: &BaselineTrainConfig,
    seed: u64,
    n_examples: usize,
    targets: &[f64],
    forward: impl Fn(&Tape<T>, &[Var], &[usize]) -> Var,
) -> Result<(), BaselineError> {
    let (train_idx, val_idx) = if n_examples > 4 {
        carve_validation(n_examples, cfg.val_fraction, seed)
    } else {
        ((0..n_examples).collect(), (0..n_examples).collect())
    };

    let mut optimizer = crate::train::AdamW::<T>::new(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_val = f64::INFINITY;
    let mut best_arrays = arrays.clone();
    let mut no_improve = 0usize;

    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_targets =
                Array2::from_shape_fn((chunk.len(), 1), |(r, _)| T::from_f64(targets[chunk[r]]));
            let tape = Tape::new();
            let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
            let pred = forward(&tape, &vars, chunk);
            let loss = tape.mse_rows(pred, &batch_targets);
            let loss_val = tape.scalar(loss).as_f64();
            if !loss_val.is_finite() {
                return Err(BaselineError::NonFiniteLoss(epoch));
            }
            tape.backward(loss);
            let mut grads: Vec<Array2<T>> = vars
                .iter()
                .zip(arrays.iter())
                .map(|(&v, a)| tape.grad(v).unwrap_or_else(|| Array2::zeros(a.dim())))
                .collect();
            if let Some(max_norm) = cfg.grad_clip {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|&v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm && norm > 0.0 {
                    let s = T::from_f64(max_norm / norm);
                    for g in &mut grads {
                        g.mapv_inplace(|v| v * s);
                    }
                }
            }
            let mut param_refs: Vec<&mut Array2<T>> = arrays.iter_mut().collect();
            optimizer.step_arrays(&mut param_refs, &grads, cfg.learning_rate);
        }

        // Early stop on held-out RMSE in the standardized space.
        let tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let pred = forward(&tape, &vars, &val_idx);
        let pred_vals = tape.value(pred);
        let mut sq = 0.0;
        for (row, &i) in val_idx.iter().enumerate() {
            let d = pred_vals[[row, 0]].as_f64() - targets[i];
            sq += d * d;
        }
        let val_rmse = (sq / val_idx.len() as f64).sqrt();
        if val_rmse < best_val {
            best_val = val_rmse;
            best_arrays = arrays.clone();
            no_improve = 0;
        } else {
            no_improve += 1;
            if cfg.early_stop_patience > 0 && no_improve >= cfg.early_stop_patience {
                break;
            }
        }
    }
    *arrays = best_arrays;
    Ok(())
}
