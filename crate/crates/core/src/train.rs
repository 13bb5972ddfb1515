//! End-to-end optimization: token-level generation loss plus the auxiliary
//! category loss, combined with fixed mixing weights that sum to one;
//! adaptive-moment updates with decoupled weight decay, plateau learning-rate
//! decay, and early stopping on validation loss.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ForecastInstance;
use crate::model::{
    collect_grads, decode_batch, encode_batch, save_checkpoint, stage_params, BatchInput,
    ForwardOpts, ModelConfig, ModelError, ModelParameters,
};
use crate::prompt::{PromptPair, PromptVariant};
use crate::tensor::{Real, Tape, Var};
use crate::tokenizer::{Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("lambda_ce + lambda_poi must equal 1")]
    BadLambdas,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (total {total})")]
    NonFiniteLoss { epoch: usize, batch: usize, total: f64 },
    #[error("logits rows {logits} do not match target length {targets}")]
    LengthMismatch { logits: usize, targets: usize },
    #[error("category index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda_ce: f64,
    pub lambda_poi: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_cooldown: usize,
    pub plateau_factor: f64,
    pub batch_size: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda_ce: 0.8,
            lambda_poi: 0.2,
            learning_rate: 5e-5,
            weight_decay: 5e-4,
            epochs: 50,
            early_stop_patience: 10,
            plateau_patience: 6,
            plateau_cooldown: 2,
            plateau_factor: 0.1,
            batch_size: 32,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn with_lambdas(lambda_ce: f64, lambda_poi: f64) -> Result<Self, TrainError> {
        let cfg = TrainingConfig { lambda_ce, lambda_poi, ..Default::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if (self.lambda_ce + self.lambda_poi - 1.0).abs() > 1e-9
            || self.lambda_ce < 0.0
            || self.lambda_poi < 0.0
        {
            return Err(TrainError::BadLambdas);
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) || self.plateau_factor <= 0.0 {
            return Err(TrainError::InvalidConfig("plateau_factor must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean negative log-probability of the true token over unmasked positions.
/// Teacher forcing: `logits` row i predicts `targets[i]`.
pub fn sequence_ce_loss(
    logits: &Array2<f64>,
    targets: &[u32],
    active: &[bool],
) -> Result<f64, TrainError> {
    if logits.nrows() != targets.len() || targets.len() != active.len() {
        return Err(TrainError::LengthMismatch { logits: logits.nrows(), targets: targets.len() });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, (&t, &a)) in logits.rows().into_iter().zip(targets.iter().zip(active)) {
        if !a {
            continue;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t as usize];
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// Negative log-probability of the true category.
pub fn poi_ce_loss(probabilities: &[f64], true_category: usize) -> Result<f64, TrainError> {
    if true_category >= probabilities.len() {
        return Err(TrainError::IndexOutOfRange {
            index: true_category,
            classes: probabilities.len(),
        });
    }
    Ok(-probabilities[true_category].max(f64::MIN_POSITIVE).ln())
}

/// The fixed mixture `lambda_ce * ce + lambda_poi * poi`.
pub fn combined_loss(ce: f64, poi: f64, cfg: &TrainingConfig) -> f64 {
    cfg.lambda_ce * ce + cfg.lambda_poi * poi
}

/// Multiplies the learning rate by `factor` once validation loss has failed
/// to improve for `patience` consecutive epochs, then holds for `cooldown`
/// epochs before counting again.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    patience: usize,
    cooldown: usize,
    factor: f64,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
    cooldown_left: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, patience: usize, cooldown: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            cooldown,
            factor,
            lr: initial_lr,
            best: None,
            bad_epochs: 0,
            cooldown_left: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's validation loss; returns the learning rate to use
    /// from the next epoch on.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        match self.best {
            None => {
                self.best = Some(val_loss);
            }
            Some(best) if val_loss < best => {
                self.best = Some(val_loss);
                self.bad_epochs = 0;
            }
            Some(_) => {
                if self.cooldown_left > 0 {
                    self.cooldown_left -= 1;
                } else {
                    self.bad_epochs += 1;
                    if self.bad_epochs >= self.patience {
                        self.lr *= self.factor;
                        self.bad_epochs = 0;
                        self.cooldown_left = self.cooldown;
                    }
                }
            }
        }
        self.lr
    }
}

/// Adaptive-moment optimizer with decoupled weight decay. Moment buffers are
/// kept in the visit order of the parameter container.
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update over grads flattened in visit order.
    pub fn step_arrays(&mut self, params: &mut [&mut Array2<T>], grads: &[Array2<T>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let eps = T::from_f64(self.eps);
        let bias1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.weight_decay);

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *p;
                });
        }
    }

    /// Update a model in place from a gradient container of the same shape.
    pub fn step_model(&mut self, params: &mut ModelParameters<T>, grads: &ModelParameters<T>, lr: f64) {
        let mut flat_grads = Vec::new();
        grads.for_each(&mut |_, g| flat_grads.push(g.clone()));
        if self.m.is_empty() {
            self.m = flat_grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = flat_grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let eps = T::from_f64(self.eps);
        let bias1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.weight_decay);

        let mut idx = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.for_each_mut(&mut |_, p| {
            let g = &flat_grads[idx];
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *p;
            });
            idx += 1;
        });
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Real>(grads: &mut ModelParameters<T>, max_norm: f64) {
    let mut sq = 0.0f64;
    grads.for_each(&mut |_, g| {
        sq += g.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        grads.for_each_mut(&mut |_, g| g.mapv_inplace(|v| v * scale));
    }
}

/// Sorted unique category labels; index = classifier class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySet {
    labels: Vec<String>,
}

impl CategorySet {
    pub fn from_instances(instances: &[ForecastInstance]) -> Self {
        let mut labels: Vec<String> = instances.iter().map(|i| i.category.clone()).collect();
        labels.sort();
        labels.dedup();
        CategorySet { labels }
    }

    pub fn from_labels(mut labels: Vec<String>) -> Self {
        labels.sort();
        labels.dedup();
        CategorySet { labels }
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// One tokenized training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input_ids: Vec<u32>,
    /// `[BOS]` followed by the target tokens (teacher-forcing input).
    pub decoder_ids: Vec<u32>,
    /// Target tokens followed by `[EOS]` (teacher-forcing labels).
    pub label_ids: Vec<u32>,
    pub category: Option<usize>,
    pub target_count: u32,
    pub history_mean: f64,
}

impl Example {
    pub fn has_oov_input(&self) -> bool {
        self.input_ids.iter().any(|&id| id == UNK_ID)
    }
}

/// Vocabulary-building corpus for a set of training pairs: all input and
/// target texts plus the constant calendar lexicon.
pub fn corpus_for_vocab(pairs: &[PromptPair]) -> Vec<String> {
    let mut corpus: Vec<String> = pairs
        .iter()
        .flat_map(|p| [p.input_text.clone(), p.target_text.clone()])
        .collect();
    corpus.push(crate::prompt::calendar_lexicon());
    corpus
}

/// Tokenize rendered pairs against a vocabulary. `pairs` and `instances`
/// must be index-aligned (as produced by rendering each instance once).
/// `use_category` gates the auxiliary supervision signal.
pub fn prepare_examples(
    pairs: &[PromptPair],
    instances: &[ForecastInstance],
    vocab: &Vocabulary,
    categories: &CategorySet,
    use_category: bool,
) -> Vec<Example> {
    assert_eq!(pairs.len(), instances.len(), "pairs and instances must align");
    pairs
        .iter()
        .zip(instances)
        .map(|(pair, inst)| {
            let input_ids = vocab.encode(&pair.input_text, true).ids;
            let target = vocab.encode(&pair.target_text, false).ids;
            let mut decoder_ids = Vec::with_capacity(target.len() + 1);
            decoder_ids.push(BOS_ID);
            decoder_ids.extend_from_slice(&target);
            let mut label_ids = target;
            label_ids.push(EOS_ID);
            let category = if use_category {
                pair.category_target.as_deref().and_then(|c| categories.index_of(c))
            } else {
                None
            };
            Example {
                input_ids,
                decoder_ids,
                label_ids,
                category,
                target_count: pair.mobility_target,
                history_mean: inst.history_mean(),
            }
        })
        .collect()
}

/// Graph for one batch: returns (total, ce, poi) loss nodes. The auxiliary
/// branch is only built when it carries weight and at least one example is
/// category-supervised, so a zero mixing weight cannot leak gradient into
/// the head.
pub fn batch_loss_graph<T: Real>(
    tape: &Tape<T>,
    vars: &crate::model::ParamVars,
    model_cfg: &ModelConfig,
    examples: &[&Example],
    lambda_ce: f64,
    lambda_poi: f64,
    opts: &mut ForwardOpts<T>,
) -> Result<(Var, Var, Var), ModelError> {
    let inputs: Vec<&[u32]> = examples.iter().map(|e| e.input_ids.as_slice()).collect();
    let input_batch = BatchInput::from_sequences(&inputs, PAD_ID);
    let encoded = encode_batch(tape, vars, model_cfg, &input_batch, opts)?;

    let targets: Vec<&[u32]> = examples.iter().map(|e| e.decoder_ids.as_slice()).collect();
    let target_batch = BatchInput::from_sequences(&targets, PAD_ID);
    let logits = decode_batch(tape, vars, model_cfg, &target_batch, &encoded, opts)?;

    let lt = target_batch.seq_len;
    let mut labels = vec![0usize; examples.len() * lt];
    let mut active = vec![false; examples.len() * lt];
    for (b, e) in examples.iter().enumerate() {
        for (k, &id) in e.label_ids.iter().enumerate() {
            labels[b * lt + k] = id as usize;
            active[b * lt + k] = true;
        }
    }
    let ce = tape.cross_entropy_rows(logits, &labels, &active);

    let supervised: Vec<usize> = examples
        .iter()
        .enumerate()
        .filter_map(|(b, e)| e.category.map(|_| b))
        .collect();
    let poi = if lambda_poi != 0.0 && !supervised.is_empty() {
        let cls_rows: Vec<usize> = supervised.iter().map(|&b| b * input_batch.seq_len).collect();
        let cls = tape.gather_rows(encoded.hidden, &cls_rows);
        let aux_logits = tape.linear(cls, vars.aux_head_weight, Some(vars.aux_head_bias));
        let cats: Vec<usize> = supervised
            .iter()
            .map(|&b| examples[b].category.expect("filtered to supervised"))
            .collect();
        let active = vec![true; cats.len()];
        tape.cross_entropy_rows(aux_logits, &cats, &active)
    } else {
        tape.leaf(Array2::zeros((1, 1)))
    };

    let ce_part = tape.scale(ce, T::from_f64(lambda_ce));
    let poi_part = tape.scale(poi, T::from_f64(lambda_poi));
    let total = tape.add(ce_part, poi_part);
    Ok((total, ce, poi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_total: f64,
    pub train_ce: f64,
    pub train_poi: f64,
    pub val_total: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose validation loss was lowest.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Train on prepared examples; returns the parameters of the best-validation
/// epoch plus the per-epoch report. Fully deterministic per config seed.
pub fn train<T: Real>(
    params: ModelParameters<T>,
    model_cfg: &ModelConfig,
    cfg: &TrainingConfig,
    train_set: &[Example],
    val_set: &[Example],
    vocab: &Vocabulary,
    variant: PromptVariant,
) -> Result<(ModelParameters<T>, TrainReport), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }

    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdamW::<T>::new(cfg.weight_decay);
    let mut scheduler =
        PlateauScheduler::new(cfg.learning_rate, cfg.plateau_patience, cfg.plateau_cooldown, cfg.plateau_factor);

    let mut report = TrainReport { epochs: Vec::new(), best_epoch: 0, stopped_early: false };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut no_improve = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = scheduler.lr();
        order.shuffle(&mut rng);

        let mut sum_total = 0.0;
        let mut sum_ce = 0.0;
        let mut sum_poi = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let tape = Tape::new();
            let vars = stage_params(&tape, &params);
            let mut opts = ForwardOpts { dropout_rng: Some(&mut rng), attn_trace: None };
            let (total, ce, poi) =
                batch_loss_graph(&tape, &vars, model_cfg, &examples, cfg.lambda_ce, cfg.lambda_poi, &mut opts)?;

            let ce_val = tape.scalar(ce).as_f64();
            let poi_val = tape.scalar(poi).as_f64();
            let total_val = combined_loss(ce_val, poi_val, cfg);
            if !total_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx, total: total_val });
            }
            sum_total += total_val;
            sum_ce += ce_val;
            sum_poi += poi_val;
            batches += 1;

            tape.backward(total);
            let mut grads = collect_grads(&tape, &vars, &params);
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            optimizer.step_model(&mut params, &grads, lr);
        }

        let (val_total, val_rmse) = validate(&params, model_cfg, cfg, val_set, vocab, variant)?;
        if !val_total.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX, total: val_total });
        }

        report.epochs.push(EpochMetrics {
            epoch,
            train_total: sum_total / batches.max(1) as f64,
            train_ce: sum_ce / batches.max(1) as f64,
            train_poi: sum_poi / batches.max(1) as f64,
            val_total,
            val_rmse,
            lr,
        });

        if val_total < best_val {
            best_val = val_total;
            best_params = params.clone();
            report.best_epoch = epoch;
            no_improve = 0;
        } else {
            no_improve += 1;
            if cfg.early_stop_patience > 0 && no_improve >= cfg.early_stop_patience {
                report.stopped_early = true;
                scheduler.observe(val_total);
                break;
            }
        }
        scheduler.observe(val_total);
    }

    Ok((best_params, report))
}

/// Validation loss (no dropout) and greedy-decode RMSE over the validation set.
fn validate<T: Real>(
    params: &ModelParameters<T>,
    model_cfg: &ModelConfig,
    cfg: &TrainingConfig,
    val_set: &[Example],
    vocab: &Vocabulary,
    variant: PromptVariant,
) -> Result<(f64, f64), TrainError> {
    let mut sum_total = 0.0;
    let mut batches = 0usize;
    for chunk in val_set.chunks(cfg.batch_size) {
        let examples: Vec<&Example> = chunk.iter().collect();
        let tape = Tape::new();
        let vars = stage_params(&tape, params);
        let mut opts = ForwardOpts::eval();
        let (_, ce, poi) =
            batch_loss_graph(&tape, &vars, model_cfg, &examples, cfg.lambda_ce, cfg.lambda_poi, &mut opts)?;
        let total = combined_loss(tape.scalar(ce).as_f64(), tape.scalar(poi).as_f64(), cfg);
        sum_total += total;
        batches += 1;
    }
    let val_total = sum_total / batches.max(1) as f64;

    let outcome = crate::eval::decode_predictions(params, model_cfg, vocab, val_set, variant)
        .map_err(TrainError::Model)?;
    let truth: Vec<f64> = val_set.iter().map(|e| e.target_count as f64).collect();
    let val_rmse = crate::eval::rmse(&outcome.predictions, &truth).unwrap_or(f64::NAN);
    Ok((val_total, val_rmse))
}

/// Write the per-epoch metrics CSV and the best checkpoint into a run
/// directory.
pub fn write_run_artifacts<T: Real>(
    dir: &Path,
    model_cfg: &ModelConfig,
    best_params: &ModelParameters<T>,
    report: &TrainReport,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("epoch,total,ce,poi,val_total,val_rmse,lr\n");
    for m in &report.epochs {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.8}\n",
            m.epoch, m.train_total, m.train_ce, m.train_poi, m.val_total, m.val_rmse, m.lr
        ));
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;
    save_checkpoint(best_params, model_cfg, &dir.join("best.mobl"))?;
    Ok(())
}
