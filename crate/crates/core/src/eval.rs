//! RMSE/MAE metrics, greedy-decode evaluation with a disclosed parse-failure
//! fallback, multi-seed aggregation, and the standard / ablation / zero-shot
//! experiment protocols.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    fit_linear, history_mean_forecast, window_from_instance, BaselineError, BaselineTrainConfig,
    GruForecaster, NumericTransformerForecaster, NumericWindow,
};
use crate::data::{make_windows, split_dataset, DataError, DatasetSplit, VisitSeries};
use crate::model::{
    encode_batch, greedy_decode, init_params, stage_params, BatchInput, EncoderOutput,
    ForwardOpts, ModelConfig, ModelError, ModelParameters,
};
use crate::prompt::{parse_mobility_target, render_prompt, PromptPair, PromptVariant};
use crate::tensor::{Real, Tape};
use crate::tokenizer::{build_vocab_with_max_len, TokenizerError, Vocabulary, PAD_ID};
use crate::train::{
    prepare_examples, train, CategorySet, Example, TrainError, TrainReport, TrainingConfig,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and truth lengths differ: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("vocabulary incompatible with model: {0}")]
    IncompatibleVocabulary(String),
    #[error("missing dataset: {0}")]
    MissingDataset(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// What to substitute when generated text parses to no integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FallbackPolicy {
    /// The rounded mean of the instance's history window.
    HistoryMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub rmse: f64,
    pub mae: f64,
    pub parse_failure_rate: f64,
    pub oov_rate: f64,
}

/// Predictions plus bookkeeping from decoding a set of examples.
pub struct DecodedPredictions {
    pub predictions: Vec<f64>,
    pub parse_failures: usize,
    pub oov_instances: usize,
}

const DECODE_BATCH: usize = 64;
const MAX_DECODE_STEPS: usize = 16;

/// Greedy-decode every example (encoder runs batched), parse the generated
/// text, and fall back to the rounded history mean where parsing fails.
pub fn decode_predictions<T: Real>(
    params: &ModelParameters<T>,
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    examples: &[Example],
    variant: PromptVariant,
) -> Result<DecodedPredictions, ModelError> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut parse_failures = 0usize;
    let mut oov_instances = 0usize;

    for chunk in examples.chunks(DECODE_BATCH) {
        let inputs: Vec<&[u32]> = chunk.iter().map(|e| e.input_ids.as_slice()).collect();
        let batch = BatchInput::from_sequences(&inputs, PAD_ID);
        let tape = Tape::new();
        let vars = stage_params(&tape, params);
        let mut opts = ForwardOpts::eval();
        let encoded = encode_batch(&tape, &vars, model_cfg, &batch, &mut opts)?;
        let hidden = tape.value(encoded.hidden).clone();

        for (b, example) in chunk.iter().enumerate() {
            if example.has_oov_input() {
                oov_instances += 1;
            }
            let rows = example.input_ids.len();
            let mut item_hidden = Array2::zeros((rows, model_cfg.d_model));
            for r in 0..rows {
                item_hidden.row_mut(r).assign(&hidden.row(b * batch.seq_len + r));
            }
            let cls = item_hidden.row(0).to_vec();
            let output = EncoderOutput { hidden: item_hidden, cls_embedding: cls };
            let token_ids = greedy_decode(params, model_cfg, &output, MAX_DECODE_STEPS);
            let text = vocab
                .decode(&token_ids)
                .expect("greedy decode emits only in-vocabulary ids");
            match parse_mobility_target(&text, variant) {
                Ok(n) => predictions.push(n as f64),
                Err(_) => {
                    parse_failures += 1;
                    predictions.push(example.history_mean.round());
                }
            }
        }
    }
    Ok(DecodedPredictions { predictions, parse_failures, oov_instances })
}

/// Fraction of category-supervised examples whose head argmax matches the
/// true category (batched encoder, no dropout).
pub fn category_accuracy<T: Real>(
    params: &ModelParameters<T>,
    model_cfg: &ModelConfig,
    examples: &[Example],
) -> Result<f64, EvalError> {
    let supervised: Vec<&Example> = examples.iter().filter(|e| e.category.is_some()).collect();
    if supervised.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut correct = 0usize;
    for chunk in supervised.chunks(DECODE_BATCH) {
        let inputs: Vec<&[u32]> = chunk.iter().map(|e| e.input_ids.as_slice()).collect();
        let batch = BatchInput::from_sequences(&inputs, PAD_ID);
        let tape = Tape::new();
        let vars = stage_params(&tape, params);
        let mut opts = ForwardOpts::eval();
        let encoded = encode_batch(&tape, &vars, model_cfg, &batch, &mut opts)?;
        let probs_var = crate::model::classify_batch(&tape, &vars, &encoded);
        let probs = tape.value(probs_var);
        for (row, example) in chunk.iter().enumerate() {
            let mut best = 0usize;
            for j in 1..probs.ncols() {
                if probs[[row, j]] > probs[[row, best]] {
                    best = j;
                }
            }
            if Some(best) == example.category {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / supervised.len() as f64)
}

/// Metric computation shared by the real model path and stub decoders: the
/// closure turns an example into generated text.
pub fn evaluate_with(
    examples: &[Example],
    variant: PromptVariant,
    _fallback: FallbackPolicy,
    mut decode: impl FnMut(&Example) -> String,
) -> Result<EvalOutcome, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut predictions = Vec::with_capacity(examples.len());
    let mut failures = 0usize;
    let mut oov = 0usize;
    for example in examples {
        if example.has_oov_input() {
            oov += 1;
        }
        let text = decode(example);
        match parse_mobility_target(&text, variant) {
            Ok(n) => predictions.push(n as f64),
            Err(_) => {
                failures += 1;
                predictions.push(example.history_mean.round());
            }
        }
    }
    let truth: Vec<f64> = examples.iter().map(|e| e.target_count as f64).collect();
    Ok(EvalOutcome {
        rmse: rmse(&predictions, &truth)?,
        mae: mae(&predictions, &truth)?,
        parse_failure_rate: failures as f64 / examples.len() as f64,
        oov_rate: oov as f64 / examples.len() as f64,
    })
}

/// Evaluate trained parameters on prepared test examples (no dropout).
pub fn evaluate_model<T: Real>(
    params: &ModelParameters<T>,
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    examples: &[Example],
    variant: PromptVariant,
    _fallback: FallbackPolicy,
) -> Result<EvalOutcome, EvalError> {
    if vocab.size() != model_cfg.vocab_size {
        return Err(EvalError::IncompatibleVocabulary(format!(
            "vocab size {} vs model {}",
            vocab.size(),
            model_cfg.vocab_size
        )));
    }
    if examples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let decoded = decode_predictions(params, model_cfg, vocab, examples, variant)?;
    let truth: Vec<f64> = examples.iter().map(|e| e.target_count as f64).collect();
    Ok(EvalOutcome {
        rmse: rmse(&decoded.predictions, &truth)?,
        mae: mae(&decoded.predictions, &truth)?,
        parse_failure_rate: decoded.parse_failures as f64 / examples.len() as f64,
        oov_rate: decoded.oov_instances as f64 / examples.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub rmse: f64,
    pub mae: f64,
    pub parse_failure_rate: f64,
    pub oov_rate: f64,
}

/// Per-(model, variant, train-city, test-city) results across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_name: String,
    pub variant_label: String,
    pub city_train: String,
    pub city_test: String,
    pub per_seed: Vec<SeedMetrics>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation, so a single seed reports exactly zero.
fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

impl EvalReport {
    pub fn num_seeds(&self) -> usize {
        self.per_seed.len()
    }

    pub fn rmse_values(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.rmse).collect()
    }

    pub fn mean_rmse(&self) -> f64 {
        mean(&self.rmse_values())
    }

    pub fn std_rmse(&self) -> f64 {
        std_dev(&self.rmse_values())
    }

    pub fn mean_mae(&self) -> f64 {
        mean(&self.per_seed.iter().map(|s| s.mae).collect::<Vec<_>>())
    }

    pub fn std_mae(&self) -> f64 {
        std_dev(&self.per_seed.iter().map(|s| s.mae).collect::<Vec<_>>())
    }

    pub fn mean_parse_failure_rate(&self) -> f64 {
        mean(&self.per_seed.iter().map(|s| s.parse_failure_rate).collect::<Vec<_>>())
    }

    pub fn mean_oov_rate(&self) -> f64 {
        mean(&self.per_seed.iter().map(|s| s.oov_rate).collect::<Vec<_>>())
    }
}

/// Model dimensions without the data-dependent vocab/category counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub d_model: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::with_defaults(1, 1);
        ModelSettings {
            d_model: d.d_model,
            num_heads: d.num_heads,
            encoder_layers: d.encoder_layers,
            decoder_layers: d.decoder_layers,
            ffn_dim: d.ffn_dim,
            max_len: d.max_len,
            dropout: d.dropout,
            tie_embeddings: d.tie_embeddings,
        }
    }
}

impl ModelSettings {
    pub fn into_config(&self, vocab_size: usize, num_categories: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            num_heads: self.num_heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            num_categories,
            dropout: self.dropout,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CityData {
    pub name: String,
    pub series: Vec<VisitSeries>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Standard,
    AuxAblation,
    DateAblation,
    ZeroShot,
}

impl Protocol {
    pub fn parse(name: &str) -> Option<Protocol> {
        match name {
            "standard" => Some(Protocol::Standard),
            "aux_ablation" => Some(Protocol::AuxAblation),
            "date_ablation" => Some(Protocol::DateAblation),
            "zero_shot" => Some(Protocol::ZeroShot),
            _ => None,
        }
    }
}

/// Everything a protocol run needs. Loss-mixing presets may be overridden
/// per city; other cities fall back to `train.lambda_ce/lambda_poi`.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub cities: Vec<CityData>,
    pub window: usize,
    pub ratios: (f64, f64, f64),
    pub variant: PromptVariant,
    pub model: ModelSettings,
    pub train: TrainingConfig,
    pub lambda_overrides: BTreeMap<String, (f64, f64)>,
    pub baseline: BaselineTrainConfig,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

/// Rendered prompt splits plus everything needed to train and evaluate on
/// one city.
struct PreparedCity {
    name: String,
    vocab: Vocabulary,
    categories: CategorySet,
    train_examples: Vec<Example>,
    val_examples: Vec<Example>,
    test_examples: Vec<Example>,
    train_windows: Vec<NumericWindow>,
    test_windows: Vec<NumericWindow>,
}

fn split_city(city: &CityData, cfg: &ProtocolConfig) -> Result<DatasetSplit, EvalError> {
    if city.series.is_empty() {
        return Err(EvalError::MissingDataset(city.name.clone()));
    }
    let mut instances = Vec::new();
    for series in &city.series {
        instances.extend(make_windows(series, cfg.window)?);
    }
    Ok(split_dataset(instances, cfg.ratios, cfg.train.seed)?)
}

/// Tokenize one city's splits under a variant. The vocabulary is built from
/// the training split only; aux supervision follows `use_category`.
fn prepare_city(
    city: &CityData,
    cfg: &ProtocolConfig,
    variant: PromptVariant,
    use_category: bool,
) -> Result<PreparedCity, EvalError> {
    let split = split_city(city, cfg)?;
    let render_all = |instances: &[crate::data::ForecastInstance]| -> Vec<PromptPair> {
        instances.iter().map(|i| render_prompt(i, variant)).collect()
    };
    let train_pairs = render_all(&split.train);
    let val_pairs = render_all(&split.validation);
    let test_pairs = render_all(&split.test);

    let corpus = crate::train::corpus_for_vocab(&train_pairs);
    let vocab = build_vocab_with_max_len(&corpus, 1, cfg.model.max_len)?;
    let categories = CategorySet::from_instances(&split.train);

    let train_examples = prepare_examples(&train_pairs, &split.train, &vocab, &categories, use_category);
    let val_examples = prepare_examples(&val_pairs, &split.validation, &vocab, &categories, use_category);
    let test_examples = prepare_examples(&test_pairs, &split.test, &vocab, &categories, use_category);

    let train_windows: Vec<NumericWindow> = split.train.iter().map(window_from_instance).collect();
    let test_windows: Vec<NumericWindow> = split.test.iter().map(window_from_instance).collect();

    Ok(PreparedCity {
        name: city.name.clone(),
        vocab,
        categories,
        train_examples,
        val_examples,
        test_examples,
        train_windows,
        test_windows,
    })
}

fn lambdas_for(cfg: &ProtocolConfig, city: &str) -> (f64, f64) {
    cfg.lambda_overrides
        .get(city)
        .copied()
        .unwrap_or((cfg.train.lambda_ce, cfg.train.lambda_poi))
}

/// Train the prompt model on a prepared city and evaluate on a test set.
/// Returns the outcome plus the trained artifacts for reuse.
pub struct TrainedPromptModel {
    pub params: ModelParameters<f32>,
    pub model_cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub categories: CategorySet,
    pub report: TrainReport,
}

fn train_prompt_cell(
    prepared: &PreparedCity,
    cfg: &ProtocolConfig,
    variant: PromptVariant,
    lambdas: (f64, f64),
    seed: u64,
) -> Result<(TrainedPromptModel, EvalOutcome), EvalError> {
    let model_cfg = cfg.model.into_config(prepared.vocab.size(), prepared.categories.len().max(1));
    let mut train_cfg = cfg.train.clone();
    train_cfg.lambda_ce = lambdas.0;
    train_cfg.lambda_poi = lambdas.1;
    train_cfg.seed = seed;
    train_cfg.validate()?;

    let params: ModelParameters<f32> = init_params(&model_cfg, seed)?;
    let (best, report) = train(
        params,
        &model_cfg,
        &train_cfg,
        &prepared.train_examples,
        &prepared.val_examples,
        &prepared.vocab,
        variant,
    )?;
    let outcome = evaluate_model(
        &best,
        &model_cfg,
        &prepared.vocab,
        &prepared.test_examples,
        variant,
        FallbackPolicy::HistoryMean,
    )?;
    Ok((
        TrainedPromptModel {
            params: best,
            model_cfg,
            vocab: prepared.vocab.clone(),
            categories: prepared.categories.clone(),
            report,
        },
        outcome,
    ))
}

fn outcome_from_predictions(preds: &[f64], windows: &[NumericWindow]) -> Result<EvalOutcome, EvalError> {
    let truth: Vec<f64> = windows.iter().map(|w| w.target).collect();
    Ok(EvalOutcome {
        rmse: rmse(preds, &truth)?,
        mae: mae(preds, &truth)?,
        parse_failure_rate: 0.0,
        oov_rate: 0.0,
    })
}

/// Fit and evaluate one numeric baseline by name over prepared windows.
pub fn run_baseline_by_name(
    name: &str,
    train_windows: &[NumericWindow],
    test_windows: &[NumericWindow],
    cfg: &BaselineTrainConfig,
    seed: u64,
) -> Result<EvalOutcome, EvalError> {
    let preds: Vec<f64> = match name {
        "history-mean" => test_windows.iter().map(history_mean_forecast).collect(),
        "lr" => {
            let model = fit_linear(train_windows)?;
            test_windows.iter().map(|w| model.predict(w)).collect()
        }
        "gru" => {
            let model = GruForecaster::<f32>::fit(train_windows, false, cfg, seed)?;
            test_windows.iter().map(|w| model.predict(w)).collect()
        }
        "gru-att" => {
            let model = GruForecaster::<f32>::fit(train_windows, true, cfg, seed)?;
            test_windows.iter().map(|w| model.predict(w)).collect()
        }
        "transformer" => {
            let model = NumericTransformerForecaster::<f32>::fit(train_windows, false, cfg, seed)?;
            test_windows.iter().map(|w| model.predict(w)).collect()
        }
        "transformer-temporal" => {
            let model = NumericTransformerForecaster::<f32>::fit(train_windows, true, cfg, seed)?;
            test_windows.iter().map(|w| model.predict(w)).collect()
        }
        other => return Err(EvalError::MissingDataset(format!("unknown baseline {other}"))),
    };
    outcome_from_predictions(&preds, test_windows)
}

pub const BASELINE_NAMES: [&str; 6] =
    ["history-mean", "lr", "gru", "gru-att", "transformer", "transformer-temporal"];

/// Which baselines rerun per seed; the deterministic ones run once.
fn baseline_is_seeded(name: &str) -> bool {
    !matches!(name, "history-mean" | "lr")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    model_name: String,
    variant_label: String,
    city_train: String,
    city_test: String,
}

fn aggregate(cells: Vec<(CellKey, SeedMetrics)>) -> Vec<EvalReport> {
    let mut grouped: BTreeMap<CellKey, Vec<SeedMetrics>> = BTreeMap::new();
    for (key, metrics) in cells {
        grouped.entry(key).or_default().push(metrics);
    }
    grouped
        .into_iter()
        .map(|(key, mut per_seed)| {
            per_seed.sort_by_key(|s| s.seed);
            EvalReport {
                model_name: key.model_name,
                variant_label: key.variant_label,
                city_train: key.city_train,
                city_test: key.city_test,
                per_seed,
            }
        })
        .collect()
}

fn run_cells<F>(jobs: usize, tasks: Vec<F>) -> Result<Vec<(CellKey, SeedMetrics)>, EvalError>
where
    F: FnOnce() -> Result<(CellKey, SeedMetrics), EvalError> + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool construction");
    use rayon::prelude::*;
    pool.install(|| tasks.into_par_iter().map(|task| task()).collect())
}

/// Run one protocol end to end and aggregate per-seed metrics into reports.
///
/// - `Standard`: the prompt model plus every numeric baseline, per city.
/// - `AuxAblation`: prompt model with the auxiliary head at its preset
///   weight vs. disabled (category target dropped), per city.
/// - `DateAblation`: prompt inputs with vs. without date clauses, per city.
/// - `ZeroShot`: train on each city, evaluate on the other cities' test
///   splits with frozen parameters and vocabulary.
pub fn run_protocol(protocol: Protocol, cfg: &ProtocolConfig) -> Result<Vec<EvalReport>, EvalError> {
    match protocol {
        Protocol::Standard => run_standard(cfg),
        Protocol::AuxAblation => run_aux_ablation(cfg),
        Protocol::DateAblation => run_date_ablation(cfg),
        Protocol::ZeroShot => run_zero_shot(cfg),
    }
}

fn run_standard(cfg: &ProtocolConfig) -> Result<Vec<EvalReport>, EvalError> {
    let variant = cfg.variant;
    let mut tasks: Vec<Box<dyn FnOnce() -> Result<(CellKey, SeedMetrics), EvalError> + Send>> =
        Vec::new();
    for city in &cfg.cities {
        let prepared = std::sync::Arc::new(prepare_city(city, cfg, variant, true)?);
        let lambdas = lambdas_for(cfg, &city.name);
        for &seed in &cfg.seeds {
            let prepared = prepared.clone();
            let cfg_owned = cfg.clone();
            tasks.push(Box::new(move || {
                let (_, outcome) = train_prompt_cell(&prepared, &cfg_owned, variant, lambdas, seed)?;
                Ok((
                    CellKey {
                        model_name: "prompt".into(),
                        variant_label: variant.label(),
                        city_train: prepared.name.clone(),
                        city_test: prepared.name.clone(),
                    },
                    SeedMetrics {
                        seed,
                        rmse: outcome.rmse,
                        mae: outcome.mae,
                        parse_failure_rate: outcome.parse_failure_rate,
                        oov_rate: outcome.oov_rate,
                    },
                ))
            }));
        }
        for name in BASELINE_NAMES {
            let seeds: Vec<u64> =
                if baseline_is_seeded(name) { cfg.seeds.clone() } else { vec![cfg.seeds[0]] };
            for seed in seeds {
                let prepared = prepared.clone();
                let baseline_cfg = cfg.baseline.clone();
                let city_name = city.name.clone();
                tasks.push(Box::new(move || {
                    let outcome = run_baseline_by_name(
                        name,
                        &prepared.train_windows,
                        &prepared.test_windows,
                        &baseline_cfg,
                        seed,
                    )?;
                    Ok((
                        CellKey {
                            model_name: name.into(),
                            variant_label: "numeric".into(),
                            city_train: city_name.clone(),
                            city_test: city_name,
                        },
                        SeedMetrics {
                            seed,
                            rmse: outcome.rmse,
                            mae: outcome.mae,
                            parse_failure_rate: 0.0,
                            oov_rate: 0.0,
                        },
                    ))
                }));
            }
        }
    }
    Ok(aggregate(run_cells(cfg.jobs, tasks)?))
}

fn run_aux_ablation(cfg: &ProtocolConfig) -> Result<Vec<EvalReport>, EvalError> {
    let variant = cfg.variant;
    let mut tasks: Vec<Box<dyn FnOnce() -> Result<(CellKey, SeedMetrics), EvalError> + Send>> =
        Vec::new();
    for city in &cfg.cities {
        // With the auxiliary task off, the category target is dropped from
        // the pairs entirely.
        let with_aux = std::sync::Arc::new(prepare_city(city, cfg, variant, true)?);
        let without_aux = std::sync::Arc::new(prepare_city(city, cfg, variant, false)?);
        let preset = lambdas_for(cfg, &city.name);
        for &seed in &cfg.seeds {
            for (label, prepared, lambdas) in [
                ("prompt-aux", with_aux.clone(), preset),
                ("prompt-noaux", without_aux.clone(), (1.0, 0.0)),
            ] {
                let cfg_owned = cfg.clone();
                tasks.push(Box::new(move || {
                    let (_, outcome) =
                        train_prompt_cell(&prepared, &cfg_owned, variant, lambdas, seed)?;
                    Ok((
                        CellKey {
                            model_name: label.into(),
                            variant_label: variant.label(),
                            city_train: prepared.name.clone(),
                            city_test: prepared.name.clone(),
                        },
                        SeedMetrics {
                            seed,
                            rmse: outcome.rmse,
                            mae: outcome.mae,
                            parse_failure_rate: outcome.parse_failure_rate,
                            oov_rate: outcome.oov_rate,
                        },
                    ))
                }));
            }
        }
    }
    Ok(aggregate(run_cells(cfg.jobs, tasks)?))
}

fn run_date_ablation(cfg: &ProtocolConfig) -> Result<Vec<EvalReport>, EvalError> {
    let mut tasks: Vec<Box<dyn FnOnce() -> Result<(CellKey, SeedMetrics), EvalError> + Send>> =
        Vec::new();
    for city in &cfg.cities {
        let preset = lambdas_for(cfg, &city.name);
        for include_dates in [true, false] {
            let variant = PromptVariant { kind: cfg.variant.kind, include_dates };
            let prepared = std::sync::Arc::new(prepare_city(city, cfg, variant, true)?);
            for &seed in &cfg.seeds {
                let prepared = prepared.clone();
                let cfg_owned = cfg.clone();
                tasks.push(Box::new(move || {
                    let (_, outcome) =
                        train_prompt_cell(&prepared, &cfg_owned, variant, preset, seed)?;
                    Ok((
                        CellKey {
                            model_name: "prompt".into(),
                            variant_label: variant.label(),
                            city_train: prepared.name.clone(),
                            city_test: prepared.name.clone(),
                        },
                        SeedMetrics {
                            seed,
                            rmse: outcome.rmse,
                            mae: outcome.mae,
                            parse_failure_rate: outcome.parse_failure_rate,
                            oov_rate: outcome.oov_rate,
                        },
                    ))
                }));
            }
        }
    }
    Ok(aggregate(run_cells(cfg.jobs, tasks)?))
}

fn run_zero_shot(cfg: &ProtocolConfig) -> Result<Vec<EvalReport>, EvalError> {
    let variant = cfg.variant;
    // Prepare every city once for windows, and per train-city tokenized
    // splits; cross-city test examples are tokenized under the training
    // city's frozen vocabulary.
    let mut tasks: Vec<Box<dyn FnOnce() -> Result<Vec<(CellKey, SeedMetrics)>, EvalError> + Send>> =
        Vec::new();
    for train_city in &cfg.cities {
        let prepared = std::sync::Arc::new(prepare_city(train_city, cfg, variant, true)?);
        let lambdas = lambdas_for(cfg, &train_city.name);
        let others: Vec<CityData> =
            cfg.cities.iter().filter(|c| c.name != train_city.name).cloned().collect();
        for &seed in &cfg.seeds {
            let prepared = prepared.clone();
            let others = others.clone();
            let cfg_owned = cfg.clone();
            tasks.push(Box::new(move || {
                let (trained, _) = train_prompt_cell(&prepared, &cfg_owned, variant, lambdas, seed)?;
                let checksum_before = trained.params.checksum();
                let mut out = Vec::new();
                for test_city in &others {
                    let split = split_city(test_city, &cfg_owned)?;
                    let test_pairs: Vec<PromptPair> =
                        split.test.iter().map(|i| render_prompt(i, variant)).collect();
                    let test_examples = prepare_examples(
                        &test_pairs,
                        &split.test,
                        &trained.vocab,
                        &trained.categories,
                        true,
                    );
                    let outcome = evaluate_model(
                        &trained.params,
                        &trained.model_cfg,
                        &trained.vocab,
                        &test_examples,
                        variant,
                        FallbackPolicy::HistoryMean,
                    )?;
                    out.push((
                        CellKey {
                            model_name: "prompt".into(),
                            variant_label: variant.label(),
                            city_train: prepared.name.clone(),
                            city_test: test_city.name.clone(),
                        },
                        SeedMetrics {
                            seed,
                            rmse: outcome.rmse,
                            mae: outcome.mae,
                            parse_failure_rate: outcome.parse_failure_rate,
                            oov_rate: outcome.oov_rate,
                        },
                    ));
                }
                assert_eq!(
                    trained.params.checksum(),
                    checksum_before,
                    "zero-shot evaluation must not update parameters"
                );

                // Numeric reference under the same transfer: fit on the
                // training city, predict the other cities' test windows.
                let model = NumericTransformerForecaster::<f32>::fit(
                    &prepared.train_windows,
                    true,
                    &cfg_owned.baseline,
                    seed,
                )?;
                for test_city in &others {
                    let split = split_city(test_city, &cfg_owned)?;
                    let test_windows: Vec<NumericWindow> =
                        split.test.iter().map(window_from_instance).collect();
                    let preds: Vec<f64> = test_windows.iter().map(|w| model.predict(w)).collect();
                    let outcome = outcome_from_predictions(&preds, &test_windows)?;
                    out.push((
                        CellKey {
                            model_name: "transformer-temporal".into(),
                            variant_label: "numeric".into(),
                            city_train: prepared.name.clone(),
                            city_test: test_city.name.clone(),
                        },
                        SeedMetrics {
                            seed,
                            rmse: outcome.rmse,
                            mae: outcome.mae,
                            parse_failure_rate: 0.0,
                            oov_rate: 0.0,
                        },
                    ));
                }
                Ok(out)
            }));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .expect("thread pool construction");
    use rayon::prelude::*;
    let nested: Vec<Vec<(CellKey, SeedMetrics)>> =
        pool.install(|| tasks.into_par_iter().map(|task| task()).collect::<Result<_, _>>())?;
    Ok(aggregate(nested.into_iter().flatten().collect()))
}

/// Per-seed rows: `model,variant,train_city,test_city,seed,rmse,mae,parse_fail,oov_rate`.
pub fn write_per_seed_csv(reports: &[EvalReport], path: &Path) -> Result<(), EvalError> {
    let mut body = String::from("model,variant,train_city,test_city,seed,rmse,mae,parse_fail,oov_rate\n");
    for r in reports {
        for s in &r.per_seed {
            body.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.model_name, r.variant_label, r.city_train, r.city_test, s.seed, s.rmse, s.mae,
                s.parse_failure_rate, s.oov_rate
            ));
        }
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Aggregates with mean and standard deviation columns.
pub fn write_aggregate_csv(reports: &[EvalReport], path: &Path) -> Result<(), EvalError> {
    let mut body = String::from(
        "model,variant,train_city,test_city,num_seeds,rmse_mean,rmse_std,mae_mean,mae_std,parse_fail_mean,oov_rate_mean\n",
    );
    for r in reports {
        body.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.model_name,
            r.variant_label,
            r.city_train,
            r.city_test,
            r.num_seeds(),
            r.mean_rmse(),
            r.std_rmse(),
            r.mean_mae(),
            r.std_mae(),
            r.mean_parse_failure_rate(),
            r.mean_oov_rate()
        ));
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Long format for plotting tools: one metric value per row.
pub fn write_long_csv(reports: &[EvalReport], path: &Path) -> Result<(), EvalError> {
    let mut body = String::from("model,variant,train_city,test_city,metric,seed,value\n");
    for r in reports {
        for s in &r.per_seed {
            for (metric, value) in [
                ("rmse", s.rmse),
                ("mae", s.mae),
                ("parse_fail", s.parse_failure_rate),
                ("oov_rate", s.oov_rate),
            ] {
                body.push_str(&format!(
                    "{},{},{},{},{},{},{:.6}\n",
                    r.model_name, r.variant_label, r.city_train, r.city_test, metric, s.seed, value
                ));
            }
        }
    }
    std::fs::write(path, body)?;
    Ok(())
}

pub fn write_reports(reports: &[EvalReport], dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    write_per_seed_csv(reports, &dir.join("per_seed.csv"))?;
    write_aggregate_csv(reports, &dir.join("aggregate.csv"))?;
    write_long_csv(reports, &dir.join("long.csv"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_in, CategorySpec, SyntheticSpec};
    use crate::prompt::PromptKind;
    use chrono::NaiveDate;

    #[test]
    fn rmse_mae_basics() {
        assert_eq!(rmse(&[3.0, 4.0, 5.0], &[3.0, 4.0, 5.0]).unwrap(), 0.0);
        assert_eq!(mae(&[3.0, 4.0, 5.0], &[3.0, 4.0, 5.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[11.0], &[13.0]).unwrap(), 2.0);
        assert_eq!(mae(&[11.0], &[13.0]).unwrap(), 2.0);
        // sqrt((1+1)/2) = 1, (1+1)/2 = 1
        assert!((rmse(&[10.0, 12.0], &[11.0, 11.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((mae(&[10.0, 12.0], &[11.0, 11.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_errors() {
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(rmse(&[], &[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn rmse_dominates_mae_on_random_vectors() {
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 10_000) as f64 / 10.0
        };
        for _ in 0..200 {
            let n = 1 + (next() as usize % 20);
            let pred: Vec<f64> = (0..n).map(|_| next()).collect();
            let truth: Vec<f64> = (0..n).map(|_| next()).collect();
            let r = rmse(&pred, &truth).unwrap();
            let m = mae(&pred, &truth).unwrap();
            assert!(r >= m - 1e-12, "rmse {r} < mae {m}");
        }
    }

    fn stub_examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|k| Example {
                input_ids: vec![2, 7, 8],
                decoder_ids: vec![3, 9],
                label_ids: vec![9, 4],
                category: None,
                target_count: (k % 20) as u32 + 5,
                history_mean: 10.0,
            })
            .collect()
    }

    #[test]
    fn stub_oracle_decoder_scores_zero() {
        let examples = stub_examples(25);
        let variant = PromptVariant::new(PromptKind::C);
        let outcome = evaluate_with(&examples, variant, FallbackPolicy::HistoryMean, |e| {
            e.target_count.to_string()
        })
        .unwrap();
        assert_eq!(outcome.rmse, 0.0);
        assert_eq!(outcome.mae, 0.0);
        assert_eq!(outcome.parse_failure_rate, 0.0);
    }

    #[test]
    fn stub_unparseable_decoder_falls_back_to_history_mean() {
        let examples = stub_examples(25);
        let variant = PromptVariant::new(PromptKind::C);
        let outcome = evaluate_with(&examples, variant, FallbackPolicy::HistoryMean, |_| {
            "no numbers here".to_string()
        })
        .unwrap();
        assert_eq!(outcome.parse_failure_rate, 1.0);
        // Fallback = rounded history mean for every instance.
        let preds: Vec<f64> = examples.iter().map(|e| e.history_mean.round()).collect();
        let truth: Vec<f64> = examples.iter().map(|e| e.target_count as f64).collect();
        assert!((outcome.rmse - rmse(&preds, &truth).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_permutation_invariant_and_std_zero_for_single_seed() {
        let key = CellKey {
            model_name: "m".into(),
            variant_label: "C".into(),
            city_train: "a".into(),
            city_test: "a".into(),
        };
        let metrics = |seed: u64, rmse: f64| SeedMetrics {
            seed,
            rmse,
            mae: rmse / 2.0,
            parse_failure_rate: 0.0,
            oov_rate: 0.0,
        };
        let forward = aggregate(vec![(key.clone(), metrics(1, 4.0)), (key.clone(), metrics(2, 6.0))]);
        let backward = aggregate(vec![(key.clone(), metrics(2, 6.0)), (key.clone(), metrics(1, 4.0))]);
        assert_eq!(forward, backward);
        assert!((forward[0].mean_rmse() - 5.0).abs() < 1e-12);

        let single = aggregate(vec![(key, metrics(1, 4.0))]);
        assert_eq!(single[0].std_rmse(), 0.0);
    }

    fn micro_cities() -> Vec<CityData> {
        let mk = |name: &str, seed: u64| {
            let spec = SyntheticSpec {
                num_pois: 4,
                categories: vec![
                    CategorySpec {
                        label: "Hotel".into(),
                        base_rate: 14.0,
                        weekly_profile: [0.8, 0.8, 0.8, 0.8, 0.9, 1.5, 1.5],
                    },
                    CategorySpec {
                        label: "Bank".into(),
                        base_rate: 6.0,
                        weekly_profile: [1.3, 1.2, 1.2, 1.2, 1.2, 0.3, 0.2],
                    },
                ],
                start_date: NaiveDate::from_ymd_opt(2020, 6, 15).unwrap(),
                num_days: 40,
                noise: 0.15,
                seed,
            };
            CityData { name: name.into(), series: generate_synthetic_in(&spec, name).unwrap() }
        };
        vec![mk("alpha", 1), mk("beta", 2), mk("gamma", 3)]
    }

    fn micro_protocol_config() -> ProtocolConfig {
        ProtocolConfig {
            cities: micro_cities(),
            window: 15,
            ratios: (0.7, 0.1, 0.2),
            variant: PromptVariant::new(PromptKind::C),
            model: ModelSettings {
                d_model: 16,
                num_heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                ffn_dim: 32,
                max_len: 128,
                dropout: 0.0,
                tie_embeddings: false,
            },
            train: TrainingConfig {
                learning_rate: 1e-3,
                epochs: 1,
                batch_size: 16,
                seed: 0,
                ..TrainingConfig::with_lambdas(0.8, 0.2).unwrap()
            },
            lambda_overrides: BTreeMap::new(),
            baseline: BaselineTrainConfig {
                hidden: 8,
                layers: 1,
                epochs: 2,
                ..Default::default()
            },
            seeds: vec![1],
            jobs: 2,
        }
    }

    #[test]
    fn zero_shot_produces_six_pairs_per_model() {
        let cfg = micro_protocol_config();
        let reports = run_protocol(Protocol::ZeroShot, &cfg).unwrap();
        let prompt_pairs: Vec<(&str, &str)> = reports
            .iter()
            .filter(|r| r.model_name == "prompt")
            .map(|r| (r.city_train.as_str(), r.city_test.as_str()))
            .collect();
        assert_eq!(prompt_pairs.len(), 6);
        for (a, b) in &prompt_pairs {
            assert_ne!(a, b);
        }
        let numeric_pairs = reports.iter().filter(|r| r.model_name == "transformer-temporal").count();
        assert_eq!(numeric_pairs, 6);
    }

    #[test]
    fn aux_ablation_emits_two_rows_per_city() {
        let mut cfg = micro_protocol_config();
        cfg.cities.truncate(2);
        let reports = run_protocol(Protocol::AuxAblation, &cfg).unwrap();
        for city in ["alpha", "beta"] {
            let rows: Vec<&EvalReport> = reports.iter().filter(|r| r.city_train == city).collect();
            assert_eq!(rows.len(), 2, "city {city}");
            let names: Vec<&str> = rows.iter().map(|r| r.model_name.as_str()).collect();
            assert!(names.contains(&"prompt-aux"));
            assert!(names.contains(&"prompt-noaux"));
        }
    }

    #[test]
    fn date_ablation_emits_two_rows_per_city() {
        let mut cfg = micro_protocol_config();
        cfg.cities.truncate(1);
        let reports = run_protocol(Protocol::DateAblation, &cfg).unwrap();
        assert_eq!(reports.len(), 2);
        let labels: Vec<&str> = reports.iter().map(|r| r.variant_label.as_str()).collect();
        assert!(labels.contains(&"C"));
        assert!(labels.contains(&"C-nodates"));
    }

    #[test]
    fn report_csvs_have_expected_shapes() {
        let reports = vec![EvalReport {
            model_name: "prompt".into(),
            variant_label: "C".into(),
            city_train: "alpha".into(),
            city_test: "alpha".into(),
            per_seed: vec![
                SeedMetrics { seed: 1, rmse: 3.0, mae: 2.0, parse_failure_rate: 0.0, oov_rate: 0.0 },
                SeedMetrics { seed: 2, rmse: 4.0, mae: 2.5, parse_failure_rate: 0.1, oov_rate: 0.2 },
            ],
        }];
        let dir = tempfile::tempdir().unwrap();
        write_reports(&reports, dir.path()).unwrap();
        let per_seed = std::fs::read_to_string(dir.path().join("per_seed.csv")).unwrap();
        assert_eq!(per_seed.lines().count(), 3);
        let aggregate = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(aggregate.lines().count(), 2);
        assert!(aggregate.lines().nth(1).unwrap().contains("prompt,C,alpha,alpha,2"));
        let long = std::fs::read_to_string(dir.path().join("long.csv")).unwrap();
        assert_eq!(long.lines().count(), 1 + 2 * 4);
    }
}
