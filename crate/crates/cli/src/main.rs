//! Single binary exposing the forecasting pipeline as subcommands:
//! `synth`, `ingest`, `prompt`, `train`, `eval`, `baseline`, `protocol`.
//! Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use config::{parse_variant, RunConfig};
use footfall_core::baselines::window_from_instance;
use footfall_core::data::{
    generate_synthetic_in, ingest_csv, make_windows, split_dataset_with, write_csv, DataError,
    DatasetSplit, ForecastInstance, VisitSeries,
};
use footfall_core::eval::{
    category_accuracy, evaluate_model, run_baseline_by_name, run_protocol, write_reports,
    CityData, EvalError, FallbackPolicy, Protocol, ProtocolConfig,
};
use footfall_core::model::{check_compatible, init_params, load_checkpoint, ModelParameters};
use footfall_core::prompt::{render_prompt, write_corpus_jsonl, PromptPair, PromptVariant};
use footfall_core::tokenizer::{build_vocab_with_max_len, Vocabulary};
use footfall_core::train::{
    corpus_for_vocab, prepare_examples, train, write_run_artifacts, CategorySet, TrainError,
};

#[derive(Parser)]
#[command(name = "footfall", about = "Prompt-based daily visitor-count forecasting pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override every seed in the loaded configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Parallel worker cap for protocol cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic visit-count dataset CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a raw CSV and re-emit it in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a dataset into a prompt corpus (JSON lines).
    Prompt {
        #[arg(long)]
        data: PathBuf,
        /// Prompt template: a, b, or c.
        #[arg(long)]
        variant: Option<String>,
        /// Drop the date clauses from inputs.
        #[arg(long)]
        no_dates: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the prompt model on a dataset; writes a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit and evaluate one numeric baseline on a dataset.
    Baseline {
        /// One of: history-mean, lr, gru, gru-att, transformer,
        /// transformer-temporal.
        #[arg(long)]
        name: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment protocol over the configured cities.
    Protocol {
        /// One of: standard, aux_ablation, date_ablation, zero_shot.
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped onto process exit codes.
enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

fn data_err(e: DataError) -> CliError {
    match e {
        DataError::InvalidSpec(_) | DataError::BadRatios => CliError::Config(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::BadLambdas | TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
        TrainError::EmptyCorpus => CliError::Data(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn eval_err(e: EvalError) -> CliError {
    match e {
        EvalError::Data(d) => data_err(d),
        EvalError::Train(t) => train_err(t),
        EvalError::MissingDataset(_) | EvalError::EmptyInput => CliError::Data(e.to_string()),
        EvalError::IncompatibleVocabulary(_) => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn main() {
    let cli = Cli::parse();
    let mut created: Vec<PathBuf> = Vec::new();
    match run(&cli, &mut created) {
        Ok(()) => {}
        Err(err) => {
            // Remove partial outputs so failures never leave half-written files.
            for path in created {
                if path.is_dir() {
                    let _ = std::fs::remove_dir_all(&path);
                } else {
                    let _ = std::fs::remove_file(&path);
                }
            }
            eprintln!("error: {}", err.message());
            std::process::exit(err.code());
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synthetic.seed = seed;
        cfg.training.seed = seed;
        cfg.protocol.seeds = vec![seed];
    }
    if let Some(jobs) = cli.jobs {
        cfg.protocol.jobs = jobs;
    }
    Ok(cfg)
}

fn load_series(path: &Path) -> Result<Vec<VisitSeries>, CliError> {
    ingest_csv(path).map_err(data_err)
}

fn windows_of(series: &[VisitSeries], window: usize) -> Result<Vec<ForecastInstance>, CliError> {
    let mut instances = Vec::new();
    for s in series {
        instances.extend(make_windows(s, window).map_err(data_err)?);
    }
    if instances.is_empty() {
        return Err(CliError::Data("empty dataset".into()));
    }
    Ok(instances)
}

fn split_instances(cfg: &RunConfig, instances: Vec<ForecastInstance>) -> Result<DatasetSplit, CliError> {
    let strategy = cfg
        .data
        .strategy()
        .ok_or_else(|| CliError::Config(format!("unknown split strategy {:?}", cfg.data.split)))?;
    let [r_train, r_val, r_test] = cfg.data.ratios;
    split_dataset_with(instances, (r_train, r_val, r_test), strategy, cfg.training.seed)
        .map_err(data_err)
}

fn variant_from(cfg: &RunConfig, flag: Option<&str>, no_dates: bool) -> Result<PromptVariant, CliError> {
    let name = flag.unwrap_or(&cfg.prompt.variant);
    let include_dates = if no_dates { false } else { cfg.prompt.include_dates };
    parse_variant(name, include_dates)
        .ok_or_else(|| CliError::Config(format!("unknown prompt variant {name:?}")))
}

fn run(cli: &Cli, created: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out } => {
            let spec = cfg.synthetic.to_spec();
            spec.validate().map_err(data_err)?;
            let series =
                generate_synthetic_in(&spec, &cfg.synthetic.city).map_err(data_err)?;
            created.push(out.clone());
            write_csv(&series, out).map_err(data_err)?;
        }
        Command::Ingest { input, out } => {
            let series = load_series(input)?;
            created.push(out.clone());
            write_csv(&series, out).map_err(data_err)?;
        }
        Command::Prompt { data, variant, no_dates, out } => {
            let variant = variant_from(&cfg, variant.as_deref(), *no_dates)?;
            let series = load_series(data)?;
            let instances = windows_of(&series, cfg.data.window)?;
            let pairs: Vec<PromptPair> =
                instances.iter().map(|i| render_prompt(i, variant)).collect();
            created.push(out.clone());
            write_corpus_jsonl(&pairs, out)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        Command::Train { data, out } => {
            let variant = variant_from(&cfg, None, false)?;
            let series = load_series(data)?;
            let instances = windows_of(&series, cfg.data.window)?;
            let split = split_instances(&cfg, instances)?;

            let train_pairs: Vec<PromptPair> =
                split.train.iter().map(|i| render_prompt(i, variant)).collect();
            let val_pairs: Vec<PromptPair> =
                split.validation.iter().map(|i| render_prompt(i, variant)).collect();
            let corpus = corpus_for_vocab(&train_pairs);
            let vocab = build_vocab_with_max_len(&corpus, 1, cfg.model.max_len)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let categories = CategorySet::from_instances(&split.train);
            let train_ex = prepare_examples(&train_pairs, &split.train, &vocab, &categories, true);
            let val_ex = prepare_examples(&val_pairs, &split.validation, &vocab, &categories, true);

            let model_cfg = cfg.model.into_config(vocab.size(), categories.len().max(1));
            let params: ModelParameters<f32> =
                init_params(&model_cfg, cfg.training.seed).map_err(|e| CliError::Runtime(e.to_string()))?;
            created.push(out.clone());
            std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;
            log_line(out, "training started");
            let (best, report) =
                train(params, &model_cfg, &cfg.training, &train_ex, &val_ex, &vocab, variant)
                    .map_err(train_err)?;
            write_run_artifacts(out, &model_cfg, &best, &report).map_err(train_err)?;
            vocab
                .save(&out.join("vocab.txt"))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(out.join("config.toml"), cfg.snapshot())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            log_line(out, "training finished");
            let aux = category_accuracy(&best, &model_cfg, &val_ex).ok();
            println!(
                "best epoch {} (val {:.4}{}); artifacts in {}",
                report.best_epoch,
                report
                    .epochs
                    .iter()
                    .find(|m| m.epoch == report.best_epoch)
                    .map(|m| m.val_total)
                    .unwrap_or(f64::NAN),
                aux.map(|a| format!(", aux acc {a:.3}")).unwrap_or_default(),
                out.display()
            );
        }
        Command::Eval { checkpoint, vocab, data, out } => {
            let variant = variant_from(&cfg, None, false)?;
            let (params, model_cfg) = load_checkpoint::<f32>(checkpoint)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let vocab = Vocabulary::load_with_max_len(vocab, model_cfg.max_len)
                .map_err(|e| CliError::Data(e.to_string()))?;
            check_compatible(&model_cfg, vocab.size(), model_cfg.num_categories)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let series = load_series(data)?;
            let instances = windows_of(&series, cfg.data.window)?;
            let split = split_instances(&cfg, instances)?;
            let test_pairs: Vec<PromptPair> =
                split.test.iter().map(|i| render_prompt(i, variant)).collect();
            let categories = CategorySet::from_instances(&split.test);
            let test_ex = prepare_examples(&test_pairs, &split.test, &vocab, &categories, false);
            let outcome = evaluate_model(
                &params,
                &model_cfg,
                &vocab,
                &test_ex,
                variant,
                FallbackPolicy::HistoryMean,
            )
            .map_err(eval_err)?;
            created.push(out.clone());
            std::fs::write(
                out,
                format!(
                    "rmse,mae,parse_fail,oov_rate\n{:.6},{:.6},{:.6},{:.6}\n",
                    outcome.rmse, outcome.mae, outcome.parse_failure_rate, outcome.oov_rate
                ),
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("rmse {:.3} mae {:.3}", outcome.rmse, outcome.mae);
        }
        Command::Baseline { name, data, out } => {
            if !footfall_core::eval::BASELINE_NAMES.contains(&name.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown baseline {name:?}; expected one of {}",
                    footfall_core::eval::BASELINE_NAMES.join(", ")
                )));
            }
            let series = load_series(data)?;
            let instances = windows_of(&series, cfg.data.window)?;
            let split = split_instances(&cfg, instances)?;
            let train_windows: Vec<_> = split.train.iter().map(window_from_instance).collect();
            let test_windows: Vec<_> = split.test.iter().map(window_from_instance).collect();
            let outcome = run_baseline_by_name(
                name,
                &train_windows,
                &test_windows,
                &cfg.baseline,
                cfg.training.seed,
            )
            .map_err(eval_err)?;
            created.push(out.clone());
            std::fs::write(
                out,
                format!("rmse,mae\n{:.6},{:.6}\n", outcome.rmse, outcome.mae),
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{name}: rmse {:.3} mae {:.3}", outcome.rmse, outcome.mae);
        }
        Command::Protocol { name, out } => {
            let protocol = Protocol::parse(name)
                .ok_or_else(|| CliError::Config(format!("unknown protocol {name:?}")))?;
            if cfg.protocol.cities.is_empty() {
                return Err(CliError::Config("no cities configured under [protocol]".into()));
            }
            let mut cities = Vec::new();
            for city in &cfg.protocol.cities {
                cities.push(CityData { name: city.name.clone(), series: load_series(&city.path)? });
            }
            let variant = variant_from(&cfg, None, false)?;
            let [r_train, r_val, r_test] = cfg.data.ratios;
            let lambda_overrides: BTreeMap<String, (f64, f64)> =
                cfg.protocol.lambda_overrides.clone();
            let protocol_cfg = ProtocolConfig {
                cities,
                window: cfg.data.window,
                ratios: (r_train, r_val, r_test),
                variant,
                model: cfg.model.clone(),
                train: cfg.training.clone(),
                lambda_overrides,
                baseline: cfg.baseline.clone(),
                seeds: cfg.protocol.seeds.clone(),
                jobs: cfg.protocol.jobs,
            };
            created.push(out.clone());
            std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;
            log_line(out, &format!("protocol {name} started"));
            let reports = run_protocol(protocol, &protocol_cfg).map_err(eval_err)?;
            write_reports(&reports, out).map_err(eval_err)?;
            std::fs::write(out.join("config.toml"), cfg.snapshot())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            log_line(out, &format!("protocol {name} finished"));
            println!("{} report rows in {}", reports.len(), out.display());
        }
    }
    Ok(())
}

/// Timestamps live only in this log so every other artifact stays
/// byte-reproducible.
fn log_line(dir: &Path, message: &str) {
    let line = format!("{} {message}\n", chrono::Utc::now().to_rfc3339());
    let path = dir.join("run.log");
    let existing = std::fs::read_to_string(&path).unwrap_or_default();
    let _ = std::fs::write(&path, existing + &line);
}
