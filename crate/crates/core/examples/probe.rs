//! Temporary calibration probe for the desk-scale benchmark configuration.

use std::time::Instant;

use chrono::NaiveDate;
use footfall_core::baselines::{history_mean_forecast, window_from_instance};
use footfall_core::data::{generate_synthetic_in, make_windows, split_dataset, CategorySpec, SyntheticSpec};
use footfall_core::eval::{category_accuracy, evaluate_model, rmse, FallbackPolicy};
use footfall_core::model::{init_params, ModelConfig, ModelParameters};
use footfall_core::prompt::{render_prompt, PromptKind, PromptVariant};
use footfall_core::tokenizer::build_vocab_with_max_len;
use footfall_core::train::{prepare_examples, train, CategorySet, TrainingConfig};

fn categories() -> Vec<CategorySpec> {
    vec![
        CategorySpec { label: "Hotel".into(), base_rate: 30.0, weekly_profile: [0.8, 0.8, 0.8, 0.9, 1.1, 1.5, 1.5] },
        CategorySpec { label: "Commercial Banking".into(), base_rate: 12.0, weekly_profile: [1.3, 1.25, 1.2, 1.2, 1.15, 0.25, 0.15] },
        CategorySpec { label: "Limited-Service Restaurant".into(), base_rate: 22.0, weekly_profile: [0.9, 0.9, 1.0, 1.0, 1.2, 1.3, 1.1] },
        CategorySpec { label: "Supermarket".into(), base_rate: 45.0, weekly_profile: [0.9, 0.85, 0.9, 0.95, 1.1, 1.4, 1.2] },
        CategorySpec { label: "Fitness Center".into(), base_rate: 16.0, weekly_profile: [1.3, 1.25, 1.2, 1.1, 1.0, 0.7, 0.6] },
    ]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7e-4);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let num_pois: u32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let noise: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.15);

    let spec = SyntheticSpec {
        num_pois,
        categories: categories(),
        start_date: NaiveDate::from_ymd_opt(2020, 6, 15).unwrap(),
        num_days: 147,
        noise,
        seed: 1000,
    };
    let series = generate_synthetic_in(&spec, "alpha").unwrap();
    let mut instances = Vec::new();
    for s in &series {
        instances.extend(make_windows(s, 15).unwrap());
    }
    println!("instances: {}", instances.len());
    let split = split_dataset(instances, (0.7, 0.1, 0.2), 0).unwrap();
    println!("train {} / val {} / test {}", split.train.len(), split.validation.len(), split.test.len());

    let variant = PromptVariant::new(PromptKind::C);
    let render = |insts: &[footfall_core::data::ForecastInstance]| -> Vec<_> {
        insts.iter().map(|i| render_prompt(i, variant)).collect::<Vec<_>>()
    };
    let train_pairs = render(&split.train);
    let val_pairs = render(&split.validation);
    let test_pairs = render(&split.test);
    let corpus = footfall_core::train::corpus_for_vocab(&train_pairs);
    let vocab = build_vocab_with_max_len(&corpus, 1, 128).unwrap();
    println!("vocab size: {}", vocab.size());

    let cats = CategorySet::from_instances(&split.train);
    let train_ex = prepare_examples(&train_pairs, &split.train, &vocab, &cats, true);
    let val_ex = prepare_examples(&val_pairs, &split.validation, &vocab, &cats, true);
    let test_ex = prepare_examples(&test_pairs, &split.test, &vocab, &cats, true);
    println!("input len: {}", train_ex[0].input_ids.len());

    let model_cfg = ModelConfig::with_defaults(vocab.size(), cats.len());
    let train_cfg = TrainingConfig {
        learning_rate: lr,
        epochs,
        early_stop_patience: 0,
        batch_size: args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32),
        seed: 7,
        ..TrainingConfig::with_lambdas(0.8, 0.2).unwrap()
    };

    let params: ModelParameters<f32> = init_params(&model_cfg, 7).unwrap();
    let t0 = Instant::now();
    let (best, report) = train(params, &model_cfg, &train_cfg, &train_ex, &val_ex, &vocab, variant).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    println!("train time: {train_time:.1} s ({:.1} s/epoch)", train_time / report.epochs.len() as f64);
    for m in &report.epochs {
        println!(
            "epoch {}: train {:.4} (ce {:.4} poi {:.4}) val {:.4} val_rmse {:.3} lr {:.5}",
            m.epoch, m.train_total, m.train_ce, m.train_poi, m.val_total, m.val_rmse, m.lr
        );
    }
    let first_val = report.epochs.first().unwrap().val_total;
    let best_val = report.epochs.iter().map(|m| m.val_total).fold(f64::INFINITY, f64::min);
    println!("val ratio best/epoch1: {:.3}", best_val / first_val);

    let t1 = Instant::now();
    let outcome = evaluate_model(&best, &model_cfg, &vocab, &test_ex, variant, FallbackPolicy::HistoryMean).unwrap();
    println!("eval time: {:.1} s", t1.elapsed().as_secs_f64());
    let hm_preds: Vec<f64> = split.test.iter().map(|i| history_mean_forecast(&window_from_instance(i))).collect();
    let truth: Vec<f64> = split.test.iter().map(|i| i.target_count as f64).collect();
    let hm_rmse = rmse(&hm_preds, &truth).unwrap();
    println!(
        "test rmse {:.3} vs history-mean {:.3} | mae {:.3} | parse_fail {:.4} | oov {:.4}",
        outcome.rmse, hm_rmse, outcome.mae, outcome.parse_failure_rate, outcome.oov_rate
    );
    let acc = category_accuracy(&best, &model_cfg, &val_ex).unwrap();
    println!("aux val accuracy: {:.3} (chance {:.3})", acc, 1.0 / cats.len() as f64);
}
