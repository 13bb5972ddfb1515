//! Daily visitor-count forecasting for places of interest, run through natural
//! language: count histories are rendered as sentences, a small encoder-decoder
//! transformer with an auxiliary venue-category head is trained on them, and
//! generated text is parsed back into numeric forecasts. Numeric baselines
//! (linear regression, recurrent nets, a small transformer over raw counts)
//! and the evaluation protocols live here too.

pub mod baselines;
pub mod data;
pub mod eval;
pub mod model;
pub mod prompt;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use data::{DatasetSplit, ForecastInstance, SyntheticSpec, VisitSeries};
pub use eval::EvalReport;
pub use model::{ModelConfig, ModelParameters};
pub use prompt::{PromptKind, PromptPair, PromptVariant};
pub use tokenizer::{TokenSequence, Vocabulary};
pub use train::{TrainReport, TrainingConfig};
