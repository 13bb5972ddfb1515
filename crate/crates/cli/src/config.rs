//! TOML run configuration: defaults for every field, file values override
//! defaults, command-line flags override file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use footfall_core::baselines::BaselineTrainConfig;
use footfall_core::data::{CategorySpec, SplitStrategy, SyntheticSpec};
use footfall_core::eval::ModelSettings;
use footfall_core::prompt::{PromptKind, PromptVariant};
use footfall_core::train::TrainingConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: SyntheticSection,
    pub data: DataSection,
    pub prompt: PromptSection,
    pub model: ModelSettings,
    pub training: TrainingConfig,
    pub baseline: BaselineTrainConfig,
    pub protocol: ProtocolSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synthetic: SyntheticSection::default(),
            data: DataSection::default(),
            prompt: PromptSection::default(),
            model: ModelSettings::default(),
            training: TrainingConfig::default(),
            baseline: BaselineTrainConfig::default(),
            protocol: ProtocolSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub city: String,
    pub num_pois: u32,
    pub start_date: NaiveDate,
    pub num_days: u32,
    pub noise: f64,
    pub seed: u64,
    pub categories: Vec<CategorySpec>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            city: "synthetic".into(),
            num_pois: 20,
            start_date: NaiveDate::from_ymd_opt(2020, 6, 15).expect("valid date"),
            num_days: 147,
            noise: 0.15,
            seed: 1000,
            categories: default_categories(),
        }
    }
}

/// Weekly shapes with distinct magnitudes and weekday/weekend contrast.
pub fn default_categories() -> Vec<CategorySpec> {
    vec![
        CategorySpec {
            label: "Hotel".into(),
            base_rate: 30.0,
            weekly_profile: [0.8, 0.8, 0.8, 0.9, 1.1, 1.5, 1.5],
        },
        CategorySpec {
            label: "Commercial Banking".into(),
            base_rate: 12.0,
            weekly_profile: [1.3, 1.25, 1.2, 1.2, 1.15, 0.25, 0.15],
        },
        CategorySpec {
            label: "Limited-Service Restaurant".into(),
            base_rate: 22.0,
            weekly_profile: [0.9, 0.9, 1.0, 1.0, 1.2, 1.3, 1.1],
        },
        CategorySpec {
            label: "Supermarket".into(),
            base_rate: 45.0,
            weekly_profile: [0.9, 0.85, 0.9, 0.95, 1.1, 1.4, 1.2],
        },
        CategorySpec {
            label: "Fitness Center".into(),
            base_rate: 16.0,
            weekly_profile: [1.3, 1.25, 1.2, 1.1, 1.0, 0.7, 0.6],
        },
        CategorySpec {
            label: "Museum".into(),
            base_rate: 8.0,
            weekly_profile: [0.5, 0.9, 1.0, 1.0, 1.1, 1.7, 1.8],
        },
        CategorySpec {
            label: "Pharmacy".into(),
            base_rate: 14.0,
            weekly_profile: [1.1, 1.1, 1.1, 1.1, 1.1, 0.8, 0.7],
        },
    ]
}

impl SyntheticSection {
    pub fn to_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_pois: self.num_pois,
            categories: self.categories.clone(),
            start_date: self.start_date,
            num_days: self.num_days,
            noise: self.noise,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub window: usize,
    pub ratios: [f64; 3],
    /// "chronological" or "random" (sensitivity checks only).
    pub split: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { window: 15, ratios: [0.7, 0.1, 0.2], split: "chronological".into() }
    }
}

impl DataSection {
    pub fn strategy(&self) -> Option<SplitStrategy> {
        match self.split.as_str() {
            "chronological" => Some(SplitStrategy::Chronological),
            "random" => Some(SplitStrategy::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    /// "a", "b", or "c".
    pub variant: String,
    pub include_dates: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection { variant: "c".into(), include_dates: true }
    }
}

pub fn parse_variant(name: &str, include_dates: bool) -> Option<PromptVariant> {
    let kind = match name.to_ascii_lowercase().as_str() {
        "a" => PromptKind::A,
        "b" => PromptKind::B,
        "c" => PromptKind::C,
        _ => return None,
    };
    Some(PromptVariant { kind, include_dates })
}

impl PromptSection {
    pub fn to_variant(&self) -> Option<PromptVariant> {
        parse_variant(&self.variant, self.include_dates)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub seeds: Vec<u64>,
    pub jobs: usize,
    /// City name -> (lambda_ce, lambda_poi) preset.
    pub lambda_overrides: BTreeMap<String, (f64, f64)>,
    pub cities: Vec<CityFile>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            seeds: vec![1, 2, 3, 4, 5],
            jobs: 1,
            lambda_overrides: BTreeMap::new(),
            cities: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityFile {
    pub name: String,
    pub path: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
