//! Sentence templates that serialize a count history into model input/target
//! text, plus the parsers that recover numeric forecasts and category labels
//! from generated text.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ForecastInstance;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no integer forecast found in {0:?}")]
    ParseFailure(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad corpus line {line}: {msg}")]
    BadCorpusLine { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    /// Full template: names the POI id and its category.
    A,
    /// Drops the POI id, keeps the category in the sentence.
    B,
    /// Drops both; the category becomes a separate classification target and
    /// the mobility target is the bare integer.
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub kind: PromptKind,
    /// When false, the input collapses to the date-free ablation sentence.
    pub include_dates: bool,
}

impl PromptVariant {
    pub fn new(kind: PromptKind) -> Self {
        Self { kind, include_dates: true }
    }

    pub fn without_dates(kind: PromptKind) -> Self {
        Self { kind, include_dates: false }
    }

    pub fn label(&self) -> String {
        let k = match self.kind {
            PromptKind::A => "A",
            PromptKind::B => "B",
            PromptKind::C => "C",
        };
        if self.include_dates {
            k.to_string()
        } else {
            format!("{k}-nodates")
        }
    }
}

/// A rendered training pair. `category_target` is present only for kind C.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub input_text: String,
    pub target_text: String,
    pub category_target: Option<String>,
    pub mobility_target: u32,
    pub instance_ref: String,
}

/// `"June 17, 2020, Wednesday"` — month name, zero-padded day, year, weekday.
pub fn format_date(d: NaiveDate) -> String {
    d.format("%B %d, %Y, %A").to_string()
}

/// Every calendar word the date format can emit, one line. Seeding the
/// vocabulary with this constant lexicon keeps months that fall outside a
/// chronological training split from encoding as unknowns.
pub fn calendar_lexicon() -> String {
    "January February March April May June July August September October November December \
     Monday Tuesday Wednesday Thursday Friday Saturday Sunday"
        .to_string()
}

fn join_counts(counts: &[u32]) -> String {
    let mut s = String::new();
    for (i, c) in counts.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        write!(s, "{c}").expect("writing to String cannot fail");
    }
    s
}

pub fn render_prompt(instance: &ForecastInstance, variant: PromptVariant) -> PromptPair {
    let counts = join_counts(&instance.history_counts);
    let input_text = if !variant.include_dates {
        format!("there were {counts} people visiting POI on each day.")
    } else {
        let first = format_date(instance.history_start);
        let last = format_date(instance.history_end());
        let target = format_date(instance.target_date);
        match variant.kind {
            PromptKind::A => format!(
                "Place-of-Interest (POI) {id} is a {cat}. From {first} to {last}, there were {counts} people visiting POI {id} on each day. On {target},",
                id = instance.poi_id,
                cat = instance.category,
            ),
            PromptKind::B => format!(
                "From {first} to {last}, there were {counts} people visiting POI {cat} on each day. On {target},",
                cat = instance.category,
            ),
            PromptKind::C => format!(
                "From {first} to {last}, there were {counts} people visiting POI on each day. On {target},",
            ),
        }
    };
    let n = instance.target_count;
    let (target_text, category_target) = match variant.kind {
        PromptKind::A => (
            format!("there will be {n} people visiting POI {}.", instance.poi_id),
            None,
        ),
        PromptKind::B => (format!("there will be {n} people."), None),
        PromptKind::C => (n.to_string(), Some(instance.category.clone())),
    };
    PromptPair {
        input_text,
        target_text,
        category_target,
        mobility_target: n,
        instance_ref: instance.reference(),
    }
}

fn first_integer(text: &str) -> Option<u32> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            return text[start..i].parse().ok();
        }
        i += 1;
    }
    None
}

/// Recover the integer forecast from generated text. Kinds A/B expect it
/// after the phrase "there will be"; kind C takes the first integer anywhere.
pub fn parse_mobility_target(text: &str, variant: PromptVariant) -> Result<u32, PromptError> {
    let text = text.trim();
    let scanned = match variant.kind {
        PromptKind::A | PromptKind::B => match text.find("there will be") {
            Some(pos) => &text[pos + "there will be".len()..],
            None => return Err(PromptError::ParseFailure(text.to_string())),
        },
        PromptKind::C => text,
    };
    first_integer(scanned).ok_or_else(|| PromptError::ParseFailure(text.to_string()))
}

/// Exact-match lookup of a generated category label; no fuzzy matching.
pub fn parse_category_target(text: &str, known_categories: &[String]) -> Result<String, PromptError> {
    let trimmed = text.trim();
    known_categories
        .iter()
        .find(|c| c.as_str() == trimmed)
        .cloned()
        .ok_or_else(|| PromptError::UnknownCategory(text.to_string()))
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord<'a> {
    input: &'a str,
    target: &'a str,
    category: Option<&'a str>,
    mobility_target: u32,
    instance_ref: &'a str,
}

/// One JSON object per line: `input`, `target`, `category` (nullable),
/// `mobility_target`, `instance_ref`.
pub fn write_corpus_jsonl(pairs: &[PromptPair], path: &Path) -> Result<(), PromptError> {
    let mut body = String::new();
    for p in pairs {
        let record = CorpusRecord {
            input: &p.input_text,
            target: &p.target_text,
            category: p.category_target.as_deref(),
            mobility_target: p.mobility_target,
            instance_ref: &p.instance_ref,
        };
        body.push_str(&serde_json::to_string(&record).expect("corpus records serialize"));
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<PromptPair>, PromptError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| PromptError::BadCorpusLine { line: idx + 1, msg: e.to_string() })?;
        let get = |k: &str| -> Result<String, PromptError> {
            record
                .get(k)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or_else(|| PromptError::BadCorpusLine { line: idx + 1, msg: format!("missing {k}") })
        };
        out.push(PromptPair {
            input_text: get("input")?,
            target_text: get("target")?,
            category_target: record.get("category").and_then(|v| v.as_str()).map(str::to_string),
            mobility_target: record
                .get("mobility_target")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| PromptError::BadCorpusLine { line: idx + 1, msg: "missing mobility_target".into() })?
                as u32,
            instance_ref: get("instance_ref")?,
        });
    }
    Ok(out)
}
