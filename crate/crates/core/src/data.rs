//! Visit-count series: CSV ingestion, synthetic generation with
//! category-dependent weekly patterns, sliding-window extraction, and
//! chronological train/validation/test splitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed row at line {line}: {msg}")]
    MalformedRow { line: usize, msg: String },
    #[error("non-contiguous dates for POI {0}")]
    NonContiguousDates(u64),
    #[error("negative count for POI {poi_id} on {date}")]
    NegativeCount { poi_id: u64, date: NaiveDate },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("series too short: need at least {needed} days, have {have}")]
    SeriesTooShort { needed: usize, have: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("split ratios must be positive and sum to 1")]
    BadRatios,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One POI's daily visit counts, one entry per consecutive calendar day
/// starting at `start_date`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitSeries {
    pub poi_id: u64,
    pub category: String,
    pub city: String,
    pub start_date: NaiveDate,
    pub counts: Vec<u32>,
}

impl VisitSeries {
    pub fn date_of(&self, index: usize) -> NaiveDate {
        self.start_date + Duration::days(index as i64)
    }
}

/// A history window of `n` consecutive days plus the next-day target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForecastInstance {
    pub poi_id: u64,
    pub category: String,
    pub city: String,
    pub history_start: NaiveDate,
    pub history_counts: Vec<u32>,
    pub target_date: NaiveDate,
    pub target_count: u32,
}

impl ForecastInstance {
    pub fn history_dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        let start = self.history_start;
        (0..self.history_counts.len() as i64).map(move |k| start + Duration::days(k))
    }

    pub fn history_end(&self) -> NaiveDate {
        self.history_start + Duration::days(self.history_counts.len() as i64 - 1)
    }

    pub fn history_mean(&self) -> f64 {
        let sum: u64 = self.history_counts.iter().map(|&c| c as u64).sum();
        sum as f64 / self.history_counts.len() as f64
    }

    /// Stable identifier used to tie rendered prompts back to their source.
    pub fn reference(&self) -> String {
        format!("{}:{}:{}", self.city, self.poi_id, self.target_date)
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<ForecastInstance>,
    pub validation: Vec<ForecastInstance>,
    pub test: Vec<ForecastInstance>,
}

/// Weekly visiting pattern for one venue category. `weekly_profile` is indexed
/// Monday..Sunday and multiplies `base_rate` into the expected count per day.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategorySpec {
    pub label: String,
    pub base_rate: f64,
    pub weekly_profile: [f64; 7],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_pois: u32,
    pub categories: Vec<CategorySpec>,
    pub start_date: NaiveDate,
    pub num_days: u32,
    /// Dispersion of the multiplicative log-normal perturbation applied on top
    /// of the Poisson draw. Zero collapses each count to its rounded mean.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_pois == 0 {
            return Err(DataError::InvalidSpec("num_pois must be positive".into()));
        }
        if self.categories.is_empty() {
            return Err(DataError::InvalidSpec("categories must be non-empty".into()));
        }
        for cat in &self.categories {
            if cat.base_rate <= 0.0 || !cat.base_rate.is_finite() {
                return Err(DataError::InvalidSpec(format!(
                    "base_rate for {:?} must be positive",
                    cat.label
                )));
            }
            if cat.weekly_profile.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
                return Err(DataError::InvalidSpec(format!(
                    "weekly_profile for {:?} must be positive",
                    cat.label
                )));
            }
        }
        if self.num_days == 0 {
            return Err(DataError::InvalidSpec("num_days must be positive".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(DataError::InvalidSpec("noise must be non-negative".into()));
        }
        Ok(())
    }
}

const CSV_HEADER: [&str; 5] = ["poi_id", "category", "city", "date", "visits"];

/// Read `poi_id,category,city,date,visits` rows into one series per POI.
/// Counts end up ordered by date; any gap or duplicate day is an error.
pub fn ingest_csv(path: &Path) -> Result<Vec<VisitSeries>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DataError::MissingFile(path.to_path_buf()),
            _ => DataError::MalformedRow { line: 1, msg: e.to_string() },
        })?;

    {
        let headers = reader
            .headers()
            .map_err(|e| DataError::MalformedRow { line: 1, msg: e.to_string() })?;
        let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if got != CSV_HEADER {
            return Err(DataError::MalformedRow {
                line: 1,
                msg: format!("expected header {:?}, got {:?}", CSV_HEADER.join(","), got.join(",")),
            });
        }
    }

    // poi_id -> (category, city, date -> count)
    let mut grouped: BTreeMap<u64, (String, String, BTreeMap<NaiveDate, u32>)> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after the header line
        let record = record.map_err(|e| DataError::MalformedRow { line, msg: e.to_string() })?;
        if record.len() != 5 {
            return Err(DataError::MalformedRow {
                line,
                msg: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let poi_id: u64 = record[0]
            .trim()
            .parse()
            .map_err(|_| DataError::MalformedRow { line, msg: format!("bad poi_id {:?}", &record[0]) })?;
        let category = record[1].trim().to_string();
        let city = record[2].trim().to_string();
        let date = NaiveDate::parse_from_str(record[3].trim(), "%Y-%m-%d")
            .map_err(|_| DataError::MalformedRow { line, msg: format!("bad date {:?}", &record[3]) })?;
        let visits: i64 = record[4]
            .trim()
            .parse()
            .map_err(|_| DataError::MalformedRow { line, msg: format!("bad visits {:?}", &record[4]) })?;
        if visits < 0 {
            return Err(DataError::NegativeCount { poi_id, date });
        }

        let entry = grouped
            .entry(poi_id)
            .or_insert_with(|| (category.clone(), city.clone(), BTreeMap::new()));
        if entry.0 != category || entry.1 != city {
            return Err(DataError::MalformedRow {
                line,
                msg: format!("POI {poi_id} changes category or city mid-file"),
            });
        }
        if entry.2.insert(date, visits as u32).is_some() {
            // A repeated day breaks the one-count-per-day contract.
            return Err(DataError::NonContiguousDates(poi_id));
        }
    }

    let mut out = Vec::with_capacity(grouped.len());
    for (poi_id, (category, city, by_date)) in grouped {
        let mut dates = by_date.keys();
        let start_date = *dates.next().expect("group is non-empty by construction");
        for (offset, date) in by_date.keys().enumerate() {
            if *date != start_date + Duration::days(offset as i64) {
                return Err(DataError::NonContiguousDates(poi_id));
            }
        }
        let counts = by_date.values().copied().collect();
        out.push(VisitSeries { poi_id, category, city, start_date, counts });
    }
    Ok(out)
}

/// Serialize series back to the ingestion CSV schema.
pub fn write_csv(series: &[VisitSeries], path: &Path) -> Result<(), DataError> {
    let mut body = String::new();
    body.push_str(&CSV_HEADER.join(","));
    body.push('\n');
    for s in series {
        for (k, &count) in s.counts.iter().enumerate() {
            writeln!(
                body,
                "{},{},{},{},{}",
                s.poi_id,
                s.category,
                s.city,
                s.date_of(k),
                count
            )
            .expect("writing to String cannot fail");
        }
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Generate `num_pois` series, assigning categories round-robin. The expected
/// count on weekday `w` is `base_rate * weekly_profile[w]`; with positive
/// noise the draw is Poisson around that mean times a mean-corrected
/// log-normal factor, with zero noise it is the rounded mean itself.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<VisitSeries>, DataError> {
    generate_synthetic_in(spec, "synthetic")
}

/// Same generator with an explicit city label on every series.
pub fn generate_synthetic_in(spec: &SyntheticSpec, city: &str) -> Result<Vec<VisitSeries>, DataError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.num_pois as usize);
    for poi in 0..spec.num_pois as u64 {
        // Per-POI stream so the series for POI p does not depend on num_pois.
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ poi.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let cat = &spec.categories[poi as usize % spec.categories.len()];
        let mut counts = Vec::with_capacity(spec.num_days as usize);
        for day in 0..spec.num_days as i64 {
            let date = spec.start_date + Duration::days(day);
            let weekday = date.weekday().num_days_from_monday() as usize;
            let mean = cat.base_rate * cat.weekly_profile[weekday];
            let count = if spec.noise == 0.0 {
                mean.round()
            } else {
                let poisson = Poisson::new(mean)
                    .map_err(|e| DataError::InvalidSpec(format!("poisson mean {mean}: {e}")))?;
                let draw: f64 = poisson.sample(&mut rng);
                let z: f64 = StandardNormal.sample(&mut rng);
                // exp(noise*z - noise^2/2) has unit mean, keeping per-weekday
                // averages at base_rate * profile.
                let factor = (spec.noise * z - spec.noise * spec.noise / 2.0).exp();
                (draw * factor).round().max(0.0)
            };
            counts.push(count as u32);
        }
        out.push(VisitSeries {
            poi_id: poi,
            category: cat.label.clone(),
            city: city.to_string(),
            start_date: spec.start_date,
            counts,
        });
    }
    Ok(out)
}

/// Sliding windows of length `n` with stride 1; the day after each window is
/// its target. A series of length L yields L - n instances.
pub fn make_windows(series: &VisitSeries, n: usize) -> Result<Vec<ForecastInstance>, DataError> {
    if series.counts.len() < n + 1 {
        return Err(DataError::SeriesTooShort { needed: n + 1, have: series.counts.len() });
    }
    let mut out = Vec::with_capacity(series.counts.len() - n);
    for k in 0..series.counts.len() - n {
        out.push(ForecastInstance {
            poi_id: series.poi_id,
            category: series.category.clone(),
            city: series.city.clone(),
            history_start: series.date_of(k),
            history_counts: series.counts[k..k + n].to_vec(),
            target_date: series.date_of(k + n),
            target_count: series.counts[k + n],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitStrategy {
    /// Per POI, earliest targets go to train, then validation, then test, so
    /// the test horizon is strictly later than training.
    Chronological,
    /// Seeded shuffle across all instances; for sensitivity checks only.
    Random,
}

/// Chronological 70/10/20-style split (see [`SplitStrategy::Chronological`]).
pub fn split_dataset(
    instances: Vec<ForecastInstance>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    split_dataset_with(instances, ratios, SplitStrategy::Chronological, seed)
}

pub fn split_dataset_with(
    instances: Vec<ForecastInstance>,
    ratios: (f64, f64, f64),
    strategy: SplitStrategy,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if instances.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 || (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios);
    }

    let mut split = DatasetSplit::default();
    match strategy {
        SplitStrategy::Chronological => {
            let mut per_poi: BTreeMap<(String, u64), Vec<ForecastInstance>> = BTreeMap::new();
            for inst in instances {
                per_poi.entry((inst.city.clone(), inst.poi_id)).or_default().push(inst);
            }
            for (_, mut group) in per_poi {
                group.sort_by_key(|i| i.target_date);
                let (n_train, n_val, _) = bucket_sizes(group.len(), r_train, r_val, r_test);
                for (k, inst) in group.into_iter().enumerate() {
                    if k < n_train {
                        split.train.push(inst);
                    } else if k < n_train + n_val {
                        split.validation.push(inst);
                    } else {
                        split.test.push(inst);
                    }
                }
            }
        }
        SplitStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all = instances;
            // Fisher-Yates over a stable pre-sort so input order does not matter.
            all.sort_by(|a, b| (&a.city, a.poi_id, a.target_date).cmp(&(&b.city, b.poi_id, b.target_date)));
            for i in (1..all.len()).rev() {
                let j = rng.gen_range(0..=i);
                all.swap(i, j);
            }
            let (n_train, n_val, _) = bucket_sizes(all.len(), r_train, r_val, r_test);
            for (k, inst) in all.into_iter().enumerate() {
                if k < n_train {
                    split.train.push(inst);
                } else if k < n_train + n_val {
                    split.validation.push(inst);
                } else {
                    split.test.push(inst);
                }
            }
        }
    }
    Ok(split)
}

/// Largest-remainder apportionment: sizes sum to `n`, each within one of n*r.
fn bucket_sizes(n: usize, r_train: f64, r_val: f64, r_test: f64) -> (usize, usize, usize) {
    let exact = [n as f64 * r_train, n as f64 * r_val, n as f64 * r_test];
    let mut sizes = [exact[0].floor() as usize, exact[1].floor() as usize, exact[2].floor() as usize];
    let mut rem: Vec<(usize, f64)> =
        exact.iter().enumerate().map(|(i, e)| (i, e - e.floor())).collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut leftover = n - sizes.iter().sum::<usize>();
    for (i, _) in rem {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_two_rows_single_series() {
        let f = write_tmp(
            "poi_id,category,city,date,visits\n1,Hotel,miami,2020-06-15,5\n1,Hotel,miami,2020-06-16,7\n",
        );
        let series = ingest_csv(f.path()).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].counts, vec![5, 7]);
        assert_eq!(series[0].start_date, date("2020-06-15"));
        assert_eq!(series[0].category, "Hotel");
    }

    #[test]
    fn ingest_gap_is_error() {
        let f = write_tmp(
            "poi_id,category,city,date,visits\n1,Hotel,miami,2020-06-15,5\n1,Hotel,miami,2020-06-17,7\n",
        );
        match ingest_csv(f.path()) {
            Err(DataError::NonContiguousDates(1)) => {}
            other => panic!("expected NonContiguousDates(1), got {other:?}"),
        }
    }

    #[test]
    fn ingest_negative_count() {
        let f = write_tmp("poi_id,category,city,date,visits\n4,Bank,nyc,2020-06-15,-2\n");
        match ingest_csv(f.path()) {
            Err(DataError::NegativeCount { poi_id: 4, .. }) => {}
            other => panic!("expected NegativeCount, got {other:?}"),
        }
    }

    #[test]
    fn ingest_missing_file() {
        match ingest_csv(Path::new("/nonexistent/never.csv")) {
            Err(DataError::MissingFile(_)) => {}
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn ingest_malformed_row_reports_line() {
        let f = write_tmp("poi_id,category,city,date,visits\n1,Hotel,miami,2020-06-15,5\nx,Hotel,miami,2020-06-16,7\n");
        match ingest_csv(f.path()) {
            Err(DataError::MalformedRow { line: 3, .. }) => {}
            other => panic!("expected MalformedRow at line 3, got {other:?}"),
        }
    }

    #[test]
    fn ingest_conserves_total_and_shapes() {
        // 3 POIs x 30 days; independently recompute the column sum from the
        // same text we feed the parser.
        let mut text = String::from("poi_id,category,city,date,visits\n");
        let start = date("2020-06-15");
        for poi in 0..3u64 {
            for day in 0..30i64 {
                let visits = (poi * 31 + day as u64 * 7) % 23;
                let d = start + Duration::days(day);
                text.push_str(&format!("{poi},Shop,nyc,{d},{visits}\n"));
            }
        }
        let expected_total: u64 = text
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
            .sum();

        let f = write_tmp(&text);
        let series = ingest_csv(f.path()).unwrap();
        assert_eq!(series.len(), 3);
        assert!(series.iter().all(|s| s.counts.len() == 30));
        let total: u64 = series.iter().flat_map(|s| s.counts.iter().map(|&c| c as u64)).sum();
        assert_eq!(total, expected_total);
    }

    #[test]
    fn csv_roundtrip() {
        let spec = small_spec(3, 10, 0.2);
        let series = generate_synthetic(&spec).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&series, f.path()).unwrap();
        let back = ingest_csv(f.path()).unwrap();
        assert_eq!(series, back);
    }

    fn small_spec(num_pois: u32, num_days: u32, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_pois,
            categories: vec![
                CategorySpec {
                    label: "Hotel".into(),
                    base_rate: 20.0,
                    weekly_profile: [0.8, 0.8, 0.8, 0.8, 0.8, 1.5, 1.5],
                },
                CategorySpec {
                    label: "Bank".into(),
                    base_rate: 10.0,
                    weekly_profile: [1.2, 1.2, 1.2, 1.2, 1.2, 0.3, 0.3],
                },
            ],
            start_date: date("2020-06-15"),
            num_days,
            noise,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_zero_noise_is_point_mass() {
        let spec = SyntheticSpec {
            num_pois: 2,
            categories: vec![CategorySpec {
                label: "Flat".into(),
                base_rate: 10.0,
                weekly_profile: [1.0; 7],
            }],
            start_date: date("2020-06-15"),
            num_days: 21,
            noise: 0.0,
            seed: 1,
        };
        let series = generate_synthetic(&spec).unwrap();
        assert!(series.iter().all(|s| s.counts.iter().all(|&c| c == 10)));
    }

    #[test]
    fn synthetic_deterministic() {
        let spec = small_spec(4, 40, 0.25);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn synthetic_round_robin_categories() {
        let spec = small_spec(5, 8, 0.1);
        let series = generate_synthetic(&spec).unwrap();
        let labels: Vec<&str> = series.iter().map(|s| s.category.as_str()).collect();
        assert_eq!(labels, vec!["Hotel", "Bank", "Hotel", "Bank", "Hotel"]);
    }

    #[test]
    fn synthetic_weekday_means_track_profile() {
        // Monte-Carlo check over 10,000 days for a single hotel-like POI.
        let spec = SyntheticSpec {
            num_pois: 1,
            categories: vec![CategorySpec {
                label: "Hotel".into(),
                base_rate: 20.0,
                weekly_profile: [0.8, 0.8, 0.8, 0.8, 0.8, 1.5, 1.5],
            }],
            start_date: date("2019-01-07"), // a Monday
            num_days: 10_000,
            noise: 0.2,
            seed: 42,
        };
        let series = generate_synthetic(&spec).unwrap();
        let s = &series[0];
        let mut sums = [0f64; 7];
        let mut counts = [0usize; 7];
        for (k, &c) in s.counts.iter().enumerate() {
            let w = s.date_of(k).weekday().num_days_from_monday() as usize;
            sums[w] += c as f64;
            counts[w] += 1;
        }
        for w in 0..7 {
            let expected = 20.0 * spec.categories[0].weekly_profile[w];
            let got = sums[w] / counts[w] as f64;
            let rel = (got - expected).abs() / expected;
            assert!(rel < 0.03, "weekday {w}: mean {got:.3} vs expected {expected:.3} (rel {rel:.4})");
        }
    }

    #[test]
    fn windows_minimal_length() {
        let series = VisitSeries {
            poi_id: 1,
            category: "Shop".into(),
            city: "nyc".into(),
            start_date: date("2020-06-15"),
            counts: (1..=16).collect(),
        };
        let windows = make_windows(&series, 15).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].history_counts, (1..=15).collect::<Vec<u32>>());
        assert_eq!(windows[0].target_count, 16);
        assert_eq!(windows[0].target_date, date("2020-06-30"));
    }

    #[test]
    fn windows_too_short() {
        let series = VisitSeries {
            poi_id: 1,
            category: "Shop".into(),
            city: "nyc".into(),
            start_date: date("2020-06-15"),
            counts: vec![1; 15],
        };
        assert!(matches!(make_windows(&series, 15), Err(DataError::SeriesTooShort { .. })));
    }

    #[test]
    fn windows_147_days_gives_132() {
        // 2020-06-15 through 2020-11-08 inclusive is 147 days.
        let start = date("2020-06-15");
        let end = date("2020-11-08");
        let len = (end - start).num_days() + 1;
        assert_eq!(len, 147);
        let series = VisitSeries {
            poi_id: 1,
            category: "Shop".into(),
            city: "nyc".into(),
            start_date: start,
            counts: vec![3; len as usize],
        };
        assert_eq!(make_windows(&series, 15).unwrap().len(), 132);
    }

    fn synthetic_instances(num_pois: u32, days: u32) -> Vec<ForecastInstance> {
        let series = generate_synthetic(&small_spec(num_pois, days, 0.2)).unwrap();
        series.iter().flat_map(|s| make_windows(s, 15).unwrap()).collect()
    }

    #[test]
    fn split_70_10_20_single_poi() {
        let series = generate_synthetic(&small_spec(1, 115, 0.2)).unwrap();
        let instances = make_windows(&series[0], 15).unwrap();
        assert_eq!(instances.len(), 100);
        let split = split_dataset(instances, (0.7, 0.1, 0.2), 0).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (70, 10, 20)
        );
    }

    #[test]
    fn split_rounding_small() {
        let series = generate_synthetic(&small_spec(1, 25, 0.2)).unwrap();
        let instances = make_windows(&series[0], 15).unwrap();
        assert_eq!(instances.len(), 10);
        let split = split_dataset(instances, (0.7, 0.1, 0.2), 0).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (7, 1, 2)
        );
    }

    #[test]
    fn split_bad_ratios() {
        let instances = synthetic_instances(1, 20);
        assert!(matches!(
            split_dataset(instances, (0.5, 0.2, 0.2), 0),
            Err(DataError::BadRatios)
        ));
    }

    #[test]
    fn split_empty_input() {
        assert!(matches!(
            split_dataset(Vec::new(), (0.7, 0.1, 0.2), 0),
            Err(DataError::EmptyInput)
        ));
    }

    #[test]
    fn split_chronology_per_poi() {
        let instances = synthetic_instances(3, 60);
        let split = split_dataset(instances, (0.7, 0.1, 0.2), 0).unwrap();
        for poi in 0..3u64 {
            let max_train = split.train.iter().filter(|i| i.poi_id == poi).map(|i| i.target_date).max();
            let min_test = split.test.iter().filter(|i| i.poi_id == poi).map(|i| i.target_date).min();
            if let (Some(a), Some(b)) = (max_train, min_test) {
                assert!(a < b, "poi {poi}: train horizon {a} not before test horizon {b}");
            }
        }
    }

    #[test]
    fn random_split_is_seeded_partition() {
        let instances = synthetic_instances(2, 60);
        let n = instances.len();
        let a = split_dataset_with(instances.clone(), (0.7, 0.1, 0.2), SplitStrategy::Random, 9).unwrap();
        let b = split_dataset_with(instances, (0.7, 0.1, 0.2), SplitStrategy::Random, 9).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len() + a.validation.len() + a.test.len(), n);
    }
}
