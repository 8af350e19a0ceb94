//! Dataset ingestion, chronological splitting, channel-independent window
//! construction, per-window normalization, and synthetic generators.

use std::f64::consts::TAU;
use std::path::Path;

use chrono::NaiveDateTime;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const STD_FLOOR: f64 = 1e-8;
const SYNTH_EPOCH: &str = "2016/07/01 00:00:00";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("ingestion error at row {row}: {reason}")]
    Ingestion { row: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("split error: {0}")]
    Split(String),
    #[error("window error: {0}")]
    Window(String),
    #[error("invalid generator spec: {0}")]
    Synth(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Multivariate series with textual timestamps. All variates share one
/// timeline; timestamps are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub variates: Vec<Vec<f64>>,
    pub timestamps: Vec<String>,
    pub frequency: String,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_variates(&self) -> usize {
        self.variates.len()
    }

    /// Content digest over values and timestamps, for report provenance.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.name.as_bytes());
        for ts in &self.timestamps {
            hasher.update(ts.as_bytes());
            hasher.update([0u8]);
        }
        for variate in &self.variates {
            for &v in variate {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Chronological train/val/test point counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%Y/%m/%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
}

/// Loads an ETT-style CSV: header `date,<v1>,...,<vC>`, one row per time
/// point, strictly increasing dates.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Ingestion {
            row: 1,
            reason: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || headers.get(0) != Some("date") {
        return Err(DataError::Ingestion {
            row: 1,
            reason: "first column header must be 'date'".into(),
        });
    }
    let num_variates = headers.len() - 1;
    if num_variates == 0 {
        return Err(DataError::Ingestion {
            row: 1,
            reason: "no variate columns".into(),
        });
    }

    let mut variates = vec![Vec::new(); num_variates];
    let mut timestamps = Vec::new();
    let mut last_parsed: Option<NaiveDateTime> = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // header is row 1
        let record = record.map_err(|e| DataError::Ingestion {
            row,
            reason: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(DataError::Ingestion {
                row,
                reason: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        let ts_raw = record.get(0).unwrap().to_string();
        let parsed = parse_timestamp(&ts_raw).ok_or_else(|| DataError::Ingestion {
            row,
            reason: format!("unparseable date '{ts_raw}'"),
        })?;
        if let Some(prev) = last_parsed {
            if parsed <= prev {
                return Err(DataError::Ingestion {
                    row,
                    reason: format!("timestamp '{ts_raw}' does not increase"),
                });
            }
        }
        last_parsed = Some(parsed);
        timestamps.push(ts_raw);
        for (c, cell) in record.iter().skip(1).enumerate() {
            let value: f64 = cell.parse().map_err(|_| DataError::Ingestion {
                row,
                reason: format!("non-numeric cell '{cell}' in column {}", c + 2),
            })?;
            variates[c].push(value);
        }
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(RawDataset {
        name,
        variates,
        timestamps,
        frequency: "unknown".to_string(),
    })
}

pub fn write_csv(ds: &RawDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["date".to_string()];
    header.extend((0..ds.num_variates()).map(|i| format!("v{i}")));
    writer
        .write_record(&header)
        .map_err(|e| DataError::Ingestion {
            row: 1,
            reason: e.to_string(),
        })?;
    for t in 0..ds.len() {
        let mut record = vec![ds.timestamps[t].clone()];
        for variate in &ds.variates {
            record.push(format!("{}", variate[t]));
        }
        writer
            .write_record(&record)
            .map_err(|e| DataError::Ingestion {
                row: t + 2,
                reason: e.to_string(),
            })?;
    }
    writer.flush()?;
    Ok(())
}

/// Splits into contiguous, ordered, non-overlapping train/val/test parts.
pub fn chronological_split(
    ds: &RawDataset,
    spec: SplitSpec,
) -> Result<(RawDataset, RawDataset, RawDataset)> {
    let total = spec.train + spec.val + spec.test;
    if total > ds.len() {
        return Err(DataError::Split(format!(
            "split counts sum to {total} but dataset has {} points",
            ds.len()
        )));
    }
    let slice = |from: usize, to: usize, tag: &str| RawDataset {
        name: format!("{}:{tag}", ds.name),
        variates: ds
            .variates
            .iter()
            .map(|v| v[from..to].to_vec())
            .collect(),
        timestamps: ds.timestamps[from..to].to_vec(),
        frequency: ds.frequency.clone(),
    };
    let train = slice(0, spec.train, "train");
    let val = slice(spec.train, spec.train + spec.val, "val");
    let test = slice(spec.train + spec.val, total, "test");
    Ok((train, val, test))
}

/// One channel-independent training/evaluation window: `(n + 1)` segments
/// of length `s` drawn from a single variate, with per-segment starting
/// and end timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub variate: usize,
    pub values: Vec<f64>,
    pub seg_timestamps: Vec<(String, String)>,
}

impl WindowSample {
    pub fn num_segments(&self, s: usize) -> usize {
        self.values.len() / s
    }
}

#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub samples: Vec<WindowSample>,
    pub warnings: Vec<String>,
}

/// Builds windows of `(n + 1) * s` points per variate at the given stride.
/// Streams are concatenated variate by variate.
pub fn make_windows(ds: &RawDataset, s: usize, n: usize, stride: usize) -> Result<WindowSet> {
    if s == 0 || n == 0 || stride == 0 {
        return Err(DataError::Window(
            "segment length, segment count and stride must be positive".into(),
        ));
    }
    let window_len = (n + 1) * s;
    let mut set = WindowSet::default();
    if ds.len() < window_len {
        set.warnings.push(format!(
            "split '{}' has {} points, too short for windows of {window_len}",
            ds.name,
            ds.len()
        ));
        return Ok(set);
    }
    for (variate, series) in ds.variates.iter().enumerate() {
        let mut start = 0;
        while start + window_len <= series.len() {
            let values = series[start..start + window_len].to_vec();
            let seg_timestamps = (0..=n)
                .map(|i| {
                    (
                        ds.timestamps[start + i * s].clone(),
                        ds.timestamps[start + i * s + s - 1].clone(),
                    )
                })
                .collect();
            set.samples.push(WindowSample {
                variate,
                values,
                seg_timestamps,
            });
            start += stride;
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    None,
    LookbackStandardize,
}

impl NormMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::LookbackStandardize => "lookback_standardize",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "lookback_standardize" => Ok(Self::LookbackStandardize),
            other => Err(DataError::Synth(format!("unknown normalization '{other}'"))),
        }
    }
}

/// Mean and floored standard deviation of a window's lookback portion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

/// Normalizes a full window using statistics of its first `lookback_len`
/// points only, so the target never leaks into the statistics.
pub fn normalize(values: &[f64], lookback_len: usize, mode: NormMode) -> (Vec<f64>, NormStats) {
    match mode {
        NormMode::None => (values.to_vec(), NormStats::identity()),
        NormMode::LookbackStandardize => {
            let lb = &values[..lookback_len.min(values.len())];
            let mean = lb.iter().sum::<f64>() / lb.len() as f64;
            let var = lb.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / lb.len() as f64;
            let std = var.sqrt().max(STD_FLOOR);
            let stats = NormStats { mean, std };
            let out = values.iter().map(|&v| (v - mean) / std).collect();
            (out, stats)
        }
    }
}

pub fn denormalize(values: &[f64], stats: NormStats) -> Vec<f64> {
    values.iter().map(|&v| v * stats.std + stats.mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    Sinusoid,
    Ar1Seasonal,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(Self::Sinusoid),
            "ar1_seasonal" => Ok(Self::Ar1Seasonal),
            other => Err(DataError::Synth(format!("unknown synth kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub period: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub num_variates: usize,
    /// AR(1) coefficient, used by the `Ar1Seasonal` kind.
    pub ar_coeff: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Sinusoid,
            length: 960,
            period: 96,
            noise_std: 0.0,
            seed: 0,
            num_variates: 1,
            ar_coeff: 0.9,
        }
    }
}

/// Deterministic synthetic datasets with hourly timestamps from a fixed
/// epoch.
pub fn synth_generate(spec: &SynthSpec) -> Result<RawDataset> {
    if spec.period < 2 {
        return Err(DataError::Synth("period must be >= 2".into()));
    }
    if spec.length < 4 * spec.period {
        return Err(DataError::Synth(format!(
            "length {} must be at least 4 * period ({})",
            spec.length,
            4 * spec.period
        )));
    }
    if spec.num_variates == 0 {
        return Err(DataError::Synth("num_variates must be positive".into()));
    }
    if spec.noise_std < 0.0 {
        return Err(DataError::Synth("noise_std must be non-negative".into()));
    }
    if spec.kind == SynthKind::Ar1Seasonal && spec.ar_coeff.abs() >= 1.0 {
        return Err(DataError::Synth("ar_coeff must satisfy |c| < 1".into()));
    }

    let epoch = parse_timestamp(SYNTH_EPOCH).unwrap();
    let timestamps: Vec<String> = (0..spec.length)
        .map(|t| {
            (epoch + chrono::Duration::hours(t as i64))
                .format("%Y/%m/%d %H:%M:%S")
                .to_string()
        })
        .collect();

    let mut variates = Vec::with_capacity(spec.num_variates);
    for v in 0..spec.num_variates {
        let phase = v as f64 * 0.5;
        let mut rng = seed::rng(spec.seed, &format!("synth.{v}"));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let series = match spec.kind {
            SynthKind::Sinusoid => (0..spec.length)
                .map(|t| {
                    let base = (TAU * t as f64 / spec.period as f64 + phase).sin();
                    base + spec.noise_std * normal.sample(&mut rng)
                })
                .collect::<Vec<f64>>(),
            SynthKind::Ar1Seasonal => {
                let mut out = Vec::with_capacity(spec.length);
                let mut ar = 0.0f64;
                for t in 0..spec.length {
                    ar = spec.ar_coeff * ar + spec.noise_std * normal.sample(&mut rng);
                    let seasonal = (TAU * t as f64 / spec.period as f64 + phase).sin();
                    out.push(ar + seasonal);
                }
                out
            }
        };
        variates.push(series);
    }

    Ok(RawDataset {
        name: format!("synth-{:?}", spec.kind).to_lowercase(),
        variates,
        timestamps,
        frequency: "hourly".to_string(),
    })
}

/// One short-term-style univariate record: an id, its forecast horizon,
/// and a variable-length value list. The final `horizon` points act as
/// the test portion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M4Series {
    pub id: String,
    pub horizon: usize,
    pub values: Vec<f64>,
}

impl M4Series {
    pub fn train_portion(&self) -> &[f64] {
        &self.values[..self.values.len() - self.horizon]
    }

    pub fn test_portion(&self) -> &[f64] {
        &self.values[self.values.len() - self.horizon..]
    }
}

/// Loads a short-term-style collection: `id,F,v1,v2,...,vT` per row with
/// variable `T`.
pub fn load_m4_csv(path: impl AsRef<Path>) -> Result<Vec<M4Series>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let mut series = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Ingestion {
            row,
            reason: e.to_string(),
        })?;
        if record.len() < 3 {
            return Err(DataError::Ingestion {
                row,
                reason: "expected at least id, horizon and one value".into(),
            });
        }
        let id = record.get(0).unwrap().to_string();
        let horizon: usize = record
            .get(1)
            .unwrap()
            .parse()
            .map_err(|_| DataError::Ingestion {
                row,
                reason: format!("bad horizon '{}'", record.get(1).unwrap()),
            })?;
        if horizon == 0 {
            return Err(DataError::Ingestion {
                row,
                reason: "horizon must be positive".into(),
            });
        }
        let mut values = Vec::with_capacity(record.len() - 2);
        for cell in record.iter().skip(2) {
            if cell.is_empty() {
                continue;
            }
            values.push(cell.parse::<f64>().map_err(|_| DataError::Ingestion {
                row,
                reason: format!("non-numeric cell '{cell}'"),
            })?);
        }
        if values.len() <= horizon {
            return Err(DataError::Ingestion {
                row,
                reason: format!(
                    "series '{id}' has {} values, not longer than horizon {horizon}",
                    values.len()
                ),
            });
        }
        series.push(M4Series { id, horizon, values });
    }
    Ok(series)
}

pub fn write_m4_csv(series: &[M4Series], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path.as_ref())?;
    for s in series {
        let mut record = vec![s.id.clone(), s.horizon.to_string()];
        record.extend(s.values.iter().map(|v| format!("{v}")));
        writer
            .write_record(&record)
            .map_err(|e| DataError::Ingestion {
                row: 0,
                reason: e.to_string(),
            })?;
    }
    writer.flush()?;
    Ok(())
}
