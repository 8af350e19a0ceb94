//! In-context forecasting: time series prompt retrieval strategies,
//! context assembly with strict prompt-before-target guards, and the
//! short-sequence discard rule.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::M4Series;
use crate::forecaster::{self, ForecastError, ForecastMode, ForecastRequest, SegmentStamp};
use crate::model::Model;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("insufficient history for {strategy}: required {required} points, available {available}")]
    InsufficientHistory {
        strategy: String,
        required: usize,
        available: usize,
    },
    #[error("prompt strategy error: {0}")]
    BadSpec(String),
    #[error("context assembly error: {0}")]
    Assembly(String),
    #[error("leakage: prompt source position {position} does not precede target start {target_start}")]
    Leakage {
        position: usize,
        target_start: usize,
    },
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

pub type Result<T> = std::result::Result<T, PromptError>;

/// Prompt retrieval strategies. All are pure functions of the series and
/// window placement; `AheadRandom` is pure given its seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    /// No prompts: plain forecasting on the lookback alone.
    ZeroShot,
    /// The first `prompt_length` points of the same series.
    FirstWindow,
    /// The `prompt_length` points immediately preceding the lookback.
    LastWindow,
    /// The lookback-shaped window shifted earlier by one period.
    AheadPeriod { period: usize },
    /// The lookback-shaped window shifted earlier by a seeded uniform
    /// offset.
    AheadRandom { seed: u64 },
    /// The first `prompt_length` points of the designated series.
    FixedPrompt,
    /// First-window rule applied to a different series.
    OtherSeries { id: usize },
    /// Ahead-period rule applied to a different variate.
    OtherVariate { id: usize, period: usize },
}

impl PromptStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ZeroShot => "zero_shot",
            Self::FirstWindow => "first_window",
            Self::LastWindow => "last_window",
            Self::AheadPeriod { .. } => "ahead_period",
            Self::AheadRandom { .. } => "ahead_random",
            Self::FixedPrompt => "fixed_prompt",
            Self::OtherSeries { .. } => "other_series",
            Self::OtherVariate { .. } => "other_variate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub strategy: PromptStrategy,
    /// Length of each prompt window in points (first/last/fixed rules).
    pub prompt_length: usize,
    /// Number of prompts m; zero-shot forces zero.
    pub count: usize,
}

impl PromptSpec {
    pub fn new(strategy: PromptStrategy, prompt_length: usize) -> Self {
        let count = if strategy == PromptStrategy::ZeroShot { 0 } else { 1 };
        Self {
            strategy,
            prompt_length,
            count,
        }
    }
}

/// One retrieved prompt window with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptWindow {
    pub values: Vec<f64>,
    /// Source position range on the origin series' timeline.
    pub source_start: usize,
    pub source_series: usize,
}

impl PromptWindow {
    pub fn source_end(&self) -> usize {
        self.source_start + self.values.len()
    }
}

fn take_window(
    pool: &[&[f64]],
    series: usize,
    start: usize,
    len: usize,
    strategy: &PromptStrategy,
) -> Result<PromptWindow> {
    let data = pool.get(series).ok_or_else(|| {
        PromptError::BadSpec(format!("series id {series} out of range ({})", pool.len()))
    })?;
    if start + len > data.len() {
        return Err(PromptError::InsufficientHistory {
            strategy: strategy.name().to_string(),
            required: start + len,
            available: data.len(),
        });
    }
    Ok(PromptWindow {
        values: data[start..start + len].to_vec(),
        source_start: start,
        source_series: series,
    })
}

/// Retrieves `spec.count` prompt windows for a lookback placed at
/// `[lookback_start, lookback_start + lookback_len)` on series `current`
/// of the pool. Multi-prompt retrieval concatenates windows in temporal
/// order.
pub fn select_prompts(
    pool: &[&[f64]],
    current: usize,
    spec: &PromptSpec,
    lookback_start: usize,
    lookback_len: usize,
) -> Result<Vec<PromptWindow>> {
    let m = spec.count;
    if spec.strategy == PromptStrategy::ZeroShot {
        return Ok(Vec::new());
    }
    if m == 0 {
        return Err(PromptError::BadSpec(
            "prompt count must be positive for non-zero-shot strategies".into(),
        ));
    }
    let pl = spec.prompt_length;
    match spec.strategy {
        PromptStrategy::ZeroShot => Ok(Vec::new()),
        PromptStrategy::FirstWindow => {
            if pl == 0 {
                return Err(PromptError::BadSpec("prompt length must be positive".into()));
            }
            (0..m)
                .map(|j| take_window(pool, current, j * pl, pl, &spec.strategy))
                .collect()
        }
        PromptStrategy::LastWindow => {
            if lookback_start < m * pl {
                return Err(PromptError::InsufficientHistory {
                    strategy: spec.strategy.name().to_string(),
                    required: m * pl,
                    available: lookback_start,
                });
            }
            (0..m)
                .map(|j| {
                    take_window(
                        pool,
                        current,
                        lookback_start - (m - j) * pl,
                        pl,
                        &spec.strategy,
                    )
                })
                .collect()
        }
        PromptStrategy::AheadPeriod { period } => {
            ahead_windows(pool, current, lookback_start, lookback_len, period, m, &spec.strategy)
        }
        PromptStrategy::AheadRandom { seed } => {
            if lookback_start == 0 {
                return Err(PromptError::InsufficientHistory {
                    strategy: spec.strategy.name().to_string(),
                    required: 1,
                    available: 0,
                });
            }
            let mut rng = crate::seed::rng(seed, "ahead_random");
            let mut offsets: Vec<usize> = (0..m)
                .map(|_| rng.gen_range(1..=lookback_start))
                .collect();
            offsets.sort_unstable_by(|a, b| b.cmp(a));
            offsets
                .into_iter()
                .map(|off| {
                    take_window(
                        pool,
                        current,
                        lookback_start - off,
                        lookback_len,
                        &spec.strategy,
                    )
                })
                .collect()
        }
        PromptStrategy::FixedPrompt => {
            if m != 1 {
                return Err(PromptError::BadSpec(
                    "fixed_prompt supports a single prompt".into(),
                ));
            }
            Ok(vec![take_window(pool, current, 0, pl, &spec.strategy)?])
        }
        PromptStrategy::OtherSeries { id } => {
            if id == current {
                return Err(PromptError::BadSpec(
                    "other_series must name a different series".into(),
                ));
            }
            (0..m)
                .map(|j| take_window(pool, id, j * pl, pl, &spec.strategy))
                .collect()
        }
        PromptStrategy::OtherVariate { id, period } => {
            if id == current {
                return Err(PromptError::BadSpec(
                    "other_variate must name a different variate".into(),
                ));
            }
            ahead_windows(pool, id, lookback_start, lookback_len, period, m, &spec.strategy)
        }
    }
}

fn ahead_windows(
    pool: &[&[f64]],
    series: usize,
    lookback_start: usize,
    lookback_len: usize,
    period: usize,
    m: usize,
    strategy: &PromptStrategy,
) -> Result<Vec<PromptWindow>> {
    if period == 0 {
        return Err(PromptError::BadSpec("period must be positive".into()));
    }
    if lookback_start < m * period {
        return Err(PromptError::InsufficientHistory {
            strategy: strategy.name().to_string(),
            required: m * period,
            available: lookback_start,
        });
    }
    (0..m)
        .map(|j| {
            let shift = (m - j) * period;
            take_window(pool, series, lookback_start - shift, lookback_len, strategy)
        })
        .collect()
}

/// Prompts concatenated with the lookback, plus the provenance needed for
/// the leakage guard.
#[derive(Debug, Clone)]
pub struct InContextSample {
    /// prompts (temporal order) followed by the lookback.
    pub context: Vec<f64>,
    /// Per-segment timestamps covering the context segments and the
    /// forecast horizon; empty when the dataset has no timestamps.
    pub seg_timestamps: Vec<(String, String)>,
    /// Source ranges of every prompt on the series timeline.
    pub prompt_positions: Vec<(usize, usize)>,
    /// First target position on the series timeline.
    pub target_start: usize,
    /// Ground truth for evaluation only.
    pub target: Option<Vec<f64>>,
}

/// Concatenates prompts with the lookback in temporal order and enforces
/// the guards: every prompt position strictly precedes the first target
/// position, the context is segment-aligned, and it fits the trained
/// context.
#[allow(clippy::too_many_arguments)]
pub fn assemble_context(
    prompts: &[PromptWindow],
    lookback: &[f64],
    lookback_start: usize,
    segment_length: usize,
    max_segments: usize,
    horizon: usize,
    timeline: Option<&[String]>,
    target: Option<Vec<f64>>,
) -> Result<InContextSample> {
    let s = segment_length;
    let target_start = lookback_start + lookback.len();
    let mut context = Vec::new();
    let mut prompt_positions = Vec::new();
    let mut segment_sources: Vec<usize> = Vec::new();

    for p in prompts {
        if p.values.len() % s != 0 || p.values.is_empty() {
            return Err(PromptError::Assembly(format!(
                "prompt of {} points is not a positive multiple of segment length {s}",
                p.values.len()
            )));
        }
        if p.source_end() > target_start {
            return Err(PromptError::Leakage {
                position: p.source_end() - 1,
                target_start,
            });
        }
        for k in 0..p.values.len() / s {
            segment_sources.push(p.source_start + k * s);
        }
        context.extend_from_slice(&p.values);
        prompt_positions.push((p.source_start, p.source_end()));
    }
    if lookback.is_empty() || lookback.len() % s != 0 {
        return Err(PromptError::Assembly(format!(
            "lookback of {} points is not a positive multiple of segment length {s}",
            lookback.len()
        )));
    }
    for k in 0..lookback.len() / s {
        segment_sources.push(lookback_start + k * s);
    }
    context.extend_from_slice(lookback);

    let total_segments = context.len() / s;
    if total_segments > max_segments {
        return Err(PromptError::Assembly(format!(
            "context of {total_segments} segments exceeds the trained context of {max_segments}"
        )));
    }
    if horizon % s != 0 {
        return Err(PromptError::Assembly(format!(
            "horizon {horizon} is not a multiple of segment length {s}"
        )));
    }
    for k in 0..horizon / s {
        segment_sources.push(target_start + k * s);
    }

    let seg_timestamps = match timeline {
        Some(stamps) => {
            let mut pairs = Vec::with_capacity(segment_sources.len());
            for &start in &segment_sources {
                let end = start + s - 1;
                if end >= stamps.len() {
                    return Err(PromptError::Assembly(format!(
                        "timeline has {} stamps, segment needs position {end}",
                        stamps.len()
                    )));
                }
                pairs.push((stamps[start].clone(), stamps[end].clone()));
            }
            pairs
        }
        None => Vec::new(),
    };

    Ok(InContextSample {
        context,
        seg_timestamps,
        prompt_positions,
        target_start,
        target,
    })
}

/// Runs the forecaster on an assembled context. With an empty prompt set
/// the request is literally the plain lookback request, so zero-shot
/// output is bit-identical to ordinary generation.
pub fn icf_forecast(model: &Model, sample: &InContextSample, horizon: usize) -> Result<Vec<f64>> {
    let request = ForecastRequest {
        lookback: sample.context.clone(),
        timestamps: sample
            .seg_timestamps
            .iter()
            .map(|(a, b)| SegmentStamp {
                start: a.clone(),
                end: b.clone(),
            })
            .collect(),
        horizon,
        mode: ForecastMode::Autoregressive,
    };
    Ok(forecaster::generate(model, &request)?.predictions)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscardRecord {
    pub id: String,
    pub length: usize,
}

/// Keeps series strictly longer than `4 * horizon` points; everything
/// else is discarded and logged. The same filtered set must be used for
/// zero-shot and in-context runs.
pub fn discard_short(series: Vec<M4Series>, horizon: usize) -> (Vec<M4Series>, Vec<DiscardRecord>) {
    let mut kept = Vec::new();
    let mut discarded = Vec::new();
    for s in series {
        if s.values.len() > 4 * horizon {
            kept.push(s);
        } else {
            discarded.push(DiscardRecord {
                id: s.id.clone(),
                length: s.values.len(),
            });
        }
    }
    (kept, discarded)
}
