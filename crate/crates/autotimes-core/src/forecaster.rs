//! Inference: single-step next-segment prediction, arbitrary-horizon
//! autoregressive generation with a sliding context window, variable
//! lookback support, and the one-for-all rolling evaluation protocol.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{denormalize, make_windows, normalize, DataError, NormStats, RawDataset, WindowSample, WindowSet};
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("request error: {0}")]
    Request(String),
    #[error("horizon {horizon} is not a multiple of segment length {segment}")]
    NonMultipleHorizon { horizon: usize, segment: usize },
    #[error("lookback of {segments} segments exceeds trained context of {max}")]
    ContextOverflow { segments: usize, max: usize },
    #[error("request requires timestamps for {required} segments, got {got}")]
    MissingTimestamps { required: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, ForecastError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    Autoregressive,
    FlattenHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentStamp {
    pub start: String,
    pub end: String,
}

/// A forecast request: raw lookback values, per-segment timestamps
/// covering lookback and horizon, and the desired horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastRequest {
    pub lookback: Vec<f64>,
    #[serde(default)]
    pub timestamps: Vec<SegmentStamp>,
    pub horizon: usize,
    pub mode: ForecastMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastResult {
    pub predictions: Vec<f64>,
    /// Intermediate per-iteration segments; they concatenate to
    /// `predictions` exactly.
    pub steps: Vec<Vec<f64>>,
    pub norm: NormStats,
}

/// One prediction step over a normalized context of `n1 <= N` segments:
/// embed, compose, forward, project, return only the final position.
pub fn one_step(model: &Model, context: &[f64], te: Option<&Tensor>) -> Result<Vec<f64>> {
    let s = model.segment_length();
    if context.is_empty() || context.len() % s != 0 {
        return Err(ForecastError::Request(format!(
            "context length {} is not a positive multiple of {s}",
            context.len()
        )));
    }
    let n1 = context.len() / s;
    let n = model.context_segments();
    if n1 > n {
        return Err(ForecastError::ContextOverflow {
            segments: n1,
            max: n,
        });
    }
    let preds = model.predict_segments(context, te)?;
    Ok(preds[(n1 - 1) * s..].to_vec())
}

fn te_for_window(
    model: &Model,
    stamps: &[SegmentStamp],
    lo: usize,
    hi: usize,
) -> Result<Option<Tensor>> {
    if !model.config.use_timestamps {
        return Ok(None);
    }
    let pairs: Vec<(String, String)> = stamps[lo..hi]
        .iter()
        .map(|st| (st.start.clone(), st.end.clone()))
        .collect();
    Ok(Some(model.te_matrix(&pairs)?))
}

/// Arbitrary-horizon generation. Runs `horizon / S` iterations, feeding
/// each prediction back into the context and keeping the most recent `N`
/// segments once the context overflows.
pub fn generate(model: &Model, request: &ForecastRequest) -> Result<ForecastResult> {
    match request.mode {
        ForecastMode::Autoregressive => generate_autoregressive(model, request),
        ForecastMode::FlattenHead => generate_flatten(model, request),
    }
}

fn validate_stamps(model: &Model, request: &ForecastRequest, segments: usize) -> Result<()> {
    if model.config.use_timestamps && request.timestamps.len() != segments {
        return Err(ForecastError::MissingTimestamps {
            required: segments,
            got: request.timestamps.len(),
        });
    }
    Ok(())
}

fn generate_autoregressive(model: &Model, request: &ForecastRequest) -> Result<ForecastResult> {
    let s = model.segment_length();
    let n = model.context_segments();
    if request.horizon == 0 || request.horizon % s != 0 {
        return Err(ForecastError::NonMultipleHorizon {
            horizon: request.horizon,
            segment: s,
        });
    }
    if request.lookback.is_empty() || request.lookback.len() % s != 0 {
        return Err(ForecastError::Request(format!(
            "lookback length {} is not a positive multiple of segment length {s}",
            request.lookback.len()
        )));
    }
    let n1 = request.lookback.len() / s;
    if n1 > n {
        return Err(ForecastError::ContextOverflow {
            segments: n1,
            max: n,
        });
    }
    let iterations = request.horizon / s;
    validate_stamps(model, request, n1 + iterations)?;

    let (mut seq, stats) = normalize(
        &request.lookback,
        request.lookback.len(),
        model.config.normalization,
    );
    let mut steps = Vec::with_capacity(iterations);
    for j in 0..iterations {
        let total = n1 + j;
        let window_segs = total.min(n);
        let ctx = &seq[(total - window_segs) * s..].to_vec();
        let te = te_for_window(model, &request.timestamps, total - window_segs, total)?;
        let pred = one_step(model, ctx, te.as_ref())?;
        steps.push(denormalize(&pred, stats));
        seq.extend_from_slice(&pred);
    }
    let predictions: Vec<f64> = steps.iter().flatten().copied().collect();
    Ok(ForecastResult {
        predictions,
        steps,
        norm: stats,
    })
}

fn generate_flatten(model: &Model, request: &ForecastRequest) -> Result<ForecastResult> {
    let head = model
        .flatten
        .as_ref()
        .ok_or_else(|| ForecastError::Request("model has no flatten head".into()))?;
    let s = model.segment_length();
    let n = model.context_segments();
    if request.lookback.len() != n * s {
        return Err(ForecastError::Request(format!(
            "flatten-head lookback must be exactly {} points, got {}",
            n * s,
            request.lookback.len()
        )));
    }
    // Rolling past the trained horizon needs explicit re-feeding; a plain
    // request is rejected.
    if request.horizon != head.horizon {
        return Err(ForecastError::Request(format!(
            "flatten-head model predicts a fixed horizon of {}, got {}",
            head.horizon, request.horizon
        )));
    }
    validate_stamps(model, request, n)?;
    let (seq, stats) = normalize(
        &request.lookback,
        request.lookback.len(),
        model.config.normalization,
    );
    let te = te_for_window(model, &request.timestamps, 0, n)?;
    let pred = model.flatten_forecast(&seq, te.as_ref())?;
    let denorm = denormalize(&pred, stats);
    Ok(ForecastResult {
        predictions: denorm.clone(),
        steps: vec![denorm],
        norm: stats,
    })
}

/// Per-window forecast used by the rolling protocol: the first `N * S`
/// points are the lookback, everything after is unseen future. For
/// flatten-head models the head is explicitly re-fed its own predictions
/// until the horizon is covered.
pub fn window_forecast(model: &Model, window: &WindowSample, horizon: usize) -> Result<(Vec<f64>, NormStats)> {
    let s = model.segment_length();
    let n = model.context_segments();
    let lookback_len = n * s;
    if window.values.len() < lookback_len + horizon {
        return Err(ForecastError::Request(format!(
            "window has {} points, need {} for lookback plus horizon",
            window.values.len(),
            lookback_len + horizon
        )));
    }
    match &model.flatten {
        None => {
            let stamps_needed = n + horizon / s;
            if model.config.use_timestamps && window.seg_timestamps.len() < stamps_needed {
                return Err(ForecastError::MissingTimestamps {
                    required: stamps_needed,
                    got: window.seg_timestamps.len(),
                });
            }
            let request = ForecastRequest {
                lookback: window.values[..lookback_len].to_vec(),
                timestamps: window
                    .seg_timestamps
                    .iter()
                    .take(stamps_needed)
                    .map(|(a, b)| SegmentStamp {
                        start: a.clone(),
                        end: b.clone(),
                    })
                    .collect(),
                horizon,
                mode: ForecastMode::Autoregressive,
            };
            let result = generate(model, &request)?;
            Ok((result.predictions, result.norm))
        }
        Some(head) => {
            if horizon % head.horizon != 0 {
                return Err(ForecastError::NonMultipleHorizon {
                    horizon,
                    segment: head.horizon,
                });
            }
            let (mut seq, stats) = normalize(
                &window.values[..lookback_len],
                lookback_len,
                model.config.normalization,
            );
            let mut predictions = Vec::with_capacity(horizon);
            let rounds = horizon / head.horizon;
            for r in 0..rounds {
                let start = r * head.horizon;
                let ctx = seq[start..start + lookback_len].to_vec();
                let te = if model.config.use_timestamps {
                    let lo = start / s;
                    if window.seg_timestamps.len() < lo + n {
                        return Err(ForecastError::MissingTimestamps {
                            required: lo + n,
                            got: window.seg_timestamps.len(),
                        });
                    }
                    let pairs: Vec<(String, String)> =
                        window.seg_timestamps[lo..lo + n].to_vec();
                    Some(model.te_matrix(&pairs)?)
                } else {
                    None
                };
                let pred = model.flatten_forecast(&ctx, te.as_ref())?;
                predictions.extend(denormalize(&pred, stats));
                seq.extend_from_slice(&pred);
            }
            Ok((predictions, stats))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub key: usize,
    pub mse_norm: f64,
    pub mae_norm: f64,
    pub mse_raw: f64,
    pub mae_raw: f64,
}

/// Per-horizon (or per-lookback) error table with an arithmetic-mean
/// average row.
#[derive(Debug, Clone, Serialize)]
pub struct MetricTable {
    /// What `key` means for the rows: "horizon" or "lookback".
    pub kind: String,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn average(&self) -> MetricRow {
        let c = self.rows.len() as f64;
        MetricRow {
            key: 0,
            mse_norm: self.rows.iter().map(|r| r.mse_norm).sum::<f64>() / c,
            mae_norm: self.rows.iter().map(|r| r.mae_norm).sum::<f64>() / c,
            mse_raw: self.rows.iter().map(|r| r.mse_raw).sum::<f64>() / c,
            mae_raw: self.rows.iter().map(|r| r.mae_raw).sum::<f64>() / c,
        }
    }
}

/// Builds evaluation windows: `context_segments` lookback segments plus
/// `horizon_max` future points, at the given stride.
pub fn eval_windows(
    split: &RawDataset,
    s: usize,
    context_segments: usize,
    horizon_max: usize,
    stride: usize,
) -> Result<WindowSet> {
    if horizon_max == 0 || horizon_max % s != 0 {
        return Err(ForecastError::NonMultipleHorizon {
            horizon: horizon_max,
            segment: s,
        });
    }
    Ok(make_windows(
        split,
        s,
        context_segments + horizon_max / s - 1,
        stride,
    )?)
}

struct ErrAcc {
    se_norm: f64,
    ae_norm: f64,
    se_raw: f64,
    ae_raw: f64,
    count: usize,
}

impl ErrAcc {
    fn new() -> Self {
        Self {
            se_norm: 0.0,
            ae_norm: 0.0,
            se_raw: 0.0,
            ae_raw: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, pred: &[f64], truth: &[f64], stats: NormStats) {
        for (p, t) in pred.iter().zip(truth) {
            let dr = p - t;
            self.se_raw += dr * dr;
            self.ae_raw += dr.abs();
            let dn = dr / stats.std;
            self.se_norm += dn * dn;
            self.ae_norm += dn.abs();
            self.count += 1;
        }
    }

    fn row(&self, key: usize) -> MetricRow {
        let c = self.count as f64;
        MetricRow {
            key,
            mse_norm: self.se_norm / c,
            mae_norm: self.ae_norm / c,
            mse_raw: self.se_raw / c,
            mae_raw: self.ae_raw / c,
        }
    }
}

/// One-for-all rolling evaluation: a single trained model produces every
/// horizon by autoregression (or explicit re-feeding for the flatten
/// baseline). Windows must carry `N * S + max(horizons)` points.
pub fn rolling_eval(
    model: &Model,
    windows: &[WindowSample],
    horizons: &[usize],
) -> Result<MetricTable> {
    if horizons.is_empty() {
        return Err(ForecastError::Request("no horizons given".into()));
    }
    if windows.is_empty() {
        return Err(ForecastError::Request("no evaluation windows".into()));
    }
    let s = model.segment_length();
    let step = model.flatten.as_ref().map_or(s, |h| h.horizon);
    for &h in horizons {
        if h == 0 || h % step != 0 {
            return Err(ForecastError::NonMultipleHorizon {
                horizon: h,
                segment: step,
            });
        }
    }
    let max_h = *horizons.iter().max().unwrap();
    let lookback_len = model.context_segments() * s;

    let mut accs: Vec<ErrAcc> = horizons.iter().map(|_| ErrAcc::new()).collect();
    for window in windows {
        let (pred, stats) = window_forecast(model, window, max_h)?;
        let truth = &window.values[lookback_len..lookback_len + max_h];
        for (acc, &h) in accs.iter_mut().zip(horizons) {
            acc.add(&pred[..h], &truth[..h], stats);
        }
    }
    Ok(MetricTable {
        kind: "horizon".to_string(),
        rows: accs
            .iter()
            .zip(horizons)
            .map(|(acc, &h)| acc.row(h))
            .collect(),
    })
}

/// Evaluates one checkpoint at several lookback lengths without
/// retraining: the most recent `L` points of each window's full lookback
/// are fed to the same model.
pub fn variable_lookback_eval(
    model: &Model,
    windows: &[WindowSample],
    lookbacks: &[usize],
    horizon: usize,
) -> Result<MetricTable> {
    if lookbacks.is_empty() || windows.is_empty() {
        return Err(ForecastError::Request(
            "need lookback lengths and windows".into(),
        ));
    }
    let s = model.segment_length();
    let n = model.context_segments();
    if horizon == 0 || horizon % s != 0 {
        return Err(ForecastError::NonMultipleHorizon {
            horizon,
            segment: s,
        });
    }
    for &lb in lookbacks {
        if lb == 0 || lb % s != 0 {
            return Err(ForecastError::Request(format!(
                "lookback {lb} is not a positive multiple of segment length {s}"
            )));
        }
        if lb > n * s {
            return Err(ForecastError::ContextOverflow {
                segments: lb / s,
                max: n,
            });
        }
    }

    let lookback_full = n * s;
    let iterations = horizon / s;
    let mut rows = Vec::with_capacity(lookbacks.len());
    for &lb in lookbacks {
        let skip_segs = n - lb / s;
        let mut acc = ErrAcc::new();
        for window in windows {
            if window.values.len() < lookback_full + horizon {
                return Err(ForecastError::Request(format!(
                    "window has {} points, need {}",
                    window.values.len(),
                    lookback_full + horizon
                )));
            }
            let request = ForecastRequest {
                lookback: window.values[lookback_full - lb..lookback_full].to_vec(),
                timestamps: if model.config.use_timestamps {
                    window
                        .seg_timestamps
                        .iter()
                        .skip(skip_segs)
                        .take(lb / s + iterations)
                        .map(|(a, b)| SegmentStamp {
                            start: a.clone(),
                            end: b.clone(),
                        })
                        .collect()
                } else {
                    Vec::new()
                },
                horizon,
                mode: ForecastMode::Autoregressive,
            };
            let result = generate(model, &request)?;
            let truth = &window.values[lookback_full..lookback_full + horizon];
            acc.add(&result.predictions, truth, result.norm);
        }
        rows.push(acc.row(lb));
    }
    Ok(MetricTable {
        kind: "lookback".to_string(),
        rows,
    })
}
