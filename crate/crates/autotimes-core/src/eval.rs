//! Metric suite (MSE/MAE and the sMAPE/MASE/OWA trio with a Naive2
//! reference), cross-domain evaluation protocols, the structural ablation
//! harness, and hyperparameter sweeps.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterParams, HeadKind};
use crate::backbone::{BackboneConfig, BackboneVariant, FrozenBackbone};
use crate::data::{DataError, M4Series, RawDataset};
use crate::forecaster::{
    self, eval_windows, ForecastError, ForecastMode, ForecastRequest, MetricTable,
};
use crate::incontext::{
    assemble_context, discard_short, select_prompts, DiscardRecord, PromptError, PromptSpec,
};
use crate::model::{Model, ModelError};
use crate::trainer::{self, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: prediction has {pred} points, truth {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("metric argument error: {0}")]
    Arg(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("naive2 reference must be positive")]
    NonPositiveReference,
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------
// Point metrics
// ---------------------------------------------------------------------

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    Ok(())
}

pub fn mse_mae(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    check_lengths(pred, truth)?;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    let n = pred.len() as f64;
    Ok((se / n, ae / n))
}

/// Symmetric MAPE in percent. Terms with a zero denominator contribute
/// zero.
pub fn smape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let denom = p.abs() + t.abs();
        if denom > 0.0 {
            total += 200.0 * (p - t).abs() / denom;
        }
    }
    Ok(total / pred.len() as f64)
}

/// Mean absolute error scaled by the in-sample seasonal-naive error.
/// A zero in-sample seasonal difference yields an infinity marker, which
/// aggregation excludes with a count note.
pub fn mase(pred: &[f64], truth: &[f64], insample: &[f64], seasonality: usize) -> Result<f64> {
    check_lengths(pred, truth)?;
    if seasonality == 0 || insample.len() <= seasonality {
        return Err(EvalError::Arg(format!(
            "in-sample length {} must exceed seasonality {seasonality}",
            insample.len()
        )));
    }
    let num: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64;
    let denom: f64 = (seasonality..insample.len())
        .map(|t| (insample[t] - insample[t - seasonality]).abs())
        .sum::<f64>()
        / (insample.len() - seasonality) as f64;
    if denom == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(num / denom)
}

/// Overall weighted average against the Naive2 reference.
pub fn owa(smape_v: f64, mase_v: f64, naive2_smape: f64, naive2_mase: f64) -> Result<f64> {
    if naive2_smape <= 0.0 || naive2_mase <= 0.0 {
        return Err(EvalError::NonPositiveReference);
    }
    Ok(0.5 * (smape_v / naive2_smape + mase_v / naive2_mase))
}

// ---------------------------------------------------------------------
// Naive2 reference
// ---------------------------------------------------------------------

fn acf(data: &[f64], k: usize) -> f64 {
    let n = data.len();
    let mean = data.iter().sum::<f64>() / n as f64;
    let mut s1 = 0.0;
    for i in k..n {
        s1 += (data[i] - mean) * (data[i - k] - mean);
    }
    let s2: f64 = data.iter().map(|&x| (x - mean) * (x - mean)).sum();
    s1 / s2
}

/// 90% significance test on the lag-m autocorrelation.
pub fn seasonality_test(series: &[f64], m: usize) -> bool {
    if m <= 1 || series.len() < 3 * m {
        return false;
    }
    let mut s = acf(series, 1);
    for i in 2..m {
        let a = acf(series, i);
        s += a * a;
    }
    let limit = 1.645 * ((1.0 + 2.0 * s) / series.len() as f64).sqrt();
    acf(series, m).abs() > limit
}

fn centered_ma(series: &[f64], m: usize) -> Vec<Option<f64>> {
    let n = series.len();
    let mut ma = vec![None; n];
    if m % 2 == 1 {
        let half = (m - 1) / 2;
        for t in half..n.saturating_sub(half) {
            let sum: f64 = series[t - half..=t + half].iter().sum();
            ma[t] = Some(sum / m as f64);
        }
    } else {
        let half = m / 2;
        for t in half..n.saturating_sub(half) {
            let mut sum = 0.5 * series[t - half] + 0.5 * series[t + half];
            sum += series[t - half + 1..t + half].iter().sum::<f64>();
            ma[t] = Some(sum / m as f64);
        }
    }
    ma
}

/// Multiplicative seasonal indices (percent scale), or flat 100s when the
/// seasonality test does not fire.
pub fn seasonal_indices(series: &[f64], m: usize) -> Vec<f64> {
    if !seasonality_test(series, m) {
        return vec![100.0; m];
    }
    let ma = centered_ma(series, m);
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for (t, v) in ma.iter().enumerate() {
        if let Some(v) = v {
            if *v != 0.0 {
                sums[t % m] += 100.0 * series[t] / v;
                counts[t % m] += 1;
            }
        }
    }
    let mut si: Vec<f64> = (0..m)
        .map(|k| {
            if counts[k] > 0 {
                sums[k] / counts[k] as f64
            } else {
                100.0
            }
        })
        .collect();
    let norm = si.iter().sum::<f64>() / (m as f64 * 100.0);
    for v in si.iter_mut() {
        *v /= norm;
    }
    si
}

/// Seasonally adjusted naive forecast: deseasonalize, carry the last
/// value forward, reseasonalize.
pub fn naive2_forecast(insample: &[f64], m: usize, horizon: usize) -> Vec<f64> {
    let si = seasonal_indices(insample, m);
    let n = insample.len();
    let last = insample[n - 1] / (si[(n - 1) % m] / 100.0);
    (0..horizon)
        .map(|h| last * si[(n + h) % m] / 100.0)
        .collect()
}

// ---------------------------------------------------------------------
// Report container
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize)]
pub struct ReportRow {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_raw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_raw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smape: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owa: Option<f64>,
}

impl ReportRow {
    pub fn from_metric_row(kind: &str, row: &forecaster::MetricRow, label_override: Option<String>) -> Self {
        Self {
            label: label_override.unwrap_or_else(|| format!("{kind}={}", row.key)),
            mse_norm: Some(row.mse_norm),
            mae_norm: Some(row.mae_norm),
            mse_raw: Some(row.mse_raw),
            mae_raw: Some(row.mae_raw),
            ..Default::default()
        }
    }
}

/// Evaluation report with full provenance: every report embeds the
/// checkpoint fingerprint, the resolved config digest, and the data
/// digest it was computed from. Wall-clock is console-only so reruns stay
/// byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub protocol: String,
    pub checkpoint_fingerprint: String,
    pub config_digest: String,
    pub data_digest: String,
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl MetricReport {
    pub fn new(protocol: &str, fingerprint: u64, config_digest: &str, data_digest: &str) -> Self {
        Self {
            protocol: protocol.to_string(),
            checkpoint_fingerprint: format!("{fingerprint:016x}"),
            config_digest: config_digest.to_string(),
            data_digest: data_digest.to_string(),
            rows: Vec::new(),
            notes: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn push_table(&mut self, table: &MetricTable, prefix: Option<&str>) {
        for row in &table.rows {
            let label = match prefix {
                Some(p) => format!("{p}/{}={}", table.kind, row.key),
                None => format!("{}={}", table.kind, row.key),
            };
            self.rows
                .push(ReportRow::from_metric_row(&table.kind, row, Some(label)));
        }
        let avg = table.average();
        let label = match prefix {
            Some(p) => format!("{p}/average"),
            None => "average".to_string(),
        };
        self.rows
            .push(ReportRow::from_metric_row(&table.kind, &avg, Some(label)));
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_report_json(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    atomic_write(path.as_ref(), &bytes)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_report_csv(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    out.push_str("label,mse_norm,mae_norm,mse_raw,mae_raw,smape,mase,owa\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.label,
            fmt_opt(row.mse_norm),
            fmt_opt(row.mae_norm),
            fmt_opt(row.mse_raw),
            fmt_opt(row.mae_raw),
            fmt_opt(row.smape),
            fmt_opt(row.mase),
            fmt_opt(row.owa),
        ));
    }
    atomic_write(path.as_ref(), out.as_bytes())
}

// ---------------------------------------------------------------------
// Short-term (M4-style) aggregation
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ShortTermSummary {
    pub smape: f64,
    pub mase: f64,
    pub owa: f64,
    pub naive2_smape: f64,
    pub naive2_mase: f64,
    pub series_count: usize,
    /// Series excluded from the MASE average by the infinity marker.
    pub mase_excluded: usize,
}

/// Aggregates per-series forecasts under the M4 conventions: averaged
/// sMAPE and MASE, OWA of the averages against Naive2.
pub fn short_term_summary(
    forecasts: &[(Vec<f64>, &M4Series)],
    seasonality: usize,
) -> Result<ShortTermSummary> {
    if forecasts.is_empty() {
        return Err(EvalError::Protocol("no series to evaluate".into()));
    }
    let mut s_sum = 0.0;
    let mut s_n2_sum = 0.0;
    let mut m_sum = 0.0;
    let mut m_n2_sum = 0.0;
    let mut m_count = 0usize;
    let mut excluded = 0usize;
    for (pred, series) in forecasts {
        let insample = series.train_portion();
        let truth = series.test_portion();
        let n2 = naive2_forecast(insample, seasonality, truth.len());
        s_sum += smape(pred, truth)?;
        s_n2_sum += smape(&n2, truth)?;
        let m = mase(pred, truth, insample, seasonality)?;
        let m_n2 = mase(&n2, truth, insample, seasonality)?;
        if m.is_finite() && m_n2.is_finite() {
            m_sum += m;
            m_n2_sum += m_n2;
            m_count += 1;
        } else {
            excluded += 1;
        }
    }
    let n = forecasts.len() as f64;
    let avg_smape = s_sum / n;
    let avg_n2_smape = s_n2_sum / n;
    let (avg_mase, avg_n2_mase) = if m_count > 0 {
        (m_sum / m_count as f64, m_n2_sum / m_count as f64)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let owa_v = if avg_mase.is_finite() {
        owa(avg_smape, avg_mase, avg_n2_smape, avg_n2_mase)?
    } else {
        f64::INFINITY
    };
    Ok(ShortTermSummary {
        smape: avg_smape,
        mase: avg_mase,
        owa: owa_v,
        naive2_smape: avg_n2_smape,
        naive2_mase: avg_n2_mase,
        series_count: forecasts.len(),
        mase_excluded: excluded,
    })
}

// ---------------------------------------------------------------------
// Cross-domain evaluation
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum CrossDomainMode {
    ZeroShot,
    InContext {
        spec: PromptSpec,
        /// Lookback length in points for the long-term protocol; the
        /// short-term protocol always uses one horizon of lookback.
        lookback_points: usize,
    },
}

impl CrossDomainMode {
    pub fn name(&self) -> String {
        match self {
            Self::ZeroShot => "zero_shot".to_string(),
            Self::InContext { spec, .. } => format!("in_context:{}", spec.strategy.name()),
        }
    }
}

pub enum CrossDomainTarget<'a> {
    /// Collection of univariate series; the final `horizon` of each is
    /// the test portion.
    ShortTerm {
        series: &'a [M4Series],
        seasonality: usize,
    },
    /// A chronological test split evaluated with the rolling protocol.
    LongTerm {
        test: &'a RawDataset,
        horizons: &'a [usize],
    },
}

pub struct CrossDomainOutcome {
    pub report: MetricReport,
    pub discards: Vec<DiscardRecord>,
}

/// Applies a trained checkpoint to an unseen target with no gradient
/// updates, either zero-shot or with time series prompts. The same
/// filtered series set is used for both modes.
pub fn cross_domain_eval(
    model: &Model,
    target: &CrossDomainTarget,
    mode: &CrossDomainMode,
    config_digest: &str,
) -> Result<CrossDomainOutcome> {
    let fingerprint_before = model.backbone.fingerprint();
    let outcome = match target {
        CrossDomainTarget::ShortTerm { series, seasonality } => {
            short_term_cross_domain(model, series, *seasonality, mode, config_digest)?
        }
        CrossDomainTarget::LongTerm { test, horizons } => {
            long_term_cross_domain(model, test, horizons, mode, config_digest)?
        }
    };
    debug_assert_eq!(model.backbone.recompute_fingerprint(), fingerprint_before);
    Ok(outcome)
}

fn short_term_cross_domain(
    model: &Model,
    series: &[M4Series],
    seasonality: usize,
    mode: &CrossDomainMode,
    config_digest: &str,
) -> Result<CrossDomainOutcome> {
    let s = model.segment_length();
    let horizon = series
        .first()
        .map(|x| x.horizon)
        .ok_or_else(|| EvalError::Protocol("empty series collection".into()))?;
    if series.iter().any(|x| x.horizon != horizon) {
        return Err(EvalError::Protocol(
            "series collection mixes forecast horizons".into(),
        ));
    }
    if horizon % s != 0 {
        return Err(EvalError::Protocol(format!(
            "target horizon {horizon} is incompatible with segment length {s}"
        )));
    }
    // One shared filter for every mode.
    let (kept, discards) = discard_short(series.to_vec(), horizon);
    if kept.is_empty() {
        return Err(EvalError::Protocol(
            "every series was discarded by the 4F rule".into(),
        ));
    }
    let values: Vec<&[f64]> = kept.iter().map(|x| x.values.as_slice()).collect();

    let mut forecasts = Vec::with_capacity(kept.len());
    for (i, item) in kept.iter().enumerate() {
        let len = item.values.len();
        let lookback_start = len - 2 * horizon;
        let lookback = &item.values[lookback_start..len - horizon];
        let pred = match mode {
            CrossDomainMode::ZeroShot => {
                let request = ForecastRequest {
                    lookback: lookback.to_vec(),
                    timestamps: Vec::new(),
                    horizon,
                    mode: ForecastMode::Autoregressive,
                };
                forecaster::generate(model, &request)?.predictions
            }
            CrossDomainMode::InContext { spec, .. } => {
                let mut spec = *spec;
                if spec.prompt_length == 0 {
                    spec.prompt_length = 2 * horizon;
                }
                let prompts = select_prompts(&values, i, &spec, lookback_start, lookback.len())?;
                let sample = assemble_context(
                    &prompts,
                    lookback,
                    lookback_start,
                    s,
                    model.context_segments(),
                    horizon,
                    None,
                    None,
                )?;
                crate::incontext::icf_forecast(model, &sample, horizon)?
            }
        };
        forecasts.push((pred, item));
    }
    let summary = short_term_summary(&forecasts, seasonality)?;

    let data_digest = m4_digest(series);
    let mut report = MetricReport::new(
        &format!("cross_domain/{}", mode.name()),
        model.backbone.fingerprint(),
        config_digest,
        &data_digest,
    );
    report.rows.push(ReportRow {
        label: "aggregate".to_string(),
        smape: Some(summary.smape),
        mase: Some(summary.mase),
        owa: Some(summary.owa),
        ..Default::default()
    });
    report.rows.push(ReportRow {
        label: "naive2".to_string(),
        smape: Some(summary.naive2_smape),
        mase: Some(summary.naive2_mase),
        owa: Some(1.0),
        ..Default::default()
    });
    report
        .notes
        .push(format!("series_count={}", summary.series_count));
    report
        .notes
        .push(format!("mase_excluded={}", summary.mase_excluded));
    report.notes.push(format!("discarded={}", discards.len()));
    Ok(CrossDomainOutcome { report, discards })
}

fn long_term_cross_domain(
    model: &Model,
    test: &RawDataset,
    horizons: &[usize],
    mode: &CrossDomainMode,
    config_digest: &str,
) -> Result<CrossDomainOutcome> {
    let s = model.segment_length();
    let n = model.context_segments();
    let table = match mode {
        CrossDomainMode::ZeroShot => {
            let windows = eval_windows(test, s, n, *horizons.iter().max().unwrap(), s)?;
            forecaster::rolling_eval(model, &windows.samples, horizons)?
        }
        CrossDomainMode::InContext {
            spec,
            lookback_points,
        } => long_term_in_context(model, test, horizons, spec, *lookback_points)?,
    };
    let mut report = MetricReport::new(
        &format!("cross_domain/{}", mode.name()),
        model.backbone.fingerprint(),
        config_digest,
        &test.digest(),
    );
    report.push_table(&table, None);
    Ok(CrossDomainOutcome {
        report,
        discards: Vec::new(),
    })
}

fn long_term_in_context(
    model: &Model,
    test: &RawDataset,
    horizons: &[usize],
    spec: &PromptSpec,
    lookback_points: usize,
) -> Result<MetricTable> {
    let s = model.segment_length();
    let n = model.context_segments();
    if horizons.is_empty() {
        return Err(EvalError::Protocol("no horizons given".into()));
    }
    for &h in horizons {
        if h == 0 || h % s != 0 {
            return Err(EvalError::Protocol(format!(
                "horizon {h} is not a multiple of segment length {s}"
            )));
        }
    }
    if lookback_points == 0 || lookback_points % s != 0 {
        return Err(EvalError::Protocol(format!(
            "lookback of {lookback_points} points is not a multiple of segment length {s}"
        )));
    }
    let max_h = *horizons.iter().max().unwrap();
    let pool: Vec<&[f64]> = test.variates.iter().map(|v| v.as_slice()).collect();
    let timeline: &[String] = &test.timestamps;
    let t_len = test.len();
    if t_len < lookback_points + max_h {
        return Err(EvalError::Protocol(format!(
            "test split of {t_len} points is too short for lookback {lookback_points} plus horizon {max_h}"
        )));
    }

    struct Acc {
        se_n: f64,
        ae_n: f64,
        se_r: f64,
        ae_r: f64,
        count: usize,
    }
    let mut accs: Vec<Acc> = horizons
        .iter()
        .map(|_| Acc {
            se_n: 0.0,
            ae_n: 0.0,
            se_r: 0.0,
            ae_r: 0.0,
            count: 0,
        })
        .collect();

    let mut evaluated = 0usize;
    for (vi, variate) in test.variates.iter().enumerate() {
        let mut start = 0usize;
        while start + lookback_points + max_h <= t_len {
            let lookback = &variate[start..start + lookback_points];
            let prompts = match select_prompts(&pool, vi, spec, start, lookback_points) {
                Ok(p) => p,
                Err(PromptError::InsufficientHistory { .. }) => {
                    // Not enough history at this offset yet; slide forward.
                    start += s;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let sample = assemble_context(
                &prompts,
                lookback,
                start,
                s,
                n,
                max_h,
                Some(timeline),
                None,
            )?;
            let request = ForecastRequest {
                lookback: sample.context.clone(),
                timestamps: sample
                    .seg_timestamps
                    .iter()
                    .map(|(a, b)| forecaster::SegmentStamp {
                        start: a.clone(),
                        end: b.clone(),
                    })
                    .collect(),
                horizon: max_h,
                mode: ForecastMode::Autoregressive,
            };
            let result = forecaster::generate(model, &request)?;
            let target_start = start + lookback_points;
            let truth = &variate[target_start..target_start + max_h];
            for (acc, &h) in accs.iter_mut().zip(horizons) {
                for (p, t) in result.predictions[..h].iter().zip(&truth[..h]) {
                    let dr = p - t;
                    acc.se_r += dr * dr;
                    acc.ae_r += dr.abs();
                    let dn = dr / result.norm.std;
                    acc.se_n += dn * dn;
                    acc.ae_n += dn.abs();
                    acc.count += 1;
                }
            }
            evaluated += 1;
            start += s;
        }
    }
    if evaluated == 0 {
        return Err(EvalError::Protocol(
            "no window had enough history for the prompt strategy".into(),
        ));
    }
    Ok(MetricTable {
        kind: "horizon".to_string(),
        rows: accs
            .iter()
            .zip(horizons)
            .map(|(acc, &h)| forecaster::MetricRow {
                key: h,
                mse_norm: acc.se_n / acc.count as f64,
                mae_norm: acc.ae_n / acc.count as f64,
                mse_raw: acc.se_r / acc.count as f64,
                mae_raw: acc.ae_r / acc.count as f64,
            })
            .collect(),
    })
}

fn m4_digest(series: &[M4Series]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for s in series {
        hasher.update(s.id.as_bytes());
        hasher.update((s.horizon as u64).to_le_bytes());
        for &v in &s.values {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------
// Experiment engine (shared by the ablation suite and sweeps)
// ---------------------------------------------------------------------

/// Everything needed to train and evaluate one model end to end.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub backbone: BackboneConfig,
    pub embed: HeadKind,
    pub project: HeadKind,
    pub template: String,
    pub train: TrainConfig,
    pub horizons: Vec<usize>,
    /// Stride for evaluation windows (training windows use stride 1).
    pub eval_stride: usize,
    /// Train a flatten head of this horizon instead of the segment-wise
    /// projection.
    pub flatten_horizon: Option<usize>,
}

impl ExperimentPlan {
    pub fn build_model(&self) -> Result<Model> {
        let backbone = FrozenBackbone::build(self.backbone.clone())
            .map_err(ModelError::from)?;
        let mut adapter_config =
            AdapterConfig::new(self.train.segment_length, self.embed, self.project);
        adapter_config.template = self.template.clone();
        let adapter = AdapterParams::new(
            adapter_config,
            self.backbone.model_dim,
            crate::seed::derive(self.train.seed, "adapter"),
        )
        .map_err(ModelError::from)?;
        let mut model = Model::new(backbone, adapter, self.train.clone())?;
        if let Some(horizon) = self.flatten_horizon {
            model = model
                .with_flatten_head(horizon, crate::seed::derive(self.train.seed, "flatten"))?;
        }
        Ok(model)
    }
}

pub struct ExperimentOutcome {
    pub model: Model,
    pub train_report: TrainReport,
    pub table: MetricTable,
}

/// Trains on the train split and runs the rolling evaluation on the test
/// split.
pub fn run_experiment(
    plan: &ExperimentPlan,
    train_split: &RawDataset,
    test_split: &RawDataset,
) -> Result<ExperimentOutcome> {
    let s = plan.train.segment_length;
    let n = plan.train.context_segments;
    let mut model = plan.build_model()?;
    // Window shape follows the objective: N + 1 segments for next-token
    // training, N segments plus the head horizon for the flatten mode.
    let train_segments = (trainer::expected_window_len(&model) / s).max(2);
    let windows = crate::data::make_windows(train_split, s, train_segments - 1, 1)?;
    if windows.samples.is_empty() {
        return Err(EvalError::Protocol(format!(
            "train split too short: {}",
            windows.warnings.join("; ")
        )));
    }
    let train_report = trainer::train(&mut model, &windows.samples)?;
    let max_h = *plan
        .horizons
        .iter()
        .max()
        .ok_or_else(|| EvalError::Protocol("no horizons".into()))?;
    let eval = eval_windows(test_split, s, n, max_h, plan.eval_stride)?;
    if eval.samples.is_empty() {
        return Err(EvalError::Protocol(format!(
            "test split too short: {}",
            eval.warnings.join("; ")
        )));
    }
    let table = forecaster::rolling_eval(&model, &eval.samples, &plan.horizons)?;
    Ok(ExperimentOutcome {
        model,
        train_report,
        table,
    })
}

// ---------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------

pub const ABLATION_VARIANTS: [&str; 6] = [
    "full",
    "no_llm",
    "attn_only",
    "single_block",
    "flatten_head",
    "full_no_timestamps",
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationOutcome {
    pub variant: String,
    pub split_digest: String,
    pub rows: Vec<ReportRow>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub outcomes: Vec<AblationOutcome>,
    pub train_digest: String,
    pub test_digest: String,
    pub config_digest: String,
}

impl AblationReport {
    pub fn failures(&self) -> Vec<&AblationOutcome> {
        self.outcomes.iter().filter(|o| o.error.is_some()).collect()
    }
}

fn variant_plan(base: &ExperimentPlan, variant: &str) -> ExperimentPlan {
    let mut plan = base.clone();
    plan.flatten_horizon = None;
    match variant {
        "full" => plan.backbone.variant = BackboneVariant::Full,
        "no_llm" => plan.backbone.variant = BackboneVariant::NoLlm,
        "attn_only" => plan.backbone.variant = BackboneVariant::AttnOnly,
        "single_block" => plan.backbone.variant = BackboneVariant::SingleBlock,
        "flatten_head" => {
            plan.backbone.variant = BackboneVariant::Full;
            plan.flatten_horizon = Some(plan.train.segment_length);
        }
        "full_no_timestamps" => {
            plan.backbone.variant = BackboneVariant::Full;
            plan.train.use_timestamps = false;
        }
        other => panic!("unknown ablation variant {other}"),
    }
    plan
}

fn run_variant(
    base: &ExperimentPlan,
    variant: &str,
    train_split: &RawDataset,
    test_split: &RawDataset,
) -> AblationOutcome {
    let plan = variant_plan(base, variant);
    let split_digest = format!("{}/{}", train_split.digest(), test_split.digest());
    // Structural self-check: the identity variant must actually be one.
    if variant == "no_llm" {
        if let Ok(model) = plan.build_model() {
            let d = plan.backbone.model_dim;
            let probe = crate::tensor::Tensor::new(
                vec![2, d],
                (0..2 * d).map(|i| (i as f64 * 0.13).sin()).collect(),
            )
            .unwrap();
            match model.backbone.forward(&probe) {
                Ok(out) if out.data() == probe.data() => {}
                _ => {
                    return AblationOutcome {
                        variant: variant.to_string(),
                        split_digest,
                        rows: Vec::new(),
                        error: Some("no_llm forward is not the identity".to_string()),
                    }
                }
            }
        }
    }
    match run_experiment(&plan, train_split, test_split) {
        Ok(outcome) => {
            let rows = outcome
                .table
                .rows
                .iter()
                .map(|r| {
                    ReportRow::from_metric_row(
                        &outcome.table.kind,
                        r,
                        Some(format!("{variant}/horizon={}", r.key)),
                    )
                })
                .collect();
            AblationOutcome {
                variant: variant.to_string(),
                split_digest,
                rows,
                error: None,
            }
        }
        Err(e) => AblationOutcome {
            variant: variant.to_string(),
            split_digest,
            rows: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Trains and evaluates the six structural variants under identical
/// seeds and budgets. Per-variant failures are recorded and the suite
/// continues.
pub fn ablation_suite(
    base: &ExperimentPlan,
    train_split: &RawDataset,
    test_split: &RawDataset,
    config_digest: &str,
    threads: usize,
) -> AblationReport {
    let outcomes: Vec<AblationOutcome> = if threads > 1 {
        run_parallel(&ABLATION_VARIANTS, threads, |variant| {
            run_variant(base, variant, train_split, test_split)
        })
    } else {
        ABLATION_VARIANTS
            .iter()
            .map(|v| run_variant(base, v, train_split, test_split))
            .collect()
    };
    AblationReport {
        outcomes,
        train_digest: train_split.digest(),
        test_digest: test_split.digest(),
        config_digest: config_digest.to_string(),
    }
}

/// Runs jobs on up to `threads` workers, preserving input order in the
/// output.
fn run_parallel<T, F, R>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let mut results: Vec<Option<R>> = Vec::new();
    results.resize_with(items.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results_mutex = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results_mutex.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_iter().map(|r| r.unwrap()).collect()
}

// ---------------------------------------------------------------------
// Hyperparameter sweep
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    HiddenDim,
    ContextSegments,
    SegmentLength,
    NumLayers,
    LearningRate,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hidden_dim" => Ok(Self::HiddenDim),
            "context_segments" => Ok(Self::ContextSegments),
            "segment_length" => Ok(Self::SegmentLength),
            "num_layers" => Ok(Self::NumLayers),
            "learning_rate" => Ok(Self::LearningRate),
            other => Err(EvalError::Arg(format!("unknown sweep axis '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::HiddenDim => "hidden_dim",
            Self::ContextSegments => "context_segments",
            Self::SegmentLength => "segment_length",
            Self::NumLayers => "num_layers",
            Self::LearningRate => "learning_rate",
        }
    }
}

fn apply_axis(plan: &ExperimentPlan, axis: SweepAxis, value: f64) -> Result<ExperimentPlan> {
    let mut p = plan.clone();
    let as_usize = || -> Result<usize> {
        if value <= 0.0 || value.fract() != 0.0 {
            return Err(EvalError::Arg(format!(
                "axis {} needs a positive integer, got {value}",
                axis.as_str()
            )));
        }
        Ok(value as usize)
    };
    match axis {
        SweepAxis::HiddenDim => {
            let h = as_usize()?;
            p.embed = HeadKind::Mlp { hidden: h };
            p.project = HeadKind::Mlp { hidden: h };
        }
        SweepAxis::ContextSegments => p.train.context_segments = as_usize()?,
        SweepAxis::SegmentLength => p.train.segment_length = as_usize()?,
        SweepAxis::NumLayers => p.backbone.num_layers = as_usize()?,
        SweepAxis::LearningRate => {
            if value <= 0.0 {
                return Err(EvalError::Arg("learning rate must be positive".into()));
            }
            p.train.learning_rate = value;
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub rows: Vec<ReportRow>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub axis: String,
    pub points: Vec<SweepPoint>,
    pub train_digest: String,
    pub test_digest: String,
    pub config_digest: String,
}

impl SweepReport {
    pub fn failures(&self) -> Vec<&SweepPoint> {
        self.points.iter().filter(|p| p.error.is_some()).collect()
    }
}

/// One full train/eval per axis value under a fixed seed. Per-point
/// failures are recorded and the sweep continues.
pub fn sweep(
    base: &ExperimentPlan,
    axis: SweepAxis,
    values: &[f64],
    train_split: &RawDataset,
    test_split: &RawDataset,
    config_digest: &str,
    threads: usize,
) -> SweepReport {
    let run_point = |&value: &f64| -> SweepPoint {
        let plan = match apply_axis(base, axis, value) {
            Ok(p) => p,
            Err(e) => {
                return SweepPoint {
                    value,
                    rows: Vec::new(),
                    error: Some(e.to_string()),
                }
            }
        };
        match run_experiment(&plan, train_split, test_split) {
            Ok(outcome) => SweepPoint {
                value,
                rows: outcome
                    .table
                    .rows
                    .iter()
                    .map(|r| {
                        ReportRow::from_metric_row(
                            &outcome.table.kind,
                            r,
                            Some(format!("{}={value}/horizon={}", axis.as_str(), r.key)),
                        )
                    })
                    .collect(),
                error: None,
            },
            Err(e) => SweepPoint {
                value,
                rows: Vec::new(),
                error: Some(e.to_string()),
            },
        }
    };
    let points = if threads > 1 {
        run_parallel(values, threads, run_point)
    } else {
        values.iter().map(|v| run_point(v)).collect()
    };
    SweepReport {
        axis: axis.as_str().to_string(),
        points,
        train_digest: train_split.digest(),
        test_digest: test_split.digest(),
        config_digest: config_digest.to_string(),
    }
}
