//! Command-line entry point: training, forecasting, evaluation,
//! in-context runs, ablations, sweeps and checkpoint inspection.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort,
//! 5 checkpoint error, 6 request error. `ablate` and `sweep` exit 0 with
//! a failure manifest when individual jobs fail.

mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use autotimes_core::checkpoint::{self, Checkpoint, CheckpointError};
use autotimes_core::data::{
    self, chronological_split, load_csv, load_m4_csv, synth_generate, DataError, M4Series,
    RawDataset, WindowSample,
};
use autotimes_core::eval::{
    self, cross_domain_eval, CrossDomainMode, CrossDomainTarget, EvalError, MetricReport,
    SweepAxis,
};
use autotimes_core::forecaster::{self, eval_windows, ForecastError, ForecastRequest};
use autotimes_core::incontext::{PromptError, PromptSpec, PromptStrategy};
use autotimes_core::model::ModelError;
use autotimes_core::trainer::{self, TrainError};

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "autotimes", version, about = "Autoregressive forecasting with a frozen transformer backbone")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all written artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for ablate/sweep jobs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Override a config key, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint plus a loss trace.
    Train,
    /// Run a forecast request against a checkpoint.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        request: PathBuf,
        /// Output file (default: <out-dir>/forecast.json).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under a protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// one_for_all | short_term | zero_shot | in_context
        #[arg(long)]
        protocol: String,
    },
    /// Train and evaluate the six structural variants.
    Ablate,
    /// One train/eval per value along a hyperparameter axis.
    Sweep {
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values.
        #[arg(long)]
        values: Option<String>,
    },
    /// Print checkpoint contents and parameter counts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Checkpoint(String),
    Request(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
            Self::Checkpoint(_) => 5,
            Self::Request(_) => 6,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::Data(m) | Self::Numeric(m) | Self::Checkpoint(m)
            | Self::Request(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Checkpoint(e.to_string())
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        Self::Request(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        Self::Request(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanLoss { .. } => Self::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Model(_) => Self::Config(e.to_string()),
            TrainError::NoWindows | TrainError::Window(_) | TrainError::Data(_) => {
                Self::Data(e.to_string())
            }
            TrainError::Tensor(_) => Self::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Arg(_) => Self::Config(e.to_string()),
            EvalError::Data(_) | EvalError::Io(_) => Self::Data(e.to_string()),
            EvalError::Train(inner) => CliError::from(inner),
            EvalError::Model(_) => Self::Config(e.to_string()),
            _ => Self::Request(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Request(format!("json error: {e}"))
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    for pair in &cli.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{pair}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;

    match &cli.command {
        Command::Train => cmd_train(&cfg, &cli.out_dir),
        Command::Forecast {
            checkpoint,
            request,
            output,
        } => cmd_forecast(&cfg, &cli.out_dir, checkpoint, request, output.as_deref()),
        Command::Eval {
            checkpoint,
            protocol,
        } => cmd_eval(&cfg, &cli.out_dir, checkpoint, protocol),
        Command::Ablate => cmd_ablate(&cfg, &cli.out_dir, cli.threads),
        Command::Sweep { axis, values } => {
            cmd_sweep(&cfg, &cli.out_dir, cli.threads, axis.as_deref(), values.as_deref())
        }
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
    }
}

// -------------------------------------------------------------------
// Shared plumbing
// -------------------------------------------------------------------

enum DataBundle {
    Long {
        train: RawDataset,
        val: RawDataset,
        test: RawDataset,
    },
    Short(Vec<M4Series>),
}

fn load_data(cfg: &RunConfig) -> Result<DataBundle, CliError> {
    match cfg.str_or("data.kind", "synth").as_str() {
        "synth" => {
            let ds = synth_generate(&cfg.synth_spec()?)?;
            let split = cfg.split_spec(ds.len())?;
            let (train, val, test) = chronological_split(&ds, split)?;
            Ok(DataBundle::Long { train, val, test })
        }
        "csv" => {
            let path = cfg
                .get("data.path")
                .ok_or_else(|| CliError::Config("data.path required for data.kind=csv".into()))?;
            let mut ds = load_csv(path)?;
            ds.frequency = cfg.str_or("data.frequency", "unknown");
            let split = cfg.split_spec(ds.len())?;
            let (train, val, test) = chronological_split(&ds, split)?;
            Ok(DataBundle::Long { train, val, test })
        }
        "m4" => {
            let path = cfg
                .get("data.path")
                .ok_or_else(|| CliError::Config("data.path required for data.kind=m4".into()))?;
            Ok(DataBundle::Short(load_m4_csv(path)?))
        }
        other => Err(CliError::Config(format!("unknown data.kind '{other}'"))),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_resolved_config(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    write_atomic(&out_dir.join("resolved.config"), cfg.resolved_text().as_bytes())
}

/// Channel-independent training windows from the train portions of a
/// short-term collection. These series carry no timestamps.
fn m4_train_windows(series: &[M4Series], s: usize, segments: usize) -> Vec<WindowSample> {
    let window_len = segments * s;
    let mut out = Vec::new();
    for (idx, item) in series.iter().enumerate() {
        let train = item.train_portion();
        if train.len() < window_len {
            continue;
        }
        let mut start = 0;
        while start + window_len <= train.len() {
            out.push(WindowSample {
                variate: idx,
                values: train[start..start + window_len].to_vec(),
                seg_timestamps: Vec::new(),
            });
            start += 1;
        }
    }
    out
}

// -------------------------------------------------------------------
// train
// -------------------------------------------------------------------

fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let plan = cfg.plan()?;
    if let Some(h) = plan.flatten_horizon {
        if h % plan.train.segment_length != 0 {
            return Err(CliError::Config(format!(
                "flatten.horizon {h} is not a multiple of segment length {}",
                plan.train.segment_length
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(cfg, out_dir)?;
    let digest = cfg.digest();

    let s = plan.train.segment_length;
    let mut model = plan.build_model()?;
    let window_segments = trainer::expected_window_len(&model) / s;

    let bundle = load_data(cfg)?;
    let (windows, val_windows, data_digest) = match &bundle {
        DataBundle::Long { train, val, .. } => {
            let w = data::make_windows(train, s, window_segments - 1, 1)?;
            for warning in &w.warnings {
                eprintln!("warning: {warning}");
            }
            let vw = if val.len() >= window_segments * s {
                data::make_windows(val, s, window_segments - 1, 1)?.samples
            } else {
                Vec::new()
            };
            (w.samples, vw, train.digest())
        }
        DataBundle::Short(series) => {
            if plan.train.use_timestamps {
                return Err(CliError::Config(
                    "short-term collections carry no timestamps; set train.use_timestamps=false"
                        .into(),
                ));
            }
            let w = m4_train_windows(series, s, window_segments);
            (w, Vec::new(), format!("m4:{}", series.len()))
        }
    };
    if windows.is_empty() {
        return Err(CliError::Data(
            "no training windows could be built from the data".into(),
        ));
    }

    let report = trainer::train(&mut model, &windows)?;

    // Loss trace as JSON lines, headed by the run provenance.
    let mut trace = String::new();
    trace.push_str(&format!(
        "{{\"config_digest\":\"{digest}\",\"data_digest\":\"{data_digest}\"}}\n"
    ));
    for record in &report.trace {
        trace.push_str(&serde_json::to_string(record)?);
        trace.push('\n');
    }
    if !val_windows.is_empty() {
        let metrics = trainer::validate(&model, &val_windows)?;
        trace.push_str(&format!(
            "{{\"validation\":{}}}\n",
            serde_json::to_string(&metrics)?
        ));
        println!(
            "validation: mse_norm {:.6} mae_norm {:.6} mse_raw {:.6} mae_raw {:.6}",
            metrics.mse_norm, metrics.mae_norm, metrics.mse_raw, metrics.mae_raw
        );
    }
    write_atomic(&out_dir.join("loss_trace.jsonl"), trace.as_bytes())?;

    let mut meta = BTreeMap::new();
    meta.insert("config_digest".to_string(), digest.clone());
    meta.insert("data_digest".to_string(), data_digest);
    let ckpt = Checkpoint {
        model,
        steps: report.steps as u64,
        meta,
    };
    let ckpt_path = out_dir.join("model.atck");
    checkpoint::save(&ckpt, &ckpt_path)?;

    println!(
        "trained {} steps in {:.1}s; final loss {:.6}; checkpoint {}",
        report.steps,
        started.elapsed().as_secs_f64(),
        report.final_loss().unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

// -------------------------------------------------------------------
// forecast
// -------------------------------------------------------------------

#[derive(serde::Serialize)]
struct ForecastArtifact {
    config_digest: String,
    checkpoint_fingerprint: String,
    predictions: Vec<f64>,
    steps: Vec<Vec<f64>>,
    norm: autotimes_core::data::NormStats,
}

fn cmd_forecast(
    cfg: &RunConfig,
    out_dir: &Path,
    checkpoint: &Path,
    request_path: &Path,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = checkpoint::load(checkpoint)?;
    let raw = std::fs::read_to_string(request_path)
        .map_err(|e| CliError::Request(format!("cannot read request: {e}")))?;
    let request: ForecastRequest =
        serde_json::from_str(&raw).map_err(|e| CliError::Request(format!("bad request: {e}")))?;
    let result = forecaster::generate(&ckpt.model, &request)?;

    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(cfg, out_dir)?;
    let artifact = ForecastArtifact {
        config_digest: cfg.digest(),
        checkpoint_fingerprint: format!("{:016x}", ckpt.model.backbone.fingerprint()),
        predictions: result.predictions,
        steps: result.steps,
        norm: result.norm,
    };
    let default_path = out_dir.join("forecast.json");
    let path = output.unwrap_or(&default_path);
    let mut bytes = serde_json::to_vec_pretty(&artifact)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    println!(
        "forecast of {} points in {} steps written to {}",
        artifact.predictions.len(),
        artifact.steps.len(),
        path.display()
    );
    Ok(())
}

// -------------------------------------------------------------------
// eval
// -------------------------------------------------------------------

fn prompt_spec(cfg: &RunConfig) -> Result<PromptSpec, CliError> {
    let strategy = match cfg.str_or("incontext.strategy", "first_window").as_str() {
        "zero_shot" => PromptStrategy::ZeroShot,
        "first_window" => PromptStrategy::FirstWindow,
        "last_window" => PromptStrategy::LastWindow,
        "ahead_period" => PromptStrategy::AheadPeriod {
            period: cfg.parse_or("incontext.period", 24usize)?,
        },
        "ahead_random" => PromptStrategy::AheadRandom {
            seed: cfg.parse_or(
                "incontext.seed",
                autotimes_core::seed::derive(cfg.seed()?, "icf"),
            )?,
        },
        "fixed_prompt" => PromptStrategy::FixedPrompt,
        "other_series" => PromptStrategy::OtherSeries {
            id: cfg.parse_or("incontext.id", 0usize)?,
        },
        "other_variate" => PromptStrategy::OtherVariate {
            id: cfg.parse_or("incontext.id", 0usize)?,
            period: cfg.parse_or("incontext.period", 24usize)?,
        },
        other => {
            return Err(CliError::Config(format!(
                "unknown incontext.strategy '{other}'"
            )))
        }
    };
    let mut spec = PromptSpec::new(strategy, cfg.parse_or("incontext.prompt_length", 0usize)?);
    if strategy != PromptStrategy::ZeroShot {
        spec.count = cfg.parse_or("incontext.count", 1usize)?;
    }
    Ok(spec)
}

fn finish_report(
    mut report: MetricReport,
    out_dir: &Path,
    started: Instant,
) -> Result<(), CliError> {
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    eval::write_report_json(&report, out_dir.join("report.json"))?;
    eval::write_report_csv(&report, out_dir.join("report.csv"))?;
    println!(
        "protocol {} finished in {:.1}s; {} rows written to {}",
        report.protocol,
        report.wall_clock_secs,
        report.rows.len(),
        out_dir.join("report.json").display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    out_dir: &Path,
    checkpoint: &Path,
    protocol: &str,
) -> Result<(), CliError> {
    let started = Instant::now();
    let ckpt = checkpoint::load(checkpoint)?;
    let model = &ckpt.model;
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(cfg, out_dir)?;
    let digest = cfg.digest();
    let bundle = load_data(cfg)?;
    let s = model.segment_length();
    let n = model.context_segments();
    let horizons = {
        let given = cfg.usize_list("eval.horizons")?;
        if given.is_empty() {
            vec![s, 2 * s, 3 * s, 4 * s]
        } else {
            given
        }
    };
    let seasonality: usize = cfg.parse_or("data.seasonality", 1usize)?;

    match protocol {
        "one_for_all" => {
            let DataBundle::Long { test, .. } = &bundle else {
                return Err(CliError::Request(
                    "one_for_all needs a chronological dataset".into(),
                ));
            };
            let stride: usize = cfg.parse_or("eval.stride", s)?;
            let max_h = *horizons.iter().max().unwrap();
            let windows = eval_windows(test, s, n, max_h, stride)?;
            let table = forecaster::rolling_eval(model, &windows.samples, &horizons)?;
            let mut report = MetricReport::new(
                "one_for_all",
                model.backbone.fingerprint(),
                &digest,
                &test.digest(),
            );
            report.push_table(&table, None);
            let lookbacks = cfg.usize_list("eval.lookbacks")?;
            if !lookbacks.is_empty() {
                let lb_table = forecaster::variable_lookback_eval(
                    model,
                    &windows.samples,
                    &lookbacks,
                    horizons[0],
                )?;
                report.push_table(&lb_table, Some("variable_lookback"));
            }
            finish_report(report, out_dir, started)
        }
        "short_term" | "zero_shot" | "in_context" => {
            let mode = if protocol == "in_context" {
                CrossDomainMode::InContext {
                    spec: prompt_spec(cfg)?,
                    lookback_points: cfg.parse_or("incontext.lookback_points", (n / 2).max(1) * s)?,
                }
            } else {
                CrossDomainMode::ZeroShot
            };
            let target = match &bundle {
                DataBundle::Short(series) => CrossDomainTarget::ShortTerm {
                    series,
                    seasonality,
                },
                DataBundle::Long { test, .. } => CrossDomainTarget::LongTerm {
                    test,
                    horizons: &horizons,
                },
            };
            let outcome = cross_domain_eval(model, &target, &mode, &digest)?;
            let mut lines = String::new();
            for d in &outcome.discards {
                lines.push_str(&serde_json::to_string(&d)?);
                lines.push('\n');
            }
            write_atomic(&out_dir.join("discards.jsonl"), lines.as_bytes())?;
            finish_report(outcome.report, out_dir, started)
        }
        other => Err(CliError::Request(format!("unknown protocol '{other}'"))),
    }
}

// -------------------------------------------------------------------
// ablate / sweep
// -------------------------------------------------------------------

#[derive(serde::Serialize)]
struct FailureManifest<'a> {
    config_digest: String,
    failures: Vec<FailureEntry<'a>>,
}

#[derive(serde::Serialize)]
struct FailureEntry<'a> {
    job: &'a str,
    error: &'a str,
}

fn cmd_ablate(cfg: &RunConfig, out_dir: &Path, threads: usize) -> Result<(), CliError> {
    let started = Instant::now();
    let plan = cfg.plan()?;
    let DataBundle::Long { train, test, .. } = load_data(cfg)? else {
        return Err(CliError::Request(
            "ablate needs a chronological dataset".into(),
        ));
    };
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(cfg, out_dir)?;
    let digest = cfg.digest();

    let report = eval::ablation_suite(&plan, &train, &test, &digest, threads.max(1));

    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join("ablation.json"), &bytes)?;

    let mut metric_report = MetricReport::new(
        "ablation",
        0,
        &digest,
        &format!("{}/{}", report.train_digest, report.test_digest),
    );
    for outcome in &report.outcomes {
        metric_report.rows.extend(outcome.rows.iter().cloned());
        if let Some(err) = &outcome.error {
            metric_report
                .notes
                .push(format!("{} failed: {err}", outcome.variant));
        }
    }
    eval::write_report_csv(&metric_report, out_dir.join("ablation.csv"))?;

    let failures = FailureManifest {
        config_digest: digest,
        failures: report
            .outcomes
            .iter()
            .filter_map(|o| {
                o.error.as_ref().map(|e| FailureEntry {
                    job: &o.variant,
                    error: e,
                })
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&failures)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join("failures.json"), &bytes)?;

    println!(
        "ablation: {} variants, {} failures, {:.1}s; table {}",
        report.outcomes.len(),
        failures.failures.len(),
        started.elapsed().as_secs_f64(),
        out_dir.join("ablation.csv").display()
    );
    Ok(())
}

fn cmd_sweep(
    cfg: &RunConfig,
    out_dir: &Path,
    threads: usize,
    axis_flag: Option<&str>,
    values_flag: Option<&str>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let plan = cfg.plan()?;
    let axis_name = match axis_flag {
        Some(a) => a.to_string(),
        None => cfg
            .get("sweep.axis")
            .ok_or_else(|| CliError::Config("sweep.axis (or --axis) is required".into()))?
            .to_string(),
    };
    let axis = SweepAxis::parse(&axis_name).map_err(|e| CliError::Config(e.to_string()))?;
    let values: Vec<f64> = match values_flag {
        Some(v) => v
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("bad sweep value '{x}'")))
            })
            .collect::<Result<_, _>>()?,
        None => cfg.f64_list("sweep.values")?,
    };
    if values.is_empty() {
        return Err(CliError::Config(
            "sweep.values (or --values) must list at least one value".into(),
        ));
    }
    let DataBundle::Long { train, test, .. } = load_data(cfg)? else {
        return Err(CliError::Request(
            "sweep needs a chronological dataset".into(),
        ));
    };
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(cfg, out_dir)?;
    let digest = cfg.digest();

    let report = eval::sweep(&plan, axis, &values, &train, &test, &digest, threads.max(1));

    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join("sweep.json"), &bytes)?;

    let mut metric_report = MetricReport::new(
        "sweep",
        0,
        &digest,
        &format!("{}/{}", report.train_digest, report.test_digest),
    );
    for point in &report.points {
        metric_report.rows.extend(point.rows.iter().cloned());
        if let Some(err) = &point.error {
            metric_report
                .notes
                .push(format!("value {} failed: {err}", point.value));
        }
    }
    eval::write_report_csv(&metric_report, out_dir.join("sweep.csv"))?;

    let values_str: Vec<String> = report.points.iter().map(|p| p.value.to_string()).collect();
    let failures = FailureManifest {
        config_digest: digest,
        failures: report
            .points
            .iter()
            .zip(&values_str)
            .filter_map(|(p, v)| {
                p.error.as_ref().map(|e| FailureEntry {
                    job: v.as_str(),
                    error: e,
                })
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&failures)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join("failures.json"), &bytes)?;

    println!(
        "sweep over {}: {} points, {} failures, {:.1}s",
        report.axis,
        report.points.len(),
        failures.failures.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

// -------------------------------------------------------------------
// inspect
// -------------------------------------------------------------------

fn cmd_inspect(checkpoint: &Path) -> Result<(), CliError> {
    let ckpt = checkpoint::load(checkpoint)?;
    let model = &ckpt.model;
    let bc = model.backbone.config();
    let trainable = model.trainable_parameter_count();
    let frozen = model.frozen_parameter_count();
    println!("checkpoint: {}", checkpoint.display());
    println!("format_version: {}", checkpoint::FORMAT_VERSION);
    println!("fingerprint: {:016x}", model.backbone.fingerprint());
    println!(
        "backbone: layers={} dim={} heads={} ffn={} max_positions={} variant={}",
        bc.num_layers, bc.model_dim, bc.num_heads, bc.ffn_dim, bc.max_positions,
        bc.variant.as_str()
    );
    println!(
        "adapter: embed={} project={} segment_length={}",
        model.adapter.config().embed.as_str(),
        model.adapter.config().project.as_str(),
        model.segment_length()
    );
    println!(
        "train: context_segments={} use_timestamps={} normalization={} steps={}",
        model.context_segments(),
        model.config.use_timestamps,
        model.config.normalization.as_str(),
        ckpt.steps
    );
    match &model.lora {
        Some(l) => println!("lora: rank={} alpha={} params={}", l.rank, l.alpha, l.num_parameters()),
        None => println!("lora: none"),
    }
    match &model.flatten {
        Some(f) => println!("flatten_head: horizon={} params={}", f.horizon, f.num_parameters()),
        None => println!("flatten_head: none"),
    }
    println!("params.frozen: {frozen}");
    println!("params.trainable: {trainable}");
    println!(
        "trainable_share: {:.4}%",
        100.0 * trainable as f64 / (trainable + frozen) as f64
    );
    for (k, v) in &ckpt.meta {
        println!("meta.{k}: {v}");
    }
    Ok(())
}
