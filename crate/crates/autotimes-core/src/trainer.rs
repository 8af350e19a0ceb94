//! Next-token-prediction training of the adapter (and optional low-rank)
//! parameters through the frozen backbone.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalize, DataError, NormMode, WindowSample};
use crate::model::{Model, ModelError};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config error: {0}")]
    Config(String),
    #[error("no training windows provided")]
    NoWindows,
    #[error("window error: {0}")]
    Window(String),
    #[error("non-finite loss at step {step}, batch {batch}")]
    NanLoss { step: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Context segments N; the training window carries N + 1 segments.
    pub context_segments: usize,
    pub segment_length: usize,
    pub seed: u64,
    pub use_timestamps: bool,
    pub lora: Option<LoraSpec>,
    pub normalization: NormMode,
    /// Optional cap on total optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            context_segments: 7,
            segment_length: 96,
            seed: 0,
            use_timestamps: true,
            lora: None,
            normalization: NormMode::LookbackStandardize,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::Config("learning rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch size and epochs must be positive".into()));
        }
        if self.context_segments == 0 || self.segment_length == 0 {
            return Err(TrainError::Config(
                "context segments and segment length must be positive".into(),
            ));
        }
        if let Some(l) = self.lora {
            if l.rank == 0 {
                return Err(TrainError::Config("lora rank must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Adam with fixed betas and epsilon; state indexed by parameter position
/// in the model's deterministic name order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Starts one optimizer step (advances the bias-correction counter).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one parameter block in place.
    pub fn update(&mut self, idx: usize, param: &mut [f64], grad: &[f64]) {
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        for j in 0..param.len() {
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            param[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Expected window length in points for the model's training objective.
pub fn expected_window_len(model: &Model) -> usize {
    let n = model.context_segments();
    let s = model.segment_length();
    match &model.flatten {
        Some(head) => n * s + head.horizon,
        None => (n + 1) * s,
    }
}

fn window_te(model: &Model, window: &WindowSample) -> Result<Option<Tensor>> {
    if !model.config.use_timestamps {
        return Ok(None);
    }
    let n = model.context_segments();
    if window.seg_timestamps.len() < n {
        return Err(TrainError::Window(format!(
            "window has {} segment timestamps, need at least {n}",
            window.seg_timestamps.len()
        )));
    }
    Ok(Some(model.te_matrix(&window.seg_timestamps[..n])?))
}

struct PreparedWindow {
    context: Vec<f64>,
    target: Vec<f64>,
    te: Option<Tensor>,
}

fn prepare(model: &Model, window: &WindowSample) -> Result<PreparedWindow> {
    let expected = expected_window_len(model);
    if window.values.len() != expected {
        return Err(TrainError::Window(format!(
            "window length {} does not match expected {expected}",
            window.values.len()
        )));
    }
    let n = model.context_segments();
    let s = model.segment_length();
    let lookback_len = n * s;
    let (normed, _) = normalize(&window.values, lookback_len, model.config.normalization);
    let context = normed[..lookback_len].to_vec();
    let target = match &model.flatten {
        // Flatten head predicts the fixed horizon in one shot.
        Some(_) => normed[lookback_len..].to_vec(),
        // Next-token objective supervises segments 2..=N+1.
        None => normed[s..].to_vec(),
    };
    let te = window_te(model, window)?;
    Ok(PreparedWindow {
        context,
        target,
        te,
    })
}

struct StepOutput {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

/// Builds the loss graph for one window and runs backward.
fn loss_and_grads(model: &Model, prep: &PreparedWindow, param_names: &[String]) -> Result<StepOutput> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let pred = match &model.flatten {
        Some(head) => {
            let hidden = model.hidden_nodes(&mut g, &bound, &prep.context, prep.te.as_ref())?;
            let nodes = bound.flatten.as_ref().unwrap();
            head.forecast_nodes(&mut g, nodes, hidden)
                .map_err(ModelError::from)?
        }
        None => model.predict_nodes(&mut g, &bound, &prep.context, prep.te.as_ref())?,
    };
    let pred_shape = g.value(pred).shape().to_vec();
    let truth = g.constant(Tensor::new(pred_shape, prep.target.clone()).map_err(ModelError::from)?);
    let diff = g.sub(pred, truth)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean_all(sq);
    let loss_value = g.value(loss).data()[0];
    let grads_map = g.backward(loss)?;
    let mut grads = Vec::with_capacity(param_names.len());
    for name in param_names {
        let id = model
            .param_node(&bound, name)
            .ok_or_else(|| TrainError::Config(format!("unknown parameter '{name}'")))?;
        let grad = grads_map
            .get(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; g.value(id).len()]);
        grads.push(grad);
    }
    Ok(StepOutput {
        loss: loss_value,
        grads,
    })
}

/// Mean squared error of one window under the training objective:
/// next-token supervision of every position, or the one-shot flatten
/// objective when a flatten head is present.
pub fn next_token_loss(model: &Model, window: &WindowSample) -> Result<f64> {
    let prep = prepare(model, window)?;
    let names: Vec<String> = Vec::new();
    let out = loss_and_grads(model, &prep, &names)?;
    Ok(out.loss)
}

/// Loss plus named parameter gradients for one window; the hook used to
/// verify analytic gradients against finite differences.
pub fn loss_with_grads(
    model: &Model,
    window: &WindowSample,
) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
    let prep = prepare(model, window)?;
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    let out = loss_and_grads(model, &prep, &names)?;
    Ok((out.loss, names.into_iter().zip(out.grads).collect()))
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub trace: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.loss)
    }
}

/// Trains the model's adapter (and optional low-rank / flatten-head)
/// parameters. The frozen backbone receives no updates; batches are
/// shuffled with a seed-derived permutation per epoch.
pub fn train(model: &mut Model, windows: &[WindowSample]) -> Result<TrainReport> {
    model.config.validate()?;
    if windows.is_empty() {
        return Err(TrainError::NoWindows);
    }

    // Dedicated pre-compute pass so training never writes the cache.
    if model.config.use_timestamps {
        let n = model.context_segments();
        let template = model.adapter.config().template.clone();
        for w in windows {
            for (start, end) in w.seg_timestamps.iter().take(n) {
                crate::adapter::timestamp_embedding(
                    &model.backbone,
                    &model.cache,
                    &template,
                    start,
                    end,
                )
                .map_err(ModelError::from)?;
            }
        }
    }

    let param_names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(model.config.learning_rate, &sizes);

    let mut report = TrainReport::default();
    let mut step = 0usize;
    'epochs: for epoch in 0..model.config.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut rng = crate::seed::rng(model.config.seed, &format!("shuffle.{epoch}"));
        order.shuffle(&mut rng);

        for (batch_idx, batch) in order.chunks(model.config.batch_size).enumerate() {
            let mut batch_loss = 0.0;
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &wi in batch {
                let prep = prepare(model, &windows[wi])?;
                let out = match loss_and_grads(model, &prep, &param_names) {
                    Ok(out) => out,
                    Err(TrainError::Tensor(TensorError::NonFinite { .. })) => {
                        return Err(TrainError::NanLoss {
                            step,
                            batch: batch_idx,
                        })
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += out.loss;
                for (a, g) in acc.iter_mut().zip(&out.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(TrainError::NanLoss {
                    step,
                    batch: batch_idx,
                });
            }
            for a in &mut acc {
                for x in a.iter_mut() {
                    *x *= scale;
                }
            }

            // Apply the update in the fixed parameter order.
            adam.begin_step();
            for (i, name) in param_names.iter().enumerate() {
                let t = model.param_mut(name).expect("parameter must exist");
                adam.update(i, t.data_mut(), &acc[i]);
            }

            step += 1;
            report.trace.push(StepRecord {
                step,
                epoch,
                loss: batch_loss,
            });
            if let Some(cap) = model.config.max_steps {
                if step >= cap {
                    break 'epochs;
                }
            }
        }
    }
    report.steps = step;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationMetrics {
    pub mse_norm: f64,
    pub mae_norm: f64,
    pub mse_raw: f64,
    pub mae_raw: f64,
}

/// Mean squared / absolute error of the training objective over a window
/// set, in normalized space and in the raw scale. No parameter mutation.
pub fn validate(model: &Model, windows: &[WindowSample]) -> Result<ValidationMetrics> {
    if windows.is_empty() {
        return Err(TrainError::NoWindows);
    }
    let n = model.context_segments();
    let s = model.segment_length();
    let lookback_len = n * s;
    let mut se_norm = 0.0;
    let mut ae_norm = 0.0;
    let mut se_raw = 0.0;
    let mut ae_raw = 0.0;
    let mut count = 0usize;
    for window in windows {
        let prep = prepare(model, window)?;
        let (_, stats) = normalize(&window.values, lookback_len, model.config.normalization);
        let pred = match &model.flatten {
            Some(_) => model.flatten_forecast(&prep.context, prep.te.as_ref())?,
            None => model.predict_segments(&prep.context, prep.te.as_ref())?,
        };
        let truth_raw = &window.values[window.values.len() - prep.target.len()..];
        for ((p, t), raw_t) in pred.iter().zip(&prep.target).zip(truth_raw) {
            let d = p - t;
            se_norm += d * d;
            ae_norm += d.abs();
            let p_raw = p * stats.std + stats.mean;
            let dr = p_raw - raw_t;
            se_raw += dr * dr;
            ae_raw += dr.abs();
            count += 1;
        }
    }
    let c = count as f64;
    Ok(ValidationMetrics {
        mse_norm: se_norm / c,
        mae_norm: ae_norm / c,
        mse_raw: se_raw / c,
        mae_raw: ae_raw / c,
    })
}
