//! End-to-end pipeline checks: training on noiseless periodic data must
//! actually learn, rollouts must track the analytic continuation, and
//! period-aligned prompts must help on period-aligned data.

use autotimes_core::adapter::{AdapterConfig, AdapterParams, HeadKind};
use autotimes_core::backbone::{BackboneConfig, BackboneVariant, FrozenBackbone};
use autotimes_core::data::{chronological_split, make_windows, synth_generate, NormMode, SplitSpec, SynthSpec};
use autotimes_core::forecaster::{self, eval_windows, ForecastMode, ForecastRequest};
use autotimes_core::incontext::{assemble_context, icf_forecast, select_prompts, PromptSpec, PromptStrategy};
use autotimes_core::model::Model;
use autotimes_core::trainer::{self, TrainConfig};

fn build_model(
    s: usize,
    n: usize,
    d: usize,
    layers: usize,
    seed: u64,
    max_steps: Option<usize>,
) -> Model {
    build_model_hidden(s, n, d, layers, seed, max_steps, 64)
}

fn build_model_hidden(
    s: usize,
    n: usize,
    d: usize,
    layers: usize,
    seed: u64,
    max_steps: Option<usize>,
    hidden: usize,
) -> Model {
    let backbone = FrozenBackbone::build(BackboneConfig {
        num_layers: layers,
        model_dim: d,
        num_heads: 4,
        ffn_dim: 2 * d,
        max_positions: 32.max(n + 1),
        variant: BackboneVariant::Full,
        seed,
    })
    .unwrap();
    let adapter = AdapterParams::new(
        AdapterConfig::new(s, HeadKind::Mlp { hidden }, HeadKind::Mlp { hidden }),
        d,
        seed + 1,
    )
    .unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 10,
        context_segments: n,
        segment_length: s,
        seed,
        use_timestamps: false,
        lora: None,
        normalization: NormMode::LookbackStandardize,
        max_steps,
    };
    Model::new(backbone, adapter, config).unwrap()
}

#[test]
fn training_on_noiseless_sinusoid_collapses_the_loss() {
    let s = 16;
    let n = 7;
    let ds = synth_generate(&SynthSpec {
        length: 600,
        period: s,
        noise_std: 0.0,
        seed: 31,
        ..Default::default()
    })
    .unwrap();
    let (train_split, _, test_split) = chronological_split(
        &ds,
        SplitSpec {
            train: 400,
            val: 0,
            test: 200,
        },
    )
    .unwrap();
    let mut model = build_model_hidden(s, n, 32, 2, 31, Some(800), 128);
    let windows = make_windows(&train_split, s, n, 1).unwrap().samples;
    let report = trainer::train(&mut model, &windows).unwrap();
    let first = report.trace.first().unwrap().loss;
    let at_200 = report.trace[199.min(report.trace.len() - 1)].loss;
    assert!(
        at_200 < 0.01 * first,
        "loss only fell from {first} to {at_200} within 200 steps"
    );

    // Rolling four steps ahead stays near the analytic continuation.
    let eval = eval_windows(&test_split, s, n, 4 * s, s).unwrap().samples;
    assert!(!eval.is_empty());
    let table = forecaster::rolling_eval(&model, &eval, &[4 * s]).unwrap();
    assert!(
        table.rows[0].mse_norm < 1e-3,
        "rollout mse_norm {}",
        table.rows[0].mse_norm
    );
}

#[test]
fn cross_domain_zero_shot_matches_rolling_and_transfers() {
    use autotimes_core::eval::{cross_domain_eval, CrossDomainMode, CrossDomainTarget};

    let s = 16;
    let n = 4;
    let ds = synth_generate(&SynthSpec {
        length: 500,
        period: s,
        noise_std: 0.05,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let (train_split, _, test_split) = chronological_split(
        &ds,
        SplitSpec {
            train: 340,
            val: 0,
            test: 160,
        },
    )
    .unwrap();
    let mut model = build_model(s, n, 32, 1, 21, Some(40));
    let windows = make_windows(&train_split, s, n, 1).unwrap().samples;
    trainer::train(&mut model, &windows).unwrap();

    // Zero-shot on the training dataset's own test split is the rolling
    // evaluation by definition.
    let horizons = [s, 2 * s];
    let direct = {
        let eval = eval_windows(&test_split, s, n, 2 * s, s).unwrap().samples;
        forecaster::rolling_eval(&model, &eval, &horizons).unwrap()
    };
    let via_cross = cross_domain_eval(
        &model,
        &CrossDomainTarget::LongTerm {
            test: &test_split,
            horizons: &horizons,
        },
        &CrossDomainMode::ZeroShot,
        "test",
    )
    .unwrap();
    for (row, report_row) in direct.rows.iter().zip(&via_cross.report.rows) {
        assert_eq!(Some(row.mse_norm), report_row.mse_norm);
        assert_eq!(Some(row.mae_raw), report_row.mae_raw);
    }

    // A shifted synthetic target: the checkpoint transfers with finite
    // metrics, zero-shot and with period-aligned prompts.
    let target = synth_generate(&SynthSpec {
        length: 400,
        period: s,
        noise_std: 0.1,
        seed: 99,
        ..Default::default()
    })
    .unwrap();
    let fp_before = model.backbone.fingerprint();
    for mode in [
        CrossDomainMode::ZeroShot,
        CrossDomainMode::InContext {
            spec: PromptSpec::new(PromptStrategy::AheadPeriod { period: s }, 0),
            lookback_points: 2 * s,
        },
    ] {
        let outcome = cross_domain_eval(
            &model,
            &CrossDomainTarget::LongTerm {
                test: &target,
                horizons: &horizons,
            },
            &mode,
            "test",
        )
        .unwrap();
        for row in &outcome.report.rows {
            assert!(row.mse_norm.unwrap().is_finite());
            assert!(row.mae_raw.unwrap().is_finite());
        }
    }
    assert_eq!(model.backbone.recompute_fingerprint(), fp_before);
}

#[test]
fn sweep_covers_hidden_dims_without_failures() {
    use autotimes_core::eval::{sweep, ExperimentPlan, SweepAxis};

    let s = 16;
    let ds = synth_generate(&SynthSpec {
        length: 500,
        period: s,
        noise_std: 0.05,
        seed: 13,
        ..Default::default()
    })
    .unwrap();
    let (train_split, _, test_split) = chronological_split(
        &ds,
        SplitSpec {
            train: 340,
            val: 0,
            test: 160,
        },
    )
    .unwrap();
    let template = build_model(s, 4, 32, 1, 13, Some(10));
    let plan = ExperimentPlan {
        backbone: template.backbone.config().clone(),
        embed: autotimes_core::adapter::HeadKind::Linear,
        project: autotimes_core::adapter::HeadKind::Linear,
        template: autotimes_core::adapter::DEFAULT_TEMPLATE.to_string(),
        train: template.config.clone(),
        horizons: vec![s, 2 * s],
        eval_stride: s,
        flatten_horizon: None,
    };
    let report = sweep(
        &plan,
        SweepAxis::HiddenDim,
        &[16.0, 32.0],
        &train_split,
        &test_split,
        "test",
        2,
    );
    assert_eq!(report.points.len(), 2);
    for point in &report.points {
        assert!(point.error.is_none(), "{:?}", point.error);
        assert_eq!(point.rows.len(), 2);
    }
    assert!(report.failures().is_empty());
}

#[test]
fn period_aligned_prompts_do_not_hurt_on_periodic_data() {
    // Model trained with an 8-segment context on data whose period spans
    // four segments. Zero-shot uses a 2-segment lookback; the in-context
    // run prepends the one-period-earlier window of the same shape.
    let s = 16;
    let n = 8;
    let period = 4 * s;
    let ds = synth_generate(&SynthSpec {
        length: 900,
        period,
        noise_std: 0.0,
        seed: 77,
        ..Default::default()
    })
    .unwrap();
    let (train_split, _, test_split) = chronological_split(
        &ds,
        SplitSpec {
            train: 600,
            val: 0,
            test: 300,
        },
    )
    .unwrap();
    let mut model = build_model(s, n, 32, 2, 77, Some(600));
    let windows = make_windows(&train_split, s, n, 1).unwrap().samples;
    trainer::train(&mut model, &windows).unwrap();

    let series = &test_split.variates[0];
    let lookback_len = 4 * s;
    let horizon = s;
    let spec = PromptSpec::new(PromptStrategy::AheadPeriod { period }, 0);
    let pool: Vec<&[f64]> = vec![series.as_slice()];

    let mut zero_shot_se = 0.0;
    let mut icf_se = 0.0;
    let mut count = 0usize;
    let mut start = period; // enough history for the prompt
    while start + lookback_len + horizon <= series.len() {
        let lookback = &series[start..start + lookback_len];
        let truth = &series[start + lookback_len..start + lookback_len + horizon];

        let plain = forecaster::generate(
            &model,
            &ForecastRequest {
                lookback: lookback.to_vec(),
                timestamps: Vec::new(),
                horizon,
                mode: ForecastMode::Autoregressive,
            },
        )
        .unwrap();
        for (p, t) in plain.predictions.iter().zip(truth) {
            zero_shot_se += (p - t) * (p - t);
        }

        let prompts = select_prompts(&pool, 0, &spec, start, lookback_len).unwrap();
        let sample =
            assemble_context(&prompts, lookback, start, s, n, horizon, None, None).unwrap();
        assert_eq!(sample.context.len(), 2 * lookback_len);
        assert_eq!(sample.prompt_positions[0].1, start);
        let icf = icf_forecast(&model, &sample, horizon).unwrap();
        for (p, t) in icf.iter().zip(truth) {
            icf_se += (p - t) * (p - t);
        }
        count += horizon;
        start += s;
    }
    assert!(count > 0);
    let zero_shot_mse = zero_shot_se / count as f64;
    let icf_mse = icf_se / count as f64;
    assert!(
        icf_mse <= zero_shot_mse + 1e-12,
        "in-context mse {icf_mse} vs zero-shot {zero_shot_mse}"
    );
}
