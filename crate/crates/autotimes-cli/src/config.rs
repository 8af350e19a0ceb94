//! Flat key=value run configuration: UTF-8, one pair per line, `#`
//! comments. Command-line `--set` pairs and dedicated flags override file
//! keys. Unknown keys are a hard error listing the offenders, and every
//! run writes its fully resolved configuration next to its outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use autotimes_core::adapter::{AdapterError, HeadKind, DEFAULT_TEMPLATE};
use autotimes_core::backbone::{BackboneConfig, BackboneVariant};
use autotimes_core::data::{NormMode, SplitSpec, SynthKind, SynthSpec};
use autotimes_core::eval::ExperimentPlan;
use autotimes_core::trainer::{LoraSpec, TrainConfig};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<AdapterError> for ConfigError {
    fn from(e: AdapterError) -> Self {
        ConfigError(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ConfigError>;

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "data.kind",
    "data.path",
    "data.frequency",
    "data.seasonality",
    "synth.kind",
    "synth.length",
    "synth.period",
    "synth.noise_std",
    "synth.num_variates",
    "synth.ar_coeff",
    "split.train",
    "split.val",
    "split.test",
    "backbone.num_layers",
    "backbone.model_dim",
    "backbone.num_heads",
    "backbone.ffn_dim",
    "backbone.max_positions",
    "backbone.variant",
    "adapter.embed",
    "adapter.project",
    "adapter.template",
    "train.learning_rate",
    "train.batch_size",
    "train.epochs",
    "train.context_segments",
    "train.segment_length",
    "train.use_timestamps",
    "train.normalization",
    "train.max_steps",
    "train.lora_rank",
    "train.lora_alpha",
    "flatten.horizon",
    "eval.horizons",
    "eval.lookbacks",
    "eval.stride",
    "incontext.strategy",
    "incontext.prompt_length",
    "incontext.count",
    "incontext.period",
    "incontext.id",
    "incontext.seed",
    "incontext.lookback_points",
    "sweep.axis",
    "sweep.values",
];

/// The fully resolved key=value map.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    ConfigError(format!("line {}: expected key=value", lineno + 1))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        for (key, value) in overrides {
            map.insert(key.clone(), value.clone());
        }
        let unknown: Vec<&str> = map
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(ConfigError(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )));
        }
        Ok(Self { map })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| ConfigError(format!("bad value '{raw}' for key '{key}'"))),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(raw) => raw
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| ConfigError(format!("bad integer '{x}' in '{key}'")))
                })
                .collect(),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(raw) => raw
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| ConfigError(format!("bad number '{x}' in '{key}'")))
                })
                .collect(),
        }
    }

    /// Canonical sorted text of the resolved configuration.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.resolved_text().as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse_or("seed", 0u64)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let kind = match self.str_or("synth.kind", "sinusoid").as_str() {
            "sinusoid" => SynthKind::Sinusoid,
            "ar1_seasonal" => SynthKind::Ar1Seasonal,
            other => return Err(ConfigError(format!("unknown synth.kind '{other}'"))),
        };
        Ok(SynthSpec {
            kind,
            length: self.parse_or("synth.length", 2400usize)?,
            period: self.parse_or("synth.period", 96usize)?,
            noise_std: self.parse_or("synth.noise_std", 0.0f64)?,
            seed: autotimes_core::seed::derive(self.seed()?, "synth"),
            num_variates: self.parse_or("synth.num_variates", 1usize)?,
            ar_coeff: self.parse_or("synth.ar_coeff", 0.9f64)?,
        })
    }

    pub fn split_spec(&self, total: usize) -> Result<SplitSpec> {
        let train = self.parse_or("split.train", total * 6 / 10)?;
        let val = self.parse_or("split.val", 0usize)?;
        let default_test = total.saturating_sub(train + val);
        let test = self.parse_or("split.test", default_test)?;
        Ok(SplitSpec { train, val, test })
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        Ok(BackboneConfig {
            num_layers: self.parse_or("backbone.num_layers", 2usize)?,
            model_dim: self.parse_or("backbone.model_dim", 64usize)?,
            num_heads: self.parse_or("backbone.num_heads", 4usize)?,
            ffn_dim: self.parse_or("backbone.ffn_dim", 128usize)?,
            max_positions: self.parse_or("backbone.max_positions", 128usize)?,
            variant: BackboneVariant::parse(&self.str_or("backbone.variant", "full"))
                .map_err(|e| ConfigError(e.to_string()))?,
            seed: autotimes_core::seed::derive(self.seed()?, "backbone"),
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let lora_rank: usize = self.parse_or("train.lora_rank", 0usize)?;
        let lora = if lora_rank > 0 {
            Some(LoraSpec {
                rank: lora_rank,
                alpha: self.parse_or("train.lora_alpha", 2.0 * lora_rank as f64)?,
            })
        } else {
            None
        };
        let max_steps: usize = self.parse_or("train.max_steps", 0usize)?;
        Ok(TrainConfig {
            learning_rate: self.parse_or("train.learning_rate", 1e-3f64)?,
            batch_size: self.parse_or("train.batch_size", 8usize)?,
            epochs: self.parse_or("train.epochs", 10usize)?,
            context_segments: self.parse_or("train.context_segments", 7usize)?,
            segment_length: self.parse_or("train.segment_length", 96usize)?,
            seed: self.seed()?,
            use_timestamps: self.parse_or("train.use_timestamps", true)?,
            lora,
            normalization: NormMode::parse(&self.str_or("train.normalization", "lookback_standardize"))
                .map_err(|e| ConfigError(e.to_string()))?,
            max_steps: if max_steps == 0 { None } else { Some(max_steps) },
        })
    }

    pub fn plan(&self) -> Result<ExperimentPlan> {
        let train = self.train_config()?;
        let horizons = {
            let given = self.usize_list("eval.horizons")?;
            if given.is_empty() {
                let s = train.segment_length;
                vec![s, 2 * s, 3 * s, 4 * s]
            } else {
                given
            }
        };
        Ok(ExperimentPlan {
            backbone: self.backbone_config()?,
            embed: HeadKind::parse(&self.str_or("adapter.embed", "mlp:512"))?,
            project: HeadKind::parse(&self.str_or("adapter.project", "mlp:512"))?,
            template: self.str_or("adapter.template", DEFAULT_TEMPLATE),
            eval_stride: self.parse_or("eval.stride", train.segment_length)?,
            flatten_horizon: {
                let h: usize = self.parse_or("flatten.horizon", 0usize)?;
                (h > 0).then_some(h)
            },
            train,
            horizons,
        })
    }
}
