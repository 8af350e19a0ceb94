//! Versioned binary container for the full model state: little-endian,
//! magic `ATCK`, a header with format version and the frozen-backbone
//! fingerprint, then length-prefixed named sections. Tensor sections carry
//! a shape list and a raw IEEE-754 f64 payload; the config section is a
//! UTF-8 key=value block.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterParams, FlattenHead, HeadKind};
use crate::backbone::{BackboneConfig, BackboneVariant, FrozenBackbone, LoraAdapter};
use crate::data::NormMode;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::{LoraSpec, TrainConfig};

pub const MAGIC: [u8; 4] = *b"ATCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint container")]
    BadMagic,
    #[error("format version mismatch: file has {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("fingerprint mismatch: stored {stored:#018x}, recomputed {computed:#018x}")]
    Fingerprint { stored: u64, computed: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid checkpoint contents: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Serializable training state: the model plus bookkeeping.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub steps: u64,
    pub meta: BTreeMap<String, String>,
}

enum Section {
    Text(String, String),
    Tensor(String, Tensor),
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_section(buf: &mut Vec<u8>, section: &Section) {
    match section {
        Section::Text(name, text) => {
            push_u32(buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            buf.push(0);
            push_u64(buf, text.len() as u64);
            buf.extend_from_slice(text.as_bytes());
        }
        Section::Tensor(name, tensor) => {
            push_u32(buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            buf.push(1);
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                push_u64(buf, d as u64);
            }
            buf.push(u8::from(tensor.grad_required()));
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-UTF-8 section text".into()))
    }
}

fn read_section(r: &mut Reader) -> Result<Section> {
    let name_len = r.u32()? as usize;
    let name = r.string(name_len)?;
    match r.u8()? {
        0 => {
            let text_len = r.u64()? as usize;
            let text = r.string(text_len)?;
            Ok(Section::Text(name, text))
        }
        1 => {
            let ndim = r.u8()? as usize;
            if ndim == 0 || ndim > 3 {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor '{name}' has rank {ndim}"
                )));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let grad = r.u8()? != 0;
            let len: usize = shape.iter().product();
            let bytes = r.take(len * 8)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let mut tensor = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("tensor '{name}': {e}")))?;
            if grad {
                tensor = tensor.with_grad();
            }
            Ok(Section::Tensor(name, tensor))
        }
        other => Err(CheckpointError::Corrupt(format!(
            "unknown section kind {other}"
        ))),
    }
}

fn config_block(ckpt: &Checkpoint) -> String {
    let model = &ckpt.model;
    let bc = model.backbone.config();
    let tc = &model.config;
    let ac = model.adapter.config();
    let mut lines = Vec::new();
    lines.push(format!("adapter.embed={}", ac.embed.as_str()));
    lines.push(format!("adapter.project={}", ac.project.as_str()));
    lines.push(format!("adapter.template={}", ac.template));
    lines.push(format!("backbone.ffn_dim={}", bc.ffn_dim));
    lines.push(format!("backbone.max_positions={}", bc.max_positions));
    lines.push(format!("backbone.model_dim={}", bc.model_dim));
    lines.push(format!("backbone.num_heads={}", bc.num_heads));
    lines.push(format!("backbone.num_layers={}", bc.num_layers));
    lines.push(format!("backbone.seed={}", bc.seed));
    lines.push(format!("backbone.variant={}", bc.variant.as_str()));
    match &model.flatten {
        Some(head) => {
            lines.push(format!("flatten.horizon={}", head.horizon));
            lines.push(format!("flatten.input_width={}", head.input_width));
        }
        None => lines.push("flatten.horizon=0".to_string()),
    }
    match tc.lora {
        Some(spec) => {
            lines.push(format!("lora.alpha={}", spec.alpha));
            lines.push(format!("lora.rank={}", spec.rank));
        }
        None => lines.push("lora.rank=0".to_string()),
    }
    lines.push(format!("steps={}", ckpt.steps));
    lines.push(format!("train.batch_size={}", tc.batch_size));
    lines.push(format!("train.context_segments={}", tc.context_segments));
    lines.push(format!("train.epochs={}", tc.epochs));
    lines.push(format!("train.learning_rate={}", tc.learning_rate));
    match tc.max_steps {
        Some(k) => lines.push(format!("train.max_steps={k}")),
        None => lines.push("train.max_steps=none".to_string()),
    }
    lines.push(format!("train.normalization={}", tc.normalization.as_str()));
    lines.push(format!("train.seed={}", tc.seed));
    lines.push(format!("train.use_timestamps={}", tc.use_timestamps));
    lines.join("\n")
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let model = &ckpt.model;
    let mut sections: Vec<Section> = Vec::new();
    sections.push(Section::Text("config".into(), config_block(ckpt)));
    let meta_text: String = ckpt
        .meta
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\n");
    sections.push(Section::Text("meta".into(), meta_text));
    for (name, tensor) in model.backbone.weights() {
        sections.push(Section::Tensor(format!("backbone.{name}"), tensor.clone()));
    }
    for (name, tensor) in model.adapter.named_params() {
        sections.push(Section::Tensor(name, tensor.clone()));
    }
    if let Some(head) = &model.flatten {
        for (name, tensor) in head.named_params() {
            sections.push(Section::Tensor(name, tensor.clone()));
        }
    }
    if let Some(lora) = &model.lora {
        for (name, tensor) in lora.named_params() {
            sections.push(Section::Tensor(name, tensor.clone()));
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    push_u64(&mut buf, model.backbone.fingerprint());
    push_u32(&mut buf, sections.len() as u32);
    for section in &sections {
        write_section(&mut buf, section);
    }
    buf
}

fn get_line<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| CheckpointError::Invalid(format!("missing config key '{key}'")))
}

fn parse_num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    get_line(map, key)?
        .parse::<T>()
        .map_err(|_| CheckpointError::Invalid(format!("bad value for '{key}'")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let stored_fingerprint = r.u64()?;
    let count = r.u32()? as usize;
    let mut texts: BTreeMap<String, String> = BTreeMap::new();
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        match read_section(&mut r)? {
            Section::Text(name, text) => {
                texts.insert(name, text);
            }
            Section::Tensor(name, tensor) => {
                tensors.insert(name, tensor);
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after last section",
            bytes.len() - r.pos
        )));
    }

    let config_text = texts
        .get("config")
        .ok_or_else(|| CheckpointError::Corrupt("missing config section".into()))?;
    let mut kv = BTreeMap::new();
    for line in config_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }

    let backbone_config = BackboneConfig {
        num_layers: parse_num(&kv, "backbone.num_layers")?,
        model_dim: parse_num(&kv, "backbone.model_dim")?,
        num_heads: parse_num(&kv, "backbone.num_heads")?,
        ffn_dim: parse_num(&kv, "backbone.ffn_dim")?,
        max_positions: parse_num(&kv, "backbone.max_positions")?,
        variant: BackboneVariant::parse(get_line(&kv, "backbone.variant")?)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?,
        seed: parse_num(&kv, "backbone.seed")?,
    };

    let mut backbone_weights = BTreeMap::new();
    let mut adapter_params = BTreeMap::new();
    let mut lora_pairs: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    let mut flatten_w = None;
    let mut flatten_b = None;
    for (name, tensor) in tensors {
        if let Some(rest) = name.strip_prefix("backbone.") {
            backbone_weights.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("adapter.") {
            adapter_params.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("lora.") {
            let (target, which) = rest
                .rsplit_once('.')
                .ok_or_else(|| CheckpointError::Corrupt(format!("bad lora section '{name}'")))?;
            let entry = lora_pairs.entry(target.to_string()).or_insert((None, None));
            match which {
                "a" => entry.0 = Some(tensor),
                "b" => entry.1 = Some(tensor),
                _ => {
                    return Err(CheckpointError::Corrupt(format!(
                        "bad lora section '{name}'"
                    )))
                }
            }
        } else if name == "flatten.w" {
            flatten_w = Some(tensor);
        } else if name == "flatten.b" {
            flatten_b = Some(tensor);
        } else {
            return Err(CheckpointError::Corrupt(format!(
                "unknown tensor section '{name}'"
            )));
        }
    }

    let backbone = FrozenBackbone::from_parts(backbone_config, backbone_weights)
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let computed = backbone.fingerprint();
    if computed != stored_fingerprint {
        return Err(CheckpointError::Fingerprint {
            stored: stored_fingerprint,
            computed,
        });
    }

    let lora_rank: usize = parse_num(&kv, "lora.rank")?;
    let lora_spec = if lora_rank > 0 {
        Some(LoraSpec {
            rank: lora_rank,
            alpha: parse_num(&kv, "lora.alpha")?,
        })
    } else {
        None
    };

    let embed = HeadKind::parse(get_line(&kv, "adapter.embed")?)
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let project = HeadKind::parse(get_line(&kv, "adapter.project")?)
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let seg_len = match adapter_params.get("embed.w").or(adapter_params.get("embed.w1")) {
        Some(t) => t.shape()[0],
        None => return Err(CheckpointError::Corrupt("missing adapter tensors".into())),
    };
    let mut adapter_config = AdapterConfig::new(seg_len, embed, project);
    adapter_config.template = get_line(&kv, "adapter.template")?.to_string();
    let adapter = AdapterParams::from_parts(
        adapter_config,
        backbone.config().model_dim,
        adapter_params,
    );

    let train_config = TrainConfig {
        learning_rate: parse_num(&kv, "train.learning_rate")?,
        batch_size: parse_num(&kv, "train.batch_size")?,
        epochs: parse_num(&kv, "train.epochs")?,
        context_segments: parse_num(&kv, "train.context_segments")?,
        segment_length: seg_len,
        seed: parse_num(&kv, "train.seed")?,
        use_timestamps: parse_num::<bool>(&kv, "train.use_timestamps")?,
        lora: lora_spec,
        normalization: NormMode::parse(get_line(&kv, "train.normalization")?)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?,
        max_steps: match get_line(&kv, "train.max_steps")? {
            "none" => None,
            s => Some(
                s.parse()
                    .map_err(|_| CheckpointError::Invalid("bad train.max_steps".into()))?,
            ),
        },
    };

    let lora = match train_config.lora {
        Some(spec) => {
            let mut pairs = BTreeMap::new();
            for (target, (a, b)) in lora_pairs {
                let a = a.ok_or_else(|| {
                    CheckpointError::Corrupt(format!("lora target '{target}' missing A"))
                })?;
                let b = b.ok_or_else(|| {
                    CheckpointError::Corrupt(format!("lora target '{target}' missing B"))
                })?;
                pairs.insert(target, (a, b));
            }
            Some(LoraAdapter {
                rank: spec.rank,
                alpha: spec.alpha,
                pairs,
            })
        }
        None => None,
    };

    let flatten_horizon: usize = parse_num(&kv, "flatten.horizon")?;
    let flatten = if flatten_horizon > 0 {
        let weight =
            flatten_w.ok_or_else(|| CheckpointError::Corrupt("missing flatten.w".into()))?;
        let bias =
            flatten_b.ok_or_else(|| CheckpointError::Corrupt("missing flatten.b".into()))?;
        Some(FlattenHead {
            input_width: parse_num(&kv, "flatten.input_width")?,
            horizon: flatten_horizon,
            weight,
            bias,
        })
    } else {
        None
    };

    let meta: BTreeMap<String, String> = texts
        .get("meta")
        .map(|text| {
            text.lines()
                .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
                .collect()
        })
        .unwrap_or_default();

    let model = Model {
        backbone,
        lora,
        adapter,
        flatten,
        config: train_config,
        cache: crate::adapter::TimestampCache::new(),
    };
    Ok(Checkpoint {
        model,
        steps: parse_num(&kv, "steps")?,
        meta,
    })
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(ckpt);
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterConfig, AdapterParams, HeadKind};
    use crate::backbone::{BackboneConfig, BackboneVariant};

    fn sample_checkpoint(lora: bool, flatten: bool) -> Checkpoint {
        let backbone = FrozenBackbone::build(BackboneConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_positions: 32,
            variant: BackboneVariant::Full,
            seed: 77,
        })
        .unwrap();
        let adapter = AdapterParams::new(
            AdapterConfig::new(4, HeadKind::Mlp { hidden: 8 }, HeadKind::Linear),
            8,
            5,
        )
        .unwrap();
        let config = TrainConfig {
            context_segments: 3,
            segment_length: 4,
            use_timestamps: false,
            lora: lora.then_some(LoraSpec { rank: 2, alpha: 4.0 }),
            ..Default::default()
        };
        let mut model = Model::new(backbone, adapter, config).unwrap();
        if flatten {
            model = model.with_flatten_head(4, 9).unwrap();
        }
        let mut meta = BTreeMap::new();
        meta.insert("config_digest".to_string(), "abc123".to_string());
        Checkpoint {
            model,
            steps: 17,
            meta,
        }
    }

    #[test]
    fn round_trip_bytes_are_identical() {
        for (lora, flatten) in [(false, false), (true, false), (false, true), (true, true)] {
            let ckpt = sample_checkpoint(lora, flatten);
            let bytes = to_bytes(&ckpt);
            let loaded = from_bytes(&bytes).unwrap();
            let again = to_bytes(&loaded);
            assert_eq!(bytes, again, "lora={lora} flatten={flatten}");
            assert_eq!(loaded.steps, 17);
            assert_eq!(loaded.meta["config_digest"], "abc123");
        }
    }

    #[test]
    fn round_trip_preserves_forward_outputs() {
        let ckpt = sample_checkpoint(true, false);
        let loaded = from_bytes(&to_bytes(&ckpt)).unwrap();
        let context: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = ckpt.model.predict_segments(&context, None).unwrap();
        let b = loaded.model.predict_segments(&context, None).unwrap();
        let bits_a: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn bad_magic_detected() {
        let ckpt = sample_checkpoint(false, false);
        let mut bytes = to_bytes(&ckpt);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let ckpt = sample_checkpoint(false, false);
        let mut bytes = to_bytes(&ckpt);
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        match from_bytes(&bytes) {
            Err(CheckpointError::Version { found, expected }) => {
                assert_eq!(found, 9);
                assert_eq!(expected, FORMAT_VERSION);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_corrupt_not_a_crash() {
        let ckpt = sample_checkpoint(false, false);
        let bytes = to_bytes(&ckpt);
        for cut in [5, 20, bytes.len() / 2, bytes.len() - 3] {
            let err = from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Corrupt(_)),
                "cut={cut} gave {err}"
            );
        }
    }

    #[test]
    fn tampered_weight_fails_fingerprint() {
        let ckpt = sample_checkpoint(false, false);
        let mut bytes = to_bytes(&ckpt);
        // Flip a payload byte inside the byte_table backbone tensor.
        let needle = b"backbone.byte_table";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let idx = at + needle.len() + 64;
        bytes[idx] ^= 0xff;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::Fingerprint { .. }), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let ckpt = sample_checkpoint(true, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.atck");
        save(&ckpt, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(
            loaded.model.backbone.fingerprint(),
            ckpt.model.backbone.fingerprint()
        );
        save(&loaded, dir.path().join("model2.atck")).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(dir.path().join("model2.atck")).unwrap();
        assert_eq!(b1, b2);
    }
}
