//! The frozen decoder-only transformer standing in for a pretrained LLM:
//! deterministic seeded weights, causal self-attention with rotary
//! positions, structural ablation variants, optional low-rank adaptation,
//! and a byte-level text path used for timestamp embeddings.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub const ROPE_BASE: f64 = 10_000.0;
pub const LN_EPS: f64 = 1e-5;
const BYTE_VOCAB: usize = 256;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("backbone config error: {0}")]
    Config(String),
    #[error("context length {len} exceeds maximum {max}")]
    ContextLength { len: usize, max: usize },
    #[error("text embedding error: {0}")]
    Text(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

/// Structural variants used by the ablation protocol. `NoLlm` is the
/// identity on token embeddings, `AttnOnly` a single attention sublayer,
/// `SingleBlock` one full transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneVariant {
    Full,
    NoLlm,
    AttnOnly,
    SingleBlock,
}

impl BackboneVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoLlm => "no_llm",
            Self::AttnOnly => "attn_only",
            Self::SingleBlock => "single_block",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_llm" => Ok(Self::NoLlm),
            "attn_only" => Ok(Self::AttnOnly),
            "single_block" => Ok(Self::SingleBlock),
            other => Err(BackboneError::Config(format!(
                "unknown backbone variant '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub variant: BackboneVariant,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_positions < 1 {
            return Err(BackboneError::Config("max_positions must be >= 1".into()));
        }
        if self.num_layers < 1 || self.model_dim < 1 || self.num_heads < 1 || self.ffn_dim < 1 {
            return Err(BackboneError::Config(
                "layers, dims and heads must be positive".into(),
            ));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(BackboneError::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if (self.model_dim / self.num_heads) % 2 != 0 {
            return Err(BackboneError::Config(format!(
                "head dimension {} must be even for rotary positions",
                self.model_dim / self.num_heads
            )));
        }
        Ok(())
    }

    /// Number of transformer blocks the variant actually instantiates.
    pub fn num_blocks(&self) -> usize {
        match self.variant {
            BackboneVariant::Full => self.num_layers,
            BackboneVariant::NoLlm => 0,
            BackboneVariant::AttnOnly | BackboneVariant::SingleBlock => 1,
        }
    }

    fn canonical(&self) -> String {
        format!(
            "layers={};dim={};heads={};ffn={};max_pos={};variant={};seed={}",
            self.num_layers,
            self.model_dim,
            self.num_heads,
            self.ffn_dim,
            self.max_positions,
            self.variant.as_str(),
            self.seed
        )
    }
}

/// Frozen transformer. All weights carry `grad_required = false`; the
/// fingerprint is a pure function of `(config, weights)`.
#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    weights: BTreeMap<String, Tensor>,
    fingerprint: u64,
}

pub fn fingerprint_weights(canonical_config: &str, weights: &BTreeMap<String, Tensor>) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(canonical_config.as_bytes());
    for (name, tensor) in weights {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for &d in tensor.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl FrozenBackbone {
    pub fn build(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let blocks = config.num_blocks();
        // Residual-path projections get the depth-scaled init.
        let resid_std = 0.02 / ((blocks.max(1)) as f64).sqrt();
        let mut weights = BTreeMap::new();
        fn gauss_into(
            weights: &mut BTreeMap<String, Tensor>,
            seed_root: u64,
            name: &str,
            shape: Vec<usize>,
            std: f64,
        ) {
            let len = shape.iter().product();
            let data = seed::gaussian(seed_root, name, std, len);
            weights.insert(name.to_string(), Tensor::new(shape, data).unwrap());
        }
        let root = config.seed;
        let gauss = |weights: &mut BTreeMap<String, Tensor>, name: &str, shape: Vec<usize>, std: f64| {
            gauss_into(weights, root, name, shape, std);
        };

        gauss(&mut weights, "byte_table", vec![BYTE_VOCAB, d], 0.02);
        gauss(&mut weights, "text_eos", vec![1, d], 0.02);

        let has_ffn = config.variant != BackboneVariant::AttnOnly;
        for i in 0..blocks {
            weights.insert(
                format!("layer{i}.attn_norm.scale"),
                Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            );
            weights.insert(
                format!("layer{i}.attn_norm.bias"),
                Tensor::zeros(vec![d]).unwrap(),
            );
            gauss(&mut weights, &format!("layer{i}.wq"), vec![d, d], 0.02);
            gauss(&mut weights, &format!("layer{i}.wk"), vec![d, d], 0.02);
            gauss(&mut weights, &format!("layer{i}.wv"), vec![d, d], 0.02);
            gauss(&mut weights, &format!("layer{i}.wo"), vec![d, d], resid_std);
            if has_ffn {
                weights.insert(
                    format!("layer{i}.ffn_norm.scale"),
                    Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                );
                weights.insert(
                    format!("layer{i}.ffn_norm.bias"),
                    Tensor::zeros(vec![d]).unwrap(),
                );
                gauss(&mut weights, &format!("layer{i}.ffn_w1"), vec![d, config.ffn_dim], 0.02);
                gauss(&mut weights, &format!("layer{i}.ffn_w2"), vec![config.ffn_dim, d], resid_std);
            }
        }
        if config.variant == BackboneVariant::Full {
            weights.insert(
                "final_norm.scale".to_string(),
                Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            );
            weights.insert(
                "final_norm.bias".to_string(),
                Tensor::zeros(vec![d]).unwrap(),
            );
        }

        let fingerprint = fingerprint_weights(&config.canonical(), &weights);
        Ok(Self {
            config,
            weights,
            fingerprint,
        })
    }

    /// Reassembles a backbone from deserialized weights, revalidating the
    /// fingerprint as a pure function of the contents.
    pub fn from_parts(config: BackboneConfig, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let fingerprint = fingerprint_weights(&config.canonical(), &weights);
        Ok(Self {
            config,
            weights,
            fingerprint,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn recompute_fingerprint(&self) -> u64 {
        fingerprint_weights(&self.config.canonical(), &self.weights)
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    fn weight_node(&self, g: &mut Graph, name: &str) -> NodeId {
        g.constant(self.weights[name].clone())
    }

    /// Pre-norm affine: layernorm followed by the named scale and bias.
    fn norm(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let ln = g.layer_norm(x, LN_EPS)?;
        let scale = self.weight_node(g, &format!("{prefix}.scale"));
        let bias = self.weight_node(g, &format!("{prefix}.bias"));
        let scaled = g.mul(ln, scale)?;
        Ok(g.add(scaled, bias)?)
    }

    /// Projection through a frozen weight, optionally with the low-rank
    /// delta `x @ A @ B * (alpha / rank)` added.
    fn project(
        &self,
        g: &mut Graph,
        x: NodeId,
        name: &str,
        lora: Option<&LoraNodes>,
    ) -> Result<NodeId> {
        let w = self.weight_node(g, name);
        let base = g.matmul(x, w)?;
        if let Some(nodes) = lora {
            if let Some(&(a, b)) = nodes.pairs.get(name) {
                let xa = g.matmul(x, a)?;
                let xab = g.matmul(xa, b)?;
                let delta = g.scale(xab, nodes.scaling);
                return Ok(g.add(base, delta)?);
            }
        }
        Ok(base)
    }

    fn attention_sublayer(
        &self,
        g: &mut Graph,
        x: NodeId,
        block: usize,
        mask: NodeId,
        lora: Option<&LoraNodes>,
    ) -> Result<NodeId> {
        let d = self.config.model_dim;
        let heads = self.config.num_heads;
        let head_dim = d / heads;
        let xn = self.norm(g, x, &format!("layer{block}.attn_norm"))?;
        let q = self.project(g, xn, &format!("layer{block}.wq"), lora)?;
        let k = self.project(g, xn, &format!("layer{block}.wk"), lora)?;
        let v = self.project(g, xn, &format!("layer{block}.wv"), lora)?;

        let mut outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.cols(q, h * head_dim, head_dim)?;
            let kh = g.cols(k, h * head_dim, head_dim)?;
            let vh = g.cols(v, h * head_dim, head_dim)?;
            let qr = g.rope(qh, 0, ROPE_BASE)?;
            let kr = g.rope(kh, 0, ROPE_BASE)?;
            let kt = g.transpose(kr)?;
            let scores = g.matmul(qr, kt)?;
            let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
            let masked = g.add(scaled, mask)?;
            let attn = g.softmax_lastdim(masked)?;
            outputs.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&outputs)?;
        let projected = self.project(g, cat, &format!("layer{block}.wo"), lora)?;
        Ok(g.add(x, projected)?)
    }

    fn ffn_sublayer(&self, g: &mut Graph, x: NodeId, block: usize) -> Result<NodeId> {
        let xn = self.norm(g, x, &format!("layer{block}.ffn_norm"))?;
        let w1 = self.weight_node(g, &format!("layer{block}.ffn_w1"));
        let w2 = self.weight_node(g, &format!("layer{block}.ffn_w2"));
        let h = g.matmul(xn, w1)?;
        let a = g.gelu(h)?;
        let out = g.matmul(a, w2)?;
        Ok(g.add(x, out)?)
    }

    /// Graph-level forward over `[n, d]` token embeddings. Output position
    /// `i` depends only on input positions `<= i`.
    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        tokens: NodeId,
        lora: Option<&LoraNodes>,
    ) -> Result<NodeId> {
        let shape = g.value(tokens).shape().to_vec();
        let (n, width) = match shape.as_slice() {
            [n, w] => (*n, *w),
            _ => {
                return Err(BackboneError::Config(format!(
                    "token tensor must be rank 2, got shape {shape:?}"
                )))
            }
        };
        if width != self.config.model_dim {
            return Err(BackboneError::Config(format!(
                "token width {width} does not match model_dim {}",
                self.config.model_dim
            )));
        }
        if n > self.config.max_positions {
            return Err(BackboneError::ContextLength {
                len: n,
                max: self.config.max_positions,
            });
        }
        if self.config.variant == BackboneVariant::NoLlm {
            return Ok(tokens);
        }

        let mask = g.constant(causal_mask(n));
        let mut x = tokens;
        for block in 0..self.config.num_blocks() {
            x = self.attention_sublayer(g, x, block, mask, lora)?;
            if self.config.variant != BackboneVariant::AttnOnly {
                x = self.ffn_sublayer(g, x, block)?;
            }
        }
        if self.config.variant == BackboneVariant::Full {
            x = self.norm(g, x, "final_norm")?;
        }
        Ok(x)
    }

    /// Value-level forward without adaptation.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(tokens.clone());
        let out = self.forward_nodes(&mut g, x, None)?;
        Ok(g.value(out).clone())
    }

    /// Embeds a byte string: byte-table lookups plus a terminator token,
    /// one forward pass, then the hidden state at the terminator position.
    pub fn embed_text(&self, bytes: &[u8]) -> Result<Tensor> {
        if bytes.is_empty() {
            return Err(BackboneError::Text("input must be non-empty".into()));
        }
        if bytes.len() > self.config.max_positions - 1 {
            return Err(BackboneError::ContextLength {
                len: bytes.len() + 1,
                max: self.config.max_positions,
            });
        }
        let d = self.config.model_dim;
        let table = &self.weights["byte_table"];
        let eos = &self.weights["text_eos"];
        let mut data = Vec::with_capacity((bytes.len() + 1) * d);
        for &b in bytes {
            let row = b as usize;
            data.extend_from_slice(&table.data()[row * d..(row + 1) * d]);
        }
        data.extend_from_slice(eos.data());
        let tokens = Tensor::new(vec![bytes.len() + 1, d], data)?;
        let hidden = self.forward(&tokens)?;
        let last = hidden.data()[bytes.len() * d..(bytes.len() + 1) * d].to_vec();
        Ok(Tensor::vector(last)?)
    }

    /// Creates a low-rank adapter targeting the q and v projections of
    /// every block. `B` starts at zero so the adapted forward equals the
    /// base forward exactly.
    pub fn attach_lora(&self, rank: usize, alpha: f64, lora_seed: u64) -> Result<LoraAdapter> {
        let d = self.config.model_dim;
        if rank == 0 || rank > d {
            return Err(BackboneError::Config(format!(
                "lora rank {rank} must be in 1..={d}"
            )));
        }
        let mut pairs = BTreeMap::new();
        for block in 0..self.config.num_blocks() {
            for target in ["wq", "wv"] {
                let name = format!("layer{block}.{target}");
                let a_data = seed::gaussian(lora_seed, &format!("lora.{name}.a"), 0.02, d * rank);
                let a = Tensor::new(vec![d, rank], a_data)?.with_grad();
                let b = Tensor::zeros(vec![rank, d])?.with_grad();
                pairs.insert(name, (a, b));
            }
        }
        Ok(LoraAdapter { rank, alpha, pairs })
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = crate::tensor::MASK_NEG;
        }
    }
    Tensor::new(vec![n, n], data).unwrap()
}

/// Trainable low-rank adaptation of the frozen q/v projections. Only the
/// `A`/`B` factors carry gradients; the adapted weight behaves as
/// `W + (alpha / rank) * A @ B`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    /// target weight name -> (A: [d, rank], B: [rank, d])
    pub pairs: BTreeMap<String, (Tensor, Tensor)>,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_parameters(&self) -> usize {
        self.pairs.values().map(|(a, b)| a.len() + b.len()).sum()
    }

    /// Registers A/B leaves on a graph, in deterministic name order.
    pub fn bind(&self, g: &mut Graph) -> LoraNodes {
        let mut pairs = BTreeMap::new();
        for (name, (a, b)) in &self.pairs {
            pairs.insert(name.clone(), (g.input(a), g.input(b)));
        }
        LoraNodes {
            pairs,
            scaling: self.scaling(),
        }
    }

    /// Named views over the trainable factors, in deterministic order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, (a, b)) in &self.pairs {
            out.push((format!("lora.{name}.a"), a));
            out.push((format!("lora.{name}.b"), b));
        }
        out
    }

    pub fn param_mut(&mut self, full_name: &str) -> Option<&mut Tensor> {
        let rest = full_name.strip_prefix("lora.")?;
        let (target, which) = rest.rsplit_once('.')?;
        let pair = self.pairs.get_mut(target)?;
        match which {
            "a" => Some(&mut pair.0),
            "b" => Some(&mut pair.1),
            _ => None,
        }
    }
}

/// Graph handles for bound LoRA factors.
pub struct LoraNodes {
    pub pairs: BTreeMap<String, (NodeId, NodeId)>,
    pub scaling: f64,
}

impl LoraNodes {
    pub fn node_for(&self, param_name: &str) -> Option<NodeId> {
        let rest = param_name.strip_prefix("lora.")?;
        let (target, which) = rest.rsplit_once('.')?;
        let pair = self.pairs.get(target)?;
        match which {
            "a" => Some(pair.0),
            "b" => Some(pair.1),
            _ => None,
        }
    }
}
