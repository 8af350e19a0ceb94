//! The trainable modality bridge: series segmentation, segment embedding
//! and projection heads, timestamp position embeddings with a memo cache,
//! token composition, and the non-autoregressive flatten-head baseline.

use std::collections::{BTreeMap, HashMap};
use std::sync::RwLock;

use thiserror::Error;

use crate::backbone::{BackboneError, FrozenBackbone};
use crate::seed;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub const DEFAULT_TEMPLATE: &str = "The time span is from {start} to {end}.";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("series length {length} is not divisible by segment length {segment}: remainder {remainder}")]
    Segmentation {
        length: usize,
        segment: usize,
        remainder: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("timestamp error: {0}")]
    Timestamp(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

/// Architecture of one head: a single linear map or a two-layer MLP with
/// GELU between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Mlp { hidden: usize },
}

impl HeadKind {
    pub fn as_str(&self) -> String {
        match self {
            Self::Linear => "linear".to_string(),
            Self::Mlp { hidden } => format!("mlp:{hidden}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(Self::Linear);
        }
        if let Some(h) = s.strip_prefix("mlp:") {
            let hidden: usize = h
                .parse()
                .map_err(|_| AdapterError::Shape(format!("bad head kind '{s}'")))?;
            if hidden == 0 {
                return Err(AdapterError::Shape("mlp hidden must be positive".into()));
            }
            return Ok(Self::Mlp { hidden });
        }
        Err(AdapterError::Shape(format!("bad head kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterConfig {
    pub segment_length: usize,
    pub embed: HeadKind,
    pub project: HeadKind,
    pub template: String,
}

impl AdapterConfig {
    pub fn new(segment_length: usize, embed: HeadKind, project: HeadKind) -> Self {
        Self {
            segment_length,
            embed,
            project,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

/// Trainable segment embedding (S -> D) and projection (D -> S) heads.
/// These are the only trained parameters in the default mode.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    config: AdapterConfig,
    model_dim: usize,
    params: BTreeMap<String, Tensor>,
}

fn head_param_shapes(prefix: &str, kind: HeadKind, from: usize, to: usize) -> Vec<(String, Vec<usize>)> {
    match kind {
        HeadKind::Linear => vec![
            (format!("{prefix}.w"), vec![from, to]),
            (format!("{prefix}.b"), vec![to]),
        ],
        HeadKind::Mlp { hidden } => vec![
            (format!("{prefix}.w1"), vec![from, hidden]),
            (format!("{prefix}.b1"), vec![hidden]),
            (format!("{prefix}.w2"), vec![hidden, to]),
            (format!("{prefix}.b2"), vec![to]),
        ],
    }
}

impl AdapterParams {
    pub fn new(config: AdapterConfig, model_dim: usize, param_seed: u64) -> Result<Self> {
        if config.segment_length == 0 || model_dim == 0 {
            return Err(AdapterError::Shape(
                "segment length and model dim must be positive".into(),
            ));
        }
        let s = config.segment_length;
        let mut params = BTreeMap::new();
        let mut shapes = head_param_shapes("embed", config.embed, s, model_dim);
        shapes.extend(head_param_shapes("project", config.project, model_dim, s));
        for (name, shape) in shapes {
            let len: usize = shape.iter().product();
            let tensor = if name.contains(".b") {
                Tensor::zeros(shape)?.with_grad()
            } else {
                let fan_in = shape[0] as f64;
                let data = seed::gaussian(param_seed, &format!("adapter.{name}"), 1.0 / fan_in.sqrt(), len);
                Tensor::new(shape, data)?.with_grad()
            };
            params.insert(name, tensor);
        }
        Ok(Self {
            config,
            model_dim,
            params,
        })
    }

    pub fn from_parts(
        config: AdapterConfig,
        model_dim: usize,
        params: BTreeMap<String, Tensor>,
    ) -> Self {
        Self {
            config,
            model_dim,
            params,
        }
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn segment_length(&self) -> usize {
        self.config.segment_length
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.params
            .iter()
            .map(|(k, v)| (format!("adapter.{k}"), v))
            .collect()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_mut(&mut self, full_name: &str) -> Option<&mut Tensor> {
        let key = full_name.strip_prefix("adapter.")?;
        self.params.get_mut(key)
    }

    /// Registers the trainable tensors as graph leaves.
    pub fn bind(&self, g: &mut Graph) -> AdapterNodes {
        let mut map = BTreeMap::new();
        for (name, tensor) in &self.params {
            map.insert(name.clone(), g.input(tensor));
        }
        AdapterNodes { map }
    }

    fn apply_head(
        &self,
        g: &mut Graph,
        nodes: &AdapterNodes,
        prefix: &str,
        kind: HeadKind,
        x: NodeId,
    ) -> Result<NodeId> {
        match kind {
            HeadKind::Linear => {
                let w = nodes.map[&format!("{prefix}.w")];
                let b = nodes.map[&format!("{prefix}.b")];
                let y = g.matmul(x, w)?;
                Ok(g.add(y, b)?)
            }
            HeadKind::Mlp { .. } => {
                let w1 = nodes.map[&format!("{prefix}.w1")];
                let b1 = nodes.map[&format!("{prefix}.b1")];
                let w2 = nodes.map[&format!("{prefix}.w2")];
                let b2 = nodes.map[&format!("{prefix}.b2")];
                let h = g.matmul(x, w1)?;
                let h = g.add(h, b1)?;
                let h = g.gelu(h)?;
                let y = g.matmul(h, w2)?;
                Ok(g.add(y, b2)?)
            }
        }
    }

    /// Embeds `[n, S]` segments into `[n, D]` token space. Rows are
    /// computed independently; no cross-segment mixing.
    pub fn embed_nodes(&self, g: &mut Graph, nodes: &AdapterNodes, segments: NodeId) -> Result<NodeId> {
        let shape = g.value(segments).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.segment_length {
            return Err(AdapterError::Shape(format!(
                "segment tensor shape {shape:?} does not match segment length {}",
                self.config.segment_length
            )));
        }
        self.apply_head(g, nodes, "embed", self.config.embed, segments)
    }

    /// Projects `[n, D]` hidden states back to `[n, S]` segments.
    pub fn project_nodes(&self, g: &mut Graph, nodes: &AdapterNodes, hidden: NodeId) -> Result<NodeId> {
        let shape = g.value(hidden).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.model_dim {
            return Err(AdapterError::Shape(format!(
                "hidden tensor shape {shape:?} does not match model dim {}",
                self.model_dim
            )));
        }
        self.apply_head(g, nodes, "project", self.config.project, hidden)
    }

    /// Value-level segment embedding.
    pub fn embed_segments(&self, segments: &[Vec<f64>]) -> Result<Tensor> {
        let s = self.config.segment_length;
        for (i, seg) in segments.iter().enumerate() {
            if seg.len() != s {
                return Err(AdapterError::Shape(format!(
                    "segment {i} has length {}, expected {s}",
                    seg.len()
                )));
            }
        }
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let data: Vec<f64> = segments.iter().flatten().copied().collect();
        let x = g.constant(Tensor::new(vec![segments.len(), s], data)?);
        let out = self.embed_nodes(&mut g, &nodes, x)?;
        Ok(g.value(out).clone())
    }

    /// Value-level projection to segments.
    pub fn project(&self, hidden: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let x = g.constant(hidden.clone());
        let out = self.project_nodes(&mut g, &nodes, x)?;
        let v = g.value(out);
        let s = self.config.segment_length;
        Ok(v.data().chunks(s).map(<[f64]>::to_vec).collect())
    }
}

/// Graph handles for bound adapter parameters.
pub struct AdapterNodes {
    map: BTreeMap<String, NodeId>,
}

impl AdapterNodes {
    pub fn node_for(&self, param_name: &str) -> Option<NodeId> {
        let key = param_name.strip_prefix("adapter.")?;
        self.map.get(key).copied()
    }
}

/// Splits a series into consecutive, non-overlapping segments of length
/// `s`; concatenating the result reproduces the input exactly.
pub fn segment(series: &[f64], s: usize) -> Result<Vec<Vec<f64>>> {
    if s == 0 {
        return Err(AdapterError::Shape("segment length must be positive".into()));
    }
    let remainder = series.len() % s;
    if remainder != 0 {
        return Err(AdapterError::Segmentation {
            length: series.len(),
            segment: s,
            remainder,
        });
    }
    Ok(series.chunks(s).map(<[f64]>::to_vec).collect())
}

pub fn fill_template(template: &str, start: &str, end: &str) -> String {
    template.replace("{start}", start).replace("{end}", end)
}

/// Memo table from filled timestamp sentences to their embeddings. Values
/// are bit-identical to a fresh `embed_text` call; reads may run
/// concurrently, writes happen in pre-compute passes.
#[derive(Debug, Default)]
pub struct TimestampCache {
    map: RwLock<HashMap<String, Vec<f64>>>,
}

impl TimestampCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.read().unwrap().contains_key(key)
    }

    pub fn get_or_compute(&self, backbone: &FrozenBackbone, filled: &str) -> Result<Vec<f64>> {
        if let Some(hit) = self.map.read().unwrap().get(filled) {
            return Ok(hit.clone());
        }
        let embedded = backbone.embed_text(filled.as_bytes())?;
        let value = embedded.data().to_vec();
        self.map
            .write()
            .unwrap()
            .insert(filled.to_string(), value.clone());
        Ok(value)
    }

    /// Dedicated pre-compute pass over timestamp pairs.
    pub fn precompute<'a>(
        &self,
        backbone: &FrozenBackbone,
        template: &str,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<usize> {
        let mut added = 0;
        for (start, end) in pairs {
            let filled = fill_template(template, start, end);
            if !self.contains(&filled) {
                self.get_or_compute(backbone, &filled)?;
                added += 1;
            }
        }
        Ok(added)
    }
}

impl Clone for TimestampCache {
    fn clone(&self) -> Self {
        Self {
            map: RwLock::new(self.map.read().unwrap().clone()),
        }
    }
}

/// Timestamp position embedding for one segment: fills the template with
/// the segment's starting and end timestamps, embeds the sentence, and
/// memoizes the result.
pub fn timestamp_embedding(
    backbone: &FrozenBackbone,
    cache: &TimestampCache,
    template: &str,
    start_ts: &str,
    end_ts: &str,
) -> Result<Vec<f64>> {
    if start_ts.is_empty() || end_ts.is_empty() {
        return Err(AdapterError::Timestamp(
            "timestamps must be non-empty strings".into(),
        ));
    }
    let filled = fill_template(template, start_ts, end_ts);
    cache.get_or_compute(backbone, &filled)
}

/// Token composition: `SE + TE` when timestamps are in use, `SE` untouched
/// otherwise.
pub fn compose_tokens(se: &Tensor, te: &Tensor, use_timestamps: bool) -> Result<Tensor> {
    if !use_timestamps {
        return Ok(se.clone());
    }
    if se.shape() != te.shape() {
        return Err(AdapterError::Shape(format!(
            "compose_tokens shapes differ: {:?} vs {:?}",
            se.shape(),
            te.shape()
        )));
    }
    let data = se
        .data()
        .iter()
        .zip(te.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(Tensor::new(se.shape().to_vec(), data)?)
}

/// Non-autoregressive baseline head: one linear map from the concatenated
/// lookback token states `[n, D]` (flattened row-major) to the full
/// horizon.
#[derive(Debug, Clone)]
pub struct FlattenHead {
    pub input_width: usize,
    pub horizon: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl FlattenHead {
    pub fn new(num_segments: usize, model_dim: usize, horizon: usize, param_seed: u64) -> Result<Self> {
        if num_segments == 0 || model_dim == 0 || horizon == 0 {
            return Err(AdapterError::Shape(
                "flatten head dimensions must be positive".into(),
            ));
        }
        let input_width = num_segments * model_dim;
        let data = seed::gaussian(
            param_seed,
            "flatten.w",
            1.0 / (input_width as f64).sqrt(),
            input_width * horizon,
        );
        Ok(Self {
            input_width,
            horizon,
            weight: Tensor::new(vec![input_width, horizon], data)?.with_grad(),
            bias: Tensor::zeros(vec![horizon])?.with_grad(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("flatten.w".to_string(), &self.weight),
            ("flatten.b".to_string(), &self.bias),
        ]
    }

    pub fn param_mut(&mut self, full_name: &str) -> Option<&mut Tensor> {
        match full_name {
            "flatten.w" => Some(&mut self.weight),
            "flatten.b" => Some(&mut self.bias),
            _ => None,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> FlattenNodes {
        FlattenNodes {
            weight: g.input(&self.weight),
            bias: g.input(&self.bias),
        }
    }

    /// `[n, D]` hidden states -> `[1, horizon]` forecast in one step.
    pub fn forecast_nodes(&self, g: &mut Graph, nodes: &FlattenNodes, hidden: NodeId) -> Result<NodeId> {
        let shape = g.value(hidden).shape().to_vec();
        let total: usize = shape.iter().product();
        if total != self.input_width {
            return Err(AdapterError::Shape(format!(
                "flatten head expects {} inputs, hidden shape {shape:?} has {total}",
                self.input_width
            )));
        }
        let flat = g.reshape(hidden, vec![1, self.input_width])?;
        let y = g.matmul(flat, nodes.weight)?;
        Ok(g.add(y, nodes.bias)?)
    }

    /// Value-level single-shot forecast.
    pub fn forecast(&self, hidden: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let x = g.constant(hidden.clone());
        let out = self.forecast_nodes(&mut g, &nodes, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

pub struct FlattenNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}
