//! Glue between the frozen backbone and the trainable heads: parameter
//! enumeration for the optimizer and the embed -> compose -> forward ->
//! project pipeline shared by training and inference.

use thiserror::Error;

use crate::adapter::{self, AdapterError, AdapterParams, FlattenHead, TimestampCache};
use crate::backbone::{BackboneError, FrozenBackbone, LoraAdapter, LoraNodes};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A complete forecaster: frozen backbone, trainable adapter heads,
/// optional low-rank factors, optional flatten head, and the timestamp
/// embedding cache.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: FrozenBackbone,
    pub lora: Option<LoraAdapter>,
    pub adapter: AdapterParams,
    pub flatten: Option<FlattenHead>,
    pub config: TrainConfig,
    pub cache: TimestampCache,
}

impl Model {
    pub fn new(
        backbone: FrozenBackbone,
        adapter: AdapterParams,
        config: TrainConfig,
    ) -> Result<Self> {
        if adapter.model_dim() != backbone.config().model_dim {
            return Err(ModelError::Config(format!(
                "adapter dim {} does not match backbone dim {}",
                adapter.model_dim(),
                backbone.config().model_dim
            )));
        }
        if adapter.segment_length() != config.segment_length {
            return Err(ModelError::Config(format!(
                "adapter segment length {} does not match train config {}",
                adapter.segment_length(),
                config.segment_length
            )));
        }
        if config.context_segments > backbone.config().max_positions {
            return Err(ModelError::Config(format!(
                "context of {} segments exceeds backbone max positions {}",
                config.context_segments,
                backbone.config().max_positions
            )));
        }
        let lora = match config.lora {
            Some(spec) => Some(backbone.attach_lora(
                spec.rank,
                spec.alpha,
                crate::seed::derive(config.seed, "lora"),
            )?),
            None => None,
        };
        Ok(Self {
            backbone,
            lora,
            adapter,
            flatten: None,
            config,
            cache: TimestampCache::new(),
        })
    }

    /// Replaces the segment-wise projection path with a flatten head of
    /// the given horizon for the non-autoregressive baseline mode.
    pub fn with_flatten_head(mut self, horizon: usize, param_seed: u64) -> Result<Self> {
        let head = FlattenHead::new(
            self.config.context_segments,
            self.backbone.config().model_dim,
            horizon,
            param_seed,
        )?;
        self.flatten = Some(head);
        Ok(self)
    }

    pub fn segment_length(&self) -> usize {
        self.config.segment_length
    }

    pub fn context_segments(&self) -> usize {
        self.config.context_segments
    }

    pub fn model_dim(&self) -> usize {
        self.backbone.config().model_dim
    }

    /// Trainable parameters in deterministic name order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.adapter.named_params();
        if let Some(head) = &self.flatten {
            out.extend(head.named_params());
        }
        if let Some(lora) = &self.lora {
            out.extend(lora.named_params());
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name.starts_with("adapter.") {
            return self.adapter.param_mut(name);
        }
        if name.starts_with("flatten.") {
            return self.flatten.as_mut()?.param_mut(name);
        }
        if name.starts_with("lora.") {
            return self.lora.as_mut()?.param_mut(name);
        }
        None
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn frozen_parameter_count(&self) -> usize {
        self.backbone.num_parameters()
    }

    /// Timestamp position embeddings for a run of segments, as an
    /// `[n, D]` tensor. Memoized through the cache.
    pub fn te_matrix(&self, seg_timestamps: &[(String, String)]) -> Result<Tensor> {
        let d = self.model_dim();
        let mut data = Vec::with_capacity(seg_timestamps.len() * d);
        for (start, end) in seg_timestamps {
            let te = adapter::timestamp_embedding(
                &self.backbone,
                &self.cache,
                &self.adapter.config().template,
                start,
                end,
            )?;
            data.extend_from_slice(&te);
        }
        Ok(Tensor::new(vec![seg_timestamps.len(), d], data)?)
    }

    /// Registers the trainable tensors on a graph.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            adapter: self.adapter.bind(g),
            lora: self.lora.as_ref().map(|l| l.bind(g)),
            flatten: self.flatten.as_ref().map(|f| f.bind(g)),
        }
    }

    pub fn param_node(&self, bound: &BoundModel, name: &str) -> Option<NodeId> {
        if name.starts_with("adapter.") {
            return bound.adapter.node_for(name);
        }
        if name.starts_with("lora.") {
            return bound.lora.as_ref()?.node_for(name);
        }
        match name {
            "flatten.w" => Some(bound.flatten.as_ref()?.weight),
            "flatten.b" => Some(bound.flatten.as_ref()?.bias),
            _ => None,
        }
    }

    /// Embeds `n` normalized segments, adds timestamp embeddings when in
    /// use, and runs the frozen forward. Returns the `[n, D]` hidden
    /// states.
    pub fn hidden_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        context: &[f64],
        te: Option<&Tensor>,
    ) -> Result<NodeId> {
        let s = self.segment_length();
        if context.is_empty() || context.len() % s != 0 {
            return Err(ModelError::Config(format!(
                "context length {} is not a positive multiple of segment length {s}",
                context.len()
            )));
        }
        let n = context.len() / s;
        let segs = g.constant(Tensor::new(vec![n, s], context.to_vec())?);
        let se = self.adapter.embed_nodes(g, &bound.adapter, segs)?;
        let tokens = if self.config.use_timestamps {
            let te = te.ok_or_else(|| {
                ModelError::Config("timestamp embeddings required but missing".into())
            })?;
            if te.shape() != [n, self.model_dim()] {
                return Err(ModelError::Config(format!(
                    "timestamp embedding shape {:?} does not match [{n}, {}]",
                    te.shape(),
                    self.model_dim()
                )));
            }
            let te_node = g.constant(te.clone());
            g.add(se, te_node)?
        } else {
            se
        };
        Ok(self
            .backbone
            .forward_nodes(g, tokens, bound.lora.as_ref())?)
    }

    /// Next-segment predictions for every position: `[n, S]`, where row
    /// `i` carries the prediction for the segment following position `i`.
    pub fn predict_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        context: &[f64],
        te: Option<&Tensor>,
    ) -> Result<NodeId> {
        let hidden = self.hidden_nodes(g, bound, context, te)?;
        Ok(self.adapter.project_nodes(g, &bound.adapter, hidden)?)
    }

    /// Value-level next-segment predictions over a normalized context.
    pub fn predict_segments(&self, context: &[f64], te: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.predict_nodes(&mut g, &bound, context, te)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Value-level flatten-head forecast over a normalized lookback.
    pub fn flatten_forecast(&self, context: &[f64], te: Option<&Tensor>) -> Result<Vec<f64>> {
        let head = self
            .flatten
            .as_ref()
            .ok_or_else(|| ModelError::Config("model has no flatten head".into()))?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let hidden = self.hidden_nodes(&mut g, &bound, context, te)?;
        let nodes = bound.flatten.as_ref().unwrap();
        let out = head.forecast_nodes(&mut g, nodes, hidden)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Graph handles for one bound model.
pub struct BoundModel {
    pub adapter: crate::adapter::AdapterNodes,
    pub lora: Option<LoraNodes>,
    pub flatten: Option<crate::adapter::FlattenNodes>,
}
