//! Adapting a frozen decoder-only transformer into an autoregressive time
//! series forecaster: trainable segment embedding/projection heads around a
//! frozen backbone, textual-timestamp position embeddings, next-token
//! training, rolling multi-horizon generation, and in-context forecasting
//! with time series prompts.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod forecaster;
pub mod incontext;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use adapter::{AdapterConfig, AdapterParams, FlattenHead, HeadKind, TimestampCache};
pub use backbone::{BackboneConfig, BackboneVariant, FrozenBackbone, LoraAdapter};
pub use data::{NormMode, NormStats, RawDataset, SplitSpec, SynthSpec, WindowSample};
pub use model::Model;
pub use tensor::{Graph, NodeId, Tensor};
pub use trainer::TrainConfig;
