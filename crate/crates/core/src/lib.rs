//! Single-domain-generalizable segmentation with channel-level contrastive
//! feature disentanglement.
//!
//! A stem convolution produces shallow features; a learnable channel prompt
//! splits them into style and structure parts; only the structure part
//! feeds a U-shaped segmentation backbone. Training alternates a
//! segmentation phase on source and style-augmented views with a
//! contrastive phase that pulls structure projections together and pushes
//! style projections apart.

pub mod cfd;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod fft;
pub mod graph;
pub mod image;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod segmodel;
pub mod styleaug;
pub mod tensor;
pub mod trainer;

pub use cfd::{ChannelPrompt, PromptInit, Projector};
pub use dataio::{load_dataset, BenchmarkSpec, Dataset, DomainSpec, Split};
pub use error::{Error, Result};
pub use graph::{Graph, Gradients, NormMode, RunningStats, Var};
pub use image::{Image, Mask, Sample};
pub use nn::{Forward, StatsMap};
pub use optim::{sgd_update, Sgd};
pub use params::{ParamId, ParamStore};
pub use segmodel::{Arch, DropPoint, InferHooks, Model, Network};
pub use styleaug::{AugConfig, StyleMode};
pub use tensor::Tensor;
pub use trainer::{DomainDice, ModelState, StepReport, TrainConfig};
