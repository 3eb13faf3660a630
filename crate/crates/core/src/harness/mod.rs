//! End-to-end pipeline: configuration, dataset loading, the dehair step,
//! training, evaluation, driving and the live session server.

pub mod config;
pub mod data;
pub mod dehair_step;
pub mod drive;
pub mod eval;
pub mod model;
pub mod optim;
#[cfg(feature = "serve")]
pub mod serve;
pub mod session;
pub mod train;

use thiserror::Error;

pub use config::{Ablation, DehairSettings, LucasConfig, OptimConfig, ServeConfig, SplitConfig, TrainConfig};
pub use data::{IdentityData, Split, Surface, TrainingData, ViewId};
pub use model::{Model, RenderMode, Rendered};
pub use train::{train, TrainReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss term {term} at step {step}{}", checkpoint.as_ref().map(|c| format!("; last good checkpoint in {c}")).unwrap_or_default())]
    NonFiniteLoss {
        step: u64,
        term: String,
        checkpoint: Option<String>,
    },
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Geom(#[from] crate::geomesh::GeomError),
    #[error(transparent)]
    Dehair(#[from] crate::dehair::DehairError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Lten(#[from] crate::lten::LtenError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
