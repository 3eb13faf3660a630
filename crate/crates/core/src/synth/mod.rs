//! Procedural multi-identity, multi-view dataset: bald heads from a known
//! linear model, parametric wigs, expression and pose performances and
//! exact ground-truth renders.

pub mod dataset;
pub mod head;
pub mod perform;

use std::collections::BTreeMap;

use thiserror::Error;

pub use dataset::{
    identity_name, performance_seed, REFERENCE_SEED_BASE, points_to_image, write_dataset, Dataset, DatasetSummary, FrameData, IdentityEntry, IdentitySpec,
    NeutralSet, SynthConfig,
};
pub use head::{generate_identity, BaldModel, Expression, SyntheticIdentity, WigStyle, BALD_K, BALD_SIGMA};
pub use perform::{
    generate_performance, lag_step, pose_frame, render_view, CameraRig, FrameState, IdentityAssets, PerformanceConfig,
    Surfaces, ViewRecord,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Lten(#[from] crate::lten::LtenError),
    #[error(transparent)]
    Geom(#[from] crate::geomesh::GeomError),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, SynthError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SynthError::Format(format!("line {}: expected `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
