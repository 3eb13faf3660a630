//! Mesh topology, geometry images, uniform Laplacians and skinning.

mod geometry_image;
mod laplacian;
mod mesh;
mod skinning;

use thiserror::Error;

use crate::tensor::TensorError;

pub use geometry_image::{
    compose_geometry, from_points, pixel_coord, sample_geometry_image, sample_vertices, to_points,
    GeometryImage,
};
pub use laplacian::{laplacian_energy, laplacian_energy_var, precondition_gradient, Laplacian};
pub use mesh::{read_obj, write_obj, MeshTopology, Vec3};
pub use skinning::{apply_affine_var, apply_lbs, axis_angle, rigid_transform, vertex_affines, Affine, SkinningRig};

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("face {face} references a vertex outside 0..{vertices}")]
    FaceIndex { face: usize, vertices: usize },
    #[error("face {0} repeats a vertex index")]
    DegenerateFace(usize),
    #[error("vertex {0} has a uv coordinate outside [0,1]^2")]
    UvRange(usize),
    #[error("faces {0} and {1} overlap in uv space")]
    UvOverlap(usize, usize),
    #[error("malformed obj at line {line}: {text}")]
    Obj { line: usize, text: String },
    #[error("geometry image must have shape [3,H,W], got {0:?}")]
    ImageShape(Vec<usize>),
    #[error("geometry image contains non-finite values")]
    NonFinite,
    #[error("resolution mismatch: expected {expected:?}, found {found:?}")]
    Resolution { expected: Vec<usize>, found: Vec<usize> },
    #[error("conjugate gradient stalled with residual {residual:e} after {iterations} iterations")]
    CgNotConverged { residual: f64, iterations: usize },
    #[error("skinning weights of vertex {vertex} are invalid (row sum {sum})")]
    SkinWeights { vertex: usize, sum: f64 },
    #[error("expected {expected} pose vectors, got {found}")]
    PoseCount { expected: usize, found: usize },
    #[error("negative preconditioner strength {0}")]
    NegativeLambda(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
