//! Joint multi-layer rasterization with differentiable interpolation.

mod camera;
mod fragments;
mod interp;

use thiserror::Error;

use crate::geomesh::Vec3;
use crate::tensor::TensorError;

pub use camera::{Camera, NEAR};
pub use fragments::{
    coverage, edge, prepare, rasterize, rasterize_reference, Fragment, FragmentBuffer, LayerInput, LayerMasks,
    ScreenTri, LAYER_FACE, LAYER_HAIR, LAYER_NONE,
};
pub use interp::{interpolate, normals, soft_alpha, EdgeKind, GEOM_CHANNELS};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("intrinsics must be upper triangular with positive focal lengths")]
    Intrinsics,
    #[error("rotation is not orthonormal")]
    Rotation,
    #[error("positions {positions:?} and attributes {attributes:?} disagree")]
    AttributeShape { positions: Vec<usize>, attributes: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Depth map (cm, 0 on background) and camera-space unit normal map
/// `[3,H,W]` of the visible surface.
pub fn render_aux(frags: &FragmentBuffer, layers: &[LayerInput], cam: &Camera) -> (Vec<f64>, Vec<f64>) {
    let n = frags.width * frags.height;
    let mut depth = vec![0.0; n];
    let mut normal = vec![0.0; 3 * n];
    for (i, f) in frags.frags.iter().enumerate() {
        if f.layer == LAYER_NONE {
            continue;
        }
        depth[i] = f.depth;
        let l = &layers[f.layer as usize - 1];
        let tri = l.faces[f.face as usize];
        let nd = interp::face_normal_camera(cam, tri.map(|v| l.positions[v]));
        for j in 0..3 {
            normal[j * n + i] = nd[j];
        }
    }
    (depth, normal)
}

/// Interpolates a per-vertex quantity at one fragment using its stored barycentrics.
pub fn fragment_point(f: &Fragment, layers: &[LayerInput]) -> Option<Vec3> {
    if f.layer == LAYER_NONE {
        return None;
    }
    let l = &layers[f.layer as usize - 1];
    let tri = l.faces[f.face as usize];
    Some((0..3).map(|k| l.positions[tri[k]] * f.bary[k]).sum())
}
