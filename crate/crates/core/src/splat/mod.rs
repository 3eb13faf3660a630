//! Mesh-anchored 3D Gaussian splatting.
//!
//! Primitives sit on guide-mesh vertices (`t = t̂ + δt`), are projected with
//! the usual local affine approximation, sorted once by camera depth and
//! alpha-composited front to back. Scales are clamped to
//! `[SCALE_MIN, SCALE_MAX]` for rendering while the raw values stay in the
//! [`GaussianSet`] so a regulariser can see them.

mod project;
mod render;

use std::path::Path;

use thiserror::Error;

use crate::geomesh::Vec3;
use crate::lten::LtenError;
use crate::tensor::{DType, Tensor, TensorError};

pub use project::{project_gaussian, quat_to_matrix, ProjectedGaussian, COV_INFLATION};
pub use render::{render_gaussians_var, SplatStats, CUTOFF};

pub const SCALE_MIN: f64 = 0.1;
pub const SCALE_MAX: f64 = 5.0;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("attribute `{name}` has {found} rows, expected {expected}")]
    Count { name: &'static str, expected: usize, found: usize },
    #[error("opacity {value} of primitive {index} is outside [0,1]")]
    Opacity { index: usize, value: f64 },
    #[error("attribute tensor `{name}` has shape {shape:?}")]
    Shape { name: &'static str, shape: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lten(#[from] LtenError),
}

/// Gaussian primitives anchored on a layered guide mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub anchors: Vec<Vec3>,
    pub delta: Vec<Vec3>,
    /// Quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    /// Raw, unclamped scales.
    pub scales: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub opacity: Vec<f64>,
    pub layer: Vec<u8>,
}

impl GaussianSet {
    /// Checks attribute counts and opacities and normalises the quaternions.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        anchors: Vec<Vec3>,
        delta: Vec<Vec3>,
        rotations: Vec<[f64; 4]>,
        scales: Vec<Vec3>,
        colors: Vec<Vec3>,
        opacity: Vec<f64>,
        layer: Vec<u8>,
    ) -> Result<Self, SplatError> {
        let m = anchors.len();
        for (name, found) in [
            ("delta", delta.len()),
            ("rotations", rotations.len()),
            ("scales", scales.len()),
            ("colors", colors.len()),
            ("opacity", opacity.len()),
            ("layer", layer.len()),
        ] {
            if found != m {
                return Err(SplatError::Count { name, expected: m, found });
            }
        }
        if let Some((index, &value)) = opacity.iter().enumerate().find(|(_, o)| !(0.0..=1.0).contains(*o)) {
            return Err(SplatError::Opacity { index, value });
        }
        let rotations = rotations
            .into_iter()
            .map(|q| {
                let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    q.map(|x| x / n)
                } else {
                    [1.0, 0.0, 0.0, 0.0]
                }
            })
            .collect();
        Ok(Self {
            anchors,
            delta,
            rotations,
            scales,
            colors,
            opacity,
            layer,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Final centres `t̂ + δt`.
    pub fn positions(&self) -> Vec<Vec3> {
        self.anchors.iter().zip(&self.delta).map(|(a, d)| a + d).collect()
    }

    /// Scales as seen by the renderer.
    pub fn clamped_scales(&self) -> Vec<Vec3> {
        self.scales.iter().map(|s| s.map(clamp_scale)).collect()
    }

    /// Keeps only primitives whose layer tag is in `layers`.
    pub fn filter_layers(&self, layers: &[u8]) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| layers.contains(&self.layer[i])).collect();
        let pick = |v: &[Vec3]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            anchors: pick(&self.anchors),
            delta: pick(&self.delta),
            rotations: keep.iter().map(|&i| self.rotations[i]).collect(),
            scales: pick(&self.scales),
            colors: pick(&self.colors),
            opacity: keep.iter().map(|&i| self.opacity[i]).collect(),
            layer: keep.iter().map(|&i| self.layer[i]).collect(),
        }
    }

    /// Flat `[M, k]` tensors in the order the differentiable renderer expects.
    pub fn to_tensors(&self) -> [Tensor; 5] {
        let m = self.len();
        let v3 = |v: &[Vec3]| Tensor::new(vec![m, 3], v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap();
        [
            v3(&self.positions()),
            Tensor::new(vec![m, 4], self.rotations.iter().flatten().copied().collect()).unwrap(),
            v3(&self.scales),
            v3(&self.colors),
            Tensor::new(vec![m, 1], self.opacity.clone()).unwrap(),
        ]
    }

    /// Debug dump: one LTEN1 file per attribute inside `dir`.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<(), SplatError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(LtenError::from)?;
        let m = self.len();
        let v3 = |v: &[Vec3]| Tensor::new(vec![m, 3], v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).unwrap();
        let entries = [
            ("anchors", v3(&self.anchors)),
            ("delta", v3(&self.delta)),
            ("rotations", Tensor::new(vec![m, 4], self.rotations.iter().flatten().copied().collect())?),
            ("scales", v3(&self.scales)),
            ("colors", v3(&self.colors)),
            ("opacity", Tensor::new(vec![m], self.opacity.clone())?),
            ("layer", Tensor::new(vec![m], self.layer.iter().map(|&l| l as f64).collect())?),
        ];
        for (name, t) in entries {
            crate::lten::save(dir.join(format!("{name}.lten")), &t, DType::F64)?;
        }
        Ok(())
    }
}

pub fn clamp_scale(s: f64) -> f64 {
    s.clamp(SCALE_MIN, SCALE_MAX)
}

/// Anchors for the layered guide mesh: face vertices first, then hair.
/// Returns the positions and a per-primitive layer tag.
pub fn anchor_on_mesh(face: &[Vec3], hair: &[Vec3]) -> (Vec<Vec3>, Vec<u8>) {
    let mut anchors = face.to_vec();
    anchors.extend_from_slice(hair);
    let mut layer = vec![crate::raster::LAYER_FACE; face.len()];
    layer.resize(anchors.len(), crate::raster::LAYER_HAIR);
    (anchors, layer)
}

/// Renders a set without recording gradients. Returns `[4,H,W]`
/// (premultiplied RGB over black, then alpha) and skip statistics.
pub fn render_gaussians(set: &GaussianSet, cam: &crate::raster::Camera) -> Result<(Tensor, SplatStats), SplatError> {
    let mut tape = crate::tensor::Tape::new();
    let [p, q, s, c, o] = set.to_tensors().map(|t| tape.constant(t));
    let (out, stats) = render_gaussians_var(&mut tape, p, q, s, c, o, cam)?;
    Ok((tape.value(out).clone(), stats))
}
