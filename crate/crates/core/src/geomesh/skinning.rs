use nalgebra::{Matrix3, Rotation3};

use crate::tensor::{CustomOp, Tape, Tensor, Var};

use super::{GeomError, Vec3};

/// Per-vertex affine map `v ↦ m v + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: Matrix3<f64>,
    pub t: Vec3,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
            t: Vec3::zeros(),
        }
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.m * v + self.t
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &Affine) -> Affine {
        Affine {
            m: self.m * inner.m,
            t: self.m * inner.t + self.t,
        }
    }
}

/// Rotation matrix for an axis-angle vector (radians).
pub fn axis_angle(w: [f64; 3]) -> Matrix3<f64> {
    Rotation3::new(Vec3::new(w[0], w[1], w[2])).into_inner()
}

/// Rigid transform from a 6-vector `[rx,ry,rz,tx,ty,tz]` rotating about `center`.
pub fn rigid_transform(pose: &[f64; 6], center: Vec3) -> Affine {
    let r = axis_angle([pose[0], pose[1], pose[2]]);
    let t = Vec3::new(pose[3], pose[4], pose[5]);
    Affine {
        m: r,
        t: center - r * center + t,
    }
}

/// Joint centres plus a row-stochastic vertex × joint weight table.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningRig {
    centers: Vec<Vec3>,
    weights: Vec<Vec<f64>>,
}

impl SkinningRig {
    pub fn new(centers: Vec<Vec3>, weights: Vec<Vec<f64>>) -> Result<Self, GeomError> {
        for (v, row) in weights.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != centers.len() || row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(GeomError::SkinWeights { vertex: v, sum });
            }
        }
        Ok(Self { centers, weights })
    }

    pub fn joint_count(&self) -> usize {
        self.centers.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }
}

/// Blended per-vertex affine maps `Σ_j w_vj T_j`.
pub fn vertex_affines(rig: &SkinningRig, pose: &[[f64; 6]]) -> Result<Vec<Affine>, GeomError> {
    if pose.len() != rig.joint_count() {
        return Err(GeomError::PoseCount {
            expected: rig.joint_count(),
            found: pose.len(),
        });
    }
    let joints: Vec<Affine> = pose
        .iter()
        .zip(&rig.centers)
        .map(|(p, c)| rigid_transform(p, *c))
        .collect();
    Ok(rig
        .weights
        .iter()
        .map(|row| {
            let mut a = Affine {
                m: Matrix3::zeros(),
                t: Vec3::zeros(),
            };
            for (w, j) in row.iter().zip(&joints) {
                if *w != 0.0 {
                    a.m += j.m * *w;
                    a.t += j.t * *w;
                }
            }
            a
        })
        .collect())
}

/// Linear blend skinning of rest positions.
pub fn apply_lbs(rest: &[Vec3], rig: &SkinningRig, pose: &[[f64; 6]]) -> Result<Vec<Vec3>, GeomError> {
    let a = vertex_affines(rig, pose)?;
    Ok(rest.iter().zip(&a).map(|(v, a)| a.apply(v)).collect())
}

struct AffineOp {
    maps: Vec<Affine>,
}

impl CustomOp for AffineOp {
    fn name(&self) -> &'static str {
        "vertex_affine"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut out = vec![0.0; inputs[0].numel()];
        for (v, a) in self.maps.iter().enumerate() {
            let gv = Vec3::new(g.data()[3 * v], g.data()[3 * v + 1], g.data()[3 * v + 2]);
            let r = a.m.transpose() * gv;
            out[3 * v..3 * v + 3].copy_from_slice(r.as_slice());
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), out).unwrap())]
    }
}

/// Applies one affine map per row of a `[V,3]` tape value.
pub fn apply_affine_var(tape: &mut Tape, x: Var, maps: Vec<Affine>) -> Result<Var, GeomError> {
    let xv = tape.value(x);
    if xv.shape() != [maps.len(), 3] {
        return Err(GeomError::Resolution {
            expected: vec![maps.len(), 3],
            found: xv.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; xv.numel()];
    for (v, a) in maps.iter().enumerate() {
        let d = &xv.data()[3 * v..3 * v + 3];
        let p = a.apply(&Vec3::new(d[0], d[1], d[2]));
        out[3 * v..3 * v + 3].copy_from_slice(p.as_slice());
    }
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    Ok(tape.custom(&[x], value, Box::new(AffineOp { maps })))
}
