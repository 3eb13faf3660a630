use nalgebra::{Matrix3, Vector2};

use crate::geomesh::Vec3;

use super::RasterError;

/// Pinhole camera, OpenCV convention: camera looks down `+z`, image `x` to
/// the right and `y` down, pixel `(col,row)` has its centre at `(col+0.5, row+0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

pub const NEAR: f64 = 1e-2;

impl Camera {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vec3, width: usize, height: usize) -> Result<Self, RasterError> {
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(RasterError::Intrinsics);
        }
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-9 || r.determinant() < 0.0 {
            return Err(RasterError::Rotation);
        }
        Ok(Self {
            k,
            r,
            t,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, with square pixels and a
    /// vertical field of view given in radians.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize) -> Self {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let t = -(r * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let k = Matrix3::new(f, 0.0, 0.5 * width as f64, 0.0, f, 0.5 * height as f64, 0.0, 0.0, 1.0);
        Self {
            k,
            r,
            t,
            width,
            height,
        }
    }

    /// Orbit around `target` (y up); azimuth 0 looks from `+z` toward `−z`.
    pub fn orbit(target: Vec3, azimuth: f64, elevation: f64, distance: f64, fov_y: f64, size: usize) -> Self {
        let eye = target
            + distance
                * Vec3::new(
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                    elevation.cos() * azimuth.cos(),
                );
        Self::look_at(eye, target, Vec3::y(), fov_y, size, size)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.r * p + self.t
    }

    /// Screen position (px) of a camera-space point.
    pub fn project_camera(&self, c: &Vec3) -> Vector2<f64> {
        let h = self.k * c;
        Vector2::new(h.x / h.z, h.y / h.z)
    }

    pub fn project(&self, p: &Vec3) -> (Vector2<f64>, f64) {
        let c = self.to_camera(p);
        (self.project_camera(&c), c.z)
    }

    /// Camera-space direction through screen point `s`, with unit `z`.
    pub fn ray(&self, sx: f64, sy: f64) -> Vec3 {
        let fx = self.k[(0, 0)];
        let fy = self.k[(1, 1)];
        let skew = self.k[(0, 1)];
        let cx = self.k[(0, 2)];
        let cy = self.k[(1, 2)];
        let y = (sy - cy) / fy;
        let x = (sx - cx - skew * y) / fx;
        Vec3::new(x, y, 1.0)
    }

    /// View-conditioning vector `Rᵀ t`.
    pub fn omega(&self) -> Vec3 {
        self.r.transpose() * self.t
    }

    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}
