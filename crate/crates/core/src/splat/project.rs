use nalgebra::Matrix3;

use crate::geomesh::Vec3;
use crate::raster::Camera;
use crate::tensor::dual::Dual;

/// Added to the diagonal of every screen-space covariance (px²).
pub const COV_INFLATION: f64 = 0.3;

/// Forward-mode number over the ten geometric inputs of one primitive:
/// centre (3), raw quaternion (4) and clamped scale (3).
pub(crate) type D = Dual<10>;

/// Screen-space footprint of one primitive, with derivatives of the mean and
/// conic with respect to the ten geometric inputs.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedGaussian {
    pub mean: [f64; 2],
    /// 2×2 covariance `(xx, xy, yy)` in px², inflation included.
    pub cov: [f64; 3],
    /// Inverse covariance `(a, b, c)`: `m = a dx² + 2b dx dy + c dy²`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub(crate) jac: [[f64; 10]; 5],
}

pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let m = quat_rot(q.map(D::constant));
    Matrix3::from_fn(|r, c| m[r][c].v)
}

fn quat_rot(q: [D; 4]) -> [[D; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let inv = n.recip();
    let [w, x, y, z] = q.map(|c| c * inv);
    let one = D::constant(1.0);
    let two = |a: D, b: D| (a * b) * 2.0;
    [
        [one - two(y, y) - two(z, z), two(x, y) - two(w, z), two(x, z) + two(w, y)],
        [two(x, y) + two(w, z), one - two(x, x) - two(z, z), two(y, z) - two(w, x)],
        [two(x, z) - two(w, y), two(y, z) + two(w, x), one - two(x, x) - two(y, y)],
    ]
}

/// Projects one primitive. Returns `None` when it lies behind the near
/// plane, and `Some(Err(()))` when the screen covariance is not positive
/// definite (or not finite).
pub fn project_gaussian(
    cam: &Camera,
    center: Vec3,
    quat: [f64; 4],
    scale: Vec3,
) -> Option<Result<ProjectedGaussian, ()>> {
    if quat.iter().all(|&x| x == 0.0) {
        return Some(Err(()));
    }
    let p = [D::var(center.x, 0), D::var(center.y, 1), D::var(center.z, 2)];
    let q = [D::var(quat[0], 3), D::var(quat[1], 4), D::var(quat[2], 5), D::var(quat[3], 6)];
    let s = [D::var(scale.x, 7), D::var(scale.y, 8), D::var(scale.z, 9)];

    // camera-space centre
    let w = cam.r;
    let mut c = [D::constant(0.0); 3];
    for (r, cr) in c.iter_mut().enumerate() {
        *cr = p[0] * w[(r, 0)] + p[1] * w[(r, 1)] + p[2] * w[(r, 2)] + cam.t[r];
    }
    if c[2].v <= crate::raster::NEAR {
        return None;
    }

    // camera-space covariance W R S² Rᵀ Wᵀ = (W R S)(W R S)ᵀ
    let rot = quat_rot(q);
    let mut m = [[D::constant(0.0); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            let wr = rot[0][j] * w[(i, 0)] + rot[1][j] * w[(i, 1)] + rot[2][j] * w[(i, 2)];
            *e = wr * s[j];
        }
    }
    let cov3 = |i: usize, j: usize| m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];

    let (fx, fy, sk) = (cam.k[(0, 0)], cam.k[(1, 1)], cam.k[(0, 1)]);
    let iz = c[2].recip();
    let iz2 = iz * iz;
    let j0 = [iz * fx, iz * sk, -((c[0] * fx + c[1] * sk) * iz2)];
    let j1 = [D::constant(0.0), iz * fy, -((c[1] * fy) * iz2)];

    let mut sig = [[D::constant(0.0); 3]; 3];
    for (i, row) in sig.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            *e = cov3(i, j);
        }
    }
    let quad = |a: &[D; 3], b: &[D; 3]| {
        let mut acc = D::constant(0.0);
        for i in 0..3 {
            for j in 0..3 {
                acc = acc + a[i] * sig[i][j] * b[j];
            }
        }
        acc
    };
    let xx = quad(&j0, &j0) + COV_INFLATION;
    let xy = quad(&j0, &j1);
    let yy = quad(&j1, &j1) + COV_INFLATION;
    let det = xx * yy - xy * xy;
    if !(det.v > 0.0) || !det.v.is_finite() || !(xx.v > 0.0) {
        return Some(Err(()));
    }
    let idet = det.recip();
    let conic = [yy * idet, -(xy * idet), xx * idet];
    let mean = [
        (c[0] * fx + c[1] * sk) * iz + cam.k[(0, 2)],
        c[1] * fy * iz + cam.k[(1, 2)],
    ];
    let outs = [mean[0], mean[1], conic[0], conic[1], conic[2]];
    if outs.iter().any(|o| !o.v.is_finite() || o.d.iter().any(|d| !d.is_finite())) {
        return Some(Err(()));
    }
    Some(Ok(ProjectedGaussian {
        mean: [mean[0].v, mean[1].v],
        cov: [xx.v, xy.v, yy.v],
        conic: [conic[0].v, conic[1].v, conic[2].v],
        depth: c[2].v,
        jac: outs.map(|o| o.d),
    }))
}
