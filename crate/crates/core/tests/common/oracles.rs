//! Random scene generators and brute-force references shared by the
//! component tests and the acceptance run.

use lucas_core::dehair::FactorModel;
use lucas_core::geomesh::Vec3;
use lucas_core::raster::{Camera, LAYER_FACE, LAYER_HAIR};
use lucas_core::splat::{GaussianSet, COV_INFLATION, CUTOFF, SCALE_MAX, SCALE_MIN};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `tris` independent triangles scattered in a cube of half-width `spread`.
pub fn random_layer(rng: &mut ChaCha8Rng, tris: usize, spread: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut p = Vec::new();
    let mut f = Vec::new();
    for t in 0..tris {
        let c = Vec3::new(
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
        );
        for _ in 0..3 {
            p.push(c + Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)));
        }
        f.push([3 * t, 3 * t + 1, 3 * t + 2]);
    }
    (p, f)
}

pub fn random_set(rng: &mut ChaCha8Rng, m: usize, extent: f64) -> GaussianSet {
    let v3 = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        Vec3::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi))
    };
    GaussianSet::new(
        (0..m).map(|_| v3(rng, -extent, extent)).collect(),
        (0..m).map(|_| v3(rng, -0.5, 0.5)).collect(),
        (0..m).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
        (0..m).map(|_| v3(rng, 0.02, 6.0)).collect(),
        (0..m).map(|_| v3(rng, 0.0, 1.0)).collect(),
        (0..m).map(|_| rng.gen_range(0.05..1.0)).collect(),
        (0..m).map(|i| if i % 2 == 0 { LAYER_FACE } else { LAYER_HAIR }).collect(),
    )
    .unwrap()
}

/// Straightforward per-pixel evaluation of every primitive, `[4,H,W]`.
pub fn splat_oracle(set: &GaussianSet, cam: &Camera) -> Vec<f64> {
    struct P {
        depth: f64,
        mean: Vector2<f64>,
        inv: Matrix2<f64>,
        color: Vec3,
        o: f64,
    }
    let mut prims = Vec::new();
    for k in 0..set.len() {
        let q = set.rotations[k];
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix();
        let s = set.scales[k].map(|x| x.clamp(SCALE_MIN, SCALE_MAX));
        let sigma = rot.matrix() * Matrix3::from_diagonal(&s.component_mul(&s)) * rot.matrix().transpose();
        let c = cam.r * (set.anchors[k] + set.delta[k]) + cam.t;
        if c.z <= 1e-2 {
            continue;
        }
        let (fx, fy, sk) = (cam.k[(0, 0)], cam.k[(1, 1)], cam.k[(0, 1)]);
        let j = Matrix2x3::new(
            fx / c.z,
            sk / c.z,
            -(fx * c.x + sk * c.y) / (c.z * c.z),
            0.0,
            fy / c.z,
            -fy * c.y / (c.z * c.z),
        );
        let cov = j * cam.r * sigma * cam.r.transpose() * j.transpose() + Matrix2::identity() * COV_INFLATION;
        let h = cam.k * c;
        prims.push(P {
            depth: c.z,
            mean: Vector2::new(h.x / h.z, h.y / h.z),
            inv: cov.try_inverse().unwrap(),
            color: set.colors[k],
            o: set.opacity[k],
        });
    }
    // stable sort keeps index order for equal depths
    prims.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let n = cam.pixels();
    let mut out = vec![0.0; 4 * n];
    for row in 0..cam.height {
        for col in 0..cam.width {
            let px = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
            let mut t = 1.0;
            let mut acc = [0.0; 4];
            for p in &prims {
                let d = px - p.mean;
                let m = (d.transpose() * p.inv * d)[(0, 0)];
                if m > CUTOFF {
                    continue;
                }
                let a = p.o * (-0.5 * m).exp();
                for ch in 0..3 {
                    acc[ch] += t * a * p.color[ch];
                }
                acc[3] += t * a;
                t *= 1.0 - a;
            }
            for ch in 0..4 {
                out[ch * n + row * cam.width + col] = acc[ch];
            }
        }
    }
    out
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn known_model(rng: &mut ChaCha8Rng, dim: usize, k: usize, noise: f64) -> FactorModel {
    FactorModel {
        mu: DVector::from_fn(dim, |_, _| gauss(rng)),
        w: DMatrix::from_fn(dim, k, |_, _| gauss(rng)),
        psi: DVector::from_fn(dim, |_, _| noise * (0.5 + rng.gen::<f64>())),
    }
}

pub fn draw(model: &FactorModel, rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(model.k(), |_, _| gauss(rng));
            let x = model.reconstruct(&z);
            (0..model.dim()).map(|d| x[d] + gauss(rng) * model.psi[d].sqrt()).collect()
        })
        .collect()
}

/// Largest principal angle (degrees) between two column spaces, via SVD of QaᵀQb.
pub fn principal_angle_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let smin = s.iter().cloned().fold(f64::MAX, f64::min).min(1.0);
    smin.acos().to_degrees()
}
