//! Parametric heads: a known linear bald-shape model, wig shells,
//! expression blendshapes and procedural textures.
//!
//! Both layers are geometry images on the shared `n × n` grid. Face
//! vertex `(r, c)` sits at azimuth `−π + 2π c/(n−1)` (0 faces `+z`) and
//! elevation `π/2 − (π/2 + 1) r/(n−1)`, so the first and last columns meet
//! at the back seam and the first row collapses onto the crown. Hair vertex
//! `(r, c)` uses the same azimuth and a strand parameter `s = r/(n−1)` that
//! runs from the crown to the hair tips.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use rand_distr::StandardNormal;
use std::f64::consts::{FRAC_PI_2, PI};

use crate::geomesh::Vec3;

pub const EL_TOP: f64 = FRAC_PI_2;
pub const EL_BOTTOM: f64 = -1.0;
pub const HEAD_RADII: [f64; 3] = [7.6, 10.0, 8.8];

/// Number of bald-shape directions in the generator.
pub const BALD_K: usize = 6;
/// Standard deviation (cm, RMS per vertex) along each bald direction.
pub const BALD_SIGMA: [f64; BALD_K] = [0.9, 0.7, 0.55, 0.45, 0.35, 0.3];
/// Isotropic per-coordinate noise added to every bald shape (cm).
pub const SHAPE_NOISE: f64 = 0.01;
/// Consecutive seeds sharing one stratified coefficient design.
pub const POPULATION_BLOCK: u64 = 20;

pub const EXPRESSIONS: [&str; 5] = ["jaw_open", "smile", "brow_raise", "frown", "blink"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WigStyle {
    None,
    Short,
    Long,
    SideSwept,
}

impl WigStyle {
    pub const ALL: [WigStyle; 4] = [WigStyle::None, WigStyle::Short, WigStyle::Long, WigStyle::SideSwept];

    pub fn name(self) -> &'static str {
        match self {
            WigStyle::None => "none",
            WigStyle::Short => "short",
            WigStyle::Long => "long",
            WigStyle::SideSwept => "side_swept",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.name() == s)
    }
}

pub fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn gauss2(dx: f64, dy: f64, sx: f64, sy: f64) -> f64 {
    (-(dx / sx).powi(2) - (dy / sy).powi(2)).exp()
}

/// Unit direction for azimuth/elevation.
pub fn direction(az: f64, el: f64) -> Vec3 {
    Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
}

pub fn face_angles(n: usize, r: usize, c: usize) -> (f64, f64) {
    let az = -PI + 2.0 * PI * c as f64 / (n - 1) as f64;
    let el = EL_TOP - (EL_TOP - EL_BOTTOM) * r as f64 / (n - 1) as f64;
    (az, el)
}

/// Mean head surface before any identity variation.
fn mean_surface(az: f64, el: f64) -> Vec3 {
    let d = direction(az, el);
    // narrower neck below the jaw
    let neck = 1.0 - 0.32 * smoothstep(-0.55, -0.95, el);
    let mut p = Vec3::new(d.x * HEAD_RADII[0] * neck, d.y * HEAD_RADII[1], d.z * HEAD_RADII[2] * neck);
    let nose = 1.5 * gauss2(az, el + 0.08, 0.16, 0.22);
    let chin = 0.6 * gauss2(az, el + 0.62, 0.35, 0.12);
    let sockets = -0.45 * (gauss2(az - 0.36, el - 0.14, 0.14, 0.08) + gauss2(az + 0.36, el - 0.14, 0.14, 0.08));
    let ears = 0.8 * (gauss2(az - 1.57, el, 0.1, 0.18) + gauss2(az + 1.57, el, 0.1, 0.18));
    p += d * (nose + chin + sockets + ears);
    p
}

fn bald_field(j: usize, az: f64, el: f64) -> f64 {
    match j {
        0 => 1.0,
        1 => el.sin(),
        2 => az.cos() * el.cos(),
        3 => (2.0 * az).cos() * el.cos(),
        4 => az.sin() * el.cos(),
        _ => (2.0 * el).sin() * az.cos(),
    }
}

/// The generator's linear bald-head model on an `n × n` grid:
/// `x = mean + Σ_j c_j b_j + noise`, with orthogonal `b_j` scaled to unit
/// RMS displacement per vertex.
#[derive(Clone, Debug)]
pub struct BaldModel {
    pub n: usize,
    pub mean: Vec<f64>,
    /// `3V × K`, columns orthogonal with norm `√V`.
    pub basis: DMatrix<f64>,
}

impl BaldModel {
    pub fn new(n: usize) -> Self {
        let v = n * n;
        let mut mean = Vec::with_capacity(3 * v);
        let mut basis = DMatrix::zeros(3 * v, BALD_K);
        for r in 0..n {
            for c in 0..n {
                let (az, el) = face_angles(n, r, c);
                let p = mean_surface(az, el);
                mean.extend_from_slice(&[p.x, p.y, p.z]);
                let d = direction(az, el);
                let k = r * n + c;
                for j in 0..BALD_K {
                    let f = bald_field(j, az, el);
                    for a in 0..3 {
                        basis[(3 * k + a, j)] = f * d[a];
                    }
                }
            }
        }
        // Gram-Schmidt so the directions are exactly orthogonal
        for j in 0..BALD_K {
            for i in 0..j {
                let proj = basis.column(j).dot(&basis.column(i)) / basis.column(i).norm_squared();
                let ci = basis.column(i).clone_owned();
                basis.column_mut(j).axpy(-proj, &ci, 1.0);
            }
            let norm = basis.column(j).norm();
            basis.column_mut(j).scale_mut((v as f64).sqrt() / norm);
        }
        Self { n, mean, basis }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Noise-free shape for the given coefficients.
    pub fn shape(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (j, &c) in coeffs.iter().enumerate() {
            for (xi, b) in x.iter_mut().zip(self.basis.column(j).iter()) {
                *xi += c * b;
            }
        }
        x
    }

    /// Covariance of the generator, `Σ σ_j² b_j b_jᵀ + noise² I`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut c = DMatrix::identity(self.dim(), self.dim()) * SHAPE_NOISE * SHAPE_NOISE;
        for j in 0..BALD_K {
            let b = self.basis.column(j);
            c += b * b.transpose() * (BALD_SIGMA[j] * BALD_SIGMA[j]);
        }
        c
    }
}

/// Standard-normal coefficients of one seed. Seeds are grouped in blocks of
/// [`POPULATION_BLOCK`]; each block draws a Gaussian matrix and whitens it so
/// the block's sample mean is zero and its sample covariance is exactly the
/// identity. A population spanning whole blocks therefore reproduces the
/// generator covariance up to the per-vertex noise.
fn population_coefficients(seed: u64) -> [f64; BALD_K] {
    let block = seed / POPULATION_BLOCK;
    let slot = (seed % POPULATION_BLOCK) as usize;
    let m = POPULATION_BLOCK as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ block);
    let mut z = DMatrix::from_fn(m, BALD_K, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut col in z.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cov = z.transpose() * &z / (m - 1) as f64;
    let chol = cov.cholesky().expect("20 Gaussian rows span 6 dimensions");
    // rows of z L⁻ᵀ have covariance L⁻¹ S L⁻ᵀ = I
    let white = chol.l().solve_lower_triangular(&z.transpose()).expect("nonsingular factor");
    std::array::from_fn(|j| white[(j, slot)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub seed: u64,
    pub n: usize,
    /// Bald-shape coefficients (cm RMS units), the dehairing ground truth.
    pub bald_coeffs: Vec<f64>,
    /// Per-coordinate shape noise, kept so the bald truth is exact.
    pub noise: Vec<f64>,
    pub style: WigStyle,
    pub hair_thickness: f64,
    pub hair_length: f64,
    pub skin: [f64; 3],
    pub hair_color: [f64; 3],
}

fn style_for_seed(seed: u64) -> WigStyle {
    WigStyle::ALL[(seed % 4) as usize]
}

/// Deterministic identity for a seed. `style` overrides the seed's own wig.
pub fn generate_identity(id: usize, seed: u64, n: usize, style: Option<WigStyle>) -> SyntheticIdentity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x1d);
    let unit = population_coefficients(seed);
    let bald_coeffs = (0..BALD_K).map(|j| BALD_SIGMA[j] * unit[j]).collect();
    let mut noise: Vec<f64> = (0..3 * n * n)
        .map(|_| SHAPE_NOISE * rng.sample::<f64, _>(StandardNormal))
        .collect();
    // duplicated vertices (crown row, back seam) must stay welded
    for k in 1..n {
        for a in 0..3 {
            noise[3 * k + a] = noise[a];
        }
    }
    for r in 0..n {
        for a in 0..3 {
            noise[3 * (r * n + n - 1) + a] = noise[3 * r * n + a];
        }
    }
    let style = style.unwrap_or_else(|| style_for_seed(seed));
    let skin_base = rng.gen_range(0.35..0.85);
    let skin = [skin_base + 0.12, skin_base * 0.78, skin_base * 0.62];
    let hb = rng.gen_range(0.08..0.6);
    let hair_color = [hb * rng.gen_range(0.9..1.4), hb * rng.gen_range(0.7..1.0), hb * rng.gen_range(0.4..0.8)];
    SyntheticIdentity {
        id,
        seed,
        n,
        bald_coeffs,
        noise,
        style,
        hair_thickness: rng.gen_range(0.9..1.5),
        hair_length: rng.gen_range(6.0..9.0),
        skin: skin.map(|v: f64| v.clamp(0.0, 1.0)),
        hair_color: hair_color.map(|v: f64| v.clamp(0.0, 1.0)),
    }
}

impl SyntheticIdentity {
    pub fn has_hair(&self) -> bool {
        self.style != WigStyle::None
    }

    /// Neutral bald head, vertex-major `3V`.
    pub fn bald(&self, model: &BaldModel) -> Vec<f64> {
        let mut x = model.shape(&self.bald_coeffs);
        for (xi, e) in x.iter_mut().zip(&self.noise) {
            *xi += e;
        }
        x
    }

    /// Elevation of the hairline at azimuth `az`.
    pub fn hairline(&self, az: f64) -> f64 {
        let a = az.abs();
        match self.style {
            WigStyle::None => EL_TOP,
            WigStyle::Short => 0.55 + (-0.3 - 0.55) * smoothstep(0.7, 2.3, a),
            WigStyle::Long => 0.55 + (-0.35 - 0.55) * smoothstep(0.7, 2.2, a),
            WigStyle::SideSwept => {
                0.5 + (-0.2 - 0.5) * smoothstep(0.8, 2.4, a) - 0.28 * gauss2(az - 0.35, 0.0, 0.32, 1.0)
            }
        }
    }

    /// Share of the strand parameter spent on the scalp shell.
    fn shell_fraction(&self) -> f64 {
        if self.style == WigStyle::Long {
            0.62
        } else {
            1.0
        }
    }

    /// Face vertices hidden under the wig.
    pub fn hair_mask(&self) -> Vec<bool> {
        let n = self.n;
        (0..n * n)
            .map(|k| {
                let (az, el) = face_angles(n, k / n, k % n);
                self.has_hair() && el >= self.hairline(az) - 0.02
            })
            .collect()
    }
}

/// Bilinear lookup of a `3V` geometry image at face-grid angles.
pub fn sample_surface(x: &[f64], n: usize, az: f64, el: f64) -> Vec3 {
    let u = ((az + PI) / (2.0 * PI)).clamp(0.0, 1.0) * (n - 1) as f64;
    let v = ((EL_TOP - el) / (EL_TOP - EL_BOTTOM)).clamp(0.0, 1.0) * (n - 1) as f64;
    let (c0, r0) = ((u.floor() as usize).min(n - 2), (v.floor() as usize).min(n - 2));
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    let at = |r: usize, c: usize| {
        let k = 3 * (r * n + c);
        Vec3::new(x[k], x[k + 1], x[k + 2])
    };
    at(r0, c0) * ((1.0 - fu) * (1.0 - fv))
        + at(r0, c0 + 1) * (fu * (1.0 - fv))
        + at(r0 + 1, c0) * ((1.0 - fu) * fv)
        + at(r0 + 1, c0 + 1) * (fu * fv)
}

/// Neutral hair layer plus, per hair vertex, its strand parameter and an
/// outward direction used to orient shading normals.
#[derive(Clone, Debug)]
pub struct HairShell {
    pub positions: Vec<Vec3>,
    pub strand: Vec<f64>,
    pub outward: Vec<Vec3>,
    /// Expression sensitivity of each vertex (front hairline).
    pub fringe: Vec<f64>,
}

pub fn hair_shell(identity: &SyntheticIdentity, bald: &[f64]) -> Option<HairShell> {
    if !identity.has_hair() {
        return None;
    }
    let n = identity.n;
    let shell = identity.shell_fraction();
    let mut out = HairShell {
        positions: Vec::with_capacity(n * n),
        strand: Vec::with_capacity(n * n),
        outward: Vec::with_capacity(n * n),
        fringe: Vec::with_capacity(n * n),
    };
    for r in 0..n {
        for c in 0..n {
            let (az, _) = face_angles(n, 0, c);
            let s = r as f64 / (n - 1) as f64;
            let el_b = identity.hairline(az);
            let th = identity.hair_thickness;
            let shell_point = |el: f64| sample_surface(bald, n, az, el) + direction(az, el) * th;
            let (p, dir) = if s <= shell {
                let el = EL_TOP - (EL_TOP - el_b) * s / shell;
                (shell_point(el), direction(az, el))
            } else {
                let t = (s - shell) / (1.0 - shell);
                let base = shell_point(el_b);
                // strands hang at the sides and back, never over the face
                let side = smoothstep(0.8, 1.5, az.abs());
                let horiz = Vec3::new(az.sin(), 0.0, az.cos());
                (base + Vec3::new(0.0, -identity.hair_length * side * t, 0.0) + horiz * (0.5 * side * t), horiz)
            };
            let el_here = if s <= shell { EL_TOP - (EL_TOP - el_b) * s / shell } else { el_b };
            let fringe = gauss2(0.0, el_here - el_b, 1.0, 0.3) * (1.0 - smoothstep(0.6, 1.2, az.abs()));
            out.positions.push(p);
            out.strand.push(s);
            out.outward.push(dir);
            out.fringe.push(fringe);
        }
    }
    Some(out)
}

/// Blend weights of the five expressions, each in `[0, 1]`.
pub type Expression = [f64; 5];

/// Identity-independent face displacement for an expression.
pub fn face_offsets(n: usize, w: &Expression) -> Vec<Vec3> {
    (0..n * n)
        .map(|k| {
            let (az, el) = face_angles(n, k / n, k % n);
            let mut d = Vec3::zeros();
            let jaw = smoothstep(-0.3, -0.75, el) * (1.0 - smoothstep(0.9, 1.35, az.abs()));
            d += Vec3::new(0.0, -1.6, -0.3) * (w[0] * jaw);
            for side in [-1.0, 1.0] {
                let g = gauss2(az - side * 0.32, el + 0.42, 0.18, 0.12);
                d += Vec3::new(side * 0.3, 0.6, -0.2) * (w[1] * g);
            }
            let brow = gauss2(0.0, el - 0.33, 1.0, 0.12) * (1.0 - smoothstep(0.5, 0.8, az.abs()));
            d += Vec3::new(0.0, 0.7, 0.0) * (w[2] * brow);
            d += Vec3::new(-0.25 * az.signum() * smoothstep(0.0, 0.3, az.abs()), -0.45, 0.1) * (w[3] * brow);
            d
        })
        .collect()
}

/// Hair fringe follows the brows.
pub fn hair_offsets(shell: &HairShell, w: &Expression) -> Vec<Vec3> {
    shell
        .fringe
        .iter()
        .map(|&f| Vec3::new(0.0, 0.6 * w[2] - 0.35 * w[3], 0.15 * w[3]) * f)
        .collect()
}

/// Skin albedo with facial features, wrinkles and eyelids driven by the
/// expression, as a channel-major `[3, n, n]` buffer.
pub fn face_texture(identity: &SyntheticIdentity, w: &Expression) -> Vec<f64> {
    let n = identity.n;
    let v = n * n;
    let mut out = vec![0.0; 3 * v];
    for k in 0..v {
        let (az, el) = face_angles(n, k / n, k % n);
        let mut c = identity.skin;
        let mut mix = |target: [f64; 3], a: f64| {
            let a = a.clamp(0.0, 1.0);
            for i in 0..3 {
                c[i] = c[i] * (1.0 - a) + target[i] * a;
            }
        };
        // forehead wrinkles with raised brows, a crease with the frown
        let wr = 0.5 + 0.5 * (el * 60.0).sin();
        let forehead = gauss2(0.0, el - 0.5, 1.0, 0.12) * (1.0 - smoothstep(0.4, 0.7, az.abs()));
        mix([0.25, 0.15, 0.12], 0.45 * w[2] * forehead * wr);
        mix([0.25, 0.15, 0.12], 0.5 * w[3] * gauss2(az, el - 0.3, 0.05, 0.1));
        for side in [-1.0, 1.0] {
            let eye = gauss2(az - side * 0.36, el - 0.14, 0.11, 0.055);
            let iris = gauss2(az - side * 0.36, el - 0.14, 0.045, 0.045);
            let open = 1.0 - w[4];
            mix([0.95, 0.95, 0.92], 1.6 * eye * open);
            mix([0.12, 0.08, 0.05], 1.8 * iris * open);
            mix([identity.skin[0] * 0.8, identity.skin[1] * 0.7, identity.skin[2] * 0.7], 1.4 * eye * w[4]);
            mix([0.1, 0.07, 0.05], 1.5 * gauss2(az - side * 0.36, el - 0.3, 0.16, 0.03));
            mix([0.5, 0.3, 0.3], 0.4 * w[1] * gauss2(az - side * 0.3, el + 0.32, 0.06, 0.1));
        }
        let lips = gauss2(az, el + 0.42, 0.2, 0.05);
        mix([0.7, 0.25, 0.25], 1.4 * lips);
        mix([0.2, 0.02, 0.04], 1.5 * w[0] * gauss2(az, el + 0.45, 0.14, 0.06));
        for i in 0..3 {
            out[i * v + k] = c[i].clamp(0.0, 1.0);
        }
    }
    out
}

/// Hair albedo with strand streaks, darker at the roots.
pub fn hair_texture(identity: &SyntheticIdentity) -> Vec<f64> {
    let n = identity.n;
    let v = n * n;
    let mut out = vec![0.0; 3 * v];
    for k in 0..v {
        let (az, _) = face_angles(n, 0, k % n);
        let s = (k / n) as f64 / (n - 1) as f64;
        let streak = 0.82 + 0.18 * (az * 23.0).sin() * (az * 7.0).cos();
        let root = 0.75 + 0.25 * smoothstep(0.0, 0.3, s);
        for i in 0..3 {
            out[i * v + k] = (identity.hair_color[i] * streak * root).clamp(0.0, 1.0);
        }
    }
    out
}

/// Single-surface scan: the bald head with hair-covered vertices pushed out
/// onto the wig shell and coloured like hair.
pub fn scan_surface(identity: &SyntheticIdentity, face: &[Vec3], face_tex: &[f64], hair_tex: Option<&[f64]>) -> (Vec<Vec3>, Vec<f64>) {
    let n = identity.n;
    let v = n * n;
    let mask = identity.hair_mask();
    let mut pos = face.to_vec();
    let mut tex = face_tex.to_vec();
    for k in 0..v {
        if !mask[k] {
            continue;
        }
        let (az, el) = face_angles(n, k / n, k % n);
        pos[k] += direction(az, el) * identity.hair_thickness;
        if let Some(ht) = hair_tex {
            // the hair vertex on the same azimuth column
            let el_b = identity.hairline(az);
            let s = ((EL_TOP - el) / (EL_TOP - el_b).max(1e-9) * identity.shell_fraction()).clamp(0.0, 1.0);
            let r = (s * (n - 1) as f64).round() as usize;
            for i in 0..3 {
                tex[i * v + k] = ht[i * v + r * n + k % n];
            }
        }
    }
    (pos, tex)
}
