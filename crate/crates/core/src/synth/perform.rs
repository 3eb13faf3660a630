use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{head_camera, neck_rig};
use crate::geomesh::{apply_lbs, rigid_transform, MeshTopology, SkinningRig, Vec3};
use crate::raster::{rasterize, render_aux, Camera, LayerInput, LAYER_NONE};
use crate::tensor::Tensor;

use super::head::{
    direction, face_angles, face_offsets, face_texture, hair_offsets, hair_shell, hair_texture, scan_surface, BaldModel,
    Expression, HairShell, SyntheticIdentity,
};
use super::SynthError;

/// Cameras on a ring around the head, alternating slightly above and
/// below eye level. Camera 0 looks at the face.
#[derive(Clone, Debug)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

pub const HEAD_CENTER: [f64; 3] = [0.0, -1.5, 0.0];

impl CameraRig {
    pub fn ring(count: usize, size: usize, distance: f64, fov_y: f64) -> Self {
        let target = Vec3::from(HEAD_CENTER);
        let cameras = (0..count)
            .map(|i| {
                let az = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                let el = if i % 2 == 0 { 0.12 } else { -0.06 };
                Camera::orbit(target, az, el, distance, fov_y, size)
            })
            .collect();
        Self { cameras }
    }

    /// `key = value` text with one line per calibration field.
    pub fn to_text(&self) -> String {
        let mut s = format!("cameras = {}\n", self.cameras.len());
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ");
        for (i, c) in self.cameras.iter().enumerate() {
            s += &format!("cam{i}.size = {} {}\n", c.width, c.height);
            let k: Vec<f64> = (0..9).map(|j| c.k[(j / 3, j % 3)]).collect();
            let r: Vec<f64> = (0..9).map(|j| c.r[(j / 3, j % 3)]).collect();
            s += &format!("cam{i}.k = {}\n", join(&k));
            s += &format!("cam{i}.r = {}\n", join(&r));
            s += &format!("cam{i}.t = {}\n", join(c.t.as_slice()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SynthError> {
        let kv = super::parse_kv(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| SynthError::Format(format!("rig: missing `{k}`")));
        let nums = |k: &str| -> Result<Vec<f64>, SynthError> {
            get(k)?
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|_| SynthError::Format(format!("rig: bad number in `{k}`"))))
                .collect()
        };
        let count: usize = get("cameras")?.parse().map_err(|_| SynthError::Format("rig: bad camera count".into()))?;
        let mut cameras = Vec::with_capacity(count);
        for i in 0..count {
            let size = nums(&format!("cam{i}.size"))?;
            let k = nums(&format!("cam{i}.k"))?;
            let r = nums(&format!("cam{i}.r"))?;
            let t = nums(&format!("cam{i}.t"))?;
            if size.len() != 2 || k.len() != 9 || r.len() != 9 || t.len() != 3 {
                return Err(SynthError::Format(format!("rig: camera {i} has malformed fields")));
            }
            let cam = Camera::new(
                nalgebra::Matrix3::from_row_slice(&k),
                nalgebra::Matrix3::from_row_slice(&r),
                Vec3::new(t[0], t[1], t[2]),
                size[0] as usize,
                size[1] as usize,
            )?;
            cameras.push(cam);
        }
        Ok(Self { cameras })
    }
}

/// Everything about one identity that does not change over a performance.
#[derive(Clone, Debug)]
pub struct IdentityAssets {
    pub identity: SyntheticIdentity,
    pub mesh: MeshTopology,
    /// Neutral bald head: the dehairing ground truth.
    pub bald: Vec<Vec3>,
    pub face_outward: Vec<Vec3>,
    pub face_tex: Vec<f64>,
    pub hair: Option<HairShell>,
    pub hair_tex: Option<Vec<f64>>,
    /// Neutral single-surface scan and its texture.
    pub scan: Vec<Vec3>,
    pub scan_tex: Vec<f64>,
    pub hair_mask: Vec<bool>,
    pub face_rig: SkinningRig,
    pub hair_rig: Option<SkinningRig>,
}

impl IdentityAssets {
    pub fn new(identity: SyntheticIdentity, model: &BaldModel) -> Self {
        let n = identity.n;
        let bald_flat = identity.bald(model);
        let bald: Vec<Vec3> = bald_flat.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        let face_outward = (0..n * n)
            .map(|k| {
                let (az, el) = face_angles(n, k / n, k % n);
                direction(az, el)
            })
            .collect();
        let neutral = [0.0; 5];
        let face_tex = face_texture(&identity, &neutral);
        let hair = hair_shell(&identity, &bald_flat);
        let hair_tex = hair.as_ref().map(|_| hair_texture(&identity));
        let (scan, scan_tex) = scan_surface(&identity, &bald, &face_tex, hair_tex.as_deref());
        let hair_mask = identity.hair_mask();
        let face_rig = neck_rig(&bald);
        let hair_rig = hair.as_ref().map(|h| neck_rig(&h.positions));
        Self {
            identity,
            mesh: MeshTopology::grid(n, n),
            bald,
            face_outward,
            face_tex,
            hair,
            hair_tex,
            scan,
            scan_tex,
            hair_mask,
            face_rig,
            hair_rig,
        }
    }

    pub fn n(&self) -> usize {
        self.identity.n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerformanceConfig {
    pub frames: usize,
    /// Hair secondary-motion filter constant `α`.
    pub lag_alpha: f64,
    /// Overall scale of the pose random walks.
    pub motion: f64,
}

impl Default for PerformanceConfig {
    fn default() -> Self {
        Self {
            frames: 200,
            lag_alpha: 0.35,
            motion: 1.0,
        }
    }
}

/// One frame of a performance, geometry in the head frame after neck skinning.
#[derive(Clone, Debug)]
pub struct FrameState {
    pub t: usize,
    pub expression: Expression,
    pub eta: [f64; 6],
    pub h: [f64; 6],
    /// Low-passed head pose driving the hair.
    pub lag: [f64; 6],
    pub face: Vec<Vec3>,
    pub hair: Vec<Vec3>,
    pub scan: Vec<Vec3>,
    pub face_tex: Vec<f64>,
    pub hair_tex: Option<Vec<f64>>,
    pub scan_tex: Vec<f64>,
}

/// `lag_t = lag_{t−1} + α (h_t − lag_{t−1})`.
pub fn lag_step(prev: &[f64; 6], h: &[f64; 6], alpha: f64) -> [f64; 6] {
    std::array::from_fn(|i| prev[i] + alpha * (h[i] - prev[i]))
}

/// Builds a frame from its drivers. Hair vertices swing by
/// `s² (lag − h)` about the head origin, where `s` runs from 0 at the crown
/// to 1 at the tips.
pub fn pose_frame(
    assets: &IdentityAssets,
    t: usize,
    expression: Expression,
    eta: [f64; 6],
    h: [f64; 6],
    lag: [f64; 6],
) -> Result<FrameState, SynthError> {
    let poses = [[0.0; 6], eta];
    let offs = face_offsets(assets.n(), &expression);
    let face_rest: Vec<Vec3> = assets.bald.iter().zip(&offs).map(|(p, d)| p + d).collect();
    let face = apply_lbs(&face_rest, &assets.face_rig, &poses)?;
    let face_tex = face_texture(&assets.identity, &expression);

    let hair = match (&assets.hair, &assets.hair_rig) {
        (Some(shell), Some(rig)) => {
            let ho = hair_offsets(shell, &expression);
            let swung: Vec<Vec3> = shell
                .positions
                .iter()
                .zip(&ho)
                .zip(&shell.strand)
                .map(|((p, d), &s)| {
                    let w = s * s;
                    let delta: [f64; 6] = std::array::from_fn(|i| w * (lag[i] - h[i]));
                    rigid_transform(&delta, Vec3::zeros()).apply(&(p + d))
                })
                .collect();
            apply_lbs(&swung, rig, &poses)?
        }
        _ => Vec::new(),
    };
    let (scan_rest, scan_tex) = scan_surface(&assets.identity, &face_rest, &face_tex, assets.hair_tex.as_deref());
    let scan = apply_lbs(&scan_rest, &assets.face_rig, &poses)?;
    Ok(FrameState {
        t,
        expression,
        eta,
        h,
        lag,
        face,
        hair,
        scan,
        face_tex,
        hair_tex: assets.hair_tex.clone(),
        scan_tex,
    })
}

struct Walk {
    theta: f64,
    sigma: f64,
    lo: f64,
    hi: f64,
    mean: f64,
}

impl Walk {
    fn step(&self, x: f64, rng: &mut ChaCha8Rng) -> f64 {
        let e: f64 = StandardNormal.sample(rng);
        (x + self.theta * (self.mean - x) + self.sigma * e).clamp(self.lo, self.hi)
    }
}

/// Smooth random walks over expression, neck and head pose. Frame 0 is
/// neutral with zero pose.
pub fn generate_performance(assets: &IdentityAssets, cfg: &PerformanceConfig, seed: u64) -> Result<Vec<FrameState>, SynthError> {
    if cfg.frames == 0 {
        return Err(SynthError::Config("frames must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00fa_ce00);
    let m = cfg.motion;
    let expr_walk = Walk { theta: 0.2, sigma: 0.18, lo: 0.0, hi: 1.0, mean: 0.25 };
    let rot = |s: f64, lim: f64| Walk { theta: 0.12, sigma: s * m, lo: -lim * m, hi: lim * m, mean: 0.0 };
    let h_walk = [rot(0.05, 0.3), rot(0.09, 0.6), rot(0.03, 0.15), rot(0.12, 1.0), rot(0.12, 1.0), rot(0.12, 1.0)];
    let eta_walk = [rot(0.03, 0.2), rot(0.03, 0.2), rot(0.02, 0.1), rot(0.05, 0.4), rot(0.05, 0.4), rot(0.05, 0.4)];
    let mut e = [0.0; 5];
    let mut h = [0.0; 6];
    let mut eta = [0.0; 6];
    let mut lag = h;
    let mut out = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            for v in e.iter_mut() {
                *v = expr_walk.step(*v, &mut rng);
            }
            for (v, w) in h.iter_mut().zip(&h_walk) {
                *v = w.step(*v, &mut rng);
            }
            for (v, w) in eta.iter_mut().zip(&eta_walk) {
                *v = w.step(*v, &mut rng);
            }
            lag = lag_step(&lag, &h, cfg.lag_alpha);
        }
        out.push(pose_frame(assets, t, e, eta, h, lag)?);
    }
    Ok(out)
}

/// Ground truth for one camera.
#[derive(Clone, Debug)]
pub struct ViewRecord {
    pub rgb: Tensor,
    /// Camera-space depth, 0 on background.
    pub depth: Tensor,
    /// Layer id per pixel: 0 background, 1 face, 2 hair.
    pub seg: Tensor,
    /// Camera-space unit normals of the visible surface.
    pub normals: Tensor,
}

pub const LIGHT_DIR: [f64; 3] = [0.35, 0.55, 0.75];
pub const AMBIENT: f64 = 0.35;

/// Grid-difference vertex normals, turned to agree with `outward`.
pub fn vertex_normals(p: &[Vec3], n: usize, outward: &[Vec3]) -> Vec<Vec3> {
    (0..n * n)
        .map(|k| {
            let (r, c) = (k / n, k % n);
            let du = p[r * n + (c + 1).min(n - 1)] - p[r * n + c.saturating_sub(1)];
            let dv = p[(r + 1).min(n - 1) * n + c] - p[r.saturating_sub(1) * n + c];
            let nv = du.cross(&dv);
            let len = nv.norm();
            if len < 1e-9 {
                return outward[k];
            }
            let nv = nv / len;
            if nv.dot(&outward[k]) < 0.0 {
                -nv
            } else {
                nv
            }
        })
        .collect()
}

fn shaded(albedo: &[f64], normals: &[Vec3], light: &Vec3) -> Vec<[f64; 3]> {
    let v = normals.len();
    (0..v)
        .map(|k| {
            let s = AMBIENT + (1.0 - AMBIENT) * normals[k].dot(light).max(0.0);
            [albedo[k] * s, albedo[v + k] * s, albedo[2 * v + k] * s]
        })
        .collect()
}

/// Which surfaces to render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surfaces {
    /// Face and hair layers.
    Layered,
    /// The single scan surface in the face slot.
    Scan,
}

pub fn render_view(assets: &IdentityAssets, state: &FrameState, cam: &Camera, which: Surfaces) -> ViewRecord {
    let n = assets.n();
    let hc = head_camera(cam, &state.h);
    let rot = rigid_transform(&state.h, Vec3::zeros()).m;
    let light = rot.transpose() * Vec3::from(LIGHT_DIR).normalize();
    let faces = assets.mesh.faces();
    let empty: Vec<Vec3> = Vec::new();
    let no_faces: Vec<[usize; 3]> = Vec::new();

    let (face_pos, face_tex) = match which {
        Surfaces::Layered => (&state.face, &state.face_tex),
        Surfaces::Scan => (&state.scan, &state.scan_tex),
    };
    let mut colors = vec![shaded(face_tex, &vertex_normals(face_pos, n, &assets.face_outward), &light)];
    let hair_pos = match (which, &assets.hair, &state.hair_tex) {
        (Surfaces::Layered, Some(shell), Some(tex)) if !state.hair.is_empty() => {
            colors.push(shaded(tex, &vertex_normals(&state.hair, n, &shell.outward), &light));
            &state.hair
        }
        _ => &empty,
    };
    let layers = [
        LayerInput { positions: face_pos, faces },
        LayerInput {
            positions: hair_pos,
            faces: if hair_pos.is_empty() { &no_faces } else { faces },
        },
    ];
    let frags = rasterize(&layers, &hc);
    let (depth, normals) = render_aux(&frags, &layers, &hc);
    let hw = hc.pixels();
    let mut rgb = vec![0.0; 3 * hw];
    let mut seg = vec![0.0; hw];
    for (i, f) in frags.frags.iter().enumerate() {
        if f.layer == LAYER_NONE {
            continue;
        }
        seg[i] = f64::from(f.layer);
        let tri = faces[f.face as usize];
        let col = &colors[f.layer as usize - 1];
        for ch in 0..3 {
            rgb[ch * hw + i] = (0..3).map(|k| f.bary[k] * col[tri[k]][ch]).sum();
        }
    }
    let (h, w) = (hc.height, hc.width);
    ViewRecord {
        rgb: Tensor::new(vec![3, h, w], rgb).expect("sized"),
        depth: Tensor::new(vec![h, w], depth).expect("sized"),
        seg: Tensor::new(vec![h, w], seg).expect("sized"),
        normals: Tensor::new(vec![3, h, w], normals).expect("sized"),
    }
}
