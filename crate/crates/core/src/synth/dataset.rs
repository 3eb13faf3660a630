//! On-disk layout:
//!
//! ```text
//! <root>/manifest.txt, rig.txt
//! <root>/<identity>/identity.txt
//! <root>/<identity>/neutral/{T,G}_{face,hair}.lten, G_scan.lten, T_scan.lten,
//!                           hair_mask.lten, G_bald_truth.lten
//! <root>/<identity>/frames/<t>/cam<i>_{rgb,depth,seg,normal}.lten,
//!                              track_{face,hair,scan}.obj, T_{face,hair,scan}.lten, pose.txt
//! <root>/reference/ref<k>/G_scan.lten
//! ```
//!
//! `G_face.lten` is the dehaired neutral head. The generator does not write
//! it: the dehair step derives it from the neutral scan and hair mask. Bald
//! identities have no hair files and an empty hair track.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geomesh::{read_obj, write_obj, MeshTopology, Vec3};
use crate::lten;
use crate::tensor::{DType, Tensor};

use super::head::{generate_identity, BaldModel, WigStyle};
use super::perform::{generate_performance, render_view, CameraRig, FrameState, IdentityAssets, PerformanceConfig, Surfaces, ViewRecord};
use super::{parse_kv, SynthError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySpec {
    pub seed: u64,
    #[serde(default)]
    pub style: Option<WigStyle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub geo_res: usize,
    pub image_size: usize,
    pub cameras: usize,
    pub distance: f64,
    pub fov: f64,
    pub seed: u64,
    pub identities: Vec<IdentitySpec>,
    /// Extra bald neutral scans (no performance) that seed the dehairing model.
    pub reference_bald: usize,
    pub performance: PerformanceConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            geo_res: 32,
            image_size: 64,
            cameras: 8,
            distance: 48.0,
            fov: 0.62,
            seed: 0,
            identities: (0..4).map(|s| IdentitySpec { seed: s, style: None }).collect(),
            reference_bald: 20,
            performance: PerformanceConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.geo_res < 4 {
            return Err(SynthError::Config("geo_res must be at least 4".into()));
        }
        if self.image_size < 8 || self.cameras == 0 || self.identities.is_empty() {
            return Err(SynthError::Config("need image_size >= 8, at least one camera and one identity".into()));
        }
        if self.performance.frames == 0 {
            return Err(SynthError::Config("performance.frames must be at least 1".into()));
        }
        if !(self.performance.lag_alpha > 0.0 && self.performance.lag_alpha <= 1.0) {
            return Err(SynthError::Config("performance.lag_alpha must lie in (0, 1]".into()));
        }
        let p = &self.performance;
        if !(p.motion >= 0.0 && p.motion.is_finite()) {
            return Err(SynthError::Config("performance.motion must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig::ring(self.cameras, self.image_size, self.distance, self.fov)
    }
}

/// Reference scans use their own seed range, one population block apart
/// from typical identity seeds.
pub const REFERENCE_SEED_BASE: u64 = 1000;

pub fn identity_name(index: usize) -> String {
    format!("id{index:03}")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn save(path: &Path, t: &Tensor, dtype: DType) -> Result<(), SynthError> {
    lten::save(path, t, dtype).map_err(|e| match e {
        lten::LtenError::Io(source) => SynthError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other.into(),
    })
}

fn load(path: &Path) -> Result<Tensor, SynthError> {
    lten::load(path).map_err(|e| match e {
        lten::LtenError::Io(source) => SynthError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other.into(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), SynthError> {
    fs::write(path, text).map_err(io(path))
}

fn read_text(path: &Path) -> Result<String, SynthError> {
    fs::read_to_string(path).map_err(io(path))
}

/// `[3,n,n]` channel-major geometry image from grid-ordered points.
pub fn points_to_image(p: &[Vec3], n: usize) -> Tensor {
    let v = n * n;
    Tensor::from_fn(&[3, n, n], |i| p[i % v][i / v])
}

pub fn image_to_points(t: &Tensor) -> Vec<Vec3> {
    crate::codec::image_points(t)
}

fn points_tensor(p: &[Vec3]) -> Tensor {
    Tensor::new(vec![p.len(), 3], p.iter().flat_map(|v| [v.x, v.y, v.z]).collect()).expect("sized")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn parse_nums(kv: &BTreeMap<String, String>, key: &str, len: usize, file: &Path) -> Result<Vec<f64>, SynthError> {
    let bad = || SynthError::Format(format!("{}: bad or missing `{key}`", file.display()));
    let v: Vec<f64> = kv
        .get(key)
        .ok_or_else(bad)?
        .split_whitespace()
        .map(|x| x.parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    if v.len() != len {
        return Err(bad());
    }
    Ok(v)
}

/// Seed of an identity's performance, from the dataset seed and the
/// identity seed.
pub fn performance_seed(dataset_seed: u64, identity_seed: u64) -> u64 {
    dataset_seed.wrapping_mul(1000).wrapping_add(identity_seed)
}

#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub identities: Vec<String>,
    pub frames: usize,
    pub views: usize,
}

/// Writes a frame's tracks, textures and drivers (no images).
fn write_frame_meta(dir: &Path, state: &FrameState, assets: &IdentityAssets) -> Result<(), SynthError> {
    let n = assets.n();
    write_text(&dir.join("track_face.obj"), &write_obj(&state.face, &assets.mesh))?;
    let hair_mesh = if state.hair.is_empty() { MeshTopology::empty() } else { assets.mesh.clone() };
    write_text(&dir.join("track_hair.obj"), &write_obj(&state.hair, &hair_mesh))?;
    write_text(&dir.join("track_scan.obj"), &write_obj(&state.scan, &assets.mesh))?;
    let tex = |v: &[f64]| Tensor::new(vec![3, n, n], v.to_vec()).expect("sized");
    save(&dir.join("T_face.lten"), &tex(&state.face_tex), DType::F32)?;
    save(&dir.join("T_scan.lten"), &tex(&state.scan_tex), DType::F32)?;
    if let Some(ht) = &state.hair_tex {
        save(&dir.join("T_hair.lten"), &tex(ht), DType::F32)?;
    }
    let pose = format!(
        "expression = {}\neta = {}\nh = {}\nlag = {}\n",
        join(&state.expression),
        join(&state.eta),
        join(&state.h),
        join(&state.lag)
    );
    write_text(&dir.join("pose.txt"), &pose)
}

fn write_view(dir: &Path, cam: usize, v: &ViewRecord) -> Result<(), SynthError> {
    save(&dir.join(format!("cam{cam}_rgb.lten")), &v.rgb, DType::F32)?;
    save(&dir.join(format!("cam{cam}_depth.lten")), &v.depth, DType::F64)?;
    save(&dir.join(format!("cam{cam}_seg.lten")), &v.seg, DType::F32)?;
    save(&dir.join(format!("cam{cam}_normal.lten")), &v.normals, DType::F32)
}

fn write_identity_meta(dir: &Path, assets: &IdentityAssets) -> Result<(), SynthError> {
    let id = &assets.identity;
    let text = format!(
        "id = {}\nseed = {}\nstyle = {}\nbald_coeffs = {}\nhair_thickness = {}\nhair_length = {}\nskin = {}\nhair_color = {}\n",
        id.id,
        id.seed,
        id.style.name(),
        join(&id.bald_coeffs),
        id.hair_thickness,
        id.hair_length,
        join(&id.skin),
        join(&id.hair_color)
    );
    write_text(&dir.join("identity.txt"), &text)
}

fn write_neutral(dir: &Path, assets: &IdentityAssets) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let n = assets.n();
    let tex = |v: &[f64]| Tensor::new(vec![3, n, n], v.to_vec()).expect("sized");
    save(&dir.join("T_face.lten"), &tex(&assets.face_tex), DType::F32)?;
    save(&dir.join("G_bald_truth.lten"), &points_to_image(&assets.bald, n), DType::F64)?;
    save(&dir.join("G_scan.lten"), &points_to_image(&assets.scan, n), DType::F64)?;
    save(&dir.join("T_scan.lten"), &tex(&assets.scan_tex), DType::F32)?;
    let mask = Tensor::from_fn(&[n, n], |i| f64::from(u8::from(assets.hair_mask[i])));
    save(&dir.join("hair_mask.lten"), &mask, DType::F32)?;
    if let (Some(shell), Some(ht)) = (&assets.hair, &assets.hair_tex) {
        save(&dir.join("G_hair.lten"), &points_to_image(&shell.positions, n), DType::F64)?;
        save(&dir.join("T_hair.lten"), &tex(ht), DType::F32)?;
    }
    Ok(())
}

/// Generates every identity and frame and writes the dataset under `root`.
pub fn write_dataset(root: &Path, cfg: &SynthConfig) -> Result<DatasetSummary, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(io(root))?;
    let rig = cfg.rig();
    let model = BaldModel::new(cfg.geo_res);
    let mut names = Vec::new();
    let mut views = 0;
    for (index, spec) in cfg.identities.iter().enumerate() {
        let name = identity_name(index);
        let dir = root.join(&name);
        let identity = generate_identity(index, spec.seed, cfg.geo_res, spec.style);
        let assets = IdentityAssets::new(identity, &model);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        write_identity_meta(&dir, &assets)?;
        write_neutral(&dir.join("neutral"), &assets)?;
        let perf_seed = performance_seed(cfg.seed, spec.seed);
        let frames = generate_performance(&assets, &cfg.performance, perf_seed)?;
        for state in &frames {
            let fdir = dir.join("frames").join(format!("{:04}", state.t));
            fs::create_dir_all(&fdir).map_err(io(&fdir))?;
            write_frame_meta(&fdir, state, &assets)?;
            for (c, cam) in rig.cameras.iter().enumerate() {
                write_view(&fdir, c, &render_view(&assets, state, cam, Surfaces::Layered))?;
                views += 1;
            }
        }
        names.push(name);
    }
    let refdir = root.join("reference");
    for k in 0..cfg.reference_bald {
        let identity = generate_identity(k, REFERENCE_SEED_BASE + k as u64, cfg.geo_res, Some(WigStyle::None));
        let bald: Vec<Vec3> = identity.bald(&model).chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        let d = refdir.join(format!("ref{k:03}"));
        fs::create_dir_all(&d).map_err(io(&d))?;
        save(&d.join("G_scan.lten"), &points_to_image(&bald, cfg.geo_res), DType::F64)?;
    }
    let manifest = format!(
        "format = lucas-synth-1\ngeo_res = {}\nimage_size = {}\ncameras = {}\nframes = {}\nidentities = {}\nreference_bald = {}\nlag_alpha = {}\nseed = {}\n",
        cfg.geo_res,
        cfg.image_size,
        cfg.cameras,
        cfg.performance.frames,
        names.join(" "),
        cfg.reference_bald,
        cfg.performance.lag_alpha,
        cfg.seed
    );
    write_text(&root.join("manifest.txt"), &manifest)?;
    write_text(&root.join("rig.txt"), &rig.to_text())?;
    Ok(DatasetSummary {
        identities: names,
        frames: cfg.performance.frames,
        views,
    })
}

#[derive(Clone, Debug)]
pub struct IdentityEntry {
    pub name: String,
    pub dir: PathBuf,
    pub style: WigStyle,
    pub seed: u64,
    pub bald_coeffs: Vec<f64>,
}

impl IdentityEntry {
    pub fn has_hair(&self) -> bool {
        self.style != WigStyle::None
    }
}

/// Neutral maps of one identity. Textures and geometry are `[3,n,n]`.
#[derive(Clone, Debug)]
pub struct NeutralSet {
    pub tex_face: Tensor,
    /// Dehaired neutral head, once the dehair step has run.
    pub geo_face: Option<Tensor>,
    pub tex_hair: Option<Tensor>,
    pub geo_hair: Option<Tensor>,
    pub geo_scan: Tensor,
    pub tex_scan: Tensor,
    /// `[n,n]`, 1 on face vertices under hair.
    pub hair_mask: Tensor,
    /// Evaluation only: the generator's bald head.
    pub bald_truth: Tensor,
}

/// Per-frame tracks (`[V,3]`, head frame after neck skinning), current
/// texture maps and drivers.
#[derive(Clone, Debug)]
pub struct FrameData {
    pub track_face: Tensor,
    pub track_hair: Option<Tensor>,
    pub track_scan: Tensor,
    pub tex_face: Tensor,
    pub tex_hair: Option<Tensor>,
    pub tex_scan: Tensor,
    pub expression: [f64; 5],
    pub eta: [f64; 6],
    pub h: [f64; 6],
    pub lag: [f64; 6],
}

/// Read access to a generated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub geo_res: usize,
    pub image_size: usize,
    pub frames: usize,
    pub rig: CameraRig,
    pub identities: Vec<IdentityEntry>,
    pub reference_bald: usize,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, SynthError> {
        let mpath = root.join("manifest.txt");
        let kv = parse_kv(&read_text(&mpath)?)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| SynthError::Format(format!("{}: missing `{k}`", mpath.display())));
        if get("format")? != "lucas-synth-1" {
            return Err(SynthError::Format(format!("{}: unknown format", mpath.display())));
        }
        let num = |k: &str| -> Result<usize, SynthError> {
            get(k)?
                .parse()
                .map_err(|_| SynthError::Format(format!("{}: bad `{k}`", mpath.display())))
        };
        let (geo_res, image_size, cameras, frames) = (num("geo_res")?, num("image_size")?, num("cameras")?, num("frames")?);
        let reference_bald = num("reference_bald")?;
        let rig = CameraRig::from_text(&read_text(&root.join("rig.txt"))?)?;
        if rig.cameras.len() != cameras || rig.cameras.iter().any(|c| c.width != image_size || c.height != image_size) {
            return Err(SynthError::Format("rig.txt disagrees with manifest".into()));
        }
        let mut identities = Vec::new();
        for name in get("identities")?.split_whitespace() {
            let dir = root.join(name);
            let ipath = dir.join("identity.txt");
            let ikv = parse_kv(&read_text(&ipath)?)?;
            let style = ikv
                .get("style")
                .and_then(|s| WigStyle::parse(s))
                .ok_or_else(|| SynthError::Format(format!("{}: bad style", ipath.display())))?;
            let seed = ikv
                .get("seed")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| SynthError::Format(format!("{}: bad seed", ipath.display())))?;
            let bald_coeffs = parse_nums(&ikv, "bald_coeffs", super::BALD_K, &ipath)?;
            if !dir.join("frames").join("0000").join("cam0_rgb.lten").exists() {
                return Err(SynthError::Format(format!("{name}: frame 0 is missing")));
            }
            identities.push(IdentityEntry {
                name: name.to_string(),
                dir,
                style,
                seed,
                bald_coeffs,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            geo_res,
            image_size,
            frames,
            rig,
            identities,
            reference_bald,
        })
    }

    /// Neutral geometry images `[3,n,n]` of the bald reference scans.
    pub fn reference_scans(&self) -> Result<Vec<Tensor>, SynthError> {
        (0..self.reference_bald)
            .map(|k| load(&self.root.join("reference").join(format!("ref{k:03}")).join("G_scan.lten")))
            .collect()
    }

    pub fn identity_index(&self, name: &str) -> Option<usize> {
        self.identities.iter().position(|e| e.name == name)
    }

    pub fn neutral(&self, i: usize) -> Result<NeutralSet, SynthError> {
        let e = &self.identities[i];
        let d = e.dir.join("neutral");
        let opt = |f: &str| -> Result<Option<Tensor>, SynthError> {
            let p = d.join(f);
            if p.exists() {
                load(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(NeutralSet {
            tex_face: load(&d.join("T_face.lten"))?,
            geo_face: opt("G_face.lten")?,
            tex_hair: opt("T_hair.lten")?,
            geo_hair: opt("G_hair.lten")?,
            geo_scan: load(&d.join("G_scan.lten"))?,
            tex_scan: load(&d.join("T_scan.lten"))?,
            hair_mask: load(&d.join("hair_mask.lten"))?,
            bald_truth: load(&d.join("G_bald_truth.lten"))?,
        })
    }

    /// Stores the dehaired neutral head of identity `i`.
    pub fn write_dehaired(&self, i: usize, geo: &Tensor) -> Result<(), SynthError> {
        save(&self.identities[i].dir.join("neutral").join("G_face.lten"), geo, DType::F64)
    }

    fn frame_dir(&self, i: usize, t: usize) -> PathBuf {
        self.identities[i].dir.join("frames").join(format!("{t:04}"))
    }

    pub fn frame(&self, i: usize, t: usize) -> Result<FrameData, SynthError> {
        let d = self.frame_dir(i, t);
        let track = |f: &str| -> Result<Tensor, SynthError> {
            let p = d.join(f);
            let (pts, _) = read_obj(&read_text(&p)?)?;
            Ok(points_tensor(&pts))
        };
        let hair = track("track_hair.obj")?;
        let has_hair = hair.shape()[0] > 0;
        let ppath = d.join("pose.txt");
        let kv = parse_kv(&read_text(&ppath)?)?;
        let arr5 = parse_nums(&kv, "expression", 5, &ppath)?;
        let eta = parse_nums(&kv, "eta", 6, &ppath)?;
        let h = parse_nums(&kv, "h", 6, &ppath)?;
        let lag = parse_nums(&kv, "lag", 6, &ppath)?;
        Ok(FrameData {
            track_face: track("track_face.obj")?,
            track_hair: has_hair.then_some(hair),
            track_scan: track("track_scan.obj")?,
            tex_face: load(&d.join("T_face.lten"))?,
            tex_hair: if has_hair { Some(load(&d.join("T_hair.lten"))?) } else { None },
            tex_scan: load(&d.join("T_scan.lten"))?,
            expression: std::array::from_fn(|k| arr5[k]),
            eta: std::array::from_fn(|k| eta[k]),
            h: std::array::from_fn(|k| h[k]),
            lag: std::array::from_fn(|k| lag[k]),
        })
    }

    pub fn view(&self, i: usize, t: usize, cam: usize) -> Result<ViewRecord, SynthError> {
        let d = self.frame_dir(i, t);
        Ok(ViewRecord {
            rgb: load(&d.join(format!("cam{cam}_rgb.lten")))?,
            depth: load(&d.join(format!("cam{cam}_depth.lten")))?,
            seg: load(&d.join(format!("cam{cam}_seg.lten")))?,
            normals: load(&d.join(format!("cam{cam}_normal.lten")))?,
        })
    }

    /// Rebuilds the generator assets of identity `i` from its recorded seed,
    /// style and resolution.
    pub fn assets(&self, i: usize) -> IdentityAssets {
        let e = &self.identities[i];
        let identity = generate_identity(i, e.seed, self.geo_res, Some(e.style));
        IdentityAssets::new(identity, &BaldModel::new(self.geo_res))
    }
}
