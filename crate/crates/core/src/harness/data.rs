use std::path::Path;

use crate::codec::NeutralAssets;
use crate::geomesh::{apply_lbs, to_points, Vec3};
use crate::synth::head::face_angles;
use crate::synth::{points_to_image, Dataset, FrameData, ViewRecord};
use crate::tensor::Tensor;

use super::config::SplitConfig;
use super::HarnessError;

/// Elevation above which a bald head counts as scalp.
const SCALP_ELEVATION: f64 = 0.55;

/// How the layers of the model map onto the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    /// Separate face (dehaired) and hair layers.
    Layered,
    /// One mesh following the hairy scan.
    Single,
}

/// Neutral assets and masks of one identity.
#[derive(Clone, Debug)]
pub struct IdentityData {
    pub name: String,
    pub index: usize,
    pub has_hair: bool,
    /// Neutral texture with the dehaired geometry; `None` until the dehair
    /// step has run.
    pub face: Option<NeutralAssets>,
    pub hair: Option<NeutralAssets>,
    pub scan: NeutralAssets,
    pub hair_mask: Vec<bool>,
    /// 1 on facial vertices, 0 on the scalp, for the Gaussian delta penalty.
    pub face_mask: Vec<f64>,
    pub bald_truth: Tensor,
}

impl IdentityData {
    /// Assets of the model's face slot and optional hair slot.
    pub fn neutral(&self, surface: Surface) -> Result<(&NeutralAssets, Option<&NeutralAssets>), HarnessError> {
        match surface {
            Surface::Single => Ok((&self.scan, None)),
            Surface::Layered => {
                let face = self.face.as_ref().ok_or_else(|| {
                    HarnessError::Data(format!("{} has no dehaired face geometry; run the dehair step first", self.name))
                })?;
                Ok((face, self.hair.as_ref()))
            }
        }
    }
}

/// Current maps and tracking targets of one frame.
#[derive(Clone, Debug)]
pub struct FrameMaps {
    pub face: NeutralAssets,
    pub hair: Option<NeutralAssets>,
    pub scan: NeutralAssets,
    pub track_face: Tensor,
    pub track_hair: Option<Tensor>,
    pub track_scan: Tensor,
    pub expression: [f64; 5],
    pub eta: [f64; 6],
    pub h: [f64; 6],
    pub lag: [f64; 6],
}

impl FrameMaps {
    fn from_frame(fd: FrameData, n: usize) -> Result<Self, HarnessError> {
        let image = |t: &Tensor| points_to_image(&to_points(t), n);
        let hair = match (&fd.tex_hair, &fd.track_hair) {
            (Some(tex), Some(track)) => Some(NeutralAssets::new(tex.clone(), image(track))?),
            _ => None,
        };
        Ok(Self {
            face: NeutralAssets::new(fd.tex_face.clone(), image(&fd.track_face))?,
            hair,
            scan: NeutralAssets::new(fd.tex_scan.clone(), image(&fd.track_scan))?,
            track_face: fd.track_face,
            track_hair: fd.track_hair,
            track_scan: fd.track_scan,
            expression: fd.expression,
            eta: fd.eta,
            h: fd.h,
            lag: fd.lag,
        })
    }

    pub fn current(&self, surface: Surface) -> (&NeutralAssets, Option<&NeutralAssets>) {
        match surface {
            Surface::Single => (&self.scan, None),
            Surface::Layered => (&self.face, self.hair.as_ref()),
        }
    }

    pub fn tracks(&self, surface: Surface) -> (&Tensor, Option<&Tensor>) {
        match surface {
            Surface::Single => (&self.track_scan, None),
            Surface::Layered => (&self.track_face, self.track_hair.as_ref()),
        }
    }
}

/// One training or evaluation view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ViewId {
    pub identity: usize,
    pub frame: usize,
    pub camera: usize,
}

/// Frames `[0, train_frames)` train; the rest are held out. Held-out cameras
/// never train.
#[derive(Clone, Debug)]
pub struct Split {
    pub train_frames: usize,
    pub frames: usize,
    pub train_cameras: Vec<usize>,
    pub test_cameras: Vec<usize>,
}

impl Split {
    pub fn new(cfg: &SplitConfig, frames: usize, cameras: usize) -> Result<Self, HarnessError> {
        if let Some(&c) = cfg.heldout_cameras.iter().find(|&&c| c >= cameras) {
            return Err(HarnessError::Data(format!("held-out camera {c} but the rig has {cameras}")));
        }
        let test = ((frames as f64) * cfg.heldout_fraction).ceil() as usize;
        let train_frames = frames - test.min(frames.saturating_sub(1));
        let train_cameras: Vec<usize> = (0..cameras).filter(|c| !cfg.heldout_cameras.contains(c)).collect();
        if train_cameras.is_empty() {
            return Err(HarnessError::Data("every camera is held out".into()));
        }
        Ok(Self {
            train_frames,
            frames,
            train_cameras,
            test_cameras: cfg.heldout_cameras.clone(),
        })
    }

    pub fn test_frames(&self) -> std::ops::Range<usize> {
        self.train_frames..self.frames
    }
}

/// The dataset in memory: neutral assets of every identity and the maps of
/// every frame. Images stay on disk and are read per view.
pub struct TrainingData {
    pub dataset: Dataset,
    pub identities: Vec<IdentityData>,
    pub frames: Vec<Vec<FrameMaps>>,
}

fn io_err(e: crate::synth::SynthError) -> HarnessError {
    HarnessError::Synth(e)
}

impl TrainingData {
    pub fn open(root: &Path) -> Result<Self, HarnessError> {
        let dataset = Dataset::open(root).map_err(io_err)?;
        let n = dataset.geo_res;
        let mut identities = Vec::new();
        let mut frames = Vec::new();
        for (i, entry) in dataset.identities.iter().enumerate() {
            let ns = dataset.neutral(i).map_err(io_err)?;
            let hair_mask: Vec<bool> = ns.hair_mask.data().iter().map(|&m| m > 0.5).collect();
            let face_mask = if entry.has_hair() {
                hair_mask.iter().map(|&h| if h { 0.0 } else { 1.0 }).collect()
            } else {
                (0..n * n)
                    .map(|k| if face_angles(n, k / n, k % n).1 >= SCALP_ELEVATION { 0.0 } else { 1.0 })
                    .collect()
            };
            let face = match &ns.geo_face {
                Some(g) => Some(NeutralAssets::new(ns.tex_face.clone(), g.clone())?),
                None => None,
            };
            let hair = match (&ns.tex_hair, &ns.geo_hair) {
                (Some(t), Some(g)) => Some(NeutralAssets::new(t.clone(), g.clone())?),
                _ => None,
            };
            identities.push(IdentityData {
                name: entry.name.clone(),
                index: i,
                has_hair: entry.has_hair(),
                face,
                hair,
                scan: NeutralAssets::new(ns.tex_scan.clone(), ns.geo_scan.clone())?,
                hair_mask,
                face_mask,
                bald_truth: ns.bald_truth,
            });
            let per: Result<Vec<FrameMaps>, HarnessError> = (0..dataset.frames)
                .map(|t| FrameMaps::from_frame(dataset.frame(i, t).map_err(io_err)?, n))
                .collect();
            frames.push(per?);
        }
        Ok(Self { dataset, identities, frames })
    }

    pub fn geo_res(&self) -> usize {
        self.dataset.geo_res
    }

    pub fn index_of(&self, name: &str) -> Result<usize, HarnessError> {
        self.dataset
            .identity_index(name)
            .ok_or_else(|| HarnessError::Data(format!("unknown identity {name:?}")))
    }

    /// Identity by directory name or numeric index.
    pub fn resolve(&self, key: &str) -> Result<usize, HarnessError> {
        if let Ok(i) = self.index_of(key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.identities.len() => Ok(i),
            _ => Err(HarnessError::Data(format!("unknown identity {key:?}"))),
        }
    }

    pub fn view(&self, v: ViewId) -> Result<ViewRecord, HarnessError> {
        self.dataset.view(v.identity, v.frame, v.camera).map_err(io_err)
    }

    /// Dehaired neutral face skinned to the frame's neck pose, `[V,3]`; the
    /// dehair loss pulls the scalp of the decoded face towards it.
    pub fn bald_target(&self, identity: usize, frame: usize) -> Result<Tensor, HarnessError> {
        let id = &self.identities[identity];
        let face = id.neutral(Surface::Layered)?.0;
        let rest = to_points_image(&face.geo);
        let rig = crate::codec::neck_rig(&rest);
        let eta = self.frames[identity][frame].eta;
        let posed = apply_lbs(&rest, &rig, &[[0.0; 6], eta])?;
        Ok(crate::geomesh::from_points(&posed))
    }
}

fn to_points_image(geo: &Tensor) -> Vec<Vec3> {
    crate::codec::image_points(geo)
}
