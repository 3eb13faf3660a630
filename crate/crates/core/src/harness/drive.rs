//! Driving one identity with the expression codes of another.
//!
//! The code of every source frame is encoded from the source's own maps and
//! decoded with the target's neutral assets and the source's pose. When the
//! source is the target this is exactly the evaluation render.

use crate::synth::{pose_frame, render_view, Surfaces};
use crate::tensor::Tensor;

use super::data::{TrainingData, ViewId};
use super::eval::{psnr, reconstruct};
use super::model::{Model, RenderMode, Rendered};
use super::HarnessError;

/// One driven frame.
#[derive(Clone, Debug)]
pub struct DrivenFrame {
    pub frame: usize,
    pub camera: usize,
    pub render: Rendered,
}

/// Renders `target` driven by `source` for the given frames and cameras.
pub fn drive(
    model: &Model,
    data: &TrainingData,
    source: usize,
    target: usize,
    frames: &[usize],
    cameras: &[usize],
    mode: RenderMode,
) -> Result<Vec<DrivenFrame>, HarnessError> {
    let tgt = &data.identities[target];
    tgt.neutral(model.surface())?;
    let mut out = Vec::with_capacity(frames.len() * cameras.len());
    for &t in frames {
        if t >= data.dataset.frames {
            return Err(HarnessError::Data(format!("frame {t} but the performance has {}", data.dataset.frames)));
        }
        let src_frame = &data.frames[source][t];
        let z = model.encode(&data.identities[source], src_frame)?;
        for &c in cameras {
            let camera = data.dataset.rig.cameras.get(c).ok_or_else(|| HarnessError::Data(format!("unknown camera {c}")))?;
            let render = if source == target {
                reconstruct(model, data, ViewId { identity: target, frame: t, camera: c }, mode)?
            } else {
                model.render(tgt, &z, src_frame.eta, src_frame.h, camera, [true, true], mode)?
            };
            out.push(DrivenFrame { frame: t, camera: c, render });
        }
    }
    Ok(out)
}

/// Driven renders scored against the target's ground truth under the
/// source's performance, next to a static baseline.
#[derive(Clone, Debug)]
pub struct ZeroShotReport {
    /// Mean foreground PSNR of the driven renders.
    pub driven_psnr: f64,
    /// Mean foreground PSNR of the target's neutral render (neutral code,
    /// zero pose) repeated for every source frame.
    pub baseline_psnr: f64,
    pub views: usize,
}

impl ZeroShotReport {
    pub fn margin(&self) -> f64 {
        self.driven_psnr - self.baseline_psnr
    }
}

/// Ground truth of `target` performing the source's drivers, rendered from
/// the dataset camera.
pub fn retarget_truth(data: &TrainingData, source: usize, target: usize, frame: usize, camera: usize) -> Result<(Tensor, Tensor), HarnessError> {
    let assets = data.dataset.assets(target);
    let f = &data.frames[source][frame];
    let state = pose_frame(&assets, frame, f.expression, f.eta, f.h, f.lag)?;
    let view = render_view(&assets, &state, &data.dataset.rig.cameras[camera], Surfaces::Layered);
    Ok((view.rgb, view.seg))
}

pub fn zero_shot(
    model: &Model,
    data: &TrainingData,
    source: usize,
    target: usize,
    frames: &[usize],
    cameras: &[usize],
) -> Result<ZeroShotReport, HarnessError> {
    let driven = drive(model, data, source, target, frames, cameras, RenderMode::Mesh)?;
    let neutral_code = model.neutral_code()?;
    let tgt = &data.identities[target];
    let mut baselines = Vec::with_capacity(cameras.len());
    for &c in cameras {
        baselines.push(model.render(tgt, &neutral_code, [0.0; 6], [0.0; 6], &data.dataset.rig.cameras[c], [true, true], RenderMode::Mesh)?);
    }
    let (mut d_sum, mut b_sum, mut n) = (0.0, 0.0, 0usize);
    for d in &driven {
        let (rgb, seg) = retarget_truth(data, source, target, d.frame, d.camera)?;
        let fg: Vec<bool> = seg.data().iter().map(|&v| v > 0.0).collect();
        let ci = cameras.iter().position(|&c| c == d.camera).expect("driven camera");
        match (psnr(&d.render.rgb, &rgb, &fg), psnr(&baselines[ci].rgb, &rgb, &fg)) {
            (Some(p), Some(b)) if p.is_finite() && b.is_finite() => {
                d_sum += p;
                b_sum += b;
                n += 1;
            }
            _ => {}
        }
    }
    if n == 0 {
        return Err(HarnessError::Data("no scorable views for zero-shot driving".into()));
    }
    Ok(ZeroShotReport {
        driven_psnr: d_sum / n as f64,
        baseline_psnr: b_sum / n as f64,
        views: n,
    })
}
