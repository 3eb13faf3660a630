//! Foreground-restricted image metrics and held-out evaluation.
//!
//! PSNR is `10 log10(1 / MSE)` over the foreground pixels of all three
//! channels. Identical images have zero error and report
//! [`PSNR_IDENTICAL`] (`+∞`), printed as `inf`.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) with `C1 = 0.01²` and
//! `C2 = 0.03²`. Near the border the window is cut to the image and
//! renormalised. The SSIM map is averaged over foreground pixels and channels.

use crate::raster::LAYER_HAIR;
use crate::tensor::Tensor;

use super::data::{Split, TrainingData, ViewId};
use super::model::{Model, RenderMode, Rendered};
use super::train::training_identities;
use super::HarnessError;

pub const PSNR_IDENTICAL: f64 = f64::INFINITY;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR of `[C,H,W]` images over the pixels where `mask` is set.
/// `None` when the mask is empty.
pub fn psnr(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Option<f64> {
    let hw = mask.len();
    let c = pred.numel() / hw;
    let mut se = 0.0;
    let mut n = 0usize;
    for ch in 0..c {
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let d = pred.data()[ch * hw + i] - gt.data()[ch * hw + i];
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let mse = se / n as f64;
    Some(if mse == 0.0 { PSNR_IDENTICAL } else { -10.0 * mse.log10() })
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let x = k as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable windowed mean with per-pixel renormalisation at the border.
fn blur(x: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for xx in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for k in -r..=r {
                    let (sx, sy) = if horizontal { (xx as isize + k, y as isize) } else { (xx as isize, y as isize + k) };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    let t = taps[(k + r) as usize];
                    acc += t * src[sy as usize * w + sx as usize];
                    norm += t;
                }
                out[y * w + xx] = acc / norm;
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

/// Mean SSIM over the masked pixels of `[C,H,W]` images.
pub fn ssim(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Option<f64> {
    let s = pred.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return None;
    }
    let taps = gaussian_taps();
    let mut total = 0.0;
    for ch in 0..c {
        let x = &pred.data()[ch * hw..(ch + 1) * hw];
        let y = &gt.data()[ch * hw..(ch + 1) * hw];
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = blur(x, w, h, &taps);
        let my = blur(y, w, h, &taps);
        let mxx = blur(&prod(x, x), w, h, &taps);
        let myy = blur(&prod(y, y), w, h, &taps);
        let mxy = blur(&prod(x, y), w, h, &taps);
        for i in (0..hw).filter(|&i| mask[i]) {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Some(total / (count * c) as f64)
}

/// Metrics of one evaluation view. Views without foreground are kept with
/// `skipped` set and NaN metrics.
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub view: ViewId,
    pub psnr: f64,
    pub ssim: f64,
    pub foreground: usize,
    pub skipped: bool,
}

impl MetricsRecord {
    pub fn to_line(&self, identity: &str) -> String {
        let psnr = if self.psnr.is_infinite() { "inf".to_string() } else { format!("{:.6}", self.psnr) };
        format!(
            "identity={identity} frame={} camera={} psnr={psnr} ssim={:.6} foreground={} skipped={}",
            self.view.frame, self.view.camera, self.ssim, self.foreground, self.skipped
        )
    }
}

pub fn score(pred: &Tensor, gt_rgb: &Tensor, gt_seg: &Tensor, view: ViewId) -> MetricsRecord {
    let fg: Vec<bool> = gt_seg.data().iter().map(|&v| v > 0.0).collect();
    let foreground = fg.iter().filter(|&&m| m).count();
    match (psnr(pred, gt_rgb, &fg), ssim(pred, gt_rgb, &fg)) {
        (Some(p), Some(s)) => MetricsRecord { view, psnr: p, ssim: s, foreground, skipped: false },
        _ => MetricsRecord { view, psnr: f64::NAN, ssim: f64::NAN, foreground, skipped: true },
    }
}

/// Held-out views: every frame of a held-out camera, plus the held-out
/// frames of the training cameras.
pub fn heldout_views(split: &Split, identities: &[usize]) -> Vec<ViewId> {
    let mut out = Vec::new();
    for &identity in identities {
        for frame in 0..split.frames {
            for camera in split.train_cameras.iter().chain(&split.test_cameras).copied() {
                let held = split.test_cameras.contains(&camera) || frame >= split.train_frames;
                if held {
                    out.push(ViewId { identity, frame, camera });
                }
            }
        }
    }
    out.sort_by_key(|v| (v.identity, v.frame, v.camera));
    out
}

/// The model's render of a dataset view with `z` encoded from that view's
/// own frame. Driving a target with itself goes through this same path.
pub fn reconstruct(model: &Model, data: &TrainingData, view: ViewId, mode: RenderMode) -> Result<Rendered, HarnessError> {
    let identity = &data.identities[view.identity];
    let frame = &data.frames[view.identity][view.frame];
    let z = model.encode(identity, frame)?;
    model.render(identity, &z, frame.eta, frame.h, &data.dataset.rig.cameras[view.camera], [true, true], mode)
}

#[derive(Clone, Debug, Default)]
pub struct EvalSummary {
    pub records: Vec<MetricsRecord>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean absolute error over ground-truth hair pixels and channels.
    pub hair_l1: f64,
    pub hair_pixels: usize,
}

/// Evaluates the training identities (or `identities` when given) on their
/// held-out views.
pub fn evaluate(
    model: &Model,
    data: &TrainingData,
    identities: Option<&[usize]>,
    mode: RenderMode,
) -> Result<EvalSummary, HarnessError> {
    let ids = match identities {
        Some(ids) => ids.to_vec(),
        None => training_identities(&model.cfg, data)?,
    };
    let split = Split::new(&model.cfg.split, data.dataset.frames, data.dataset.rig.cameras.len())?;
    let mut summary = EvalSummary::default();
    let mut hair_err = 0.0;
    for view in heldout_views(&split, &ids) {
        let gt = data.view(view)?;
        let pred = reconstruct(model, data, view, mode)?;
        let hw = gt.seg.numel();
        for i in (0..hw).filter(|&i| gt.seg.data()[i] == f64::from(LAYER_HAIR)) {
            for c in 0..3 {
                hair_err += (pred.rgb.data()[c * hw + i] - gt.rgb.data()[c * hw + i]).abs();
            }
            summary.hair_pixels += 1;
        }
        summary.records.push(score(&pred.rgb, &gt.rgb, &gt.seg, view));
    }
    let scored: Vec<&MetricsRecord> = summary.records.iter().filter(|r| !r.skipped && r.psnr.is_finite()).collect();
    if !scored.is_empty() {
        summary.mean_psnr = scored.iter().map(|r| r.psnr).sum::<f64>() / scored.len() as f64;
        summary.mean_ssim = scored.iter().map(|r| r.ssim).sum::<f64>() / scored.len() as f64;
    }
    if summary.hair_pixels > 0 {
        summary.hair_l1 = hair_err / (3 * summary.hair_pixels) as f64;
    }
    Ok(summary)
}
