//! Training objective.
//!
//! Every term is built on the tape so the trainer can back-propagate the
//! weighted total. Terms are collected in [`LossParts`] with their effective
//! weight (group weight times term weight) and reduced by [`total_loss`],
//! which also produces the plain-number [`LossReport`] written to the
//! metrics log.

pub mod morph;

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{GaussianFrame, Layer, MeshFrame};
use crate::geomesh::{laplacian_energy_var, GeomError, Laplacian};
use crate::raster::LAYER_NONE;
use crate::splat::{SCALE_MAX, SCALE_MIN};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss term `{term}` is not finite ({value})")]
    NonFinite { term: String, value: f64 },
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("shape mismatch for `{term}`: {detail}")]
    Shape { term: &'static str, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which form of the small-scale penalty to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SmallScalePenalty {
    /// `1/max(r_min, s)` for `s < r_min`: a constant with no gradient.
    #[default]
    Literal,
    /// `1/max(ε, s)` for `s < r_min`, which does push small scales up.
    Epsilon,
}

pub const SCALE_EPSILON: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub pica: f64,
    pub gs: f64,
    pub dehair: f64,
    pub photometric: f64,
    pub depth: f64,
    pub normal: f64,
    pub mesh: f64,
    pub smooth: f64,
    pub kl: f64,
    pub seg: f64,
    pub render: f64,
    pub scale: f64,
    pub delta: f64,
    /// Dehair weight decay factor per period.
    pub dehair_decay: f64,
    pub dehair_period: u64,
    pub small_scale: SmallScalePenalty,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pica: 1.0,
            gs: 1.0,
            dehair: 100.0,
            photometric: 1.0,
            depth: 0.1,
            normal: 0.1,
            mesh: 1.0,
            smooth: 0.1,
            kl: 1e-3,
            seg: 0.5,
            render: 1.0,
            scale: 0.01,
            delta: 0.1,
            dehair_decay: 0.5,
            dehair_period: 1000,
            small_scale: SmallScalePenalty::Literal,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("pica", self.pica),
            ("gs", self.gs),
            ("dehair", self.dehair),
            ("photometric", self.photometric),
            ("depth", self.depth),
            ("normal", self.normal),
            ("mesh", self.mesh),
            ("smooth", self.smooth),
            ("kl", self.kl),
            ("seg", self.seg),
            ("render", self.render),
            ("scale", self.scale),
            ("delta", self.delta),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::Weights(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(self.dehair_decay > 0.0 && self.dehair_decay <= 1.0) {
            return Err(LossError::Weights(format!("dehair_decay = {} must lie in (0, 1]", self.dehair_decay)));
        }
        if self.dehair_period == 0 {
            return Err(LossError::Weights("dehair_period must be positive".into()));
        }
        Ok(())
    }

    /// `λ_dehair · γ^(step / period)`.
    pub fn dehair_weight(&self, step: u64) -> f64 {
        self.dehair * self.dehair_decay.powf(step as f64 / self.dehair_period as f64)
    }
}

/// One weighted scalar on the tape.
#[derive(Clone, Debug)]
pub struct Term {
    pub name: String,
    pub weight: f64,
    pub value: Var,
}

#[derive(Clone, Debug, Default)]
pub struct LossParts {
    pub terms: Vec<Term>,
    /// Terms that could not be computed, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl LossParts {
    fn push(&mut self, name: &str, weight: f64, value: Var) {
        self.terms.push(Term {
            name: name.to_string(),
            weight,
            value,
        });
    }

    fn skip(&mut self, name: &str, why: &str) {
        self.skipped.push((name.to_string(), why.to_string()));
    }

    pub fn extend(&mut self, other: LossParts) {
        self.terms.extend(other.terms);
        self.skipped.extend(other.skipped);
    }

    pub fn get(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportEntry {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Plain numbers for one step: every term, its weight and the total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub entries: Vec<ReportEntry>,
    pub skipped: Vec<(String, String)>,
    pub total: f64,
}

impl LossReport {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    /// `step=.. total=.. name=value ..` on a single line; skipped terms are
    /// listed as `name=skipped`.
    pub fn to_line(&self, step: u64) -> String {
        let mut s = format!("step={step} total={:.9e}", self.total);
        for e in &self.entries {
            let _ = write!(s, " {}={:.9e}", e.name, e.value);
        }
        for (name, _) in &self.skipped {
            let _ = write!(s, " {name}=skipped");
        }
        s
    }

    /// Inverse of [`LossReport::to_line`] for the numeric fields.
    pub fn parse_line(line: &str) -> Option<(u64, Vec<(String, Option<f64>)>)> {
        let mut step = None;
        let mut fields = Vec::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=')?;
            if k == "step" {
                step = v.parse().ok();
            } else {
                fields.push((k.to_string(), v.parse().ok()));
            }
        }
        Some((step?, fields))
    }
}

/// Reduces the parts to one tape scalar and a report. Any non-finite term is
/// an error naming it.
pub fn total_loss(tape: &mut Tape, parts: &LossParts) -> Result<(Var, LossReport)> {
    let mut entries = Vec::with_capacity(parts.terms.len());
    let mut acc: Option<Var> = None;
    let mut total = 0.0;
    for t in &parts.terms {
        let value = tape.value(t.value).item();
        if !value.is_finite() {
            return Err(LossError::NonFinite {
                term: t.name.clone(),
                value,
            });
        }
        entries.push(ReportEntry {
            name: t.name.clone(),
            weight: t.weight,
            value,
        });
        total += t.weight * value;
        let w = tape.scale(t.value, t.weight);
        acc = Some(match acc {
            Some(a) => tape.add(a, w)?,
            None => w,
        });
    }
    let var = acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    let report = LossReport {
        entries,
        skipped: parts.skipped.clone(),
        total,
    };
    Ok((var, report))
}

/// `Σ (x ⊙ mask) / Σ mask`, or a constant zero when the mask is empty.
fn masked_mean(tape: &mut Tape, x: Var, mask: Tensor) -> Result<Var> {
    let count: f64 = mask.data().iter().sum();
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = tape.constant(mask);
    let xm = tape.mul(x, m)?;
    let s = tape.sum(xm);
    Ok(tape.scale(s, 1.0 / count))
}

fn check_shape(term: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(LossError::Shape {
            term,
            detail: format!("expected {want:?}, got {got:?}"),
        });
    }
    Ok(())
}

/// Mean of `½(μ² + σ² − 1 − 2 ln σ)` over every latent entry.
pub fn kl_divergence(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let ls2 = tape.scale(log_sigma, 2.0);
    let var = tape.exp(ls2);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, ls2)?;
    let c = tape.add_scalar(b, -1.0);
    let m = tape.mean(c)?;
    Ok(tape.scale(m, 0.5))
}

/// Ground truth for one view. Any field left `None` skips the terms that
/// need it.
#[derive(Clone, Debug, Default)]
pub struct PicaTargets<'a> {
    /// `[3,H,W]`.
    pub rgb: Option<&'a Tensor>,
    /// `[H,W]`, 0 where there is no measurement.
    pub depth: Option<&'a Tensor>,
    /// `[3,H,W]` unit normals, all-zero where there is no measurement.
    pub normals: Option<&'a Tensor>,
    /// `[H,W]` foreground indicator.
    pub foreground: Option<&'a Tensor>,
    /// `[H,W]` hair segmentation in `[0,1]`.
    pub hair: Option<&'a Tensor>,
    /// Tracked face (dehaired) vertices `[V,3]`, same frame as the decoder output.
    pub track_face: Option<&'a Tensor>,
    /// Tracked hair vertices `[V,3]`.
    pub track_hair: Option<&'a Tensor>,
}

#[derive(Clone, Debug)]
pub struct PicaOptions {
    pub seg: bool,
    pub laplacian: Arc<Laplacian>,
}

/// Layered reconstruction terms for one rendered view.
pub fn pica_loss(
    tape: &mut Tape,
    frame: &MeshFrame,
    gt: &PicaTargets,
    opts: &PicaOptions,
    w: &LossWeights,
) -> Result<LossParts> {
    let mut parts = LossParts::default();
    let shape = tape.shape(frame.image).to_vec();
    let (h, wd) = (shape[1], shape[2]);
    let hw = h * wd;
    let pred_fg: Vec<bool> = frame.frags.frags.iter().map(|f| f.layer != LAYER_NONE).collect();
    let k = w.pica;

    match gt.rgb {
        Some(rgb) => {
            check_shape("pica.I", rgb.shape(), &shape)?;
            let gt_fg: Vec<bool> = match gt.foreground {
                Some(f) => {
                    check_shape("pica.I", f.shape(), &[h, wd])?;
                    f.data().iter().map(|&v| v > 0.5).collect()
                }
                None => vec![false; hw],
            };
            let mask = Tensor::from_fn(&shape, |i| f64::from(u8::from(pred_fg[i % hw] || gt_fg[i % hw])));
            let target = tape.constant(rgb.clone());
            let d = tape.sub(frame.image, target)?;
            let a = tape.abs(d);
            let v = masked_mean(tape, a, mask)?;
            parts.push("pica.I", k * w.photometric, v);
        }
        None => parts.skip("pica.I", "no ground-truth image"),
    }

    match gt.depth {
        Some(dep) => {
            check_shape("pica.D", dep.shape(), &[h, wd])?;
            let mask = Tensor::from_fn(&[h, wd], |i| f64::from(u8::from(pred_fg[i] && dep.data()[i] > 0.0)));
            let target = tape.constant(dep.clone());
            let d = tape.sub(frame.depth, target)?;
            let a = tape.abs(d);
            let v = masked_mean(tape, a, mask)?;
            parts.push("pica.D", k * w.depth, v);
        }
        None => parts.skip("pica.D", "no ground-truth depth"),
    }

    match (gt.normals, frame.normals) {
        (Some(n), Some(pred)) => {
            check_shape("pica.N", n.shape(), &shape)?;
            let valid: Vec<bool> = (0..hw)
                .map(|i| pred_fg[i] && (0..3).any(|c| n.data()[c * hw + i] != 0.0))
                .collect();
            // 1 − n̂·n written as ½|n̂ − n|², equal for unit vectors and
            // exactly zero when they coincide
            let mask = Tensor::from_fn(&shape, |i| f64::from(u8::from(valid[i % hw])));
            let count = valid.iter().filter(|&&b| b).count() as f64;
            let target = tape.constant(n.clone());
            let d = tape.sub(pred, target)?;
            let sq = tape.square(d);
            let m = tape.constant(mask);
            let sq = tape.mul(sq, m)?;
            let s = tape.sum(sq);
            let v = tape.scale(s, if count > 0.0 { 0.5 / count } else { 0.0 });
            parts.push("pica.N", k * w.normal, v);
        }
        (None, _) => parts.skip("pica.N", "no ground-truth normals"),
        (_, None) => parts.skip("pica.N", "normals were not rendered"),
    }

    let mut mesh_terms = Vec::new();
    let mut smooth_terms = Vec::new();
    for out in &frame.layers {
        let track = match out.layer {
            Layer::Face => gt.track_face,
            Layer::Hair => gt.track_hair,
        };
        let name = match out.layer {
            Layer::Face => "face",
            Layer::Hair => "hair",
        };
        let Some(track) = track else {
            parts.skip(&format!("pica.M.{name}"), "no tracked mesh");
            continue;
        };
        check_shape("pica.M", track.shape(), tape.shape(out.vertices))?;
        let t = tape.constant(track.clone());
        let r = tape.sub(out.vertices, t)?;
        let sq = tape.square(r);
        mesh_terms.push(tape.mean(sq)?);
        // smoothness of the residual against the track
        let e = laplacian_energy_var(tape, r, &opts.laplacian)?;
        smooth_terms.push(tape.scale(e, 1.0 / track.shape()[0] as f64));
    }
    if !mesh_terms.is_empty() {
        let m = sum_vars(tape, &mesh_terms)?;
        parts.push("pica.M", k * w.mesh, m);
        let s = sum_vars(tape, &smooth_terms)?;
        parts.push("pica.S", k * w.smooth, s);
    }

    let kl = kl_divergence(tape, frame.code.mu, frame.code.log_sigma)?;
    parts.push("pica.KL", k * w.kl, kl);

    if opts.seg {
        let soft = frame.layer(Layer::Hair).and_then(|l| l.soft_mask);
        match (gt.hair, soft) {
            (Some(hair), Some(soft)) => {
                check_shape("pica.seg", hair.shape(), &[h, wd])?;
                let binary: Vec<bool> = hair.data().iter().map(|&v| v > 0.5).collect();
                let band = morph::boundary_band(&binary, wd, h);
                let mask = Tensor::from_fn(&[h, wd], |i| f64::from(u8::from(band[i])));
                let target = tape.constant(hair.clone());
                let d = tape.sub(soft, target)?;
                let a = tape.abs(d);
                let v = masked_mean(tape, a, mask)?;
                parts.push("pica.seg", k * w.seg, v);
            }
            (None, _) => parts.skip("pica.seg", "no hair segmentation"),
            (_, None) => parts.skip("pica.seg", "no rendered hair mask"),
        }
    }
    Ok(parts)
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Scale penalty on unclamped scales `[M,3]` (or any shape): the mean over
/// every axis value of the small-scale branch plus `max(0, s − r_max)²`.
pub fn scale_penalty(tape: &mut Tape, scales: Var, mode: SmallScalePenalty) -> Result<Var> {
    let s = tape.value(scales).clone();
    let n = s.numel() as f64;
    let large = s.map(|v| f64::from(u8::from(v > SCALE_MAX)));
    let over = tape.add_scalar(scales, -SCALE_MAX);
    let over = tape.square(over);
    let lm = tape.constant(large);
    let over = tape.mul(over, lm)?;
    let mut total = tape.sum(over);
    match mode {
        SmallScalePenalty::Literal => {
            let small = s.data().iter().filter(|&&v| v < SCALE_MIN).count() as f64;
            let c = tape.constant(Tensor::scalar(small / SCALE_MIN));
            total = tape.add(total, c)?;
        }
        SmallScalePenalty::Epsilon => {
            // 1/s for ε ≤ s < r_min, the constant 1/ε below ε
            let live = s.map(|v| f64::from(u8::from(v < SCALE_MIN && v >= SCALE_EPSILON)));
            let floor = s.data().iter().filter(|&&v| v < SCALE_EPSILON).count() as f64;
            let safe = s.map(|v| if v < SCALE_MIN && v >= SCALE_EPSILON { 0.0 } else { 1.0 });
            let sc = tape.constant(safe);
            let shifted = tape.add(scales, sc)?;
            let lg = tape.log(shifted);
            let neg = tape.scale(lg, -1.0);
            let inv = tape.exp(neg);
            let lv = tape.constant(live);
            let inv = tape.mul(inv, lv)?;
            let inv = tape.sum(inv);
            total = tape.add(total, inv)?;
            let c = tape.constant(Tensor::scalar(floor / SCALE_EPSILON));
            total = tape.add(total, c)?;
        }
    }
    Ok(tape.scale(total, 1.0 / n))
}

/// `E[δt_hair²] + E[(δt_face ⊙ (1 − m_face))²]`, each expectation a mean over
/// all coordinates. `face_mask` has one entry per face vertex.
pub fn delta_penalty(tape: &mut Tape, frame: &GaussianFrame, face_mask: &[f64]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for (layer, attrs) in &frame.attrs {
        let d = attrs.delta;
        let term = match layer {
            Layer::Hair => {
                let sq = tape.square(d);
                tape.mean(sq)?
            }
            Layer::Face => {
                let shape = tape.shape(d).to_vec();
                check_shape("gs.delta", &[face_mask.len(), 3], &shape)?;
                let keep = Tensor::from_fn(&shape, |i| 1.0 - face_mask[i / 3]);
                let k = tape.constant(keep);
                let dm = tape.mul(d, k)?;
                let sq = tape.square(dm);
                tape.mean(sq)?
            }
        };
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Gaussian-branch terms. `face_mask` is 1 on facial vertices whose
/// Gaussians may drift and 0 on the scalp.
pub fn gaussian_loss(
    tape: &mut Tape,
    frame: &GaussianFrame,
    gt_rgb: Option<&Tensor>,
    face_mask: &[f64],
    w: &LossWeights,
) -> Result<LossParts> {
    let mut parts = LossParts::default();
    let k = w.gs;
    match gt_rgb {
        Some(rgb) => {
            check_shape("gs.render", rgb.shape(), tape.shape(frame.image))?;
            let t = tape.constant(rgb.clone());
            let d = tape.sub(frame.image, t)?;
            let a = tape.abs(d);
            let v = tape.mean(a)?;
            parts.push("gs.render", k * w.render, v);
        }
        None => parts.skip("gs.render", "no ground-truth image"),
    }
    let scales: Vec<Var> = frame.attrs.iter().map(|(_, a)| a.scale).collect();
    if !scales.is_empty() {
        let all = tape.concat(&scales, 0)?;
        let v = scale_penalty(tape, all, w.small_scale)?;
        parts.push("gs.scale", k * w.scale, v);
    }
    let v = delta_penalty(tape, frame, face_mask)?;
    parts.push("gs.delta", k * w.delta, v);
    Ok(parts)
}

/// Mean squared distance between face vertices and the bald target over the
/// hair-covered vertices, weighted by the decayed dehair weight.
pub fn dehair_loss(
    tape: &mut Tape,
    face_vertices: Var,
    bald: &Tensor,
    hair_region: &[bool],
    step: u64,
    w: &LossWeights,
) -> Result<LossParts> {
    let shape = tape.shape(face_vertices).to_vec();
    check_shape("dehair", bald.shape(), &shape)?;
    check_shape("dehair", &[hair_region.len(), 3], &shape)?;
    let count = hair_region.iter().filter(|&&b| b).count() as f64;
    let t = tape.constant(bald.clone());
    let d = tape.sub(face_vertices, t)?;
    let sq = tape.square(d);
    let mask = Tensor::from_fn(&shape, |i| f64::from(u8::from(hair_region[i / 3])));
    let v = masked_mean(tape, sq, mask)?;
    // per vertex, not per coordinate
    let v = tape.scale(v, if count > 0.0 { 3.0 } else { 0.0 });
    let mut parts = LossParts::default();
    parts.push("dehair", w.dehair_weight(step), v);
    Ok(parts)
}
