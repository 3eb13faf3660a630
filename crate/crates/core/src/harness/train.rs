use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{render_frame, render_gaussian_frame, FrameInputs, Layer, LayerMaps, ParamStore, Z_DIM};
use crate::geomesh::{precondition_gradient, Laplacian};
use crate::losses::{dehair_loss, gaussian_loss, pica_loss, total_loss, LossError, LossParts, PicaOptions, PicaTargets};
use crate::tensor::{Tape, Tensor};

use super::config::TrainConfig;
use super::data::{Split, Surface, TrainingData, ViewId};
use super::model::Model;
use super::optim::Adam;
use super::HarnessError;

/// What a training run produced besides the weights.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Loss lines (`step=… total=… term=…`) and probe lines. Contains no
    /// timings, so equal seeds give equal logs.
    pub log: Vec<String>,
    /// `(step, mean photometric L1 over the probe views)`.
    pub probes: Vec<(u64, f64)>,
    pub param_count: usize,
    pub steps_run: u64,
    /// Number of `g_mean` gradients routed through the preconditioner.
    pub preconditioned: u64,
    pub seconds: f64,
}

impl TrainReport {
    pub fn first_probe(&self) -> Option<f64> {
        self.probes.first().map(|p| p.1)
    }

    pub fn last_probe(&self) -> Option<f64> {
        self.probes.last().map(|p| p.1)
    }
}

/// Indices of the training identities.
pub fn training_identities(cfg: &TrainConfig, data: &TrainingData) -> Result<Vec<usize>, HarnessError> {
    if cfg.identities.is_empty() {
        return Ok((0..data.identities.len()).collect());
    }
    cfg.identities.iter().map(|n| data.index_of(n)).collect()
}

/// Checks that the config and the dataset fit together before any work.
pub fn check_compatible(cfg: &TrainConfig, data: &TrainingData, ids: &[usize]) -> Result<Split, HarnessError> {
    if cfg.codec.geo_res != data.geo_res() {
        return Err(HarnessError::Data(format!(
            "codec geo_res {} but the dataset has {}",
            cfg.codec.geo_res,
            data.geo_res()
        )));
    }
    if ids.is_empty() {
        return Err(HarnessError::Data("no training identities".into()));
    }
    let surface = if cfg.codec_config().layered { Surface::Layered } else { Surface::Single };
    for &i in ids {
        data.identities[i].neutral(surface)?;
    }
    Split::new(&cfg.split, data.dataset.frames, data.dataset.rig.cameras.len())
}

fn mask(seg: &Tensor, pred: impl Fn(f64) -> bool) -> Tensor {
    Tensor::new(seg.shape().to_vec(), seg.data().iter().map(|&v| f64::from(u8::from(pred(v)))).collect()).expect("same shape")
}

/// Sets each layer's `g_mean` to the average neutral geometry of the
/// training identities that have the layer.
fn init_geometry_means(model: &mut Model, data: &TrainingData, ids: &[usize]) -> Result<(), HarnessError> {
    let surface = model.surface();
    for layer in model.codec.layers() {
        let geos: Vec<&Tensor> = ids
            .iter()
            .filter_map(|&i| {
                let (face, hair) = data.identities[i].neutral(surface).ok()?;
                match layer {
                    Layer::Face => Some(&face.geo),
                    Layer::Hair => hair.map(|h| &h.geo),
                }
            })
            .collect();
        if geos.is_empty() {
            continue;
        }
        let mut mean = Tensor::zeros(geos[0].shape());
        for g in &geos {
            for (m, v) in mean.data_mut().iter_mut().zip(g.data()) {
                *m += v / geos.len() as f64;
            }
        }
        let id = model.codec.g_mean_id(layer)?;
        *model.codec.params.get_mut(id) = mean;
    }
    Ok(())
}

struct StepOutput {
    grads: Vec<Tensor>,
    line_values: crate::losses::LossReport,
}

/// Forward and backward pass for one view.
fn step_loss(
    model: &Model,
    data: &TrainingData,
    view: ViewId,
    eps: &Tensor,
    step: u64,
    lap: &Arc<Laplacian>,
) -> Result<StepOutput, HarnessError> {
    let cfg = &model.cfg;
    let surface = model.surface();
    let identity = &data.identities[view.identity];
    let frame = &data.frames[view.identity][view.frame];
    let (face_n, hair_n) = identity.neutral(surface)?;
    let (face_c, hair_c) = frame.current(surface);
    let camera = &data.dataset.rig.cameras[view.camera];
    let gt = data.view(view)?;

    let inp = FrameInputs {
        face: LayerMaps { neutral: face_n, current: face_c },
        hair: match (hair_n, hair_c) {
            (Some(n), Some(c)) if model.codec.has_hair() => Some(LayerMaps { neutral: n, current: c }),
            _ => None,
        },
        eta: frame.eta,
        h: frame.h,
        camera,
        eps: Some(eps),
        z: None,
        show: [true, true],
        with_normals: true,
        with_soft_masks: model.codec.has_hair() && !cfg.ablation.no_seg_loss,
    };
    let mut tape = Tape::new();
    let p = model.codec.params.bind(&mut tape, true);
    let mframe = render_frame(&model.codec, &mut tape, &p, &inp)?;

    let fg = mask(&gt.seg, |v| v > 0.0);
    let hair_gt = mask(&gt.seg, |v| v == 2.0);
    let (track_face, track_hair) = frame.tracks(surface);
    let targets = PicaTargets {
        rgb: Some(&gt.rgb),
        depth: Some(&gt.depth),
        normals: Some(&gt.normals),
        foreground: Some(&fg),
        hair: Some(&hair_gt),
        track_face: Some(track_face),
        track_hair,
    };
    let opts = PicaOptions {
        seg: !cfg.ablation.no_seg_loss,
        laplacian: lap.clone(),
    };
    let mut parts = pica_loss(&mut tape, &mframe, &targets, &opts, &cfg.weights)?;
    if cfg.ablation.gaussians_only {
        parts.terms.retain(|t| t.name != "pica.I");
        parts.skipped.push(("pica.I".into(), "gaussians_only".into()));
    }
    if model.codec.cfg.gaussians {
        let gs = render_gaussian_frame(&model.codec, &mut tape, &p, &inp, &mframe)?;
        parts.extend(gaussian_loss(&mut tape, &gs, Some(&gt.rgb), &identity.face_mask, &cfg.weights)?);
    }
    match (surface, identity.has_hair) {
        (Surface::Layered, true) => {
            let face_out = mframe.layer(Layer::Face).expect("face layer always decoded");
            let bald = data.bald_target(view.identity, view.frame)?;
            parts.extend(dehair_loss(&mut tape, face_out.vertices, &bald, &identity.hair_mask, step, &cfg.weights)?);
        }
        _ => {
            let mut skip = LossParts::default();
            skip.skipped.push(("dehair".into(), "no hair-covered scalp".into()));
            parts.extend(skip);
        }
    }

    let (total, report) = total_loss(&mut tape, &parts)?;
    let mut g = tape.backward(total)?;
    let grads = p.vars().iter().map(|&v| g.take(v)).collect();
    Ok(StepOutput { grads, line_values: report })
}

/// Photometric L1 of one view with `z = μ`, over the union of predicted and
/// ground-truth foreground.
pub fn photometric_l1(model: &Model, data: &TrainingData, view: ViewId) -> Result<f64, HarnessError> {
    let surface = model.surface();
    let identity = &data.identities[view.identity];
    let frame = &data.frames[view.identity][view.frame];
    let (face_n, hair_n) = identity.neutral(surface)?;
    let (face_c, hair_c) = frame.current(surface);
    let gt = data.view(view)?;
    let inp = FrameInputs {
        face: LayerMaps { neutral: face_n, current: face_c },
        hair: match (hair_n, hair_c) {
            (Some(n), Some(c)) if model.codec.has_hair() => Some(LayerMaps { neutral: n, current: c }),
            _ => None,
        },
        eta: frame.eta,
        h: frame.h,
        camera: &data.dataset.rig.cameras[view.camera],
        eps: None,
        z: None,
        show: [true, true],
        with_normals: false,
        with_soft_masks: false,
    };
    let mut tape = Tape::new();
    let p = model.codec.params.bind(&mut tape, false);
    let frame = render_frame(&model.codec, &mut tape, &p, &inp)?;
    let fg = mask(&gt.seg, |v| v > 0.0);
    let targets = PicaTargets {
        rgb: Some(&gt.rgb),
        foreground: Some(&fg),
        ..Default::default()
    };
    let opts = PicaOptions {
        seg: false,
        laplacian: Arc::new(Laplacian::from_edges(0, &[])),
    };
    let parts = pica_loss(&mut tape, &frame, &targets, &opts, &model.cfg.weights)?;
    let term = parts.get("pica.I").expect("rgb target given");
    Ok(tape.value(term.value).item())
}

/// Name of the quantity that went non-finite, when `e` reports one. The
/// forward pass validates some intermediates (opacities, decoded assets)
/// before a loss is formed, so a blow-up can surface there first.
fn non_finite_term(e: &HarnessError) -> Option<String> {
    use crate::codec::CodecError;
    use crate::splat::SplatError;
    match e {
        HarnessError::Loss(LossError::NonFinite { term, .. }) => Some(term.clone()),
        HarnessError::Codec(CodecError::NonFinite(what)) => Some((*what).to_string()),
        HarnessError::Codec(CodecError::Splat(SplatError::Opacity { value, .. })) if !value.is_finite() => {
            Some("gaussian opacity".into())
        }
        _ => None,
    }
}

fn sample_view(rng: &mut ChaCha8Rng, ids: &[usize], split: &Split) -> ViewId {
    ViewId {
        identity: ids[rng.gen_range(0..ids.len())],
        frame: rng.gen_range(0..split.train_frames),
        camera: split.train_cameras[rng.gen_range(0..split.train_cameras.len())],
    }
}

fn probe_mean(model: &Model, data: &TrainingData, probes: &[ViewId]) -> Result<f64, HarnessError> {
    let mut s = 0.0;
    for &v in probes {
        s += photometric_l1(model, data, v)?;
    }
    Ok(s / probes.len() as f64)
}

/// Trains a model. With `out` set, the final checkpoint and `metrics.log`
/// are written there, and a failed run leaves its last good weights behind.
pub fn train(cfg: &TrainConfig, data: &TrainingData, out: Option<&Path>) -> Result<(Model, TrainReport), HarnessError> {
    cfg.validate()?;
    let ids = training_identities(cfg, data)?;
    let split = check_compatible(cfg, data, &ids)?;
    let started = Instant::now();

    let mut model = Model::new(cfg.clone())?;
    init_geometry_means(&mut model, data, &ids)?;
    let lap = Arc::new(Laplacian::from_mesh(&model.codec.mesh));
    let mean_ids: Vec<_> = model
        .codec
        .layers()
        .iter()
        .map(|&l| model.codec.g_mean_id(l))
        .collect::<Result<_, _>>()?;
    let mut adam = Adam::new(&cfg.optim, &model.codec.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1d_0000);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9b0b_e000);
    let probes: Vec<ViewId> = (0..cfg.probe_views.max(1)).map(|_| sample_view(&mut probe_rng, &ids, &split)).collect();

    let mut report = TrainReport {
        param_count: model.codec.params.numel(),
        ..Default::default()
    };
    let push_probe = |model: &Model, step: u64, report: &mut TrainReport| -> Result<(), HarnessError> {
        let l1 = probe_mean(model, data, &probes)?;
        report.probes.push((step, l1));
        report.log.push(format!("probe step={step} l1={l1:.9e}"));
        Ok(())
    };
    push_probe(&model, 0, &mut report)?;

    let mut last_good: ParamStore = model.codec.params.clone();
    for step in 0..cfg.steps {
        let view = sample_view(&mut rng, &ids, &split);
        let eps = Tensor::new(vec![Z_DIM], (0..Z_DIM).map(|_| rng.sample(StandardNormal)).collect())?;
        let out_step = match step_loss(&model, data, view, &eps, step, &lap) {
            Ok(o) => o,
            Err(e) if non_finite_term(&e).is_some() => {
                let term = non_finite_term(&e).expect("checked by the guard");
                let mut good = model.clone();
                good.codec.params = last_good;
                let saved = match out {
                    Some(dir) => {
                        let mut meta = BTreeMap::new();
                        meta.insert("step".into(), step.to_string());
                        meta.insert("status".into(), "aborted".into());
                        good.save(dir, &meta)?;
                        Some(dir.display().to_string())
                    }
                    None => None,
                };
                return Err(HarnessError::NonFiniteLoss { step, term, checkpoint: saved });
            }
            Err(e) => return Err(e),
        };
        let mut grads = out_step.grads;
        for &id in &mean_ids {
            let k = id.0;
            grads[k] = precondition_gradient(&grads[k], &lap, cfg.optim.precondition_lambda)?;
            report.preconditioned += 1;
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(HarnessError::NonFiniteLoss {
                step,
                term: "gradient".into(),
                checkpoint: None,
            });
        }
        last_good = model.codec.params.clone();
        adam.step(&mut model.codec.params, &grads);
        report.steps_run = step + 1;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            report.log.push(out_step.line_values.to_line(step));
        }
        if (step + 1) % cfg.probe_every == 0 && step + 1 != cfg.steps {
            push_probe(&model, step + 1, &mut report)?;
        }
    }
    if cfg.steps > 0 {
        push_probe(&model, cfg.steps, &mut report)?;
    }
    report.seconds = started.elapsed().as_secs_f64();

    if let Some(dir) = out {
        let mut meta = BTreeMap::new();
        meta.insert("step".into(), cfg.steps.to_string());
        meta.insert("status".into(), "complete".into());
        model.save(dir, &meta)?;
        let path = dir.join("metrics.log");
        std::fs::write(&path, report.log.join("\n") + "\n").map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok((model, report))
}
