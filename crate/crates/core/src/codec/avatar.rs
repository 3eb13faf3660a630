//! Full frame forward: hypernetworks, encoder, decoders, skinning, joint
//! rasterisation of both layers and the per-layer pixel decoders.
//!
//! Decoded geometry lives in the head frame. The head pose `h` is folded
//! into the camera ([`head_camera`]), so vertices never need a world-space
//! copy and `ω` is naturally expressed in the head frame.

use std::sync::Arc;

use crate::geomesh::{apply_affine_var, rigid_transform, sample_geometry_image, vertex_affines, SkinningRig, Vec3};
use crate::raster::{interpolate, normals, rasterize, soft_alpha, Camera, EdgeKind, FragmentBuffer, LayerInput};
use crate::splat::render_gaussians_var;
use crate::tensor::{Tape, Tensor, Var};

use super::params::Bound;
use super::{Codec, CodecError, ExpressionCode, GaussianAttrs, IdentityConditioning, Layer, NeutralAssets};

/// Height (cm, head frame) of the neck joint. Vertices well below it
/// follow the neck pose `η`.
pub const NECK_Y: f64 = -9.0;

/// Two-joint rig: joint 0 is the head (identity), joint 1 the torso, driven
/// by `η`. Weights blend on the rest height of each vertex.
pub fn neck_rig(rest: &[Vec3]) -> SkinningRig {
    let weights = rest
        .iter()
        .map(|p| {
            let t = ((NECK_Y + 2.0 - p.y) / 6.0).clamp(0.0, 1.0);
            let w = t * t * (3.0 - 2.0 * t);
            vec![1.0 - w, w]
        })
        .collect();
    SkinningRig::new(vec![Vec3::zeros(), Vec3::new(0.0, NECK_Y, 0.0)], weights).expect("weights sum to one")
}

/// Camera seeing head-frame points as the world camera sees them after
/// the rigid head pose `h` is applied.
pub fn head_camera(cam: &Camera, h: &[f64; 6]) -> Camera {
    let a = rigid_transform(h, Vec3::zeros());
    let mut out = cam.clone();
    out.r = cam.r * a.m;
    out.t = cam.r * a.t + cam.t;
    out
}

/// Neutral and current maps of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerMaps<'a> {
    pub neutral: &'a NeutralAssets,
    pub current: &'a NeutralAssets,
}

/// Everything needed to render one view of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameInputs<'a> {
    pub face: LayerMaps<'a>,
    /// `None` for identities without hair.
    pub hair: Option<LayerMaps<'a>>,
    pub eta: [f64; 6],
    pub h: [f64; 6],
    pub camera: &'a Camera,
    /// Reparameterisation noise; `None` uses `z = μ`.
    pub eps: Option<&'a Tensor>,
    /// Replaces the encoded code (driving and serving).
    pub z: Option<&'a Tensor>,
    /// Visibility of face and hair.
    pub show: [bool; 2],
    pub with_normals: bool,
    pub with_soft_masks: bool,
}

/// Per-layer intermediate results.
#[derive(Clone, Debug)]
pub struct LayerOutputs {
    pub layer: Layer,
    pub cond: IdentityConditioning,
    /// Expression-dependent displacement `[1,3,H,W]`.
    pub g: Var,
    pub e: Var,
    /// Composed geometry image `[3,H,W]` (before skinning).
    pub geometry: Var,
    /// Skinned head-frame vertices `[V,3]`.
    pub vertices: Var,
    /// Soft coverage `[H,W]` when requested.
    pub soft_mask: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MeshFrame {
    /// `[3,H,W]`, zero on background.
    pub image: Var,
    /// Camera depth `[H,W]`, zero on background.
    pub depth: Var,
    pub normals: Option<Var>,
    pub frags: Arc<FragmentBuffer>,
    pub code: ExpressionCode,
    pub z: Var,
    pub camera: Camera,
    pub layers: Vec<LayerOutputs>,
}

impl MeshFrame {
    pub fn layer(&self, layer: Layer) -> Option<&LayerOutputs> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// Pixels of a channel-major `[3,H,W]` geometry image as points, in
/// grid-vertex order.
pub fn image_points(geo: &Tensor) -> Vec<Vec3> {
    let n = geo.numel() / 3;
    let d = geo.data();
    (0..n).map(|i| Vec3::new(d[i], d[n + i], d[2 * n + i])).collect()
}

fn empty_maps(n: usize) -> NeutralAssets {
    NeutralAssets::zeros(n)
}

/// Encodes the expression code of a frame.
pub(crate) fn encode_frame(codec: &Codec, tape: &mut Tape, p: &Bound, inp: &FrameInputs) -> Result<ExpressionCode, CodecError> {
    let zeros = empty_maps(codec.cfg.geo_res);
    let mut cur = vec![inp.face.current];
    let mut neu = vec![inp.face.neutral];
    if codec.has_hair() {
        match &inp.hair {
            Some(h) => {
                cur.push(h.current);
                neu.push(h.neutral);
            }
            None => {
                cur.push(&zeros);
                neu.push(&zeros);
            }
        }
    }
    codec.encode(tape, p, &cur, &neu)
}

fn frame_z(tape: &mut Tape, code: &ExpressionCode, inp: &FrameInputs) -> Result<Var, CodecError> {
    match inp.z {
        Some(z) => Ok(tape.constant(z.clone().reshaped(&[1, super::Z_CHANNELS, super::Z_SIDE, super::Z_SIDE])?)),
        None => code.sample(tape, inp.eps),
    }
}

/// Mesh-mode render of one view.
pub fn render_frame(codec: &Codec, tape: &mut Tape, p: &Bound, inp: &FrameInputs) -> Result<MeshFrame, CodecError> {
    let code = encode_frame(codec, tape, p, inp)?;
    let z = frame_z(tape, &code, inp)?;
    let cam = head_camera(inp.camera, &inp.h);
    let omega_v = cam.omega();
    let omega = [omega_v.x, omega_v.y, omega_v.z];

    let mut outs = Vec::new();
    let face_cond = codec.identity(tape, p, Layer::Face, inp.face.neutral)?;
    let (g, e) = codec.decode_face(tape, p, z, inp.eta, omega, &face_cond)?;
    outs.push((Layer::Face, inp.face.neutral, face_cond, g, e));
    if let (true, Some(hm)) = (codec.has_hair(), inp.hair) {
        let cond = codec.identity(tape, p, Layer::Hair, hm.neutral)?;
        let (g, e) = codec.decode_hair(tape, p, z, inp.eta, inp.h, omega, &cond)?;
        outs.push((Layer::Hair, hm.neutral, cond, g, e));
    }

    let mut layers = Vec::new();
    for (layer, neutral, cond, g, e) in outs {
        let geometry = codec.compose(tape, p, layer, cond.d, g)?;
        let verts = sample_geometry_image(tape, geometry, &codec.mesh)?;
        let rest = image_points(&neutral.geo);
        let rig = neck_rig(&rest);
        let affines = vertex_affines(&rig, &[[0.0; 6], inp.eta])?;
        let vertices = apply_affine_var(tape, verts, affines)?;
        layers.push(LayerOutputs {
            layer,
            cond,
            g,
            e,
            geometry,
            vertices,
            soft_mask: None,
        });
    }

    // joint rasterisation; hidden or missing layers keep their slot empty
    let positions: Vec<Vec<Vec3>> = [Layer::Face, Layer::Hair]
        .iter()
        .map(|&l| {
            let shown = inp.show[l as usize];
            match layers.iter().find(|o| o.layer == l) {
                Some(o) if shown => crate::geomesh::to_points(tape.value(o.vertices)),
                _ => Vec::new(),
            }
        })
        .collect();
    let no_faces: Vec<[usize; 3]> = Vec::new();
    let inputs: Vec<LayerInput> = positions
        .iter()
        .map(|p| LayerInput {
            positions: p,
            faces: if p.is_empty() { &no_faces } else { &codec.faces },
        })
        .collect();
    let frags = Arc::new(rasterize(&inputs, &cam));
    let (hgt, wid) = (cam.height, cam.width);
    let hw = hgt * wid;

    let mut image: Option<Var> = None;
    let mut depth: Option<Var> = None;
    let mut normal_map: Option<Var> = None;
    let accumulate = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| -> Result<(), CodecError> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for out in &mut layers {
        if !inp.show[out.layer as usize] {
            continue;
        }
        let id = out.layer.raster_id();
        let attrs = codec.vertex_attributes(tape, out.e, out.cond.f)?;
        let interp = interpolate(tape, out.vertices, attrs, &codec.faces, &frags, &cam, id)?;
        let index: Vec<usize> = (0..hw).filter(|&i| frags.frags[i].layer == id).collect();
        if !index.is_empty() {
            let feats = codec.pixel_features(tape, interp, &index)?;
            let rgb = codec.decode_pixels(tape, p, out.layer, feats)?;
            let full = tape.scatter_rows(rgb, &index, hw)?;
            let full = tape.transpose(full)?;
            let full = tape.reshape(full, &[3, hgt, wid])?;
            accumulate(tape, &mut image, full)?;
        }
        let c = tape.shape(interp)[0];
        let d = tape.slice(interp, 0, c - 1, 1)?;
        let d = tape.reshape(d, &[hgt, wid])?;
        accumulate(tape, &mut depth, d)?;
        if inp.with_normals {
            let n = normals(tape, out.vertices, &codec.faces, &frags, &cam, id);
            accumulate(tape, &mut normal_map, n)?;
        }
        if inp.with_soft_masks {
            out.soft_mask = Some(soft_alpha(tape, out.vertices, &codec.faces, &frags, &cam, id, EdgeKind::Layer));
        }
    }
    let image = match image {
        Some(i) => i,
        None => tape.constant(Tensor::zeros(&[3, hgt, wid])),
    };
    let depth = match depth {
        Some(d) => d,
        None => tape.constant(Tensor::zeros(&[hgt, wid])),
    };
    Ok(MeshFrame {
        image,
        depth,
        normals: normal_map,
        frags,
        code,
        z,
        camera: cam,
        layers,
    })
}

/// Gaussian-mode render built on a mesh frame's guide vertices.
#[derive(Clone, Debug)]
pub struct GaussianFrame {
    /// Premultiplied colour `[3,H,W]` over black.
    pub image: Var,
    pub alpha: Var,
    pub attrs: Vec<(Layer, GaussianAttrs)>,
    pub stats: crate::splat::SplatStats,
}

pub fn render_gaussian_frame(
    codec: &Codec,
    tape: &mut Tape,
    p: &Bound,
    inp: &FrameInputs,
    mesh: &MeshFrame,
) -> Result<GaussianFrame, CodecError> {
    let code = match (inp.z, &codec.gs_encoder) {
        (Some(_), _) | (None, None) => mesh.code,
        (None, Some(_)) => {
            let mut cur = vec![inp.face.current];
            let mut neu = vec![inp.face.neutral];
            let zeros = empty_maps(codec.cfg.geo_res);
            if codec.has_hair() {
                let (c, n) = inp.hair.map(|h| (h.current, h.neutral)).unwrap_or((&zeros, &zeros));
                cur.push(c);
                neu.push(n);
            }
            codec.encode_gaussian(tape, p, &cur, &neu, mesh.code)?
        }
    };
    let z = match (inp.z, &codec.gs_encoder) {
        (Some(_), _) | (None, None) => mesh.z,
        (None, Some(_)) => code.sample(tape, inp.eps)?,
    };

    let mut attrs = Vec::new();
    let mut parts: [Vec<Var>; 5] = Default::default();
    for out in &mesh.layers {
        if !inp.show[out.layer as usize] {
            continue;
        }
        let neutral = match out.layer {
            Layer::Face => inp.face.neutral,
            Layer::Hair => inp.hair.ok_or(CodecError::NoHairBranch)?.neutral,
        };
        let cond = codec.gaussian_identity(tape, p, out.layer, neutral)?;
        let a = codec.decode_gaussians(tape, p, out.layer, z, inp.eta, &cond)?;
        let pos = tape.add(out.vertices, a.delta)?;
        for (slot, v) in [pos, a.rotation, a.scale, a.color, a.opacity].into_iter().enumerate() {
            parts[slot].push(v);
        }
        attrs.push((out.layer, a));
    }
    let cam = &mesh.camera;
    let (h, w) = (cam.height, cam.width);
    if attrs.is_empty() {
        let image = tape.constant(Tensor::zeros(&[3, h, w]));
        let alpha = tape.constant(Tensor::zeros(&[h, w]));
        return Ok(GaussianFrame { image, alpha, attrs, stats: Default::default() });
    }
    let mut cat = Vec::new();
    for vs in &parts {
        cat.push(if vs.len() == 1 { vs[0] } else { tape.concat(vs, 0)? });
    }
    let (out, stats) = render_gaussians_var(tape, cat[0], cat[1], cat[2], cat[3], cat[4], cam)?;
    let image = tape.slice(out, 0, 0, 3)?;
    let alpha = tape.slice(out, 0, 3, 1)?;
    let alpha = tape.reshape(alpha, &[h, w])?;
    Ok(GaussianFrame { image, alpha, attrs, stats })
}
