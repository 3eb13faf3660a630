//! Neural components of the layered avatar: identity hypernetworks, the
//! shared expression encoder, per-layer geometry/appearance decoders, pixel
//! decoders and the Gaussian heads.
//!
//! Maps travel through the networks as `[1,C,H,W]`. Geometry images are
//! sampled on a regular `H×W` vertex grid, so vertex `r*W + c` reads pixel
//! `(r, c)` exactly.

mod avatar;
mod layers;
mod nets;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomesh::{GeomError, MeshTopology};
use crate::raster::RasterError;
use crate::splat::SplatError;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use avatar::{
    head_camera, image_points, neck_rig, render_frame, render_gaussian_frame, FrameInputs, GaussianFrame, LayerMaps, LayerOutputs, MeshFrame,
    NECK_Y,
};
pub use layers::{Conv, Linear};
pub use nets::{
    DecoderInputs, ExpressionEncoder, GaussianConditioning, GaussianHypernet, Hypernet, IdentityConditioning,
    PixelDecoder, UpDecoder, APPEARANCE_CHANNELS, GEO_SCALE, OMEGA_CHANNELS,
};
pub use params::{Bound, ParamId, ParamStore};

pub const Z_CHANNELS: usize = 16;
pub const Z_SIDE: usize = 4;
/// Length of a flattened expression code.
pub const Z_DIM: usize = Z_CHANNELS * Z_SIDE * Z_SIDE;
/// δt (3), quaternion (4), scale (3), colour (3), opacity (1).
pub const GAUSSIAN_CHANNELS: usize = 14;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec config: {0}")]
    Config(String),
    #[error("texture {0:?} and geometry {1:?} must both be [3,H,W] at the configured resolution")]
    AssetShape(Vec<usize>, Vec<usize>),
    #[error("decoder expects {expected} pose values, got {found}")]
    PlaneCount { expected: usize, found: usize },
    #[error("decoder has {expected} levels but {found} bias maps were given")]
    LevelCount { expected: usize, found: usize },
    #[error("appearance decoder called without a view vector")]
    MissingOmega,
    #[error("the model has no hair branch")]
    NoHairBranch,
    #[error("the model has no Gaussian branch")]
    NoGaussianBranch,
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lten(#[from] crate::lten::LtenError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Splat(#[from] SplatError),
}

/// Architecture settings. Widths list the decoder channel count per level,
/// coarse (8×8) to fine, so `geo_res = 4 · 2^widths.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub geo_res: usize,
    pub widths: Vec<usize>,
    /// Learned channels of `f` on top of the neutral texture.
    pub f_channels: usize,
    pub pixel_hidden: Vec<usize>,
    pub pe_octaves: usize,
    /// Coordinates (cm) are divided by this before positional encoding.
    pub pe_scale: f64,
    /// Separate hair layer; `false` is the single-mesh baseline.
    pub layered: bool,
    /// Feed `z` to the hair decoders.
    pub hair_expression: bool,
    pub gaussians: bool,
    /// Gaussian decoders reuse the mesh branch's expression encoder.
    pub share_gs_encoder: bool,
    /// Initial Gaussian scale (cm).
    pub init_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            geo_res: 64,
            widths: vec![64, 64, 32, 16],
            f_channels: 4,
            pixel_hidden: vec![32, 32],
            pe_octaves: 4,
            pe_scale: 20.0,
            layered: true,
            hair_expression: true,
            gaussians: true,
            share_gs_encoder: true,
            init_scale: 1.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(CodecError::Config("widths must be non-empty and positive".into()));
        }
        let expect = 4usize << self.widths.len();
        if self.geo_res != expect {
            return Err(CodecError::Config(format!(
                "geo_res {} does not match {} decoder levels (expected {expect})",
                self.geo_res,
                self.widths.len()
            )));
        }
        if self.pixel_hidden.contains(&0) {
            return Err(CodecError::Config("pixel_hidden widths must be positive".into()));
        }
        if !(self.pe_scale > 0.0) || !(self.init_scale > 0.0) {
            return Err(CodecError::Config("pe_scale and init_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn pixel_in_features(&self) -> usize {
        APPEARANCE_CHANNELS + 3 + self.f_channels + 2 + 3 + 6 * self.pe_octaves
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Face,
    Hair,
}

impl Layer {
    pub fn raster_id(self) -> u8 {
        match self {
            Layer::Face => crate::raster::LAYER_FACE,
            Layer::Hair => crate::raster::LAYER_HAIR,
        }
    }
}

/// Neutral texture and geometry image of one layer, both `[3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeutralAssets {
    pub tex: Tensor,
    pub geo: Tensor,
}

impl NeutralAssets {
    pub fn new(tex: Tensor, geo: Tensor) -> Result<Self, CodecError> {
        let s = tex.shape();
        if s.len() != 3 || s[0] != 3 || geo.shape() != s {
            return Err(CodecError::AssetShape(s.to_vec(), geo.shape().to_vec()));
        }
        if !tex.is_finite() || !geo.is_finite() {
            return Err(CodecError::NonFinite("neutral assets"));
        }
        Ok(Self { tex, geo })
    }

    pub fn zeros(res: usize) -> Self {
        Self {
            tex: Tensor::zeros(&[3, res, res]),
            geo: Tensor::zeros(&[3, res, res]),
        }
    }

    pub fn resolution(&self) -> usize {
        self.tex.shape()[1]
    }
}

/// `μ` and `log σ`, each `[1,16,4,4]`.
#[derive(Clone, Copy, Debug)]
pub struct ExpressionCode {
    pub mu: Var,
    pub log_sigma: Var,
}

impl ExpressionCode {
    /// `μ + σ ⊙ ε`, or `μ` when `eps` is `None`.
    pub fn sample(&self, tape: &mut Tape, eps: Option<&Tensor>) -> Result<Var, CodecError> {
        let Some(eps) = eps else { return Ok(self.mu) };
        let e = tape.constant(eps.clone().reshaped(&[1, Z_CHANNELS, Z_SIDE, Z_SIDE])?);
        let sigma = tape.exp(self.log_sigma);
        let noise = tape.mul(sigma, e)?;
        Ok(tape.add(self.mu, noise)?)
    }
}

#[derive(Clone, Debug)]
struct GaussianBranch {
    hyper: GaussianHypernet,
    dec: UpDecoder,
}

#[derive(Clone, Debug)]
struct LayerBranch {
    hyper: Hypernet,
    geom: UpDecoder,
    app: UpDecoder,
    pixel: PixelDecoder,
    g_mean: ParamId,
    gs: Option<GaussianBranch>,
}

impl LayerBranch {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, layer: &str, cfg: &CodecConfig, planes: usize) -> Self {
        let n = cfg.geo_res;
        let gs = cfg.gaussians.then(|| GaussianBranch {
            hyper: GaussianHypernet::new(store, rng, &format!("{layer}.gs_hyper"), cfg),
            dec: UpDecoder::new(store, rng, &format!("{layer}.gs_dec"), cfg, 6, false, GAUSSIAN_CHANNELS),
        });
        Self {
            hyper: Hypernet::new(store, rng, &format!("{layer}.hyper"), cfg),
            geom: UpDecoder::new(store, rng, &format!("{layer}.dec_g"), cfg, planes, false, 3),
            app: UpDecoder::new(store, rng, &format!("{layer}.dec_e"), cfg, planes, true, APPEARANCE_CHANNELS),
            pixel: PixelDecoder::new(store, rng, &format!("{layer}.pixel"), cfg.pixel_in_features(), &cfg.pixel_hidden),
            g_mean: store.add(format!("{layer}.g_mean"), Tensor::zeros(&[3, n, n])),
            gs,
        }
    }
}

/// Per-vertex Gaussian attributes, each `[M,k]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianAttrs {
    pub delta: Var,
    /// Unit quaternions `(w,x,y,z)`.
    pub rotation: Var,
    /// Raw scales before clamping.
    pub scale: Var,
    /// Final colours `d_mean + d_k`.
    pub color: Var,
    pub opacity: Var,
}

/// The full set of networks and their parameters.
#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub params: ParamStore,
    pub mesh: MeshTopology,
    pub faces: Arc<Vec<[usize; 3]>>,
    encoder: ExpressionEncoder,
    gs_encoder: Option<ExpressionEncoder>,
    face: LayerBranch,
    hair: Option<LayerBranch>,
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self, CodecError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc_in = if cfg.layered { 12 } else { 6 };
        let encoder = ExpressionEncoder::new(&mut store, &mut rng, "encoder", enc_in, &cfg);
        let gs_encoder = (cfg.gaussians && !cfg.share_gs_encoder)
            .then(|| ExpressionEncoder::new(&mut store, &mut rng, "gs_encoder", enc_in, &cfg));
        let face = LayerBranch::new(&mut store, &mut rng, "face", &cfg, 6);
        let hair = cfg.layered.then(|| LayerBranch::new(&mut store, &mut rng, "hair", &cfg, 12));
        let mesh = MeshTopology::grid(cfg.geo_res, cfg.geo_res);
        let faces = Arc::new(mesh.faces().to_vec());
        Ok(Self {
            cfg,
            params: store,
            mesh,
            faces,
            encoder,
            gs_encoder,
            face,
            hair,
        })
    }

    fn branch(&self, layer: Layer) -> Result<&LayerBranch, CodecError> {
        match layer {
            Layer::Face => Ok(&self.face),
            Layer::Hair => self.hair.as_ref().ok_or(CodecError::NoHairBranch),
        }
    }

    pub fn has_hair(&self) -> bool {
        self.hair.is_some()
    }

    pub fn layers(&self) -> Vec<Layer> {
        if self.has_hair() {
            vec![Layer::Face, Layer::Hair]
        } else {
            vec![Layer::Face]
        }
    }

    pub fn g_mean_id(&self, layer: Layer) -> Result<ParamId, CodecError> {
        Ok(self.branch(layer)?.g_mean)
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    fn check_assets(&self, a: &NeutralAssets) -> Result<(), CodecError> {
        let n = self.cfg.geo_res;
        if a.tex.shape() != [3, n, n] || a.geo.shape() != [3, n, n] {
            return Err(CodecError::AssetShape(a.tex.shape().to_vec(), a.geo.shape().to_vec()));
        }
        Ok(())
    }

    /// Identity hypernetwork of one layer.
    pub fn identity(&self, tape: &mut Tape, p: &Bound, layer: Layer, assets: &NeutralAssets) -> Result<IdentityConditioning, CodecError> {
        self.check_assets(assets)?;
        self.branch(layer)?.hyper.forward(tape, p, &assets.tex, &assets.geo)
    }

    pub fn gaussian_identity(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: Layer,
        assets: &NeutralAssets,
    ) -> Result<GaussianConditioning, CodecError> {
        self.check_assets(assets)?;
        let gs = self.branch(layer)?.gs.as_ref().ok_or(CodecError::NoGaussianBranch)?;
        gs.hyper.forward(tape, p, &assets.tex, &assets.geo)
    }

    /// Encoder input: `[ΔT, ΔG]` per layer, face first. `current` and
    /// `neutral` hold one entry per model layer.
    fn expression_input(&self, tape: &mut Tape, current: &[&NeutralAssets], neutral: &[&NeutralAssets]) -> Result<Var, CodecError> {
        let layers = self.layers().len();
        if current.len() != layers || neutral.len() != layers {
            return Err(CodecError::Config(format!("expected maps for {layers} layers")));
        }
        let n = self.cfg.geo_res;
        let mut parts = Vec::new();
        for (c, z) in current.iter().zip(neutral) {
            self.check_assets(c)?;
            self.check_assets(z)?;
            let dt = Tensor::new(vec![1, 3, n, n], c.tex.data().iter().zip(z.tex.data()).map(|(a, b)| a - b).collect())?;
            let dg = Tensor::new(
                vec![1, 3, n, n],
                c.geo.data().iter().zip(z.geo.data()).map(|(a, b)| (a - b) / GEO_SCALE).collect(),
            )?;
            parts.push(tape.constant(dt));
            parts.push(tape.constant(dg));
        }
        Ok(tape.concat(&parts, 1)?)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        current: &[&NeutralAssets],
        neutral: &[&NeutralAssets],
    ) -> Result<ExpressionCode, CodecError> {
        let x = self.expression_input(tape, current, neutral)?;
        let (mu, log_sigma) = self.encoder.forward(tape, p, x)?;
        Ok(ExpressionCode { mu, log_sigma })
    }

    /// Expression code for the Gaussian decoders: the shared one, or the
    /// output of the untied encoder.
    pub fn encode_gaussian(
        &self,
        tape: &mut Tape,
        p: &Bound,
        current: &[&NeutralAssets],
        neutral: &[&NeutralAssets],
        shared: ExpressionCode,
    ) -> Result<ExpressionCode, CodecError> {
        match &self.gs_encoder {
            None => Ok(shared),
            Some(enc) => {
                let x = self.expression_input(tape, current, neutral)?;
                let (mu, log_sigma) = enc.forward(tape, p, x)?;
                Ok(ExpressionCode { mu, log_sigma })
            }
        }
    }

    /// `(g, e)` of the face layer, shaped `[1,3,H,W]` and `[1,4,H,W]`.
    pub fn decode_face(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        eta: [f64; 6],
        omega: [f64; 3],
        cond: &IdentityConditioning,
    ) -> Result<(Var, Var), CodecError> {
        let b = &self.face;
        let g = b.geom.forward(tape, p, &DecoderInputs { z: Some(z), planes: &eta, omega: None, theta: &cond.theta_g })?;
        let e = b.app.forward(tape, p, &DecoderInputs { z: Some(z), planes: &eta, omega: Some(omega), theta: &cond.theta_e })?;
        Ok((g, e))
    }

    /// `(g_hair, e_hair)`. With hair expression disabled `z` is severed.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_hair(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        eta: [f64; 6],
        h: [f64; 6],
        omega: [f64; 3],
        cond: &IdentityConditioning,
    ) -> Result<(Var, Var), CodecError> {
        let b = self.branch(Layer::Hair)?;
        let planes: Vec<f64> = eta.iter().chain(&h).copied().collect();
        let z = self.cfg.hair_expression.then_some(z);
        let g = b.geom.forward(tape, p, &DecoderInputs { z, planes: &planes, omega: None, theta: &cond.theta_g })?;
        let e = b.app.forward(tape, p, &DecoderInputs { z, planes: &planes, omega: Some(omega), theta: &cond.theta_e })?;
        Ok((g, e))
    }

    /// `G = g_mean + d + g` as `[3,H,W]`.
    pub fn compose(&self, tape: &mut Tape, p: &Bound, layer: Layer, d: Var, g: Var) -> Result<Var, CodecError> {
        let n = self.cfg.geo_res;
        let gm = p.var(self.branch(layer)?.g_mean);
        let d = tape.reshape(d, &[3, n, n])?;
        let g = tape.reshape(g, &[3, n, n])?;
        Ok(crate::geomesh::compose_geometry(tape, gm, d, g)?)
    }

    /// Per-pixel decoder input rows for the covered pixels `index` of an
    /// interpolated feature image `[A+4,H,W]` whose attributes are
    /// `[e (4), f, u (2)]`.
    pub fn pixel_features(&self, tape: &mut Tape, interp: Var, index: &[usize]) -> Result<Var, CodecError> {
        let s = tape.shape(interp).to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let flat = tape.reshape(interp, &[c, hw])?;
        let rows = tape.transpose(flat)?;
        let rows = tape.gather_rows(rows, index)?;
        let attrs = tape.slice(rows, 1, 0, c - 4)?;
        let x = tape.slice(rows, 1, c - 4, 3)?;
        let x = tape.scale(x, 1.0 / self.cfg.pe_scale);
        let mut parts = vec![attrs, x];
        for k in 0..self.cfg.pe_octaves {
            let xs = tape.scale(x, std::f64::consts::PI * (1u64 << k) as f64);
            parts.push(tape.sin(xs));
            parts.push(tape.cos(xs));
        }
        Ok(tape.concat(&parts, 1)?)
    }

    /// Colours `[P,3]` from per-pixel features.
    pub fn decode_pixels(&self, tape: &mut Tape, p: &Bound, layer: Layer, features: Var) -> Result<Var, CodecError> {
        self.branch(layer)?.pixel.forward(tape, p, features)
    }

    /// Vertex attributes `[V, 4 + 3 + f_channels + 2]` for interpolation:
    /// appearance code, `f` and UV.
    pub fn vertex_attributes(&self, tape: &mut Tape, e: Var, f: Var) -> Result<Var, CodecError> {
        let n = self.cfg.geo_res;
        let e = tape.reshape(e, &[APPEARANCE_CHANNELS, n, n])?;
        let fc = tape.shape(f)[1];
        let f = tape.reshape(f, &[fc, n, n])?;
        let ev = crate::geomesh::sample_geometry_image(tape, e, &self.mesh)?;
        let fv = crate::geomesh::sample_geometry_image(tape, f, &self.mesh)?;
        let uv = tape.constant(Tensor::new(vec![self.vertex_count(), 2], self.mesh.uv_flat())?);
        Ok(tape.concat(&[ev, fv, uv], 1)?)
    }

    /// Gaussian attributes for every vertex of one layer's guide mesh.
    pub fn decode_gaussians(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: Layer,
        z: Var,
        eta: [f64; 6],
        cond: &GaussianConditioning,
    ) -> Result<GaussianAttrs, CodecError> {
        let gs = self.branch(layer)?.gs.as_ref().ok_or(CodecError::NoGaussianBranch)?;
        let n = self.cfg.geo_res;
        let out = gs.dec.forward(tape, p, &DecoderInputs { z: Some(z), planes: &eta, omega: None, theta: &cond.theta })?;
        let out = tape.reshape(out, &[GAUSSIAN_CHANNELS, n, n])?;
        let v = crate::geomesh::sample_geometry_image(tape, out, &self.mesh)?;
        let cm = tape.reshape(cond.color_mean, &[3, n, n])?;
        let cmv = crate::geomesh::sample_geometry_image(tape, cm, &self.mesh)?;
        let m = self.vertex_count();

        let delta = tape.slice(v, 1, 0, 3)?;
        let q_raw = tape.slice(v, 1, 3, 4)?;
        let bias = tape.constant(Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0])?);
        let q = tape.add(q_raw, bias)?;
        let sq = tape.square(q);
        let ones_col = tape.constant(Tensor::ones(&[4, 1]));
        let norm2 = tape.matmul(sq, ones_col)?;
        let logn = tape.log(norm2);
        let inv = tape.scale(logn, -0.5);
        let inv = tape.exp(inv);
        let ones_row = tape.constant(Tensor::ones(&[1, 4]));
        let inv4 = tape.matmul(inv, ones_row)?;
        let rotation = tape.mul(q, inv4)?;

        let s_raw = tape.slice(v, 1, 7, 3)?;
        let s_log = tape.add_scalar(s_raw, self.cfg.init_scale.ln());
        let scale = tape.exp(s_log);
        let c_delta = tape.slice(v, 1, 10, 3)?;
        let color = tape.add(cmv, c_delta)?;
        let o_raw = tape.slice(v, 1, 13, 1)?;
        let opacity = tape.sigmoid(o_raw);
        debug_assert_eq!(tape.shape(opacity), [m, 1]);
        Ok(GaussianAttrs {
            delta,
            rotation,
            scale,
            color,
            opacity,
        })
    }

    /// Parameter ids belonging to the Gaussian branch (hypernets, decoders
    /// and an untied encoder).
    pub fn gaussian_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                n.contains(".gs_") || n.starts_with("gs_encoder")
            })
            .collect()
    }

    /// Appearance decoder's view grid for `ω`, as `[16,8,8]`.
    pub fn omega_grid(&self, layer: Layer, omega: [f64; 3]) -> Result<Tensor, CodecError> {
        self.branch(layer)?.app.omega_grid(&self.params, omega).ok_or(CodecError::MissingOmega)
    }
}
