//! Transport-independent state machine of a live driving session.
//!
//! Every accepted state change renders exactly one frame; a rejected
//! message produces an error reply and leaves the state untouched.

use std::sync::Arc;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::codec::Z_DIM;
use crate::raster::Camera;
use crate::synth::perform::HEAD_CENTER;
use crate::geomesh::Vec3;
use crate::tensor::Tensor;

use super::data::TrainingData;
use super::model::{Model, RenderMode, Rendered};
use super::HarnessError;

/// An identity by dataset name or by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IdentityKey {
    Index(usize),
    Name(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerName {
    Face,
    Hair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    SetExpression { z: Vec<f64> },
    SetPose { eta: [f64; 6], h: [f64; 6] },
    SetCamera { azimuth: f64, elevation: f64, distance: f64 },
    ToggleLayer { layer: LayerName, on: bool },
    SetIdentity { id: IdentityKey },
    SetMode { mode: RenderMode },
}

/// Per-frame summary of what is visible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasksMeta {
    pub face_pixels: usize,
    pub hair_pixels: usize,
    pub face_on: bool,
    pub hair_on: bool,
    pub identity: String,
    pub mode: RenderMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        frame_id: u64,
        width: usize,
        height: usize,
        /// Row-major 8-bit RGB triplets.
        rgb_base64: String,
        masks_meta: MasksMeta,
        render_ms: f64,
    },
    Error {
        message: String,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

/// Quantises a `[3,H,W]` image in `[0,1]` to interleaved RGB8.
pub fn to_rgb8(rgb: &Tensor) -> Vec<u8> {
    let hw = rgb.numel() / 3;
    let d = rgb.data();
    (0..hw)
        .flat_map(|i| (0..3).map(move |c| (d[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
struct State {
    identity: usize,
    z: Tensor,
    eta: [f64; 6],
    h: [f64; 6],
    orbit: [f64; 3],
    show: [bool; 2],
    mode: RenderMode,
}

pub struct Session {
    model: Arc<Model>,
    data: Arc<TrainingData>,
    fov: f64,
    state: State,
    frame_id: u64,
}

fn default_orbit(data: &TrainingData) -> [f64; 3] {
    let cam = &data.dataset.rig.cameras[0];
    let eye = -(cam.r.transpose() * cam.t);
    [0.0, 0.0, (eye - Vec3::from(HEAD_CENTER)).norm()]
}

impl Session {
    /// A session showing the first identity at the neutral expression and
    /// zero pose, in mesh mode.
    pub fn new(model: Arc<Model>, data: Arc<TrainingData>, fov: f64) -> Result<Self, HarnessError> {
        let state = State {
            identity: 0,
            z: model.neutral_code()?,
            eta: [0.0; 6],
            h: [0.0; 6],
            orbit: default_orbit(&data),
            show: [true, true],
            mode: RenderMode::Mesh,
        };
        Ok(Self { model, data, fov, state, frame_id: 0 })
    }

    pub fn frame_id(&self) -> u64 {
        self.frame_id
    }

    fn camera(&self, s: &State) -> Camera {
        let [az, el, dist] = s.orbit;
        Camera::orbit(Vec3::from(HEAD_CENTER), az, el, dist, self.fov, self.data.dataset.image_size)
    }

    fn render(&self, s: &State) -> Result<Rendered, HarnessError> {
        let identity = &self.data.identities[s.identity];
        self.model.render(identity, &s.z, s.eta, s.h, &self.camera(s), s.show, s.mode)
    }

    /// Renders the current state as the next frame.
    pub fn frame(&mut self) -> ServerMessage {
        let s = self.state.clone();
        self.commit(s)
    }

    fn commit(&mut self, next: State) -> ServerMessage {
        let started = Instant::now();
        match self.render(&next) {
            Ok(r) => {
                let render_ms = started.elapsed().as_secs_f64() * 1e3;
                self.state = next;
                self.frame_id += 1;
                let size = self.data.dataset.image_size;
                ServerMessage::Frame {
                    frame_id: self.frame_id,
                    width: size,
                    height: size,
                    rgb_base64: STANDARD.encode(to_rgb8(&r.rgb)),
                    masks_meta: MasksMeta {
                        face_pixels: r.face_pixels(),
                        hair_pixels: r.hair_pixels(),
                        face_on: self.state.show[0],
                        hair_on: self.state.show[1],
                        identity: self.data.identities[self.state.identity].name.clone(),
                        mode: self.state.mode,
                    },
                    render_ms,
                }
            }
            Err(e) => ServerMessage::Error { message: e.to_string() },
        }
    }

    fn apply(&self, msg: ClientMessage) -> Result<State, String> {
        let mut s = self.state.clone();
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match msg {
            ClientMessage::SetExpression { z } => {
                if z.len() != Z_DIM || !finite(&z) {
                    return Err(format!("z must hold {Z_DIM} finite values, got {}", z.len()));
                }
                s.z = Tensor::new(vec![Z_DIM], z).expect("length checked");
            }
            ClientMessage::SetPose { eta, h } => {
                if !finite(&eta) || !finite(&h) {
                    return Err("pose values must be finite".into());
                }
                s.eta = eta;
                s.h = h;
            }
            ClientMessage::SetCamera { azimuth, elevation, distance } => {
                if !finite(&[azimuth, elevation, distance]) || distance <= 0.0 || elevation.abs() >= std::f64::consts::FRAC_PI_2 {
                    return Err("camera needs finite angles, |elevation| < pi/2 and distance > 0".into());
                }
                s.orbit = [azimuth, elevation, distance];
            }
            ClientMessage::ToggleLayer { layer, on } => {
                s.show[layer as usize] = on;
            }
            ClientMessage::SetIdentity { id } => {
                s.identity = match id {
                    IdentityKey::Index(i) if i < self.data.identities.len() => i,
                    IdentityKey::Name(n) => self.data.resolve(&n).map_err(|e| e.to_string())?,
                    IdentityKey::Index(i) => return Err(format!("unknown identity {i}")),
                };
            }
            ClientMessage::SetMode { mode } => {
                if mode == RenderMode::Gaussian && !self.model.codec.cfg.gaussians {
                    return Err("this checkpoint has no Gaussian branch".into());
                }
                s.mode = mode;
            }
        }
        Ok(s)
    }

    /// Handles one text message and returns the single reply.
    pub fn handle_text(&mut self, text: &str) -> ServerMessage {
        let msg: ClientMessage = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => return ServerMessage::Error { message: format!("malformed message: {e}") },
        };
        match self.apply(msg) {
            Ok(next) => self.commit(next),
            Err(message) => ServerMessage::Error { message },
        }
    }
}
