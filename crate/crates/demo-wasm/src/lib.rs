//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The page can generate a synthetic head, drive its expression and pose,
//! and switch between the layered capture, the bald head under the hair and
//! the single-surface scan. Each view can be shown as colour, segmentation
//! or depth.

use lucas_core::raster::Camera;
use lucas_core::synth::perform::HEAD_CENTER;
use lucas_core::synth::{generate_identity, pose_frame, render_view, BaldModel, FrameState, IdentityAssets, Surfaces, WigStyle};
use lucas_core::geomesh::Vec3;
use wasm_bindgen::prelude::*;

const GEO_RES: usize = 32;
const DISTANCE: f64 = 48.0;
const FOV: f64 = 0.62;

/// Which surfaces are drawn.
#[wasm_bindgen]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layers {
    /// Face and hair meshes.
    Layered = 0,
    /// The face mesh alone, showing the head under the hair.
    Bald = 1,
    /// One surface wrapping face and hair.
    Scan = 2,
}

#[wasm_bindgen]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Color = 0,
    Segmentation = 1,
    Depth = 2,
}

#[wasm_bindgen]
pub struct Viewer {
    assets: IdentityAssets,
    expression: [f64; 5],
    yaw: f64,
    pitch: f64,
    azimuth: f64,
    layers: Layers,
    channel: Channel,
    size: usize,
}

fn style_from_index(i: u32) -> Result<WigStyle, String> {
    WigStyle::ALL.get(i as usize).copied().ok_or_else(|| format!("unknown wig style {i}"))
}

#[wasm_bindgen]
impl Viewer {
    /// A new head from `seed` with wig style 0 (none), 1 (short), 2 (long)
    /// or 3 (side swept), rendered at `size`×`size` pixels.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, style: u32, size: usize) -> Result<Viewer, JsError> {
        let style = style_from_index(style).map_err(|e| JsError::new(&e))?;
        if !(16..=512).contains(&size) {
            return Err(JsError::new("size must lie in 16..=512"));
        }
        Ok(Viewer {
            assets: build(seed, style),
            expression: [0.0; 5],
            yaw: 0.0,
            pitch: 0.0,
            azimuth: 0.0,
            layers: Layers::Layered,
            channel: Channel::Color,
            size,
        })
    }

    /// Replaces the head, keeping pose and view settings.
    pub fn regenerate(&mut self, seed: u32, style: u32) -> Result<(), JsError> {
        let style = style_from_index(style).map_err(|e| JsError::new(&e))?;
        self.assets = build(seed, style);
        Ok(())
    }

    pub fn has_hair(&self) -> bool {
        self.assets.hair.is_some()
    }

    /// Expression weight `index` (0..5), clamped to `[0,1]`.
    pub fn set_expression(&mut self, index: usize, weight: f64) {
        if let Some(w) = self.expression.get_mut(index) {
            *w = weight.clamp(0.0, 1.0);
        }
    }

    /// Head rotation in radians.
    pub fn set_head(&mut self, yaw: f64, pitch: f64) {
        self.yaw = yaw;
        self.pitch = pitch;
    }

    pub fn set_azimuth(&mut self, azimuth: f64) {
        self.azimuth = azimuth;
    }

    pub fn set_layers(&mut self, layers: Layers) {
        self.layers = layers;
    }

    pub fn set_channel(&mut self, channel: Channel) {
        self.channel = channel;
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// RGBA pixels, row-major, ready for `ImageData`.
    pub fn render(&self) -> Result<Vec<u8>, JsError> {
        let h = [self.pitch, self.yaw, 0.0, 0.0, 0.0, 0.0];
        let mut state = pose_frame(&self.assets, 0, self.expression, [0.0; 6], h, h).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(self.draw(&mut state))
    }
}

impl Viewer {
    fn draw(&self, state: &mut FrameState) -> Vec<u8> {
        let cam = Camera::orbit(Vec3::from(HEAD_CENTER), self.azimuth, 0.1, DISTANCE, FOV, self.size);
        let which = match self.layers {
            Layers::Scan => Surfaces::Scan,
            Layers::Layered => Surfaces::Layered,
            Layers::Bald => {
                state.hair.clear();
                Surfaces::Layered
            }
        };
        let view = render_view(&self.assets, state, &cam, which);
        let hw = self.size * self.size;
        let depth = view.depth.data();
        let (near, far) = depth
            .iter()
            .filter(|&&d| d > 0.0)
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        let mut out = Vec::with_capacity(4 * hw);
        for i in 0..hw {
            let rgb = match self.channel {
                Channel::Color => [0, 1, 2].map(|c| view.rgb.data()[c * hw + i]),
                Channel::Segmentation => match view.seg.data()[i] as u8 {
                    1 => [0.95, 0.75, 0.6],
                    2 => [0.35, 0.2, 0.6],
                    _ => [0.0; 3],
                },
                Channel::Depth if depth[i] > 0.0 => {
                    let v = 1.0 - 0.8 * (depth[i] - near) / (far - near).max(1e-9);
                    [v; 3]
                }
                Channel::Depth => [0.0; 3],
            };
            out.extend(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            out.push(255);
        }
        out
    }
}

fn build(seed: u32, style: WigStyle) -> IdentityAssets {
    let identity = generate_identity(0, u64::from(seed), GEO_RES, Some(style));
    IdentityAssets::new(identity, &BaldModel::new(GEO_RES))
}
