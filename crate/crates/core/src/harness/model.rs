use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{render_frame, render_gaussian_frame, Codec, FrameInputs, LayerMaps, NeutralAssets, ParamStore, Z_DIM};
use crate::raster::{Camera, LAYER_FACE, LAYER_HAIR};
use crate::tensor::{Tape, Tensor};

use super::config::TrainConfig;
use super::data::{FrameMaps, IdentityData, Surface};
use super::HarnessError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    #[default]
    Mesh,
    Gaussian,
}

/// A codec together with the training config that built it.
#[derive(Clone, Debug)]
pub struct Model {
    pub codec: Codec,
    pub cfg: TrainConfig,
}

/// An inference render.
#[derive(Clone, Debug)]
pub struct Rendered {
    /// `[3,H,W]`; Gaussian mode is premultiplied over black.
    pub rgb: Tensor,
    /// Layer id of the visible mesh surface per pixel.
    pub layers: Vec<u8>,
}

impl Rendered {
    pub fn layer_pixels(&self, id: u8) -> usize {
        self.layers.iter().filter(|&&l| l == id).count()
    }

    pub fn face_pixels(&self) -> usize {
        self.layer_pixels(LAYER_FACE)
    }

    pub fn hair_pixels(&self) -> usize {
        self.layer_pixels(LAYER_HAIR)
    }
}

const CONFIG_FILE: &str = "train.toml";

impl Model {
    pub fn new(cfg: TrainConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let codec = Codec::new(cfg.codec_config(), cfg.seed)?;
        Ok(Self { codec, cfg })
    }

    pub fn surface(&self) -> Surface {
        if self.codec.has_hair() {
            Surface::Layered
        } else {
            Surface::Single
        }
    }

    pub fn save(&self, dir: &Path, meta: &BTreeMap<String, String>) -> Result<(), HarnessError> {
        self.codec.params.save(dir, meta)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.cfg.to_toml()).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Rebuilds the model from its stored config and loads the weights.
    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>), HarnessError> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut model = Self::new(TrainConfig::from_toml(&text)?)?;
        let (store, meta) = ParamStore::load(dir)?;
        model.codec.params.assign_from(&store)?;
        Ok((model, meta))
    }

    /// Expression code `μ` of a frame, flattened to `Z_DIM` values.
    pub fn encode(&self, identity: &IdentityData, frame: &FrameMaps) -> Result<Tensor, HarnessError> {
        let surface = self.surface();
        let (face_n, hair_n) = identity.neutral(surface)?;
        let (face_c, hair_c) = frame.current(surface);
        let zeros = NeutralAssets::zeros(self.codec.cfg.geo_res);
        let mut cur = vec![face_c];
        let mut neu = vec![face_n];
        if self.codec.has_hair() {
            match (hair_c, hair_n) {
                (Some(c), Some(n)) => {
                    cur.push(c);
                    neu.push(n);
                }
                _ => {
                    cur.push(&zeros);
                    neu.push(&zeros);
                }
            }
        }
        let mut tape = Tape::new();
        let p = self.codec.params.bind(&mut tape, false);
        let code = self.codec.encode(&mut tape, &p, &cur, &neu)?;
        Ok(tape.value(code.mu).clone().reshaped(&[Z_DIM])?)
    }

    /// Code of the neutral expression (all deltas zero). It does not depend
    /// on the identity because the encoder only sees differences.
    pub fn neutral_code(&self) -> Result<Tensor, HarnessError> {
        let zeros = NeutralAssets::zeros(self.codec.cfg.geo_res);
        let maps: Vec<&NeutralAssets> = self.codec.layers().iter().map(|_| &zeros).collect();
        let mut tape = Tape::new();
        let p = self.codec.params.bind(&mut tape, false);
        let code = self.codec.encode(&mut tape, &p, &maps, &maps)?;
        Ok(tape.value(code.mu).clone().reshaped(&[Z_DIM])?)
    }

    /// Decodes identity `identity` with expression code `z` and renders one
    /// view. `show` hides layers by raster slot (face, hair).
    #[allow(clippy::too_many_arguments)]
    pub fn render(
        &self,
        identity: &IdentityData,
        z: &Tensor,
        eta: [f64; 6],
        h: [f64; 6],
        camera: &Camera,
        show: [bool; 2],
        mode: RenderMode,
    ) -> Result<Rendered, HarnessError> {
        if z.numel() != Z_DIM {
            return Err(HarnessError::Data(format!("expression code has {} values, expected {Z_DIM}", z.numel())));
        }
        let surface = self.surface();
        let (face, hair) = identity.neutral(surface)?;
        let inp = FrameInputs {
            face: LayerMaps { neutral: face, current: face },
            hair: hair.map(|h| LayerMaps { neutral: h, current: h }),
            eta,
            h,
            camera,
            eps: None,
            z: Some(z),
            show,
            with_normals: false,
            with_soft_masks: false,
        };
        let mut tape = Tape::new();
        let p = self.codec.params.bind(&mut tape, false);
        let frame = render_frame(&self.codec, &mut tape, &p, &inp)?;
        let layers: Vec<u8> = frame.frags.frags.iter().map(|f| f.layer).collect();
        let image = match mode {
            RenderMode::Mesh => frame.image,
            RenderMode::Gaussian => {
                if !self.codec.cfg.gaussians {
                    return Err(HarnessError::Data("this model has no Gaussian branch".into()));
                }
                render_gaussian_frame(&self.codec, &mut tape, &p, &inp, &frame)?.image
            }
        };
        Ok(Rendered {
            rgb: tape.value(image).clone(),
            layers,
        })
    }
}
