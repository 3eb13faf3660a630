//! The config file is TOML with one table per command. Unknown keys are
//! rejected everywhere, and every table may be omitted to take defaults.
//!
//! ```toml
//! [synth]                     # lucas synth-data
//! geo_res = 32
//! image_size = 64
//! [dehair]                    # lucas dehair
//! k = 16
//! [train]                     # lucas train
//! steps = 2000
//! [train.codec]
//! geo_res = 32
//! widths = [16, 12, 8]
//! [train.ablation]
//! single_mesh = false
//! [serve]                     # lucas serve
//! port = 8765
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::dehair::{EmConfig, PipelineConfig};
use crate::losses::LossWeights;
use crate::synth::{IdentitySpec, PerformanceConfig, SynthConfig};

use super::HarnessError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LucasConfig {
    pub synth: SynthConfig,
    pub dehair: DehairSettings,
    pub train: TrainConfig,
    pub serve: ServeConfig,
}

impl LucasConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.synth.validate()?;
        self.dehair.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Desk-scale setup used by the end-to-end tests: four identities with
    /// every wig style plus one unseen identity, eight cameras at 64×64 and a
    /// 32×32 geometry image.
    pub fn toy() -> Self {
        let mut identities: Vec<IdentitySpec> = (0..4).map(|s| IdentitySpec { seed: s, style: None }).collect();
        identities.push(IdentitySpec { seed: 6, style: None });
        let synth = SynthConfig {
            geo_res: 32,
            image_size: 64,
            cameras: 8,
            identities,
            reference_bald: 20,
            performance: PerformanceConfig {
                frames: 40,
                ..PerformanceConfig::default()
            },
            ..SynthConfig::default()
        };
        let train = TrainConfig {
            codec: CodecConfig {
                geo_res: 32,
                widths: vec![16, 12, 8],
                f_channels: 2,
                pixel_hidden: vec![16],
                pe_octaves: 2,
                ..CodecConfig::default()
            },
            identities: (0..4).map(crate::synth::identity_name).collect(),
            ..TrainConfig::default()
        };
        Self {
            synth,
            train,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DehairSettings {
    pub k: usize,
    pub lambda_lap: f64,
    pub iters: usize,
    pub regularize_mean: bool,
    pub stitch_iters: usize,
}

impl Default for DehairSettings {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            k: em.k,
            lambda_lap: em.lambda_lap,
            iters: em.iters,
            regularize_mean: em.regularize_mean,
            stitch_iters: PipelineConfig::default().stitch_iters,
        }
    }
}

impl DehairSettings {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.k == 0 || self.iters == 0 || !(self.lambda_lap >= 0.0) {
            return Err(HarnessError::Config("dehair needs k >= 1, iters >= 1 and lambda_lap >= 0".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            em: EmConfig {
                k: self.k,
                lambda_lap: self.lambda_lap,
                iters: self.iters,
                regularize_mean: self.regularize_mean,
            },
            stitch_iters: self.stitch_iters,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// One mesh for face and hair, built from the hairy scan.
    pub single_mesh: bool,
    /// Hair decoders do not see the expression code.
    pub no_hair_expression_code: bool,
    pub no_seg_loss: bool,
    /// No Gaussian branch.
    pub mesh_only: bool,
    /// Drop the mesh photometric term; the meshes still get geometric
    /// supervision because they anchor the Gaussians.
    pub gaussians_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `λ` of the smoothness preconditioner applied to `g_mean` gradients.
    pub precondition_lambda: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precondition_lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub heldout_cameras: Vec<usize>,
    /// Trailing fraction of every performance kept for evaluation.
    pub heldout_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            heldout_cameras: vec![1],
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub codec: CodecConfig,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub ablation: Ablation,
    pub split: SplitConfig,
    pub steps: u64,
    pub seed: u64,
    /// Training identities by directory name; empty means all.
    pub identities: Vec<String>,
    pub log_every: u64,
    /// Number of fixed training views used to track photometric L1.
    pub probe_views: usize,
    pub probe_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            ablation: Ablation::default(),
            split: SplitConfig::default(),
            steps: 2000,
            seed: 0,
            identities: Vec::new(),
            log_every: 50,
            probe_views: 8,
            probe_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let a = &self.ablation;
        if a.mesh_only && a.gaussians_only {
            return Err(HarnessError::Config("mesh_only and gaussians_only exclude each other".into()));
        }
        self.codec_config().validate()?;
        self.weights.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(HarnessError::Config("optimizer needs lr > 0, betas in [0,1) and eps > 0".into()));
        }
        if !(o.precondition_lambda >= 0.0) {
            return Err(HarnessError::Config("precondition_lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.split.heldout_fraction) {
            return Err(HarnessError::Config("split.heldout_fraction must lie in [0,1)".into()));
        }
        if self.log_every == 0 || self.probe_every == 0 {
            return Err(HarnessError::Config("log_every and probe_every must be positive".into()));
        }
        Ok(())
    }

    /// Architecture after the ablation switches.
    pub fn codec_config(&self) -> CodecConfig {
        let a = &self.ablation;
        CodecConfig {
            layered: self.codec.layered && !a.single_mesh,
            hair_expression: self.codec.hair_expression && !a.no_hair_expression_code,
            gaussians: self.codec.gaussians && !a.mesh_only,
            ..self.codec.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Vertical field of view of the interactive camera; image size comes
    /// from the dataset.
    pub fov: f64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8765,
            fov: 0.62,
        }
    }
}
