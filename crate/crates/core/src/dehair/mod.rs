//! Bald-head shape model and hair removal.
//!
//! A factor model is fitted to fully visible (bald) heads, then used to fill
//! in the scalp under each remaining subject's hair from the visible part of
//! that subject's head. The filled region is blended into the visible
//! surface with an as-rigid-as-possible solve. Subjects are processed from
//! least to most hair. Every dehaired result joins the training set before
//! the next refit.

mod arap;
mod factor;

use nalgebra::DVector;
use thiserror::Error;

use crate::geomesh::{GeomError, Laplacian, MeshTopology, Vec3};

pub use arap::{arap_energy, arap_solve, stitch, ArapResult};
pub use factor::{em_fit, EmConfig, EmFit, FactorModel, Posterior, Sample, PSI_FLOOR};

#[derive(Debug, Error)]
pub enum DehairError {
    #[error("latent dimension must be at least 1, got {0}")]
    BadK(usize),
    #[error("need at least {needed} scans, found {found}")]
    TooFewScans { needed: usize, found: usize },
    #[error("scan {scan} has {found} coordinates, expected {expected}")]
    Dimension { scan: usize, expected: usize, found: usize },
    #[error("posterior covariance of scan {scan} is singular")]
    SingularPosterior { scan: usize },
    #[error("only {observed} coordinates observed, at least {needed} required")]
    TooFewObserved { observed: usize, needed: usize },
    #[error("no scan with zero hair coverage to seed the model")]
    NoBaldSeed,
    #[error("a smoothness weight was given without a Laplacian of matching size")]
    MissingLaplacian,
    #[error("penalised M-step did not converge (relative residual {residual:e})")]
    CgNotConverged { residual: f64 },
    #[error("stitch system is not positive definite")]
    StitchSystem,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Tracked head geometry for one subject plus its hair-coverage mask.
#[derive(Clone, Debug)]
pub struct IdentityScan {
    pub id: usize,
    /// Vertex-major coordinates, `3V` entries (cm).
    pub vertices: Vec<f64>,
    /// `true` where the vertex is hidden under hair.
    pub hair: Vec<bool>,
}

impl IdentityScan {
    pub fn coverage(&self) -> f64 {
        if self.hair.is_empty() {
            return 0.0;
        }
        self.hair.iter().filter(|&&h| h).count() as f64 / self.hair.len() as f64
    }

    pub fn observed(&self) -> Vec<bool> {
        self.hair.iter().map(|&h| !h).collect()
    }
}

/// Processing order: ascending coverage, ties by identity id.
pub fn order_identities(scans: &[IdentityScan]) -> Result<Vec<usize>, DehairError> {
    if !scans.iter().any(|s| s.coverage() == 0.0) {
        return Err(DehairError::NoBaldSeed);
    }
    let mut idx: Vec<usize> = (0..scans.len()).collect();
    idx.sort_by(|&a, &b| {
        scans[a]
            .coverage()
            .total_cmp(&scans[b].coverage())
            .then(scans[a].id.cmp(&scans[b].id))
    });
    Ok(idx.into_iter().map(|i| scans[i].id).collect())
}

/// Result of filling one scan's hidden region from the model.
#[derive(Clone, Debug)]
pub struct Dehaired {
    /// Observed coordinates from the scan, hidden ones from the model.
    pub geometry: Vec<f64>,
    /// Model reconstruction `μ + W E[z]` at every coordinate.
    pub reconstruction: Vec<f64>,
    pub latent: DVector<f64>,
}

/// Fills hair-covered coordinates with `μ + W E[z | x_obs]`.
pub fn dehair_scan(model: &FactorModel, scan: &IdentityScan) -> Result<Dehaired, DehairError> {
    if scan.vertices.len() != model.dim() || scan.hair.len() * 3 != model.dim() {
        return Err(DehairError::Dimension {
            scan: scan.id,
            expected: model.dim(),
            found: scan.vertices.len(),
        });
    }
    let observed = scan.observed();
    let n_obs = 3 * observed.iter().filter(|&&o| o).count();
    if n_obs < 3 * model.k() {
        return Err(DehairError::TooFewObserved {
            observed: n_obs,
            needed: 3 * model.k(),
        });
    }
    let post = model.posterior(&scan.vertices, &observed, scan.id)?;
    let recon = model.reconstruct(&post.mean);
    let geometry = (0..model.dim())
        .map(|d| if observed[d / 3] { scan.vertices[d] } else { recon[d] })
        .collect();
    Ok(Dehaired {
        geometry,
        reconstruction: recon.iter().copied().collect(),
        latent: post.mean,
    })
}

/// Per-identity outcome of the progressive pipeline.
#[derive(Clone, Debug)]
pub struct BaldResult {
    pub id: usize,
    pub geometry: Vec<f64>,
    /// Set when part of the hidden region had no visible boundary to stitch to.
    pub stitch_warning: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub em: EmConfig,
    pub stitch_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            stitch_iters: 20,
        }
    }
}

/// Fitted model plus the bald geometry of every scan, in processing order.
pub struct PipelineOutput {
    pub model: FactorModel,
    pub results: Vec<BaldResult>,
    /// Latent dimension actually used (capped by the number of training scans).
    pub k_used: usize,
}

/// Seeds the model with bald scans, then dehairs the rest from least to
/// most hair, refitting from scratch after each addition.
pub fn progressive_dehair(
    scans: &[IdentityScan],
    mesh: &MeshTopology,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, DehairError> {
    let order = order_identities(scans)?;
    let lap = Laplacian::from_mesh(mesh);
    let by_id = |id: usize| scans.iter().find(|s| s.id == id).expect("id from order");
    let mut training: Vec<Sample> = Vec::new();
    let mut results = Vec::new();
    let mut model: Option<FactorModel> = None;
    let mut k_used = 0;
    let mut pending_refit = false;
    for id in order {
        let scan = by_id(id);
        if scan.coverage() == 0.0 {
            training.push(Sample::full(scan.vertices.clone()));
            results.push(BaldResult {
                id,
                geometry: scan.vertices.clone(),
                stitch_warning: false,
            });
            pending_refit = true;
            continue;
        }
        if pending_refit || model.is_none() {
            let fit = refit(&training, &lap, cfg)?;
            k_used = fit.model.k();
            model = Some(fit.model);
        }
        let m = model.as_ref().expect("fitted above");
        let filled = dehair_scan(m, scan)?;
        let st = stitch(&filled.reconstruction, &scan.vertices, &scan.observed(), mesh, cfg.stitch_iters)?;
        training.push(Sample::full(st.positions.clone()));
        results.push(BaldResult {
            id,
            geometry: st.positions,
            stitch_warning: st.warning,
        });
        pending_refit = true;
    }
    if pending_refit || model.is_none() {
        let fit = refit(&training, &lap, cfg)?;
        k_used = fit.model.k();
        model = Some(fit.model);
    }
    Ok(PipelineOutput {
        model: model.expect("fitted"),
        results,
        k_used,
    })
}

fn refit(training: &[Sample], lap: &Laplacian, cfg: &PipelineConfig) -> Result<EmFit, DehairError> {
    let mut em = cfg.em.clone();
    em.k = em.k.min(training.len().saturating_sub(1)).max(1);
    if training.len() < 2 {
        return Err(DehairError::TooFewScans {
            needed: 2,
            found: training.len(),
        });
    }
    em_fit(training, Some(lap), &em)
}

/// Converts vertex-major coordinates to points.
pub fn to_vec3(x: &[f64]) -> Vec<Vec3> {
    x.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

pub fn from_vec3(p: &[Vec3]) -> Vec<f64> {
    p.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}
