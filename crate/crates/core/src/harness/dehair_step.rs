use std::path::Path;

use crate::dehair::{progressive_dehair, IdentityScan};
use crate::codec::image_points;
use crate::geomesh::MeshTopology;
use crate::synth::{points_to_image, Dataset};
use crate::tensor::Tensor;

use super::config::DehairSettings;
use super::HarnessError;

/// Outcome of dehairing one dataset identity.
#[derive(Clone, Debug)]
pub struct DehairRecord {
    pub name: String,
    pub coverage: f64,
    /// Root mean square vertex distance to the generator's bald head, cm.
    pub rmse: f64,
    /// Same distance restricted to the hair-covered vertices.
    pub hidden_rmse: f64,
    pub stitch_warning: bool,
}

#[derive(Clone, Debug)]
pub struct DehairSummary {
    pub records: Vec<DehairRecord>,
    pub k_used: usize,
    /// RMSE over all vertices of every identity with hair.
    pub rmse: f64,
}

fn flat(geo: &Tensor) -> Vec<f64> {
    crate::dehair::from_vec3(&image_points(geo))
}

/// Dehairs every identity of the dataset and writes its bald neutral
/// geometry next to the scan. Bald reference heads seed the linear model.
pub fn run_dehair(root: &Path, settings: &DehairSettings) -> Result<DehairSummary, HarnessError> {
    settings.validate()?;
    let ds = Dataset::open(root)?;
    let n = ds.geo_res;
    let mut scans = Vec::new();
    let mut truths = Vec::new();
    for i in 0..ds.identities.len() {
        let ns = ds.neutral(i)?;
        scans.push(IdentityScan {
            id: i,
            vertices: flat(&ns.geo_scan),
            hair: ns.hair_mask.data().iter().map(|&m| m > 0.5).collect(),
        });
        truths.push(flat(&ns.bald_truth));
    }
    let offset = scans.len();
    for (k, geo) in ds.reference_scans()?.iter().enumerate() {
        scans.push(IdentityScan {
            id: offset + k,
            vertices: flat(geo),
            hair: vec![false; n * n],
        });
    }
    let mesh = MeshTopology::grid(n, n);
    let out = progressive_dehair(&scans, &mesh, &settings.pipeline())?;

    let mut records = Vec::new();
    let (mut se, mut count) = (0.0, 0usize);
    for r in out.results.iter().filter(|r| r.id < offset) {
        let i = r.id;
        let pts = crate::dehair::to_vec3(&r.geometry);
        ds.write_dehaired(i, &points_to_image(&pts, n))?;
        let scan = &scans[i];
        let (mut all, mut hidden, mut nh) = (0.0, 0.0, 0usize);
        for v in 0..n * n {
            let d2: f64 = (0..3).map(|a| (r.geometry[3 * v + a] - truths[i][3 * v + a]).powi(2)).sum();
            all += d2;
            if scan.hair[v] {
                hidden += d2;
                nh += 1;
            }
        }
        if scan.coverage() > 0.0 {
            se += all;
            count += n * n;
        }
        records.push(DehairRecord {
            name: ds.identities[i].name.clone(),
            coverage: scan.coverage(),
            rmse: (all / (n * n) as f64).sqrt(),
            hidden_rmse: if nh > 0 { (hidden / nh as f64).sqrt() } else { 0.0 },
            stitch_warning: r.stitch_warning,
        });
    }
    records.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(DehairSummary {
        records,
        k_used: out.k_used,
        rmse: if count > 0 { (se / count as f64).sqrt() } else { 0.0 },
    })
}
