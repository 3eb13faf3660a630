use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::geomesh::Laplacian;

use super::DehairError;

pub const PSI_FLOOR: f64 = 1e-8;

/// Linear-Gaussian shape model `x = μ + W z + ε`, `z ~ N(0, I)`, `ε ~ N(0, diag Ψ)`.
///
/// Coordinates are vertex-major: entry `3v + c` holds channel `c` of vertex `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    pub mu: DVector<f64>,
    pub w: DMatrix<f64>,
    pub psi: DVector<f64>,
}

/// One training vector plus its per-vertex observation mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x: Vec<f64>,
    pub observed: Vec<bool>,
}

impl Sample {
    pub fn full(x: Vec<f64>) -> Self {
        let v = x.len() / 3;
        Self {
            x,
            observed: vec![true; v],
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmConfig {
    pub k: usize,
    pub lambda_lap: f64,
    pub iters: usize,
    /// Apply the smoothness penalty to `μ` as well as to the columns of `W`.
    pub regularize_mean: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 16,
            lambda_lap: 0.1,
            iters: 100,
            regularize_mean: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: FactorModel,
    /// Observed-data log-likelihood before the first and after every iteration.
    pub log_likelihood: Vec<f64>,
    /// Set when the fitted loadings carry (numerically) no variance.
    pub degenerate: bool,
}

/// Posterior moments of the latent code for one sample.
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_likelihood: f64,
}

impl FactorModel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    /// `E[z | x_O]`, `Cov[z | x_O]` and `log p(x_O)` from the observed coordinates.
    pub fn posterior(&self, x: &[f64], observed: &[bool], scan: usize) -> Result<Posterior, DehairError> {
        let k = self.k();
        let mut m = DMatrix::<f64>::identity(k, k);
        let mut wr = DVector::<f64>::zeros(k);
        let mut quad = 0.0;
        let mut logdet_psi = 0.0;
        let mut n_obs = 0usize;
        for (v, &o) in observed.iter().enumerate() {
            if !o {
                continue;
            }
            for c in 0..3 {
                let d = 3 * v + c;
                let inv = 1.0 / self.psi[d];
                let r = x[d] - self.mu[d];
                let row = self.w.row(d);
                // rank-one update of WᵀΨ⁻¹W
                for a in 0..k {
                    let ra = row[a] * inv;
                    if ra == 0.0 {
                        continue;
                    }
                    for b in 0..k {
                        m[(a, b)] += ra * row[b];
                    }
                    wr[a] += ra * r;
                }
                quad += r * r * inv;
                logdet_psi += self.psi[d].ln();
                n_obs += 1;
            }
        }
        let chol = Cholesky::new(m).ok_or(DehairError::SingularPosterior { scan })?;
        let mean = chol.solve(&wr);
        let cov = chol.inverse();
        let logdet_m: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let mahal = quad - wr.dot(&mean);
        let ll = -0.5 * (n_obs as f64 * (2.0 * std::f64::consts::PI).ln() + logdet_m + logdet_psi + mahal);
        Ok(Posterior {
            mean,
            cov,
            log_likelihood: ll,
        })
    }

    pub fn log_likelihood(&self, samples: &[Sample]) -> Result<f64, DehairError> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| self.posterior(&s.x, &s.observed, i).map(|p| p.log_likelihood))
            .sum()
    }

    /// `μ + W z` for every coordinate.
    pub fn reconstruct(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mu + &self.w * z
    }
}

fn check_samples(samples: &[Sample], dim: usize) -> Result<(), DehairError> {
    for (i, s) in samples.iter().enumerate() {
        if s.x.len() != dim || s.observed.len() * 3 != dim {
            return Err(DehairError::Dimension {
                scan: i,
                expected: dim,
                found: s.x.len(),
            });
        }
    }
    Ok(())
}

/// Deterministic start: per-coordinate observed means and a PCA of the
/// mean-imputed data.
fn initialise(samples: &[Sample], k: usize) -> FactorModel {
    let n = samples.len();
    let dim = samples[0].x.len();
    let mut mu = DVector::zeros(dim);
    let mut count = vec![0usize; dim];
    for s in samples {
        for d in 0..dim {
            if s.observed[d / 3] {
                mu[d] += s.x[d];
                count[d] += 1;
            }
        }
    }
    for d in 0..dim {
        if count[d] > 0 {
            mu[d] /= count[d] as f64;
        }
    }
    let y = DMatrix::from_fn(n, dim, |i, d| {
        if samples[i].observed[d / 3] {
            samples[i].x[d] - mu[d]
        } else {
            0.0
        }
    });
    let svd = y.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let mut w = DMatrix::zeros(dim, k);
    for (col, &j) in order.iter().take(k).enumerate() {
        let s = sv[j] / (n as f64).sqrt();
        for d in 0..dim {
            w[(d, col)] = vt[(j, d)] * s;
        }
    }
    let total_var = y.iter().map(|v| v * v).sum::<f64>() / (n * dim) as f64;
    let resid = &y - &y * &w * pseudo_scale(&w) * w.transpose();
    let mut psi = DVector::from_element(dim, PSI_FLOOR);
    for d in 0..dim {
        let r: f64 = resid.column(d).iter().map(|v| v * v).sum::<f64>() / n as f64;
        psi[d] = r.max(1e-3 * total_var).max(PSI_FLOOR);
    }
    FactorModel { mu, w, psi }
}

/// `(WᵀW)⁺` so that `W (WᵀW)⁺ Wᵀ` projects onto span(W).
fn pseudo_scale(w: &DMatrix<f64>) -> DMatrix<f64> {
    let g = w.transpose() * w;
    let k = g.nrows();
    let mut out = DMatrix::zeros(k, k);
    for i in 0..k {
        if g[(i, i)] > 0.0 {
            out[(i, i)] = 1.0 / g[(i, i)];
        }
    }
    out
}

/// Sufficient statistics gathered in the E-step.
struct Stats {
    /// Per vertex `Σ E[z̃ z̃ᵀ]` over samples observing it, `z̃ = [z; 1]`.
    a: Vec<DMatrix<f64>>,
    /// Per coordinate `Σ x E[z̃]`.
    b: Vec<DVector<f64>>,
    /// Per coordinate `Σ x²`.
    q: Vec<f64>,
    count: Vec<usize>,
    log_likelihood: f64,
}

fn e_step(model: &FactorModel, samples: &[Sample]) -> Result<Stats, DehairError> {
    let k = model.k();
    let dim = model.dim();
    let nv = dim / 3;
    let k1 = k + 1;
    let mut a_full = DMatrix::zeros(k1, k1);
    let mut a_partial: Vec<Option<DMatrix<f64>>> = vec![None; nv];
    let mut b = vec![DVector::zeros(k1); dim];
    let mut q = vec![0.0; dim];
    let mut count = vec![0usize; nv];
    let mut ll = 0.0;
    let all_full = samples.iter().all(|s| s.observed.iter().all(|&o| o));
    let mut ezz = DMatrix::zeros(k1, k1);
    for (i, s) in samples.iter().enumerate() {
        let p = model.posterior(&s.x, &s.observed, i)?;
        ll += p.log_likelihood;
        let mut zt = DVector::zeros(k1);
        zt.rows_mut(0, k).copy_from(&p.mean);
        zt[k] = 1.0;
        ezz.fill(0.0);
        ezz.view_mut((0, 0), (k, k)).copy_from(&(&p.cov + &p.mean * p.mean.transpose()));
        ezz.view_mut((0, k), (k, 1)).copy_from(&p.mean);
        ezz.view_mut((k, 0), (1, k)).copy_from(&p.mean.transpose());
        ezz[(k, k)] = 1.0;
        if all_full {
            a_full += &ezz;
        }
        for (v, &o) in s.observed.iter().enumerate() {
            if !o {
                continue;
            }
            count[v] += 1;
            if !all_full {
                match &mut a_partial[v] {
                    Some(m) => *m += &ezz,
                    slot => *slot = Some(ezz.clone()),
                }
            }
            for c in 0..3 {
                let d = 3 * v + c;
                b[d].axpy(s.x[d], &zt, 1.0);
                q[d] += s.x[d] * s.x[d];
            }
        }
    }
    let a = if all_full {
        vec![a_full; nv]
    } else {
        a_partial
            .into_iter()
            .map(|m| m.unwrap_or_else(|| DMatrix::zeros(k1, k1)))
            .collect()
    };
    Ok(Stats {
        a,
        b,
        q,
        count,
        log_likelihood: ll,
    })
}

fn current_rows(model: &FactorModel) -> Vec<DVector<f64>> {
    let k = model.k();
    (0..model.dim())
        .map(|d| {
            let mut r = DVector::zeros(k + 1);
            r.rows_mut(0, k).copy_from(&model.w.row(d).transpose());
            r[k] = model.mu[d];
            r
        })
        .collect()
}

/// Unpenalised closed-form update `W̃_d = B_d A_v⁻¹`.
fn solve_rows_direct(stats: &Stats, prev: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let nv = stats.count.len();
    let mut out = prev.to_vec();
    for v in 0..nv {
        if stats.count[v] == 0 {
            continue;
        }
        let chol = Cholesky::new(stats.a[v].clone());
        for c in 0..3 {
            let d = 3 * v + c;
            out[d] = match &chol {
                Some(ch) => ch.solve(&stats.b[d]),
                None => stats.a[v].clone().pseudo_inverse(1e-12).unwrap() * &stats.b[d],
            };
        }
    }
    out
}

/// Penalised update: per channel, solves
/// `X_v A_v / Ψ_d + λ (L X P)_v = B_d / Ψ_d` by block-Jacobi preconditioned CG,
/// where `P` masks the mean column when it is not regularised.
fn solve_rows_penalised(
    stats: &Stats,
    prev: &[DVector<f64>],
    psi: &DVector<f64>,
    lap: &Laplacian,
    lambda: f64,
    regularize_mean: bool,
) -> Result<Vec<DVector<f64>>, DehairError> {
    let nv = stats.count.len();
    let k1 = prev[0].len();
    let mut pmask = DVector::from_element(k1, 1.0);
    if !regularize_mean {
        pmask[k1 - 1] = 0.0;
    }
    let ridge = 1e-6 * lambda;
    let degree = lap.diagonal();
    let mut out = prev.to_vec();
    for c in 0..3 {
        let data_block = |v: usize| -> DMatrix<f64> {
            let d = 3 * v + c;
            let mut m = &stats.a[v] / psi[d];
            if stats.count[v] == 0 {
                m += DMatrix::identity(k1, k1) * ridge;
            }
            m
        };
        let blocks: Vec<DMatrix<f64>> = (0..nv).map(data_block).collect();
        let precond: Vec<Cholesky<f64, Dyn>> = (0..nv)
            .map(|v| {
                let mut m = blocks[v].clone();
                for j in 0..k1 {
                    m[(j, j)] += lambda * degree[v] * pmask[j] + 1e-300;
                }
                Cholesky::new(m.clone()).unwrap_or_else(|| {
                    Cholesky::new(m + DMatrix::identity(k1, k1) * 1e-12).expect("regularised block")
                })
            })
            .collect();
        let apply = |x: &[DVector<f64>]| -> Vec<DVector<f64>> {
            let mut y: Vec<DVector<f64>> = (0..nv).map(|v| &blocks[v] * &x[v]).collect();
            for j in 0..k1 {
                if pmask[j] == 0.0 {
                    continue;
                }
                let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
                let lc = lap.apply(&col);
                for v in 0..nv {
                    y[v][j] += lambda * lc[v];
                }
            }
            y
        };
        let rhs: Vec<DVector<f64>> = (0..nv)
            .map(|v| {
                let d = 3 * v + c;
                let mut r = &stats.b[d] / psi[d];
                if stats.count[v] == 0 {
                    r += &prev[d] * ridge;
                }
                r
            })
            .collect();
        let mut x: Vec<DVector<f64>> = (0..nv).map(|v| prev[3 * v + c].clone()).collect();
        let ax = apply(&x);
        let mut r: Vec<DVector<f64>> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let bnorm = rhs.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        let tol = 1e-12 * bnorm.max(1e-300);
        let mut z: Vec<DVector<f64>> = r.iter().zip(&precond).map(|(r, p)| p.solve(r)).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a.dot(b)).sum();
        let max_iter = 20 * nv * k1 + 100;
        let mut converged = false;
        for _ in 0..max_iter {
            let rn = r.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            if rn <= tol {
                converged = true;
                break;
            }
            let ap = apply(&p);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a.dot(b)).sum();
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for v in 0..nv {
                x[v].axpy(alpha, &p[v], 1.0);
                r[v].axpy(-alpha, &ap[v], 1.0);
            }
            z = r.iter().zip(&precond).map(|(r, p)| p.solve(r)).collect();
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a.dot(b)).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for v in 0..nv {
                p[v] = &z[v] + &p[v] * beta;
            }
        }
        if !converged {
            let rn = r.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            if rn > 1e-6 * bnorm.max(1e-300) {
                return Err(DehairError::CgNotConverged { residual: rn / bnorm });
            }
        }
        for v in 0..nv {
            out[3 * v + c] = x[v].clone();
        }
    }
    Ok(out)
}

/// Fits a factor model by EM on partially observed samples.
///
/// With `lambda_lap > 0` the M-step adds `λ/2 · Σ_c tr(W̃_cᵀ L W̃_c)` to the
/// negative expected log-likelihood (an expectation-conditional step that
/// holds Ψ at its previous value while solving for `W̃ = [W, μ]`).
pub fn em_fit(samples: &[Sample], lap: Option<&Laplacian>, cfg: &EmConfig) -> Result<EmFit, DehairError> {
    let k = cfg.k;
    if k == 0 {
        return Err(DehairError::BadK(k));
    }
    if samples.len() < k + 1 {
        return Err(DehairError::TooFewScans {
            needed: k + 1,
            found: samples.len(),
        });
    }
    let dim = samples[0].x.len();
    check_samples(samples, dim)?;
    if cfg.lambda_lap > 0.0 {
        match lap {
            Some(l) if l.size() * 3 == dim => {}
            _ => return Err(DehairError::MissingLaplacian),
        }
    }
    let mut model = initialise(samples, k);
    let mut lls = Vec::with_capacity(cfg.iters + 1);
    for it in 0..=cfg.iters {
        let stats = e_step(&model, samples)?;
        lls.push(stats.log_likelihood);
        if it == cfg.iters {
            break;
        }
        let prev = current_rows(&model);
        let rows = if cfg.lambda_lap > 0.0 {
            solve_rows_penalised(&stats, &prev, &model.psi, lap.unwrap(), cfg.lambda_lap, cfg.regularize_mean)?
        } else {
            solve_rows_direct(&stats, &prev)
        };
        for d in 0..dim {
            for j in 0..k {
                model.w[(d, j)] = rows[d][j];
            }
            model.mu[d] = rows[d][k];
            let v = d / 3;
            if stats.count[v] > 0 {
                let wr = &rows[d];
                let val = (stats.q[d] - 2.0 * wr.dot(&stats.b[d]) + (wr.transpose() * &stats.a[v] * wr)[0])
                    / stats.count[v] as f64;
                model.psi[d] = val.max(PSI_FLOOR);
            }
        }
    }
    let scale = model.psi.iter().cloned().fold(0.0, f64::max).max(PSI_FLOOR).sqrt();
    let degenerate = model.w.column_iter().any(|c| c.norm() <= 1e-6 * scale.max(1e-3));
    Ok(EmFit {
        model,
        log_likelihood: lls,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample_model(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> FactorModel {
        let mut g = || -> f64 { StandardNormal.sample(rng) };
        FactorModel {
            mu: DVector::from_fn(dim, |_, _| g()),
            w: DMatrix::from_fn(dim, k, |_, _| g()),
            psi: DVector::from_fn(dim, |_, _| 0.05 + 0.05 * g().abs()),
        }
    }

    fn draw(model: &FactorModel, rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(model.k(), |_, _| StandardNormal.sample(rng));
                let x = model.reconstruct(&z);
                let x: Vec<f64> = (0..model.dim())
                    .map(|d| {
                        let e: f64 = StandardNormal.sample(rng);
                        x[d] + e * model.psi[d].sqrt()
                    })
                    .collect();
                Sample::full(x)
            })
            .collect()
    }

    #[test]
    fn posterior_matches_dense_gaussian_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_model(&mut rng, 12, 2);
        let s = &draw(&m, &mut rng, 1)[0];
        let observed = vec![true, false, true, true];
        let p = m.posterior(&s.x, &observed, 0).unwrap();
        let idx: Vec<usize> = (0..12).filter(|d| observed[d / 3]).collect();
        let wo = DMatrix::from_fn(idx.len(), 2, |i, j| m.w[(idx[i], j)]);
        let c = &wo * wo.transpose() + DMatrix::from_diagonal(&DVector::from_fn(idx.len(), |i, _| m.psi[idx[i]]));
        let r = DVector::from_fn(idx.len(), |i, _| s.x[idx[i]] - m.mu[idx[i]]);
        let cinv = c.clone().try_inverse().unwrap();
        let mean = wo.transpose() * &cinv * &r;
        assert!((mean - &p.mean).norm() < 1e-10);
        let ll = -0.5 * (idx.len() as f64 * (2.0 * std::f64::consts::PI).ln() + c.determinant().ln() + (r.transpose() * cinv * &r)[0]);
        assert!((ll - p.log_likelihood).abs() < 1e-9);
    }

    #[test]
    fn repeated_sample_is_degenerate() {
        let x: Vec<f64> = (0..15).map(|i| i as f64 * 0.5).collect();
        let samples = vec![Sample::full(x.clone()); 4];
        let cfg = EmConfig {
            k: 1,
            lambda_lap: 0.0,
            iters: 20,
            regularize_mean: true,
        };
        let fit = em_fit(&samples, None, &cfg).unwrap();
        for d in 0..15 {
            assert!((fit.model.mu[d] - x[d]).abs() < 1e-12);
        }
        assert!(fit.model.w.norm() < 1e-9);
        assert!(fit.degenerate);
    }

    #[test]
    fn rejects_too_few_scans() {
        let samples = vec![Sample::full(vec![0.0; 6]); 2];
        let cfg = EmConfig {
            k: 2,
            ..Default::default()
        };
        assert!(matches!(em_fit(&samples, None, &cfg), Err(DehairError::TooFewScans { .. })));
    }
}
