use crate::geomesh::Vec3;
use crate::raster::Camera;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

use super::project::{project_gaussian, ProjectedGaussian};
use super::{SplatError, SCALE_MAX, SCALE_MIN};

/// Footprint cut-off on the squared Mahalanobis distance (3σ ellipse).
pub const CUTOFF: f64 = 9.0;

/// Per-render bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplatStats {
    pub drawn: usize,
    pub culled_near: usize,
    pub skipped_non_pd: usize,
}

struct Prepared {
    width: usize,
    height: usize,
    proj: Vec<Option<ProjectedGaussian>>,
    /// Per pixel, primitive indices in front-to-back order.
    bins: Vec<Vec<u32>>,
    scale_live: Vec<[bool; 3]>,
}

/// Differentiable splatting. Inputs are `positions [M,3]`, raw quaternions
/// `[M,4]`, raw scales `[M,3]` (clamped here, zero gradient where clamped),
/// colours `[M,3]` and opacities `[M,1]` or `[M]`. Output is `[4,H,W]`:
/// premultiplied RGB over black followed by accumulated alpha.
pub fn render_gaussians_var(
    tape: &mut Tape,
    positions: Var,
    rotations: Var,
    scales: Var,
    colors: Var,
    opacity: Var,
    cam: &Camera,
) -> Result<(Var, SplatStats), SplatError> {
    let m = tape.shape(positions).first().copied().unwrap_or(0);
    for (name, v, cols) in [
        ("positions", positions, 3usize),
        ("rotations", rotations, 4),
        ("scales", scales, 3),
        ("colors", colors, 3),
    ] {
        let shape = tape.shape(v);
        if shape != [m, cols] {
            return Err(SplatError::Shape { name, shape: shape.to_vec() });
        }
    }
    let oshape = tape.shape(opacity).to_vec();
    if oshape != [m] && oshape != [m, 1] {
        return Err(SplatError::Shape { name: "opacity", shape: oshape });
    }
    if let Some((index, &value)) =
        tape.value(opacity).data().iter().enumerate().find(|(_, o)| !(0.0..=1.0).contains(*o))
    {
        return Err(SplatError::Opacity { index, value });
    }

    let pos = tape.value(positions).data();
    let rot = tape.value(rotations).data();
    let scl = tape.value(scales).data();
    let mut stats = SplatStats::default();
    let mut proj = Vec::with_capacity(m);
    let mut scale_live = Vec::with_capacity(m);
    for k in 0..m {
        let raw = [scl[3 * k], scl[3 * k + 1], scl[3 * k + 2]];
        scale_live.push(raw.map(|s| s > SCALE_MIN && s < SCALE_MAX));
        let s = Vec3::new(raw[0], raw[1], raw[2]).map(super::clamp_scale);
        let c = Vec3::new(pos[3 * k], pos[3 * k + 1], pos[3 * k + 2]);
        let q = [rot[4 * k], rot[4 * k + 1], rot[4 * k + 2], rot[4 * k + 3]];
        proj.push(match project_gaussian(cam, c, q, s) {
            None => {
                stats.culled_near += 1;
                None
            }
            Some(Err(())) => {
                stats.skipped_non_pd += 1;
                None
            }
            Some(Ok(g)) => {
                stats.drawn += 1;
                Some(g)
            }
        });
    }

    let mut order: Vec<usize> = (0..m).filter(|&k| proj[k].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = proj[a].as_ref().unwrap().depth;
        let db = proj[b].as_ref().unwrap().depth;
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let (w, h) = (cam.width, cam.height);
    let mut bins = vec![Vec::new(); w * h];
    for &k in &order {
        let g = proj[k].as_ref().unwrap();
        // axis extents of the m ≤ 9 ellipse plus one pixel of slack
        let rx = CUTOFF.sqrt() * g.cov[0].sqrt() + 1.0;
        let ry = CUTOFF.sqrt() * g.cov[2].sqrt() + 1.0;
        let Some((c0, c1)) = span(g.mean[0] - rx, g.mean[0] + rx, w) else { continue };
        let Some((r0, r1)) = span(g.mean[1] - ry, g.mean[1] + ry, h) else { continue };
        for row in r0..=r1 {
            for col in c0..=c1 {
                if mahalanobis(g, col, row).0 <= CUTOFF {
                    bins[row * w + col].push(k as u32);
                }
            }
        }
    }

    let prep = Prepared {
        width: w,
        height: h,
        proj,
        bins,
        scale_live,
    };
    let out = composite(&prep, tape.value(colors).data(), tape.value(opacity).data());
    let op = SplatOp { prep };
    let var = tape.custom(&[positions, rotations, scales, colors, opacity], out, Box::new(op));
    Ok((var, stats))
}

/// Pixel range whose centres fall inside `[lo, hi]`, clipped to the image.
fn span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    if !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    let a = (lo - 0.5).ceil().max(0.0);
    let b = (hi - 0.5).floor().min(n as f64 - 1.0);
    (a <= b).then(|| (a as usize, b as usize))
}

/// `(m, dx, dy)` at the centre of pixel `(col,row)`.
fn mahalanobis(g: &ProjectedGaussian, col: usize, row: usize) -> (f64, f64, f64) {
    let dx = col as f64 + 0.5 - g.mean[0];
    let dy = row as f64 + 0.5 - g.mean[1];
    let [a, b, c] = g.conic;
    (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy, dx, dy)
}

fn composite(prep: &Prepared, colors: &[f64], opacity: &[f64]) -> Tensor {
    let n = prep.width * prep.height;
    let mut out = vec![0.0; 4 * n];
    for (pix, bin) in prep.bins.iter().enumerate() {
        let (col, row) = (pix % prep.width, pix / prep.width);
        let mut t = 1.0;
        let mut acc = [0.0; 4];
        for &k in bin {
            let k = k as usize;
            let g = prep.proj[k].as_ref().unwrap();
            let alpha = opacity[k] * (-0.5 * mahalanobis(g, col, row).0).exp();
            let wgt = alpha * t;
            for ch in 0..3 {
                acc[ch] += wgt * colors[3 * k + ch];
            }
            t *= 1.0 - alpha;
        }
        // equal to the summed weights, but cannot round past 1
        acc[3] = 1.0 - t;
        for ch in 0..4 {
            out[ch * n + pix] = acc[ch];
        }
    }
    Tensor::new(vec![4, prep.height, prep.width], out).unwrap()
}

struct SplatOp {
    prep: Prepared,
}

impl CustomOp for SplatOp {
    fn name(&self) -> &'static str {
        "render_gaussians"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let prep = &self.prep;
        let colors = inputs[3].data();
        let opacity = inputs[4].data();
        let m = prep.proj.len();
        let n = prep.width * prep.height;
        let go = grad_output.data();

        // d loss / d (mean x, mean y, conic a, b, c)
        let mut g_screen = vec![[0.0f64; 5]; m];
        let mut g_col = vec![0.0; 3 * m];
        let mut g_op = vec![0.0; m];

        let mut frags: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
        for (pix, bin) in prep.bins.iter().enumerate() {
            let gp = [go[pix], go[n + pix], go[2 * n + pix], go[3 * n + pix]];
            if gp.iter().all(|&x| x == 0.0) {
                continue;
            }
            let (col, row) = (pix % prep.width, pix / prep.width);
            frags.clear();
            let mut t = 1.0;
            for &k in bin {
                let k = k as usize;
                let g = prep.proj[k].as_ref().unwrap();
                let (mh, dx, dy) = mahalanobis(g, col, row);
                let alpha = opacity[k] * (-0.5 * mh).exp();
                frags.push((k, alpha, t, dx, dy));
                t *= 1.0 - alpha;
            }
            // suffix S_i = Σ_{j>i} α_j c_j Π_{i<l<j}(1-α_l), built back to front
            let mut suffix = [0.0; 4];
            for &(k, alpha, t, dx, dy) in frags.iter().rev() {
                let c = [colors[3 * k], colors[3 * k + 1], colors[3 * k + 2], 1.0];
                let mut d_alpha = 0.0;
                for ch in 0..4 {
                    d_alpha += gp[ch] * t * (c[ch] - suffix[ch]);
                }
                for ch in 0..3 {
                    g_col[3 * k + ch] += gp[ch] * alpha * t;
                }
                let g = prep.proj[k].as_ref().unwrap();
                g_op[k] += d_alpha * (-0.5 * mahalanobis(g, col, row).0).exp();
                // α = o exp(-m/2): dα/dm = -α/2
                let d_m = -0.5 * alpha * d_alpha;
                let [a, b, cc] = g.conic;
                let gs = &mut g_screen[k];
                gs[0] += d_m * -2.0 * (a * dx + b * dy);
                gs[1] += d_m * -2.0 * (b * dx + cc * dy);
                gs[2] += d_m * dx * dx;
                gs[3] += d_m * 2.0 * dx * dy;
                gs[4] += d_m * dy * dy;
                for ch in 0..4 {
                    suffix[ch] = alpha * c[ch] + (1.0 - alpha) * suffix[ch];
                }
            }
        }

        let mut g_pos = vec![0.0; 3 * m];
        let mut g_rot = vec![0.0; 4 * m];
        let mut g_scl = vec![0.0; 3 * m];
        for k in 0..m {
            let Some(g) = prep.proj[k].as_ref() else { continue };
            let mut gin = [0.0; 10];
            for (o, row) in g.jac.iter().enumerate() {
                for (i, gi) in gin.iter_mut().enumerate() {
                    *gi += g_screen[k][o] * row[i];
                }
            }
            g_pos[3 * k..3 * k + 3].copy_from_slice(&gin[0..3]);
            g_rot[4 * k..4 * k + 4].copy_from_slice(&gin[3..7]);
            for a in 0..3 {
                if prep.scale_live[k][a] {
                    g_scl[3 * k + a] = gin[7 + a];
                }
            }
        }
        let t = |shape: &[usize], data: Vec<f64>| Some(Tensor::new(shape.to_vec(), data).unwrap());
        vec![
            t(&[m, 3], g_pos),
            t(&[m, 4], g_rot),
            t(&[m, 3], g_scl),
            t(&[m, 3], g_col),
            t(inputs[4].shape(), g_op),
        ]
    }
}

