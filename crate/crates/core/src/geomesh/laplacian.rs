use std::sync::Arc;

use crate::tensor::{CustomOp, Tape, Tensor, Var};

use super::{GeomError, MeshTopology};

/// Uniform graph Laplacian `L = D − A` stored in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct Laplacian {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Laplacian {
    /// Builds the Laplacian of an undirected graph; duplicate edges and self
    /// loops are ignored.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (i, nb) in adj.iter_mut().enumerate() {
            nb.sort_unstable();
            nb.dedup();
            let mut row: Vec<(usize, f64)> = nb.iter().map(|&j| (j, -1.0)).collect();
            row.push((i, nb.len() as f64));
            row.sort_unstable_by_key(|e| e.0);
            for (j, v) in row {
                cols.push(j);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn from_mesh(mesh: &MeshTopology) -> Self {
        Self::from_edges(mesh.vertex_count(), &mesh.edges())
    }

    /// 4-neighbour Laplacian over an `h × w` pixel grid in row-major order.
    pub fn grid(h: usize, w: usize) -> Self {
        let mut edges = Vec::with_capacity(2 * h * w);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if c + 1 < w {
                    edges.push((i, i + 1));
                }
                if r + 1 < h {
                    edges.push((i, i + w));
                }
            }
        }
        Self::from_edges(h * w, &edges)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Dense copy, for tests and small problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[i][self.cols[k]] = self.vals[k];
            }
        }
        m
    }

    /// Diagonal entries, i.e. vertex degrees.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.cols[k] == i)
                    .map_or(0.0, |k| self.vals[k])
            })
            .collect()
    }

    /// `out = L x` for one channel stored with the given stride and offset.
    fn apply_strided(&self, x: &[f64], stride: usize, offset: usize, out: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k] * stride + offset];
            }
            out[i * stride + offset] = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.apply_strided(x, 1, 0, &mut out);
        out
    }

    /// Solves `(I + λL) y = b` by conjugate gradient until `‖r‖ ≤ 1e-8·max(‖b‖, 1e-300)`.
    pub fn solve_shifted(&self, lambda: f64, b: &[f64]) -> Result<Vec<f64>, GeomError> {
        let op = |x: &[f64]| -> Vec<f64> {
            let lx = self.apply(x);
            x.iter().zip(&lx).map(|(a, l)| a + lambda * l).collect()
        };
        let bnorm = dot(b, b).sqrt();
        if bnorm == 0.0 {
            return Ok(vec![0.0; b.len()]);
        }
        let tol = 1e-8 * bnorm;
        let mut x = b.to_vec();
        let ax = op(&x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let max_iter = 10 * self.n + 100;
        for _ in 0..max_iter {
            if rr.sqrt() <= tol {
                return Ok(x);
            }
            let ap = op(&p);
            let alpha = rr / dot(&p, &ap);
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..p.len() {
                p[i] = r[i] + beta * p[i];
            }
        }
        if rr.sqrt() <= tol {
            Ok(x)
        } else {
            Err(GeomError::CgNotConverged {
                residual: rr.sqrt() / bnorm,
                iterations: max_iter,
            })
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How a tensor lays out `channels` fields over the Laplacian's nodes.
#[derive(Clone, Copy, Debug)]
struct Layout {
    channels: usize,
    /// Node-major `[V,C]` when true, channel-major `[C,...]` otherwise.
    interleaved: bool,
}

impl Layout {
    fn of(t: &Tensor, n: usize) -> Result<Self, GeomError> {
        let s = t.shape();
        if s.len() == 2 && s[0] == n {
            return Ok(Self {
                channels: s[1],
                interleaved: true,
            });
        }
        if s.len() >= 2 && s[1..].iter().product::<usize>() == n {
            return Ok(Self {
                channels: s[0],
                interleaved: false,
            });
        }
        Err(GeomError::Resolution {
            expected: vec![n, 3],
            found: s.to_vec(),
        })
    }

    fn stride_offset(self, c: usize, n: usize) -> (usize, usize) {
        if self.interleaved {
            (self.channels, c)
        } else {
            (1, c * n)
        }
    }
}

fn apply_all(l: &Laplacian, t: &Tensor, layout: Layout) -> Vec<f64> {
    let mut out = vec![0.0; t.numel()];
    for c in 0..layout.channels {
        let (stride, off) = layout.stride_offset(c, l.n);
        l.apply_strided(t.data(), stride, off, &mut out);
    }
    out
}

/// `Σ_c x_cᵀ L x_c` over every channel of `x` (`[V,C]` or `[C,H,W]`).
pub fn laplacian_energy(x: &Tensor, l: &Laplacian) -> Result<f64, GeomError> {
    let layout = Layout::of(x, l.n)?;
    let lx = apply_all(l, x, layout);
    Ok(dot(x.data(), &lx))
}

struct EnergyOp {
    lap: Arc<Laplacian>,
    layout: Layout,
}

impl CustomOp for EnergyOp {
    fn name(&self) -> &'static str {
        "laplacian_energy"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let lx = apply_all(&self.lap, inputs[0], self.layout);
        let s = 2.0 * g.item();
        let grad = lx.into_iter().map(|v| s * v).collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), grad).unwrap())]
    }
}

/// Tape version of [`laplacian_energy`]; the gradient is `2 L x`.
pub fn laplacian_energy_var(tape: &mut Tape, x: Var, l: &Arc<Laplacian>) -> Result<Var, GeomError> {
    let xv = tape.value(x);
    let layout = Layout::of(xv, l.n)?;
    let e = dot(xv.data(), &apply_all(l, xv, layout));
    Ok(tape.custom(
        &[x],
        Tensor::scalar(e),
        Box::new(EnergyOp {
            lap: l.clone(),
            layout,
        }),
    ))
}

/// `(I + λL)⁻¹ g` applied independently to every channel of `g`.
pub fn precondition_gradient(raw: &Tensor, l: &Laplacian, lambda: f64) -> Result<Tensor, GeomError> {
    if lambda < 0.0 {
        return Err(GeomError::NegativeLambda(lambda));
    }
    let layout = Layout::of(raw, l.n)?;
    if lambda == 0.0 {
        return Ok(raw.clone());
    }
    let mut out = vec![0.0; raw.numel()];
    for c in 0..layout.channels {
        let (stride, off) = layout.stride_offset(c, l.n);
        let b: Vec<f64> = (0..l.n).map(|i| raw.data()[i * stride + off]).collect();
        let y = l.solve_shifted(lambda, &b)?;
        for (i, v) in y.into_iter().enumerate() {
            out[i * stride + off] = v;
        }
    }
    Ok(Tensor::new(raw.shape().to_vec(), out)?)
}
