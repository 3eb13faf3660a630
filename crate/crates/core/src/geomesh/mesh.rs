use std::fmt::Write as _;

use nalgebra::Vector3;

use super::GeomError;

pub type Vec3 = Vector3<f64>;

/// Triangle connectivity with one UV coordinate per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshTopology {
    uv: Vec<[f64; 2]>,
    faces: Vec<[usize; 3]>,
}

impl MeshTopology {
    pub fn new(uv: Vec<[f64; 2]>, faces: Vec<[usize; 3]>) -> Result<Self, GeomError> {
        let v = uv.len();
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&k| k >= v) {
                return Err(GeomError::FaceIndex { face: i, vertices: v });
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(GeomError::DegenerateFace(i));
            }
        }
        for (i, t) in uv.iter().enumerate() {
            if !(0.0..=1.0).contains(&t[0]) || !(0.0..=1.0).contains(&t[1]) {
                return Err(GeomError::UvRange(i));
            }
        }
        Ok(Self { uv, faces })
    }

    pub fn empty() -> Self {
        Self {
            uv: Vec::new(),
            faces: Vec::new(),
        }
    }

    /// Regular `rows × cols` vertex grid over the full UV square, two
    /// triangles per cell. Vertex `(r, c)` has index `r * cols + c` and UV
    /// `(c / (cols-1), r / (rows-1))`.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let mut uv = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                uv.push([
                    c as f64 / (cols - 1) as f64,
                    r as f64 / (rows - 1) as f64,
                ]);
            }
        }
        let mut faces = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
        for r in 0..rows - 1 {
            for c in 0..cols - 1 {
                let a = r * cols + c;
                let b = a + 1;
                let d = a + cols;
                let e = d + 1;
                faces.push([a, d, b]);
                faces.push([b, d, e]);
            }
        }
        Self { uv, faces }
    }

    pub fn vertex_count(&self) -> usize {
        self.uv.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn uv(&self) -> &[[f64; 2]] {
        &self.uv
    }

    pub fn is_empty(&self) -> bool {
        self.uv.is_empty()
    }

    /// Flattened `[V,2]` UV table for grid sampling.
    pub fn uv_flat(&self) -> Vec<f64> {
        self.uv.iter().flat_map(|t| [t[0], t[1]]).collect()
    }

    /// Unique undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Per-vertex sorted neighbour lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertex_count()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Checks that no two faces overlap in UV space beyond shared edges.
    pub fn check_uv_injective(&self) -> Result<(), GeomError> {
        let cells = ((self.faces.len() as f64).sqrt().ceil() as usize).max(1);
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cells * cells];
        let bbox = |f: &[usize; 3]| {
            let us = f.map(|k| self.uv[k][0]);
            let vs = f.map(|k| self.uv[k][1]);
            let lo = [us.iter().cloned().fold(f64::MAX, f64::min), vs.iter().cloned().fold(f64::MAX, f64::min)];
            let hi = [us.iter().cloned().fold(f64::MIN, f64::max), vs.iter().cloned().fold(f64::MIN, f64::max)];
            (lo, hi)
        };
        let cell = |x: f64| ((x * cells as f64) as usize).min(cells - 1);
        for (i, f) in self.faces.iter().enumerate() {
            let (lo, hi) = bbox(f);
            for cy in cell(lo[1])..=cell(hi[1]) {
                for cx in cell(lo[0])..=cell(hi[0]) {
                    buckets[cy * cells + cx].push(i);
                }
            }
        }
        for bucket in &buckets {
            for (n, &i) in bucket.iter().enumerate() {
                for &j in &bucket[n + 1..] {
                    let a = self.faces[i].map(|k| self.uv[k]);
                    let b = self.faces[j].map(|k| self.uv[k]);
                    if triangles_overlap(&a, &b) {
                        return Err(GeomError::UvOverlap(i, j));
                    }
                }
            }
        }
        Ok(())
    }
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Strict interior overlap by separating axes; touching triangles do not count.
fn triangles_overlap(a: &[[f64; 2]; 3], b: &[[f64; 2]; 3]) -> bool {
    const EPS: f64 = 1e-12;
    for tri in [a, b] {
        let sign = cross2(tri[0], tri[1], tri[2]).signum();
        if sign == 0.0 {
            return false;
        }
        for e in 0..3 {
            let p = tri[e];
            let q = tri[(e + 1) % 3];
            let other = if std::ptr::eq(tri, a) { b } else { a };
            if other.iter().all(|&r| sign * cross2(p, q, r) <= EPS) {
                return false;
            }
        }
    }
    true
}

/// Writes positions and UVs as an OBJ with `v`, `vt` and `f v/vt` records.
pub fn write_obj(positions: &[Vec3], mesh: &MeshTopology) -> String {
    let mut s = String::new();
    for p in positions {
        writeln!(s, "v {} {} {}", p.x, p.y, p.z).unwrap();
    }
    for t in mesh.uv() {
        writeln!(s, "vt {} {}", t[0], t[1]).unwrap();
    }
    for f in mesh.faces() {
        writeln!(
            s,
            "f {}/{} {}/{} {}/{}",
            f[0] + 1,
            f[0] + 1,
            f[1] + 1,
            f[1] + 1,
            f[2] + 1,
            f[2] + 1
        )
        .unwrap();
    }
    s
}

/// Parses the OBJ subset written by [`write_obj`]. Vertex and texture
/// indices in each corner must agree.
pub fn read_obj(text: &str) -> Result<(Vec<Vec3>, MeshTopology), GeomError> {
    let mut pos = Vec::new();
    let mut uv = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let bad = || GeomError::Obj {
            line: lineno + 1,
            text: line.to_string(),
        };
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|x| x.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
                if c.len() != 3 {
                    return Err(bad());
                }
                pos.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("vt") => {
                let c: Vec<f64> = it.map(|x| x.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
                if c.len() < 2 {
                    return Err(bad());
                }
                uv.push([c[0], c[1]]);
            }
            Some("f") => {
                let mut f = [0usize; 3];
                let corners: Vec<&str> = it.collect();
                if corners.len() != 3 {
                    return Err(bad());
                }
                for (k, c) in corners.iter().enumerate() {
                    let mut parts = c.split('/');
                    let vi: usize = parts.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
                    let ti: usize = parts.next().and_then(|x| x.parse().ok()).unwrap_or(vi);
                    if vi != ti || vi == 0 {
                        return Err(bad());
                    }
                    f[k] = vi - 1;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    if uv.len() != pos.len() {
        return Err(GeomError::Obj {
            line: 0,
            text: format!("{} positions but {} uvs", pos.len(), uv.len()),
        });
    }
    Ok((pos, MeshTopology::new(uv, faces)?))
}
