use std::sync::Arc;

use nalgebra::Matrix3;

use crate::geomesh::Vec3;
use crate::tensor::dual::Dual;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

use super::camera::Camera;
use super::fragments::{FragmentBuffer, LAYER_NONE};
use super::RasterError;

/// Extra channels appended after the interpolated attributes: head-centred
/// position (3) then camera depth (1).
pub const GEOM_CHANNELS: usize = 4;

fn read3(t: &Tensor, v: usize) -> Vec3 {
    let d = &t.data()[3 * v..3 * v + 3];
    Vec3::new(d[0], d[1], d[2])
}

/// Ray/triangle solve for one pixel: `[e1, e2, −r] s = −P0`, with `s = (β1, β2, t)`.
struct Hit {
    b: [f64; 3],
    minv: Matrix3<f64>,
}

fn intersect(cam_pts: [Vec3; 3], ray: &Vec3) -> Option<Hit> {
    let m = Matrix3::from_columns(&[cam_pts[1] - cam_pts[0], cam_pts[2] - cam_pts[0], -ray]);
    let minv = m.try_inverse()?;
    let s = minv * (-cam_pts[0]);
    Some(Hit {
        b: [1.0 - s.x - s.y, s.x, s.y],
        minv,
    })
}

struct Shared {
    frags: Arc<FragmentBuffer>,
    faces: Arc<Vec<[usize; 3]>>,
    cam: Camera,
    layer: u8,
}

impl Shared {
    fn pixels(&self) -> impl Iterator<Item = (usize, [usize; 3], Vec3)> + '_ {
        let w = self.frags.width;
        self.frags.frags.iter().enumerate().filter_map(move |(i, f)| {
            if f.layer != self.layer || f.layer == LAYER_NONE {
                return None;
            }
            let tri = self.faces[f.face as usize];
            let ray = self.cam.ray((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            Some((i, tri, ray))
        })
    }

    fn cam_pts(&self, pos: &Tensor, tri: [usize; 3]) -> [Vec3; 3] {
        tri.map(|v| self.cam.to_camera(&read3(pos, v)))
    }
}

struct InterpOp {
    s: Shared,
    channels: usize,
}

impl CustomOp for InterpOp {
    fn name(&self) -> &'static str {
        "raster_interpolate"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (pos, attr) = (inputs[0], inputs[1]);
        let c = self.channels;
        let n = self.s.frags.width * self.s.frags.height;
        let mut gpos = vec![0.0; pos.numel()];
        let mut gcam = vec![Vec3::zeros(); pos.numel() / 3];
        let mut gattr = vec![0.0; attr.numel()];
        for (i, tri, ray) in self.s.pixels() {
            let p = self.s.cam_pts(pos, tri);
            let Some(hit) = intersect(p, &ray) else { continue };
            let ga: Vec<f64> = (0..c).map(|ch| g.data()[ch * n + i]).collect();
            let gx = Vec3::new(g.data()[c * n + i], g.data()[(c + 1) * n + i], g.data()[(c + 2) * n + i]);
            let gz = g.data()[(c + 3) * n + i];
            let mut gb = [0.0; 3];
            for k in 0..3 {
                let v = tri[k];
                let a = &attr.data()[v * c..(v + 1) * c];
                let mut acc = 0.0;
                for ch in 0..c {
                    gattr[v * c + ch] += hit.b[k] * ga[ch];
                    acc += ga[ch] * a[ch];
                }
                let world = read3(pos, v);
                acc += gx.dot(&world) + gz * p[k].z;
                gb[k] = acc;
                for j in 0..3 {
                    gpos[3 * v + j] += hit.b[k] * gx[j];
                }
                gcam[v].z += hit.b[k] * gz;
            }
            let gs = Vec3::new(gb[1] - gb[0], gb[2] - gb[0], 0.0);
            let q = hit.minv.transpose() * gs;
            for k in 0..3 {
                gcam[tri[k]] -= hit.b[k] * q;
            }
        }
        let rt = self.s.cam.r.transpose();
        for (v, gc) in gcam.iter().enumerate() {
            let w = rt * gc;
            for j in 0..3 {
                gpos[3 * v + j] += w[j];
            }
        }
        vec![
            Some(Tensor::new(pos.shape().to_vec(), gpos).unwrap()),
            Some(Tensor::new(attr.shape().to_vec(), gattr).unwrap()),
        ]
    }
}

/// Interpolates per-vertex attributes `[V,C]` over the pixels owned by
/// `layer`, returning `[C+4, H, W]`: the attributes, the head-centred
/// position and the camera depth. Other pixels are zero.
///
/// Barycentrics come from intersecting each pixel's ray with the
/// triangle, so gradients reach both the attributes and the vertex positions.
pub fn interpolate(
    tape: &mut Tape,
    positions: Var,
    attributes: Var,
    faces: &Arc<Vec<[usize; 3]>>,
    frags: &Arc<FragmentBuffer>,
    cam: &Camera,
    layer: u8,
) -> Result<Var, RasterError> {
    let pos = tape.value(positions);
    let attr = tape.value(attributes);
    let nv = pos.shape()[0];
    if pos.shape() != [nv, 3] || attr.rank() != 2 || attr.shape()[0] != nv {
        return Err(RasterError::AttributeShape {
            positions: pos.shape().to_vec(),
            attributes: attr.shape().to_vec(),
        });
    }
    let c = attr.shape()[1];
    let s = Shared {
        frags: frags.clone(),
        faces: faces.clone(),
        cam: cam.clone(),
        layer,
    };
    let (h, w) = (frags.height, frags.width);
    let n = h * w;
    let mut out = vec![0.0; (c + GEOM_CHANNELS) * n];
    for (i, tri, ray) in s.pixels() {
        let p = s.cam_pts(pos, tri);
        let Some(hit) = intersect(p, &ray) else { continue };
        for k in 0..3 {
            let v = tri[k];
            let b = hit.b[k];
            for ch in 0..c {
                out[ch * n + i] += b * attr.data()[v * c + ch];
            }
            let world = read3(pos, v);
            for j in 0..3 {
                out[(c + j) * n + i] += b * world[j];
            }
            out[(c + 3) * n + i] += b * p[k].z;
        }
    }
    let value = Tensor::new(vec![c + GEOM_CHANNELS, h, w], out)?;
    Ok(tape.custom(&[positions, attributes], value, Box::new(InterpOp { s, channels: c })))
}

type D9 = Dual<9>;

fn dual_world(pos: &Tensor, tri: [usize; 3]) -> [[D9; 3]; 3] {
    let mut out = [[D9::constant(0.0); 3]; 3];
    for k in 0..3 {
        for j in 0..3 {
            out[k][j] = D9::var(pos.data()[3 * tri[k] + j], 3 * k + j);
        }
    }
    out
}

fn dual_to_camera(cam: &Camera, p: &[D9; 3]) -> [D9; 3] {
    let mut c = [D9::constant(0.0); 3];
    for i in 0..3 {
        c[i] = p[0] * cam.r[(i, 0)] + p[1] * cam.r[(i, 1)] + p[2] * cam.r[(i, 2)] + cam.t[i];
    }
    c
}

fn dual_project(cam: &Camera, c: &[D9; 3]) -> [D9; 2] {
    let k = &cam.k;
    let hx = c[0] * k[(0, 0)] + c[1] * k[(0, 1)] + c[2] * k[(0, 2)];
    let hy = c[1] * k[(1, 1)] + c[2] * k[(1, 2)];
    let iz = c[2].recip();
    [hx * iz, hy * iz]
}

fn scatter_grad(gpos: &mut [f64], tri: [usize; 3], d: &[f64; 9], scale: f64) {
    for k in 0..3 {
        for j in 0..3 {
            gpos[3 * tri[k] + j] += scale * d[3 * k + j];
        }
    }
}

/// Which neighbouring pixels make a covered pixel a boundary pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    /// Neighbour shows background.
    Background,
    /// Neighbour is not owned by the same layer.
    Layer,
}

fn is_boundary(frags: &FragmentBuffer, i: usize, layer: u8, kind: EdgeKind) -> bool {
    let (w, h) = (frags.width, frags.height);
    let (col, row) = (i % w, i / w);
    let mut nb = Vec::with_capacity(4);
    if col > 0 {
        nb.push(i - 1);
    }
    if col + 1 < w {
        nb.push(i + 1);
    }
    if row > 0 {
        nb.push(i - w);
    }
    if row + 1 < h {
        nb.push(i + w);
    }
    nb.into_iter().any(|j| match kind {
        EdgeKind::Background => frags.frags[j].layer == LAYER_NONE,
        EdgeKind::Layer => frags.frags[j].layer != layer,
    })
}

/// Signed screen distance (px) from the pixel centre to the nearest edge of
/// its triangle, positive inside, as a function of the nine world coordinates.
fn edge_distance(cam: &Camera, pos: &Tensor, tri: [usize; 3], i: usize) -> D9 {
    let w = cam.width;
    let px = (i % w) as f64 + 0.5;
    let py = (i / w) as f64 + 0.5;
    let world = dual_world(pos, tri);
    let s: Vec<[D9; 2]> = world.iter().map(|p| dual_project(cam, &dual_to_camera(cam, p))).collect();
    let area = (s[1][0] - s[0][0]) * (s[2][1] - s[0][1]) - (s[1][1] - s[0][1]) * (s[2][0] - s[0][0]);
    let sign = if area.v >= 0.0 { 1.0 } else { -1.0 };
    let mut best: Option<D9> = None;
    for (a, b) in [(0, 1), (1, 2), (2, 0)] {
        let dx = s[b][0] - s[a][0];
        let dy = s[b][1] - s[a][1];
        let e = dx * (s[a][1] * -1.0 + py) - dy * (s[a][0] * -1.0 + px);
        let len = (dx * dx + dy * dy).sqrt();
        let d = e * sign / len;
        if best.map_or(true, |cur| d.v < cur.v) {
            best = Some(d);
        }
    }
    best.expect("three edges")
}

struct SoftAlphaOp {
    s: Shared,
    kind: EdgeKind,
}

impl CustomOp for SoftAlphaOp {
    fn name(&self) -> &'static str {
        "raster_soft_alpha"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let pos = inputs[0];
        let mut gpos = vec![0.0; pos.numel()];
        for (i, tri, _) in self.s.pixels() {
            if !is_boundary(&self.s.frags, i, self.s.layer, self.kind) {
                continue;
            }
            let d = edge_distance(&self.s.cam, pos, tri, i);
            let a = 0.5 + d.v;
            if a > 0.0 && a < 1.0 {
                scatter_grad(&mut gpos, tri, &d.d, g.data()[i]);
            }
        }
        vec![Some(Tensor::new(pos.shape().to_vec(), gpos).unwrap())]
    }
}

/// Coverage of `layer` as `[H,W]`: 1 inside, 0 elsewhere, and on boundary
/// pixels a one-pixel ramp `clamp(0.5 + d, 0, 1)` where `d` is the distance
/// to the nearest edge of the covering triangle.
pub fn soft_alpha(
    tape: &mut Tape,
    positions: Var,
    faces: &Arc<Vec<[usize; 3]>>,
    frags: &Arc<FragmentBuffer>,
    cam: &Camera,
    layer: u8,
    kind: EdgeKind,
) -> Var {
    let s = Shared {
        frags: frags.clone(),
        faces: faces.clone(),
        cam: cam.clone(),
        layer,
    };
    let pos = tape.value(positions);
    let mut out = vec![0.0; frags.width * frags.height];
    for (i, tri, _) in s.pixels() {
        out[i] = if is_boundary(frags, i, layer, kind) {
            (0.5 + edge_distance(cam, pos, tri, i).v).clamp(0.0, 1.0)
        } else {
            1.0
        };
    }
    let value = Tensor::new(vec![frags.height, frags.width], out).unwrap();
    tape.custom(&[positions], value, Box::new(SoftAlphaOp { s, kind }))
}

/// Unit camera-space face normal turned toward the camera.
fn dual_normal(cam: &Camera, pos: &Tensor, tri: [usize; 3]) -> [D9; 3] {
    let world = dual_world(pos, tri);
    let c: Vec<[D9; 3]> = world.iter().map(|p| dual_to_camera(cam, p)).collect();
    let e1 = [c[1][0] - c[0][0], c[1][1] - c[0][1], c[1][2] - c[0][2]];
    let e2 = [c[2][0] - c[0][0], c[2][1] - c[0][1], c[2][2] - c[0][2]];
    let n = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let facing = n[0].v * c[0][0].v + n[1].v * c[0][1].v + n[2].v * c[0][2].v;
    let sign = if facing > 0.0 { -1.0 } else { 1.0 };
    let inv = len.recip() * sign;
    [n[0] * inv, n[1] * inv, n[2] * inv]
}

pub(crate) fn face_normal_camera(cam: &Camera, p: [Vec3; 3]) -> Vec3 {
    let c = p.map(|v| cam.to_camera(&v));
    let n = (c[1] - c[0]).cross(&(c[2] - c[0])).normalize();
    if n.dot(&c[0]) > 0.0 {
        -n
    } else {
        n
    }
}

struct NormalOp {
    s: Shared,
}

impl CustomOp for NormalOp {
    fn name(&self) -> &'static str {
        "raster_normals"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let pos = inputs[0];
        let n = self.s.frags.width * self.s.frags.height;
        let mut gpos = vec![0.0; pos.numel()];
        for (i, tri, _) in self.s.pixels() {
            let nd = dual_normal(&self.s.cam, pos, tri);
            for (j, nj) in nd.iter().enumerate() {
                scatter_grad(&mut gpos, tri, &nj.d, g.data()[j * n + i]);
            }
        }
        vec![Some(Tensor::new(pos.shape().to_vec(), gpos).unwrap())]
    }
}

/// Camera-space unit normals `[3,H,W]` of the triangles owned by `layer`.
pub fn normals(
    tape: &mut Tape,
    positions: Var,
    faces: &Arc<Vec<[usize; 3]>>,
    frags: &Arc<FragmentBuffer>,
    cam: &Camera,
    layer: u8,
) -> Var {
    let s = Shared {
        frags: frags.clone(),
        faces: faces.clone(),
        cam: cam.clone(),
        layer,
    };
    let pos = tape.value(positions);
    let n = frags.width * frags.height;
    let mut out = vec![0.0; 3 * n];
    for (i, tri, _) in s.pixels() {
        let nd = face_normal_camera(cam, tri.map(|v| read3(pos, v)));
        for j in 0..3 {
            out[j * n + i] = nd[j];
        }
    }
    let value = Tensor::new(vec![3, frags.height, frags.width], out).unwrap();
    tape.custom(&[positions], value, Box::new(NormalOp { s }))
}
