use std::cmp::Ordering;

use nalgebra::Vector2;

use crate::geomesh::Vec3;
use crate::tensor::Tensor;

use super::camera::{Camera, NEAR};

pub const LAYER_NONE: u8 = 0;
pub const LAYER_FACE: u8 = 1;
pub const LAYER_HAIR: u8 = 2;

/// One layer's posed vertices and triangles.
#[derive(Clone, Copy)]
pub struct LayerInput<'a> {
    pub positions: &'a [Vec3],
    pub faces: &'a [[usize; 3]],
}

/// Visible surface sample at one pixel. `layer == LAYER_NONE` marks background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub layer: u8,
    pub face: u32,
    /// Perspective-correct barycentrics in the triangle's own vertex order.
    pub bary: [f64; 3],
    /// Camera-space depth (cm).
    pub depth: f64,
}

impl Fragment {
    pub const EMPTY: Fragment = Fragment {
        layer: LAYER_NONE,
        face: 0,
        bary: [0.0; 3],
        depth: f64::INFINITY,
    };

    fn key_cmp(&self, other: &Fragment) -> Ordering {
        self.depth
            .total_cmp(&other.depth)
            .then(self.layer.cmp(&other.layer))
            .then(self.face.cmp(&other.face))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FragmentBuffer {
    pub width: usize,
    pub height: usize,
    pub frags: Vec<Fragment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMasks {
    pub face: Vec<bool>,
    pub hair: Vec<bool>,
}

impl FragmentBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            frags: vec![Fragment::EMPTY; width * height],
        }
    }

    pub fn masks(&self) -> LayerMasks {
        LayerMasks {
            face: self.frags.iter().map(|f| f.layer == LAYER_FACE).collect(),
            hair: self.frags.iter().map(|f| f.layer == LAYER_HAIR).collect(),
        }
    }

    pub fn covered(&self) -> Vec<bool> {
        self.frags.iter().map(|f| f.layer != LAYER_NONE).collect()
    }

    /// Debug dump as `(layer, face, barycentrics [H,W,3], depth)` tensors.
    pub fn to_tensors(&self) -> [Tensor; 4] {
        let shape = [self.height, self.width];
        let layer = Tensor::new(shape.to_vec(), self.frags.iter().map(|f| f.layer as f64).collect()).unwrap();
        let face = Tensor::new(shape.to_vec(), self.frags.iter().map(|f| f.face as f64).collect()).unwrap();
        let bary = Tensor::new(
            vec![self.height, self.width, 3],
            self.frags.iter().flat_map(|f| f.bary).collect(),
        )
        .unwrap();
        let depth = Tensor::new(
            shape.to_vec(),
            self.frags
                .iter()
                .map(|f| if f.layer == LAYER_NONE { 0.0 } else { f.depth })
                .collect(),
        )
        .unwrap();
        [layer, face, bary, depth]
    }
}

/// A triangle in screen space, wound so that its signed area is positive.
#[derive(Clone, Copy, Debug)]
pub struct ScreenTri {
    pub v: [Vector2<f64>; 3],
    pub z: [f64; 3],
    /// `order[k]` is the original corner stored in slot `k`.
    pub order: [usize; 3],
    pub area: f64,
}

/// Edge function: positive when `p` lies to the interior side of `a → b`.
#[inline]
pub fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top edge (horizontal, pointing right) or left edge (pointing up), in
/// y-down screen coordinates with positive winding.
#[inline]
fn is_top_left(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let d = b - a;
    (d.y == 0.0 && d.x > 0.0) || d.y < 0.0
}

/// Projects a world-space triangle; `None` when any corner is at or behind
/// the near plane or the projection has zero area.
pub fn prepare(cam: &Camera, p: [&Vec3; 3]) -> Option<ScreenTri> {
    let mut v = [Vector2::zeros(); 3];
    let mut z = [0.0; 3];
    for k in 0..3 {
        let c = cam.to_camera(p[k]);
        if !(c.z > NEAR) {
            return None;
        }
        v[k] = cam.project_camera(&c);
        z[k] = c.z;
    }
    let area = edge(&v[0], &v[1], &v[2]);
    if area == 0.0 || !area.is_finite() {
        return None;
    }
    if area > 0.0 {
        Some(ScreenTri {
            v,
            z,
            order: [0, 1, 2],
            area,
        })
    } else {
        Some(ScreenTri {
            v: [v[0], v[2], v[1]],
            z: [z[0], z[2], z[1]],
            order: [0, 2, 1],
            area: -area,
        })
    }
}

/// Coverage test at pixel `(col,row)`, shared by the fast path and the oracle.
/// Returns barycentrics in the original corner order and the depth.
#[inline]
pub fn coverage(t: &ScreenTri, col: usize, row: usize) -> Option<([f64; 3], f64)> {
    let p = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
    let w = [
        edge(&t.v[1], &t.v[2], &p),
        edge(&t.v[2], &t.v[0], &p),
        edge(&t.v[0], &t.v[1], &p),
    ];
    let edges = [(1, 2), (2, 0), (0, 1)];
    for k in 0..3 {
        let inside = w[k] > 0.0 || (w[k] == 0.0 && is_top_left(&t.v[edges[k].0], &t.v[edges[k].1]));
        if !inside {
            return None;
        }
    }
    let l = [w[0] / t.area, w[1] / t.area, w[2] / t.area];
    let q = [l[0] / t.z[0], l[1] / t.z[1], l[2] / t.z[2]];
    let s = q[0] + q[1] + q[2];
    let mut bary = [0.0; 3];
    for k in 0..3 {
        bary[t.order[k]] = q[k] / s;
    }
    Some((bary, 1.0 / s))
}

fn prepared(cam: &Camera, layers: &[LayerInput]) -> Vec<Vec<Option<ScreenTri>>> {
    layers
        .iter()
        .map(|l| {
            l.faces
                .iter()
                .map(|f| prepare(cam, [&l.positions[f[0]], &l.positions[f[1]], &l.positions[f[2]]]))
                .collect()
        })
        .collect()
}

/// Joint z-buffer over all layers. Ties in depth go to the lower layer id,
/// then the lower face index.
pub fn rasterize(layers: &[LayerInput], cam: &Camera) -> FragmentBuffer {
    let (w, h) = (cam.width, cam.height);
    let mut buf = FragmentBuffer::empty(w, h);
    for (li, tris) in prepared(cam, layers).iter().enumerate() {
        for (fi, t) in tris.iter().enumerate() {
            let Some(t) = t else { continue };
            let xmin = t.v.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
            let xmax = t.v.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
            let ymin = t.v.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
            let ymax = t.v.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
            if xmax < 0.0 || ymax < 0.0 || xmin > w as f64 || ymin > h as f64 {
                continue;
            }
            let c0 = (xmin - 0.5).floor().max(0.0) as usize;
            let c1 = ((xmax - 0.5).ceil().max(0.0) as usize).min(w - 1);
            let r0 = (ymin - 0.5).floor().max(0.0) as usize;
            let r1 = ((ymax - 0.5).ceil().max(0.0) as usize).min(h - 1);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    if let Some((bary, depth)) = coverage(t, col, row) {
                        let cand = Fragment {
                            layer: li as u8 + 1,
                            face: fi as u32,
                            bary,
                            depth,
                        };
                        let slot = &mut buf.frags[row * w + col];
                        if cand.key_cmp(slot) == Ordering::Less {
                            *slot = cand;
                        }
                    }
                }
            }
        }
    }
    buf
}

/// Exhaustive reference: every pixel tests every triangle, no bounding boxes.
pub fn rasterize_reference(layers: &[LayerInput], cam: &Camera) -> FragmentBuffer {
    let (w, h) = (cam.width, cam.height);
    let tris = prepared(cam, layers);
    let mut buf = FragmentBuffer::empty(w, h);
    for row in 0..h {
        for col in 0..w {
            let mut best = Fragment::EMPTY;
            for (li, layer) in tris.iter().enumerate() {
                for (fi, t) in layer.iter().enumerate() {
                    let Some(t) = t else { continue };
                    if let Some((bary, depth)) = coverage(t, col, row) {
                        let cand = Fragment {
                            layer: li as u8 + 1,
                            face: fi as u32,
                            bary,
                            depth,
                        };
                        if cand.key_cmp(&best) == Ordering::Less {
                            best = cand;
                        }
                    }
                }
            }
            buf.frags[row * w + col] = best;
        }
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn ortho_like_cam(size: usize) -> Camera {
        // identity rotation, camera at z = -10 looking down +z
        let f = size as f64;
        Camera::new(
            Matrix3::new(f, 0.0, 0.5 * f, 0.0, f, 0.5 * f, 0.0, 0.0, 1.0),
            Matrix3::identity(),
            Vec3::new(0.0, 0.0, 10.0),
            size,
            size,
        )
        .unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = ortho_like_cam(8);
        let buf = rasterize_reference(&[], &cam);
        assert!(buf.frags.iter().all(|f| f.layer == LAYER_NONE));
    }

    #[test]
    fn full_screen_triangle_covers_everything() {
        let cam = ortho_like_cam(8);
        let p = [Vec3::new(-10.0, -10.0, 0.0), Vec3::new(30.0, -10.0, 0.0), Vec3::new(-10.0, 30.0, 0.0)];
        let faces = [[0, 1, 2]];
        let buf = rasterize(&[LayerInput { positions: &p, faces: &faces }], &cam);
        assert!(buf.frags.iter().all(|f| f.layer == LAYER_FACE));
        for f in &buf.frags {
            assert!((f.bary.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((f.depth - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nearer_layer_wins() {
        let cam = ortho_like_cam(16);
        let face = [Vec3::new(-5.0, -5.0, 0.0), Vec3::new(5.0, -5.0, 0.0), Vec3::new(0.0, 5.0, 0.0)];
        let hair = [Vec3::new(-2.5, -2.5, -5.0), Vec3::new(2.5, -2.5, -5.0), Vec3::new(0.0, 2.5, -5.0)];
        let f = [[0, 1, 2]];
        let layers = [
            LayerInput { positions: &face, faces: &f },
            LayerInput { positions: &hair, faces: &f },
        ];
        let buf = rasterize(&layers, &cam);
        let hair_px = buf.frags.iter().filter(|f| f.layer == LAYER_HAIR).count();
        assert!(hair_px > 0);
        let only_face = rasterize(&layers[..1], &cam);
        for (a, b) in buf.frags.iter().zip(&only_face.frags) {
            if a.layer == LAYER_HAIR {
                assert!(b.layer == LAYER_FACE, "hair pixel outside face in this scene");
                assert!(a.depth < b.depth);
            }
        }
    }

    #[test]
    fn shared_edge_owned_once() {
        // two triangles splitting a square along a diagonal through pixel centres
        let cam = ortho_like_cam(8);
        let s = 10.0 / 8.0; // world units per pixel at depth 10 with f = 8
        let p = [
            Vec3::new(-4.0 * s + 0.5 * s, -4.0 * s + 0.5 * s, 0.0),
            Vec3::new(2.0 * s + 0.5 * s, -4.0 * s + 0.5 * s, 0.0),
            Vec3::new(-4.0 * s + 0.5 * s, 2.0 * s + 0.5 * s, 0.0),
            Vec3::new(2.0 * s + 0.5 * s, 2.0 * s + 0.5 * s, 0.0),
        ];
        let faces = [[0, 1, 2], [1, 3, 2]];
        let layer = [LayerInput { positions: &p, faces: &faces }];
        let buf = rasterize(&layer, &cam);
        let mut counts = [0usize; 2];
        let tris: Vec<_> = faces.iter().map(|f| prepare(&cam, [&p[f[0]], &p[f[1]], &p[f[2]]]).unwrap()).collect();
        for row in 0..8 {
            for col in 0..8 {
                let hits = tris.iter().filter(|t| coverage(t, col, row).is_some()).count();
                assert!(hits <= 1, "pixel ({col},{row}) owned twice");
                if buf.frags[row * 8 + col].layer != LAYER_NONE {
                    counts[buf.frags[row * 8 + col].face as usize] += 1;
                }
            }
        }
        // 6x6 pixel-centre square: top/left edges included, bottom/right excluded
        assert_eq!(counts[0] + counts[1], 36);
    }

    #[test]
    fn triangle_behind_camera_is_culled() {
        let cam = ortho_like_cam(8);
        let p = [Vec3::new(-1.0, -1.0, -20.0), Vec3::new(1.0, -1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let buf = rasterize(&[LayerInput { positions: &p, faces: &[[0, 1, 2]] }], &cam);
        assert!(buf.frags.iter().all(|f| f.layer == LAYER_NONE));
    }
}
