use crate::tensor::{Tape, Tensor, Var};

use super::{GeomError, MeshTopology, Vec3};

/// Channel-first `[3,H,W]` map from UV space to head-centred positions (cm).
///
/// Pixel `(row, col)` sits at UV `(col/(W-1), row/(H-1))`, so the four
/// corner pixels lie exactly on the corners of the UV square.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryImage {
    data: Tensor,
}

impl GeometryImage {
    pub fn new(data: Tensor) -> Result<Self, GeomError> {
        if data.rank() != 3 || data.shape()[0] != 3 {
            return Err(GeomError::ImageShape(data.shape().to_vec()));
        }
        if !data.is_finite() {
            return Err(GeomError::NonFinite);
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[3, h, w]),
        }
    }

    /// Evaluates a surface parameterisation at every pixel's UV.
    pub fn from_fn(h: usize, w: usize, f: impl Fn(f64, f64) -> Vec3) -> Self {
        let mut data = vec![0.0; 3 * h * w];
        for r in 0..h {
            for c in 0..w {
                let p = f(pixel_coord(c, w), pixel_coord(r, h));
                for ch in 0..3 {
                    data[ch * h * w + r * w + c] = p[ch];
                }
            }
        }
        Self {
            data: Tensor::new(vec![3, h, w], data).unwrap(),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Vec3 {
        let (h, w) = (self.height(), self.width());
        let d = self.data.data();
        Vec3::new(
            d[row * w + col],
            d[h * w + row * w + col],
            d[2 * h * w + row * w + col],
        )
    }
}

/// UV coordinate of pixel index `i` along an axis of length `n`.
pub fn pixel_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Bilinear sample of `image` at each vertex UV, as a tape value `[V,3]`.
pub fn sample_geometry_image(tape: &mut Tape, image: Var, mesh: &MeshTopology) -> Result<Var, GeomError> {
    let coords = tape.constant(Tensor::new(vec![mesh.vertex_count(), 2], mesh.uv_flat())?);
    Ok(tape.grid_sample(image, coords)?)
}

/// Plain-value version of [`sample_geometry_image`].
pub fn sample_vertices(image: &GeometryImage, mesh: &MeshTopology) -> Vec<Vec3> {
    let mut tape = Tape::new();
    let g = tape.constant(image.tensor().clone());
    let v = sample_geometry_image(&mut tape, g, mesh).expect("shapes validated by GeometryImage");
    tape.value(v)
        .data()
        .chunks(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect()
}

/// `G = g_mean + d + g` with gradients to all three terms.
pub fn compose_geometry(tape: &mut Tape, g_mean: Var, d: Var, g: Var) -> Result<Var, GeomError> {
    let (a, b, c) = (tape.shape(g_mean), tape.shape(d), tape.shape(g));
    if a != b || a != c {
        return Err(GeomError::Resolution {
            expected: a.to_vec(),
            found: if a != b { b.to_vec() } else { c.to_vec() },
        });
    }
    let s = tape.add(g_mean, d)?;
    Ok(tape.add(s, g)?)
}

/// Flattens `[V,3]` tape data into points.
pub fn to_points(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

pub fn from_points(p: &[Vec3]) -> Tensor {
    Tensor::new(vec![p.len(), 3], p.iter().flat_map(|v| [v.x, v.y, v.z]).collect()).unwrap()
}
