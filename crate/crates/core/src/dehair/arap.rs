use nalgebra::{Cholesky, DMatrix, Matrix3};

use crate::geomesh::{MeshTopology, Vec3};

use super::{from_vec3, to_vec3, DehairError};

#[derive(Clone, Debug)]
pub struct ArapResult {
    /// Vertex-major coordinates.
    pub positions: Vec<f64>,
    /// Energy of the starting guess followed by the energy after each iteration.
    pub energies: Vec<f64>,
    /// A hidden component touched no fixed vertex and was left as initialised.
    pub warning: bool,
}

/// Best rotation taking rest edges onto deformed edges around vertex `i`.
fn fit_rotation(i: usize, adj: &[Vec<usize>], rest: &[Vec3], cur: &[Vec3]) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for &j in &adj[i] {
        s += (rest[i] - rest[j]) * (cur[i] - cur[j]).transpose();
    }
    let svd = s.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        // flip the axis belonging to the smallest singular value
        let k = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        let mut uf = u;
        uf.column_mut(k).neg_mut();
        r = vt.transpose() * uf.transpose();
    }
    r
}

/// `Σ_i Σ_{j∈N(i)} ‖(p_i − p_j) − R_i (r_i − r_j)‖²` with optimal `R_i`.
pub fn arap_energy(rest: &[Vec3], cur: &[Vec3], mesh: &MeshTopology) -> f64 {
    let adj = mesh.adjacency();
    let mut e = 0.0;
    for i in 0..rest.len() {
        let r = fit_rotation(i, &adj, rest, cur);
        for &j in &adj[i] {
            e += ((cur[i] - cur[j]) - r * (rest[i] - rest[j])).norm_squared();
        }
    }
    e
}

/// Local/global as-rigid-as-possible deformation with uniform weights.
///
/// Vertices with `fixed[v] == true` keep their `init` positions bit-exactly.
pub fn arap_solve(
    rest: &[Vec3],
    init: &[Vec3],
    fixed: &[bool],
    mesh: &MeshTopology,
    iters: usize,
) -> Result<(Vec<Vec3>, Vec<f64>, bool), DehairError> {
    let n = rest.len();
    let adj = mesh.adjacency();
    // connected components of free vertices; those with no fixed neighbour stay put
    let mut comp = vec![usize::MAX; n];
    let mut anchored = Vec::new();
    for s in 0..n {
        if fixed[s] || comp[s] != usize::MAX {
            continue;
        }
        let id = anchored.len();
        let mut touches = false;
        let mut stack = vec![s];
        comp[s] = id;
        while let Some(v) = stack.pop() {
            for &j in &adj[v] {
                if fixed[j] {
                    touches = true;
                } else if comp[j] == usize::MAX {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        anchored.push(touches);
    }
    let warning = anchored.iter().any(|a| !a);
    let free: Vec<usize> = (0..n).filter(|&v| !fixed[v] && anchored[comp[v]]).collect();
    let mut slot = vec![usize::MAX; n];
    for (k, &v) in free.iter().enumerate() {
        slot[v] = k;
    }
    let mut cur = init.to_vec();
    let mut energies = vec![arap_energy(rest, &cur, mesh)];
    if free.is_empty() {
        return Ok((cur, energies, warning));
    }
    let m = free.len();
    let mut lmat = DMatrix::zeros(m, m);
    for (k, &v) in free.iter().enumerate() {
        lmat[(k, k)] = 2.0 * adj[v].len() as f64;
        for &j in &adj[v] {
            if slot[j] != usize::MAX {
                lmat[(k, slot[j])] -= 2.0;
            }
        }
    }
    let chol = Cholesky::new(lmat).ok_or(DehairError::StitchSystem)?;
    for _ in 0..iters {
        let rots: Vec<Matrix3<f64>> = (0..n).map(|i| fit_rotation(i, &adj, rest, &cur)).collect();
        let mut rhs = DMatrix::zeros(m, 3);
        for (k, &v) in free.iter().enumerate() {
            let mut b = Vec3::zeros();
            for &j in &adj[v] {
                b += (rots[v] + rots[j]) * (rest[v] - rest[j]);
                if slot[j] == usize::MAX {
                    b += 2.0 * cur[j];
                }
            }
            for c in 0..3 {
                rhs[(k, c)] = b[c];
            }
        }
        let sol = chol.solve(&rhs);
        for (k, &v) in free.iter().enumerate() {
            cur[v] = Vec3::new(sol[(k, 0)], sol[(k, 1)], sol[(k, 2)]);
        }
        energies.push(arap_energy(rest, &cur, mesh));
    }
    Ok((cur, energies, warning))
}

/// Blends the model fill into the visible surface.
///
/// The rest shape is the model reconstruction; visible vertices are pinned
/// to the scan and the hidden ones start from the reconstruction.
pub fn stitch(
    inpainted: &[f64],
    observed_scan: &[f64],
    observed: &[bool],
    mesh: &MeshTopology,
    iters: usize,
) -> Result<ArapResult, DehairError> {
    let rest = to_vec3(inpainted);
    let scan = to_vec3(observed_scan);
    let init: Vec<Vec3> = (0..rest.len()).map(|v| if observed[v] { scan[v] } else { rest[v] }).collect();
    let (pos, energies, warning) = arap_solve(&rest, &init, observed, mesh, iters)?;
    let mut positions = from_vec3(&pos);
    // pinned coordinates come straight from the scan, not from a round trip
    for v in 0..observed.len() {
        if observed[v] {
            positions[3 * v..3 * v + 3].copy_from_slice(&observed_scan[3 * v..3 * v + 3]);
        }
    }
    Ok(ArapResult {
        positions,
        energies,
        warning,
    })
}
