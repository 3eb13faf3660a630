mod common;

use lucas_core::dehair::{
    arap_energy, arap_solve, dehair_scan, em_fit, stitch, EmConfig, IdentityScan, Sample,
};
use lucas_core::geomesh::{Laplacian, MeshTopology, Vec3};
use nalgebra::{DMatrix, DVector, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::{draw, gauss, known_model, principal_angle_deg};

#[test]
fn em_log_likelihood_is_monotone_with_missing_data() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = known_model(&mut rng, 30, 3, 0.1);
        let samples: Vec<Sample> = draw(&truth, &mut rng, 40)
            .into_iter()
            .map(|x| Sample {
                observed: (0..10).map(|_| rng.gen::<f64>() > 0.2).collect(),
                x,
            })
            .collect();
        let cfg = EmConfig {
            k: 3,
            lambda_lap: 0.0,
            iters: 200,
            regularize_mean: true,
        };
        let fit = em_fit(&samples, None, &cfg).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn em_recovers_known_subspace() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let truth = known_model(&mut rng, 150, 2, 0.05);
    let samples: Vec<Sample> = draw(&truth, &mut rng, 300).into_iter().map(Sample::full).collect();
    let cfg = EmConfig {
        k: 2,
        lambda_lap: 0.0,
        iters: 200,
        regularize_mean: true,
    };
    let fit = em_fit(&samples, None, &cfg).unwrap();
    let angle = principal_angle_deg(&fit.model.w, &truth.w);
    assert!(angle < 3.0, "angle {angle}");
}

/// Plain dense EM for factor analysis (complete data), written from the
/// textbook updates with explicit matrix inverses.
fn dense_em(x: &[Vec<f64>], k: usize, iters: usize) -> f64 {
    let n = x.len();
    let d = x[0].len();
    let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| xm.column(j).mean());
    let xc = DMatrix::from_fn(n, d, |i, j| xm[(i, j)] - mean[j]);
    let s = xc.transpose() * &xc / n as f64;
    let svd = s.clone().svd(true, false);
    let mut w = DMatrix::from_fn(d, k, |i, j| svd.u.as_ref().unwrap()[(i, j)] * svd.singular_values[j].sqrt());
    let mut psi = DVector::from_element(d, 0.1);
    for _ in 0..iters {
        let c = &w * w.transpose() + DMatrix::from_diagonal(&psi);
        let beta = w.transpose() * c.try_inverse().unwrap();
        let ezz = DMatrix::identity(k, k) - &beta * &w + &beta * &s * beta.transpose();
        w = &s * beta.transpose() * ezz.try_inverse().unwrap();
        let diag = (&s - &w * &beta * &s).diagonal();
        psi = diag.map(|v| v.max(1e-8));
    }
    let c = &w * w.transpose() + DMatrix::from_diagonal(&psi);
    let cinv = c.clone().try_inverse().unwrap();
    let logdet = c.determinant().ln();
    let tr = (&cinv * &s).trace();
    -0.5 * n as f64 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + tr)
}

#[test]
fn em_matches_dense_oracle_on_small_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let truth = known_model(&mut rng, 15, 2, 0.2);
    let data = draw(&truth, &mut rng, 60);
    let samples: Vec<Sample> = data.iter().cloned().map(Sample::full).collect();
    let cfg = EmConfig {
        k: 2,
        lambda_lap: 0.0,
        iters: 3000,
        regularize_mean: true,
    };
    let fit = em_fit(&samples, None, &cfg).unwrap();
    let ours = *fit.log_likelihood.last().unwrap();
    let oracle = dense_em(&data, 2, 3000);
    assert!((ours - oracle).abs() < 1e-6, "{ours} vs {oracle}");
}

#[test]
fn larger_smoothness_weight_gives_smoother_loadings() {
    let mesh = MeshTopology::grid(5, 6);
    let lap = Laplacian::from_mesh(&mesh);
    let v = mesh.vertex_count();
    let energy = |w: &DMatrix<f64>| -> f64 {
        let mut e = 0.0;
        for col in w.column_iter() {
            for c in 0..3 {
                let x: Vec<f64> = (0..v).map(|i| col[3 * i + c]).collect();
                let lx = lap.apply(&x);
                e += x.iter().zip(&lx).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        e
    };
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let truth = known_model(&mut rng, 3 * v, 3, 0.05);
        let samples: Vec<Sample> = draw(&truth, &mut rng, 40).into_iter().map(Sample::full).collect();
        let mut last = f64::MAX;
        for lambda in [0.0, 0.1, 1.0, 10.0] {
            let cfg = EmConfig {
                k: 3,
                lambda_lap: lambda,
                iters: 30,
                regularize_mean: true,
            };
            let fit = em_fit(&samples, Some(&lap), &cfg).unwrap();
            let e = energy(&fit.model.w);
            assert!(e <= last * (1.0 + 1e-9), "seed {seed} lambda {lambda}: {e} > {last}");
            last = e;
        }
    }
}

#[test]
fn dehair_is_exact_on_model_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = known_model(&mut rng, 60, 3, 1e-8);
    model.psi.fill(1e-8);
    let z = DVector::from_fn(3, |_, _| gauss(&mut rng));
    let x: Vec<f64> = model.reconstruct(&z).iter().copied().collect();
    let hair: Vec<bool> = (0..20).map(|i| i >= 10).collect();
    let scan = IdentityScan {
        id: 0,
        vertices: x.clone(),
        hair: hair.clone(),
    };
    let out = dehair_scan(&model, &scan).unwrap();
    for d in 0..60 {
        assert!((out.geometry[d] - x[d]).abs() < 1e-9);
    }
    // fully observed input is returned untouched
    let full = IdentityScan {
        id: 1,
        vertices: x.iter().map(|v| v + 0.3).collect(),
        hair: vec![false; 20],
    };
    assert_eq!(dehair_scan(&model, &full).unwrap().geometry, full.vertices);
    // dehairing the result again changes nothing
    let again = IdentityScan {
        id: 0,
        vertices: out.geometry.clone(),
        hair,
    };
    let twice = dehair_scan(&model, &again).unwrap();
    for d in 0..60 {
        assert!((twice.geometry[d] - out.geometry[d]).abs() < 1e-12);
    }
}

#[test]
fn dehair_needs_enough_observations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = known_model(&mut rng, 30, 4, 0.1);
    let scan = IdentityScan {
        id: 0,
        vertices: vec![0.0; 30],
        hair: (0..10).map(|i| i > 2).collect(),
    };
    assert!(dehair_scan(&model, &scan).is_err());
}

fn sheet() -> (MeshTopology, Vec<Vec3>) {
    let mesh = MeshTopology::grid(7, 7);
    let pts = mesh
        .uv()
        .iter()
        .map(|t| Vec3::new(t[0] * 6.0, t[1] * 6.0, (t[0] * 3.0).sin() * 0.5))
        .collect();
    (mesh, pts)
}

fn interior_mask(mesh: &MeshTopology) -> Vec<bool> {
    mesh.uv()
        .iter()
        .map(|t| !(t[0] > 0.2 && t[0] < 0.8 && t[1] > 0.2 && t[1] < 0.8))
        .collect()
}

#[test]
fn arap_rigid_motion_has_zero_energy() {
    let (mesh, rest) = sheet();
    let rot = Rotation3::new(Vec3::new(0.3, -0.5, 0.2));
    let t = Vec3::new(1.0, 2.0, -3.0);
    let moved: Vec<Vec3> = rest.iter().map(|p| rot * p + t).collect();
    let fixed = interior_mask(&mesh);
    let (out, energies, warn) = arap_solve(&rest, &moved, &fixed, &mesh, 5).unwrap();
    assert!(!warn);
    assert!(energies[0] < 1e-20);
    for (a, b) in out.iter().zip(&moved) {
        assert!((a - b).norm() < 1e-9);
    }
}

#[test]
fn arap_follows_translated_boundary() {
    let (mesh, rest) = sheet();
    let fixed = interior_mask(&mesh);
    let t = Vec3::new(0.5, -1.0, 2.0);
    let init: Vec<Vec3> = rest
        .iter()
        .zip(&fixed)
        .map(|(p, &f)| if f { p + t } else { *p })
        .collect();
    let (out, _, _) = arap_solve(&rest, &init, &fixed, &mesh, 200).unwrap();
    for (o, p) in out.iter().zip(&rest) {
        assert!((o - (p + t)).norm() < 1e-6, "{}", (o - (p + t)).norm());
    }
}

/// Independent energy: per-vertex rotation from a 3×3 Kabsch fit with
/// explicit determinant correction via a diagonal sign matrix.
fn oracle_energy(rest: &[Vec3], cur: &[Vec3], mesh: &MeshTopology) -> f64 {
    let adj = mesh.adjacency();
    let mut total = 0.0;
    for i in 0..rest.len() {
        let mut h = nalgebra::Matrix3::zeros();
        for &j in &adj[i] {
            h += (rest[i] - rest[j]) * (cur[i] - cur[j]).transpose();
        }
        let svd = h.svd(true, true);
        let u = svd.u.unwrap();
        let v = svd.v_t.unwrap().transpose();
        let dsign = (v * u.transpose()).determinant().signum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut dm = nalgebra::Matrix3::identity();
        dm[(order[2], order[2])] = dsign;
        let r = v * dm * u.transpose();
        for &j in &adj[i] {
            total += ((cur[i] - cur[j]) - r * (rest[i] - rest[j])).norm_squared();
        }
    }
    total
}

#[test]
fn arap_energy_never_increases() {
    let (mesh, rest) = sheet();
    let fixed = interior_mask(&mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let init: Vec<Vec3> = rest
        .iter()
        .map(|p| p + Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
        .collect();
    let (_, energies, _) = arap_solve(&rest, &init, &fixed, &mesh, 50).unwrap();
    for w in energies.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
    }
    let e0 = oracle_energy(&rest, &init, &mesh);
    assert!((e0 - energies[0]).abs() < 1e-9 * e0.max(1.0));
    assert!((arap_energy(&rest, &init, &mesh) - e0).abs() < 1e-9 * e0.max(1.0));
}

#[test]
fn stitch_keeps_observed_bits_and_flags_islands() {
    let (mesh, rest) = sheet();
    let observed = interior_mask(&mesh);
    let inpainted: Vec<f64> = rest.iter().flat_map(|p| [p.x, p.y, p.z + 0.1]).collect();
    let scan: Vec<f64> = rest.iter().flat_map(|p| [p.x + 1e-3, p.y, p.z]).collect();
    let out = stitch(&inpainted, &scan, &observed, &mesh, 10).unwrap();
    for v in 0..observed.len() {
        if observed[v] {
            for c in 0..3 {
                assert_eq!(out.positions[3 * v + c].to_bits(), scan[3 * v + c].to_bits());
            }
        }
    }
    assert!(!out.warning);
    let none = vec![false; observed.len()];
    let out = stitch(&inpainted, &scan, &none, &mesh, 10).unwrap();
    assert!(out.warning);
    assert_eq!(out.positions, inpainted);
}

#[test]
fn unrestricted_rank_reaches_full_covariance_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = known_model(&mut rng, 15, 4, 0.3);
    let data = draw(&truth, &mut rng, 60);
    let samples: Vec<Sample> = data.iter().cloned().map(Sample::full).collect();
    let cfg = EmConfig {
        k: 15,
        lambda_lap: 0.0,
        iters: 2000,
        regularize_mean: true,
    };
    let fit = em_fit(&samples, None, &cfg).unwrap();
    let n = data.len();
    let xm = DMatrix::from_fn(n, 15, |i, j| data[i][j]);
    let mean = DVector::from_fn(15, |j, _| xm.column(j).mean());
    let xc = DMatrix::from_fn(n, 15, |i, j| xm[(i, j)] - mean[j]);
    let s = xc.transpose() * &xc / n as f64;
    let bound = -0.5 * n as f64 * (15.0 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + 15.0);
    let ours = *fit.log_likelihood.last().unwrap();
    assert!(ours <= bound + 1e-9);
    assert!((ours - bound).abs() < 1e-6, "{ours} vs {bound}");
}
