#![allow(dead_code)]

pub mod oracles;

use lucas_core::codec::{Codec, CodecConfig, Layer, NeutralAssets};
use lucas_core::geomesh::Vec3;
use lucas_core::raster::Camera;
use lucas_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_cfg() -> CodecConfig {
    CodecConfig {
        geo_res: 16,
        widths: vec![8, 6],
        f_channels: 2,
        pixel_hidden: vec![8],
        pe_octaves: 2,
        ..CodecConfig::default()
    }
}

/// Perturbs every parameter except the geometry means so zero-initialised
/// heads become live.
pub fn jitter(codec: &mut Codec, seed: u64, amount: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = codec.params.ids().collect();
    for id in ids {
        if codec.params.name(id).ends_with("g_mean") {
            continue;
        }
        for v in codec.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

/// A spherical cap as geometry image with a mildly varying texture.
pub fn sphere_assets(n: usize, radius: f64, tint: f64) -> NeutralAssets {
    sphere_cap(n, radius, tint, 1.2, 2.0)
}

/// Elevations run from `top` down to `top - span`.
pub fn sphere_cap(n: usize, radius: f64, tint: f64, top: f64, span: f64) -> NeutralAssets {
    let geo = Tensor::from_fn(&[3, n, n], |i| {
        let (c, p) = (i / (n * n), i % (n * n));
        let (r, col) = (p / n, p % n);
        let az = -1.2 + 2.4 * col as f64 / (n - 1) as f64;
        let el = top - span * r as f64 / (n - 1) as f64;
        let v = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * radius;
        v[c]
    });
    let tex = Tensor::from_fn(&[3, n, n], |i| 0.3 + 0.2 * tint * ((i % 7) as f64 / 7.0) + 0.1 * (i / (n * n)) as f64);
    NeutralAssets::new(tex, geo).unwrap()
}

pub fn set_g_mean(codec: &mut Codec, assets: &NeutralAssets, layer: Layer) {
    let id = codec.g_mean_id(layer).unwrap();
    *codec.params.get_mut(id) = assets.geo.clone();
}

pub fn front_camera(size: usize) -> Camera {
    Camera::orbit(Vec3::zeros(), 0.0, 0.0, 45.0, 0.5, size)
}
