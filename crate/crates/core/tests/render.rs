mod common;

use common::{check_gradient, dense_render, nudged, random_views, rng, smooth_field};
use rand::Rng;
use srfkit::camera::generate_rays;
use srfkit::render::{composite, render_backward, render_image, render_rays, DensityActivation, RenderConfig};
use srfkit::srf::SparseRadianceField;

fn messy_field(seed: u64, d: usize) -> SparseRadianceField {
    let mut r = rng(seed);
    let mut s = SparseRadianceField::new(8, d).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            for k in 0..8 {
                if r.random_bool(0.3) {
                    let f: Vec<f64> = (0..1 + d).map(|_| r.random_range(-1.0..4.0)).collect();
                    s.insert([i, j, k], &f).unwrap();
                }
            }
        }
    }
    s
}

#[test]
fn sparse_matches_dense_reference() {
    let cfg = RenderConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let d = if seed % 2 == 0 { 12 } else { 3 };
        let srf = messy_field(seed, d);
        let view = &random_views(&mut rng(1000 + seed), 1, 12)[0];
        let fast = render_image(&srf, view, &cfg);
        let slow = dense_render(&srf, view, &cfg);
        for (p, want) in slow.iter().enumerate() {
            let got = fast.rgb(p);
            for c in 0..3 {
                worst = worst.max((got[c] - want[c]).abs());
            }
        }
    }
    assert!(worst < 1e-6, "max pixel difference {worst}");
}

#[test]
fn two_sample_ray_has_closed_form_weights() {
    // sigma * delta = ln 2 halves transmittance at every sample
    let delta = 0.5;
    let sigma = std::f64::consts::LN_2 / delta;
    let (c1, c2, bg) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
    let (rgb, t) = composite(&[(sigma, c1), (sigma, c2)], delta, bg);
    assert!((rgb[0] - 0.5).abs() < 1e-6);
    assert!((rgb[1] - 0.25).abs() < 1e-6);
    assert!((rgb[2] - 0.25).abs() < 1e-6);
    assert!((t - 0.25).abs() < 1e-6);
}

#[test]
fn empty_field_renders_background() {
    let srf = SparseRadianceField::new(8, 12).unwrap();
    let cfg = RenderConfig { background: [0.2, 0.4, 0.6], ..Default::default() };
    let view = &random_views(&mut rng(2), 1, 8)[0];
    let img = render_image(&srf, view, &cfg);
    for p in 0..img.pixel_count() {
        let px = img.pixel(p);
        for (a, b) in px.iter().zip([0.2, 0.4, 0.6, 0.0]) {
            assert!((a - b).abs() < 1e-6, "{px:?}");
        }
    }
}

fn weighted_render(srf: &SparseRadianceField, rays: &srfkit::camera::RayBundle, cfg: &RenderConfig, g: &[[f64; 3]]) -> f64 {
    render_rays(srf, rays, cfg)
        .rgb
        .iter()
        .zip(g)
        .map(|(c, w)| c[0] * w[0] + c[1] * w[1] + c[2] * w[2])
        .sum()
}

fn backward_matches_differences(d: usize, activation: DensityActivation, seed: u64) {
    let mut r = rng(seed);
    let srf = smooth_field(&mut r, 6, d, 0.5);
    let cfg = RenderConfig { activation, stop_threshold: 0.0, ..Default::default() };
    let views = random_views(&mut r, 2, 8);
    let mut rays = generate_rays(&views[0]);
    let more = generate_rays(&views[1]);
    rays.origins.extend(more.origins);
    rays.directions.extend(more.directions);
    rays.far = rays.far.max(more.far);
    rays.near = rays.near.min(more.near);
    let g: Vec<[f64; 3]> = (0..rays.len()).map(|_| [0, 1, 2].map(|_| r.random_range(-1.0..1.0))).collect();
    let grads = render_backward(&srf, &rays, &cfg, &g).to_feature_layout(d);
    let check = check_gradient(&grads, 0..grads.len(), 1e-5, 1e-6, |i, h| {
        weighted_render(&nudged(&srf, i, h), &rays, &cfg, &g)
    });
    assert!(check.checked > grads.len() / 4, "only {} entries checked", check.checked);
    assert!(check.worst < 1e-3, "rel error {} at {}", check.worst, check.worst_index);
}

#[test]
fn backward_matches_differences_sh() {
    backward_matches_differences(12, DensityActivation::Relu, 11);
}

#[test]
fn backward_matches_differences_rgb() {
    backward_matches_differences(3, DensityActivation::Relu, 12);
}

#[test]
fn backward_matches_differences_exp() {
    backward_matches_differences(12, DensityActivation::Exp, 13);
}

#[test]
fn backward_is_independent_of_ray_order() {
    let mut r = rng(5);
    let srf = smooth_field(&mut r, 6, 12, 0.5);
    let cfg = RenderConfig::default();
    let rays = generate_rays(&random_views(&mut r, 1, 32)[0]);
    let g: Vec<[f64; 3]> = (0..rays.len()).map(|_| [0.1, -0.2, 0.3]).collect();
    let a = render_backward(&srf, &rays, &cfg, &g);
    let idx: Vec<usize> = (0..rays.len()).rev().collect();
    let b = render_backward(&srf, &rays.select(&idx), &cfg, &g);
    for (x, y) in a.d_density.iter().zip(&b.d_density) {
        assert!((x - y).abs() < 1e-9);
    }
}
