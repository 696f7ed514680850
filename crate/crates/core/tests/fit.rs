mod common;

use common::{check_gradient, nudged, random_views, rng, smooth_field};
use proptest::prelude::*;
use srfkit::camera::{generate_rays, CameraIntrinsics, CameraView, Split};
use srfkit::fit::{fit_partial, fit_srf, prune, tv_penalty, upsample, visual_hull, FitConfig};
use srfkit::raster::ImageBuffer;
use srfkit::render::{render_image, RenderConfig};
use srfkit::scene::{make_scene, trace_reference, SceneSpec};
use srfkit::srf::SparseRadianceField;
use srfkit::Error;

#[test]
fn tv_gradient_matches_differences() {
    let srf = smooth_field(&mut rng(1), 6, 12, 0.7);
    let tv = tv_penalty(&srf);
    assert!(tv.pairs > 50);
    for (grad, pick) in [(&tv.grad_density, 0usize), (&tv.grad_color, 1)] {
        let check = check_gradient(grad, 0..grad.len(), 1e-5, 1e-6, |i, h| {
            let t = tv_penalty(&nudged(&srf, i, h));
            if pick == 0 { t.density } else { t.color }
        });
        assert!(check.checked > 100);
        assert!(check.worst < 1e-3, "{}", check.worst);
    }
}

#[test]
fn tv_vanishes_on_constant_fields() {
    let mut s = SparseRadianceField::new(6, 3).unwrap();
    for i in 1..5 {
        for j in 1..5 {
            s.insert([i, j, 2], &[0.7, 0.1, 0.2, 0.3]).unwrap();
        }
    }
    let tv = tv_penalty(&s);
    assert_eq!(tv.pairs, 2 * 4 * 3);
    assert_eq!(tv.density + tv.color, 0.0);
}

proptest! {
    #[test]
    fn tv_is_nonnegative(seed in any::<u64>(), occ in 0.05f64..0.9) {
        let tv = tv_penalty(&smooth_field(&mut rng(seed), 5, 3, occ));
        prop_assert!(tv.density >= 0.0 && tv.color >= 0.0);
    }

    #[test]
    fn upsample_keeps_every_parent(seed in any::<u64>()) {
        let s = smooth_field(&mut rng(seed), 4, 3, 0.3);
        let up = upsample(&s, 8).unwrap();
        prop_assert_eq!(up.len(), 8 * s.len());
        for c in s.coords() {
            for n in 0..8u16 {
                let child = [2 * c[0] + (n >> 2 & 1), 2 * c[1] + (n >> 1 & 1), 2 * c[2] + (n & 1)];
                prop_assert!(up.find(child.map(i64::from)).is_some());
            }
        }
    }
}

#[test]
fn upsample_divides_density_by_factor() {
    let mut s = SparseRadianceField::new(4, 3).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                s.insert([i, j, k], &[2.0, 0.25, 0.5, 0.75]).unwrap();
            }
        }
    }
    for f in [2, 4] {
        let up = upsample(&s, 4 * f).unwrap();
        for slot in 0..up.len() {
            let v = up.feature(slot);
            assert!((v[0] - 2.0 / f as f64).abs() < 1e-12);
            assert!((v[2] - 0.5).abs() < 1e-12);
        }
    }
    assert!(matches!(upsample(&s, 12), Err(Error::Config(_))));
}

#[test]
fn upsampled_field_renders_alike() {
    let s = smooth_field(&mut rng(3), 8, 3, 0.8);
    let up = upsample(&s, 16).unwrap();
    let view = &random_views(&mut rng(4), 1, 24)[0];
    let cfg = RenderConfig::default();
    let (a, b) = (render_image(&s, view, &cfg), render_image(&up, view, &cfg));
    let err: f64 = (0..a.pixel_count())
        .map(|p| (0..3).map(|c| (a.rgb(p)[c] - b.rgb(p)[c]).abs()).sum::<f64>())
        .sum::<f64>()
        / (3 * a.pixel_count()) as f64;
    assert!(err < 0.05, "mean abs difference {err}");
}

#[test]
fn prune_thresholds() {
    let mut s = SparseRadianceField::new(6, 3).unwrap();
    for i in 2..5 {
        for j in 2..5 {
            for k in 2..5 {
                s.insert([i, j, k], &[0.5, 0.2, 0.2, 0.2]).unwrap();
            }
        }
    }
    // isolated and empty: no sample near it has density
    s.insert([0, 0, 0], &[0.0, 0.2, 0.2, 0.2]).unwrap();
    let n = s.len();
    let probe = generate_rays(&random_views(&mut rng(6), 1, 8)[0]);
    let cfg = RenderConfig::default();
    assert_eq!(prune(&s, 0.0, &probe, &cfg).len(), n);
    assert_eq!(prune(&s, 10.0, &probe, &cfg).len(), 0);
    // zero density and no compositing weight
    assert_eq!(prune(&s, 1e-9, &probe, &cfg).len(), n - 1);
}

fn sphere_data(n: usize, size: u32) -> (Vec<CameraView>, Vec<ImageBuffer>) {
    let scene = make_scene(&SceneSpec::Sphere { radius: 0.5 }).unwrap();
    let k = CameraIntrinsics::square(size).unwrap();
    let views: Vec<CameraView> = srfkit::camera::spherical_rig(n, 2.5)
        .into_iter()
        .map(|pose| CameraView { pose, intrinsics: k, split: Split::Train })
        .collect();
    let images = views.iter().map(|v| trace_reference(&scene, v)).collect();
    (views, images)
}

fn tiny_config() -> FitConfig {
    FitConfig {
        iterations: 150,
        upsample_schedule: vec![50],
        resolution_schedule: vec![8, 16],
        rays_per_step: 1024,
        log_every: 25,
        ..FitConfig::default()
    }
}

#[test]
fn tiny_fit_is_deterministic_and_learns() {
    let (views, images) = sphere_data(12, 16);
    let cfg = tiny_config();
    let (a, ra) = fit_srf(&views, &images, &cfg).unwrap();
    let (b, rb) = fit_srf(&views, &images, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ra, rb);
    assert_eq!(a.resolution(), 16);
    assert_eq!(a.color_dim(), 12);
    assert!(ra.final_train_psnr > 18.0, "train PSNR {}", ra.final_train_psnr);
    assert_eq!(ra.stages.len(), 2);
}

#[test]
fn fit_of_empty_images_is_empty() {
    let (views, _) = sphere_data(4, 8);
    let blank: Vec<ImageBuffer> = views.iter().map(|_| ImageBuffer::filled(8, 8, [1.0, 1.0, 1.0, 0.0])).collect();
    let (srf, report) = fit_srf(&views, &blank, &tiny_config()).unwrap();
    assert!(srf.is_empty());
    assert!(report.final_train_psnr > 40.0);
}

#[test]
fn partial_fit_view_count() {
    let (views, images) = sphere_data(3, 8);
    let cfg = FitConfig { iterations: 10, upsample_schedule: vec![5], resolution_schedule: vec![4, 8], ..FitConfig::default() };
    assert!(matches!(fit_partial(&views[..2], &images[..2], &cfg), Err(Error::Contract(_))));
    let (srf, _) = fit_partial(&views[..1], &images[..1], &cfg).unwrap();
    assert_eq!(srf.color_dim(), 3);
}

#[test]
fn hull_covers_the_object() {
    let (views, images) = sphere_data(8, 16);
    let hull = visual_hull(&views, &images, 16, 3).unwrap();
    // voxels near the sphere centre are inside every silhouette
    for c in [[7u16, 7, 7], [8, 8, 8], [5, 8, 8]] {
        assert!(hull.find(c.map(i64::from)).is_some(), "{c:?}");
    }
    assert!(hull.find([0, 0, 0]).is_none());
}
