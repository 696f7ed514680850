mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use srfkit::metrics::{psnr, psnr_from_mse, ssim, validation_accuracy, PSNR_CAP};
use srfkit::raster::ImageBuffer;

fn noise_image(seed: u64, w: u32, h: u32) -> ImageBuffer {
    let mut r = rng(seed);
    let mut img = ImageBuffer::new(w, h);
    for p in 0..img.pixel_count() {
        img.set_pixel(p, [r.random(), r.random(), r.random(), 1.0]);
    }
    img
}

/// Direct 2D-window SSIM, one window position at a time.
fn ssim_reference(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (w, h) = (a.width as usize, a.height as usize);
    let mut g = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (x, y) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(x * x + y * y) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for c in 0..3 {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ux, mut uy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let p = (y0 + dy) * w + x0 + dx;
                        let wt = g[dy][dx] / total;
                        let (x, y) = (a.rgb(p)[c], b.rgb(p)[c]);
                        ux += wt * x;
                        uy += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let (vx, vy, cov) = (sxx - ux * ux, syy - uy * uy, sxy - ux * uy);
                acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_direct_windowing() {
    for seed in 0..4 {
        let a = noise_image(seed, 17, 14);
        let mut b = a.clone();
        let mut r = rng(seed + 50);
        for p in 0..b.pixel_count() {
            let px = b.pixel(p);
            b.set_pixel(p, [0, 1, 2, 3].map(|c| if c == 3 { 1.0 } else { (px[c] + r.random_range(-0.2..0.2)).clamp(0.0, 1.0) }));
        }
        let got = ssim(&a, &b).unwrap();
        let want = ssim_reference(&a, &b);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn ssim_of_flat_images_has_closed_form() {
    let (u, v) = (0.3f64, 0.6f64);
    let a = ImageBuffer::filled(12, 12, [u, u, u, 1.0]);
    let b = ImageBuffer::filled(12, 12, [v, v, v, 1.0]);
    // f32 storage of the pixel values
    let (u, v) = (u as f32 as f64, v as f32 as f64);
    let want = (2.0 * u * v + 1e-4) / (u * u + v * v + 1e-4);
    assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-9);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim(&ImageBuffer::new(10, 12), &ImageBuffer::new(10, 12)).is_err());
}

#[test]
fn psnr_examples() {
    let a = ImageBuffer::filled(8, 8, [0.5, 0.5, 0.5, 1.0]);
    let b = ImageBuffer::filled(8, 8, [0.6, 0.6, 0.6, 1.0]);
    let d = 0.6f32 as f64 - 0.5f32 as f64;
    assert!((psnr(&a, &b, None).unwrap() - (-10.0 * (d * d).log10())).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
    let mut mask = vec![0.0; 64];
    mask[3] = 1.0;
    assert!((psnr(&a, &b, Some(&mask)).unwrap() - psnr(&a, &b, None).unwrap()).abs() < 1e-12);
    assert!(psnr(&a, &b, Some(&[0.0; 64])).is_err());
    assert!(psnr(&a, &ImageBuffer::new(8, 9), None).is_err());
    assert_eq!(validation_accuracy(15.0, 30.0).unwrap(), 50.0);
    assert!(validation_accuracy(15.0, 0.0).is_err());
}

proptest! {
    #[test]
    fn metrics_are_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (noise_image(s1, 12, 12), noise_image(s2, 12, 12));
        let (p, q) = (psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
        prop_assert_eq!(p, q);
        prop_assert!(p >= 0.0 && p <= PSNR_CAP);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0);
    }

    #[test]
    fn psnr_falls_as_error_grows(m1 in 1e-8f64..1.0, m2 in 1e-8f64..1.0) {
        prop_assume!(m1 < m2);
        prop_assert!(psnr_from_mse(m1) > psnr_from_mse(m2));
    }
}
