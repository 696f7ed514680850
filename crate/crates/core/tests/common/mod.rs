#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srfkit::camera::{generate_rays, CameraIntrinsics, CameraView, Pose, Split, Vec3};
use srfkit::render::{RenderConfig, SH_C0, SH_C1};
use srfkit::srf::SparseRadianceField;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random field whose densities stay away from zero and whose colours stay
/// inside `(0, 1)`, so renders are smooth in every feature.
pub fn smooth_field(rng: &mut impl Rng, h: u32, d: usize, occupancy: f64) -> SparseRadianceField {
    let mut s = SparseRadianceField::new(h, d).unwrap();
    let nb = d / 3;
    // RGB fields store colour directly, SH fields scale the DC term
    let dc = if nb == 1 { 1.0 } else { 1.0 / SH_C0 };
    for i in 0..h {
        for j in 0..h {
            for k in 0..h {
                if !rng.random_bool(occupancy) {
                    continue;
                }
                let mut f = vec![rng.random_range(0.3..2.0)];
                for _ in 0..3 {
                    f.push(rng.random_range(0.3..0.7) * dc);
                    for _ in 1..nb {
                        f.push(rng.random_range(-0.1..0.1));
                    }
                }
                s.insert([i, j, k], &f).unwrap();
            }
        }
    }
    s
}

/// Small views from random directions at distance 2.5, looking at the origin.
pub fn random_views(rng: &mut impl Rng, n: usize, size: u32) -> Vec<CameraView> {
    let k = CameraIntrinsics::square(size).unwrap();
    (0..n)
        .map(|_| {
            let dir = loop {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm() > 0.2 && v.norm() < 1.0 {
                    break v.normalize();
                }
            };
            CameraView { pose: Pose::look_at(dir * 2.5, Vec3::zeros()), intrinsics: k, split: Split::Train }
        })
        .collect()
}

/// Worst relative error between analytic gradients and central differences
/// of `f` over the listed indices, ignoring entries below `floor` in both.
pub struct GradCheck {
    pub worst: f64,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn check_gradient(
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    step: f64,
    floor: f64,
    mut f: impl FnMut(usize, f64) -> f64,
) -> GradCheck {
    let mut out = GradCheck { worst: 0.0, worst_index: 0, checked: 0 };
    for i in indices {
        let fd = (f(i, step) - f(i, -step)) / (2.0 * step);
        let a = analytic[i];
        let scale = a.abs().max(fd.abs());
        if scale <= floor {
            continue;
        }
        out.checked += 1;
        let rel = (a - fd).abs() / scale;
        if rel > out.worst {
            out.worst = rel;
            out.worst_index = i;
        }
    }
    out
}

/// Copy of `srf` with feature `i` shifted by `delta`.
pub fn nudged(srf: &SparseRadianceField, i: usize, delta: f64) -> SparseRadianceField {
    let mut s = srf.clone();
    s.features_mut()[i] += delta;
    s
}

/// Brute-force reference renderer over a dense copy of the field.
///
/// Walks the same sample positions as the sparse renderer (half a step past
/// the entry into the voxel-centre box, then every `step` voxels) but looks
/// every corner up in a flat array.
pub fn dense_render(srf: &SparseRadianceField, view: &CameraView, cfg: &RenderConfig) -> Vec<[f64; 3]> {
    let grid = srf.densify().unwrap();
    let h = srf.resolution() as usize;
    let hf = h as f64;
    let c = grid.channels;
    let nb = srf.color_dim() / 3;
    let rays = generate_rays(view);
    let at = |i: usize, j: usize, k: usize| &grid.data[((i * h + j) * h + k) * c..][..c];
    let mut out = Vec::with_capacity(rays.len());
    for (o, d) in rays.origins.iter().zip(&rays.directions) {
        let (mut t0, mut t1) = (rays.near, rays.far);
        let (lo, hi) = (-1.0 + 1.0 / hf, 1.0 - 1.0 / hf);
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < lo || o[a] > hi {
                    t1 = f64::NEG_INFINITY;
                }
                continue;
            }
            let (ta, tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        let dt = cfg.step_size * 2.0 / hf;
        let n = if t1 > t0 { ((t1 - t0) / dt).floor() as usize } else { 0 };
        let basis = if nb == 1 {
            vec![1.0]
        } else {
            vec![SH_C0, SH_C1 * d.y, SH_C1 * d.z, SH_C1 * d.x]
        };
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        for s in 0..n {
            let p = o + d * (t0 + (s as f64 + 0.5) * dt);
            let g = [p.x, p.y, p.z].map(|v| (v + 1.0) * 0.5 * hf - 0.5);
            if g.iter().any(|&v| v < 0.0 || v > hf - 1.0) {
                continue;
            }
            let base = g.map(|v| (v.floor() as usize).min(h - 2));
            let mut feat = vec![0.0; c];
            for corner in 0..8 {
                let idx = [0, 1, 2].map(|a| base[a] + ((corner >> (2 - a)) & 1));
                let w: f64 = (0..3)
                    .map(|a| {
                        let f = g[a] - base[a] as f64;
                        if idx[a] > base[a] { f } else { 1.0 - f }
                    })
                    .product();
                for (x, v) in feat.iter_mut().zip(at(idx[0], idx[1], idx[2])) {
                    *x += w * v;
                }
            }
            let sigma = feat[0].max(0.0);
            let keep = (-sigma * cfg.step_size).exp();
            let wgt = trans * (1.0 - keep);
            for ch in 0..3 {
                let v: f64 = (0..nb).map(|b| basis[b] * feat[1 + ch * nb + b]).sum();
                rgb[ch] += wgt * v.clamp(0.0, 1.0);
            }
            trans *= keep;
            if trans < cfg.stop_threshold {
                break;
            }
        }
        out.push([0, 1, 2].map(|ch| rgb[ch] + trans * cfg.background[ch]));
    }
    out
}
