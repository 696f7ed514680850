//! Differentiable volume rendering of sparse radiance fields.
//!
//! Rays are marched through the grid with a fixed step. At every sample the
//! eight surrounding voxels are blended trilinearly (absent voxels count as
//! zero), density goes through an activation, radiance through a degree-1
//! real SH evaluation clamped to `[0, 1]`, and samples are alpha-composited
//! front to back over a background colour.

use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, CameraView, RayBundle, Vec3};
use crate::error::{Error, Result};
use crate::raster::ImageBuffer;
use crate::par;
use crate::srf::SparseRadianceField;

/// Degree-0 real SH constant.
pub const SH_C0: f64 = 0.282_094_79;
/// Degree-1 real SH constant.
pub const SH_C1: f64 = 0.488_602_51;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityActivation {
    #[default]
    Relu,
    Exp,
}

impl DensityActivation {
    #[inline]
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            DensityActivation::Relu => raw.max(0.0),
            DensityActivation::Exp => raw.exp(),
        }
    }

    #[inline]
    pub fn derivative(self, raw: f64) -> f64 {
        match self {
            DensityActivation::Relu => {
                if raw > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            DensityActivation::Exp => raw.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// March step in voxel units.
    pub step_size: f64,
    pub activation: DensityActivation,
    pub background: [f64; 3],
    /// Stop marching once transmittance drops below this value.
    pub stop_threshold: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            activation: DensityActivation::Relu,
            background: [1.0; 3],
            stop_threshold: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::Config(format!(
                "step_size must lie in (0, 1], got {}",
                self.step_size
            )));
        }
        if !(0.0..1.0).contains(&self.stop_threshold) {
            return Err(Error::Config(format!(
                "stop_threshold must lie in [0, 1), got {}",
                self.stop_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
}

/// Gradients aligned with the field's voxel slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub d_density: Vec<f64>,
    /// `M x d`, row per voxel.
    pub d_radiance: Vec<f64>,
}

impl RenderGradients {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            d_density: vec![0.0; m],
            d_radiance: vec![0.0; m * d],
        }
    }

    /// Interleave into the field's `1 + d` feature layout.
    pub fn to_feature_layout(&self, d: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_density.len() * (1 + d));
        for (i, dd) in self.d_density.iter().enumerate() {
            out.push(*dd);
            out.extend_from_slice(&self.d_radiance[i * d..(i + 1) * d]);
        }
        out
    }
}

/// SH basis values for one direction; `basis.len()` is 1 for RGB fields and
/// 4 for degree-1 fields.
#[inline]
fn sh_basis(color_dim: usize, dir: &Vec3) -> ([f64; 4], usize) {
    if color_dim == 3 {
        ([1.0, 0.0, 0.0, 0.0], 1)
    } else {
        (
            [SH_C0, SH_C1 * dir.y, SH_C1 * dir.z, SH_C1 * dir.x],
            4,
        )
    }
}

/// Linear SH evaluation without clamping.
pub fn eval_sh_raw(coeffs: &[f64], dir: &Vec3) -> [f64; 3] {
    let (basis, nb) = sh_basis(coeffs.len(), dir);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (0..nb).map(|b| basis[b] * coeffs[c * nb + b]).sum();
    }
    out
}

/// View-dependent colour of `coeffs` (3 = RGB, 12 = degree-1 SH per channel),
/// clamped to `[0, 1]`.
pub fn eval_sh(coeffs: &[f64], dir: &Vec3) -> Result<[f64; 3]> {
    if coeffs.len() != 3 && coeffs.len() != 12 {
        return Err(Error::Contract(format!(
            "SH coefficient count must be 3 or 12, got {}",
            coeffs.len()
        )));
    }
    if (dir.norm() - 1.0).abs() > 1e-3 {
        return Err(Error::Contract(format!(
            "direction must be unit length, |v| = {}",
            dir.norm()
        )));
    }
    Ok(eval_sh_raw(coeffs, dir).map(|v| v.clamp(0.0, 1.0)))
}

/// The eight voxels around a grid-space point with their blend weights.
#[derive(Debug, Clone, Copy)]
pub struct Corners {
    pub coords: [[i64; 3]; 8],
    pub weights: [f64; 8],
}

/// Trilinear stencil at `g` (grid units). `None` outside `[0, H-1]^3`.
pub fn trilinear_corners(resolution: u32, g: [f64; 3]) -> Option<Corners> {
    let hi = (resolution - 1) as f64;
    if g.iter().any(|&v| !(0.0..=hi).contains(&v)) {
        return None;
    }
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let b = (g[a].floor() as i64).min(resolution as i64 - 2);
        base[a] = b;
        frac[a] = g[a] - b as f64;
    }
    let mut coords = [[0i64; 3]; 8];
    let mut weights = [0.0; 8];
    for n in 0..8 {
        let (di, dj, dk) = ((n >> 2) & 1, (n >> 1) & 1, n & 1);
        coords[n] = [base[0] + di as i64, base[1] + dj as i64, base[2] + dk as i64];
        let wx = if di == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dj == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dk == 1 { frac[2] } else { 1.0 - frac[2] };
        weights[n] = wx * wy * wz;
    }
    Some(Corners { coords, weights })
}

/// Trilinear blend of voxel features at `point` (grid units); zeros outside
/// the grid or in empty space.
pub fn sample_trilinear(srf: &SparseRadianceField, point: [f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; srf.width()];
    if let Some(c) = trilinear_corners(srf.resolution(), point) {
        for n in 0..8 {
            if let Some(slot) = srf.find(c.coords[n]) {
                for (o, f) in out.iter_mut().zip(srf.feature(slot)) {
                    *o += c.weights[n] * f;
                }
            }
        }
    }
    out
}

/// Ray-march sample positions in grid units for one ray.
///
/// Samples are spaced `step_size` voxels apart, starting half a step after the
/// ray enters the `[0, H-1]^3` box (clipped to `[near, far]`).
pub fn ray_samples(
    origin: &Vec3,
    dir: &Vec3,
    near: f64,
    far: f64,
    resolution: u32,
    step_size: f64,
) -> impl Iterator<Item = [f64; 3]> {
    let h = resolution as f64;
    // world bounds of the voxel-centre box
    let lo_w = -1.0 + 1.0 / h;
    let hi_w = 1.0 - 1.0 / h;
    let (mut t0, mut t1) = (near, far);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo_w || origin[a] > hi_w {
                t1 = f64::NEG_INFINITY;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut lo, mut hi) = ((lo_w - origin[a]) * inv, (hi_w - origin[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    let dt = step_size * 2.0 / h;
    let count = if t1 > t0 {
        ((t1 - t0) / dt).floor() as usize
    } else {
        0
    };
    let (o, d) = (*origin, *dir);
    (0..count).map(move |k| {
        let t = t0 + (k as f64 + 0.5) * dt;
        let p = o + d * t;
        [
            (p.x + 1.0) * 0.5 * h - 0.5,
            (p.y + 1.0) * 0.5 * h - 0.5,
            (p.z + 1.0) * 0.5 * h - 0.5,
        ]
    })
}

/// Contribution of one march sample, kept for the reverse pass.
struct Sample {
    slots: [u32; 8],
    weights: [f64; 8],
    present: u8,
    raw_density: f64,
    sigma: f64,
    color: [f64; 3],
    pass: [bool; 3],
    transmittance: f64,
    weight: f64,
}

const NO_SLOT: u32 = u32::MAX;

struct RayTrace {
    samples: Vec<Sample>,
    rgb: [f64; 3],
    transmittance: f64,
}

fn trace_ray(
    srf: &SparseRadianceField,
    origin: &Vec3,
    dir: &Vec3,
    near: f64,
    far: f64,
    cfg: &RenderConfig,
    keep: bool,
) -> RayTrace {
    let d = srf.color_dim();
    let (basis, nb) = sh_basis(d, dir);
    let delta = cfg.step_size;
    let mut samples = Vec::new();
    let mut t = 1.0f64;
    let mut rgb = [0.0; 3];
    for g in ray_samples(origin, dir, near, far, srf.resolution(), delta) {
        let Some(c) = trilinear_corners(srf.resolution(), g) else {
            continue;
        };
        let mut slots = [NO_SLOT; 8];
        let mut present = 0u8;
        let mut feat = [0.0f64; 13];
        for n in 0..8 {
            if let Some(s) = srf.find(c.coords[n]) {
                slots[n] = s as u32;
                present |= 1 << n;
                for (acc, f) in feat.iter_mut().zip(srf.feature(s)) {
                    *acc += c.weights[n] * f;
                }
            }
        }
        if present == 0 {
            continue;
        }
        let raw_density = feat[0];
        let sigma = cfg.activation.apply(raw_density);
        if sigma <= 0.0 {
            continue;
        }
        let mut color = [0.0; 3];
        let mut pass = [false; 3];
        for ch in 0..3 {
            let v: f64 = (0..nb).map(|b| basis[b] * feat[1 + ch * nb + b]).sum();
            pass[ch] = v > 0.0 && v < 1.0;
            color[ch] = v.clamp(0.0, 1.0);
        }
        let keep_frac = (-sigma * delta).exp();
        let w = t * (1.0 - keep_frac);
        for ch in 0..3 {
            rgb[ch] += w * color[ch];
        }
        if keep {
            samples.push(Sample {
                slots,
                weights: c.weights,
                present,
                raw_density,
                sigma,
                color,
                pass,
                transmittance: t,
                weight: w,
            });
        }
        t *= keep_frac;
        if t < cfg.stop_threshold {
            break;
        }
    }
    for ch in 0..3 {
        rgb[ch] += t * cfg.background[ch];
    }
    RayTrace {
        samples,
        rgb,
        transmittance: t,
    }
}

/// Front-to-back compositing of explicit `(sigma, colour)` samples with a
/// common step `delta`; returns `(rgb, transmittance)`.
pub fn composite(samples: &[(f64, [f64; 3])], delta: f64, background: [f64; 3]) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    for (sigma, c) in samples {
        let keep = (-sigma * delta).exp();
        let w = t * (1.0 - keep);
        for ch in 0..3 {
            rgb[ch] += w * c[ch];
        }
        t *= keep;
    }
    for ch in 0..3 {
        rgb[ch] += t * background[ch];
    }
    (rgb, t)
}

fn ray_chunk(n: usize) -> usize {
    n.div_ceil(64).max(256)
}

pub fn render_rays(srf: &SparseRadianceField, rays: &RayBundle, cfg: &RenderConfig) -> RenderOutput {
    let n = rays.len();
    let parts = par::map_chunks(n, ray_chunk(n), |_, range| {
        range
            .map(|r| {
                let tr = trace_ray(
                    srf,
                    &rays.origins[r],
                    &rays.directions[r],
                    rays.near,
                    rays.far,
                    cfg,
                    false,
                );
                (tr.rgb, tr.transmittance)
            })
            .collect::<Vec<_>>()
    });
    let mut out = RenderOutput {
        rgb: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
    };
    for (rgb, t) in parts.into_iter().flatten() {
        out.rgb.push(rgb);
        out.alpha.push(1.0 - t);
        out.transmittance.push(t);
    }
    out
}

/// Render a full view into an RGBA image (alpha = accumulated opacity).
pub fn render_image(srf: &SparseRadianceField, view: &CameraView, cfg: &RenderConfig) -> ImageBuffer {
    let rays = generate_rays(view);
    let out = render_rays(srf, &rays, cfg);
    let k = &view.intrinsics;
    let mut img = ImageBuffer::new(k.width, k.height);
    for (p, (rgb, a)) in out.rgb.iter().zip(&out.alpha).enumerate() {
        img.set_pixel(p, [rgb[0], rgb[1], rgb[2], *a]);
    }
    img
}

/// Sparse per-chunk gradient: sorted voxel slots and their `1 + d` values.
struct ChunkGrad {
    slots: Vec<u32>,
    values: Vec<f64>,
}

/// Reverse pass of [`render_rays`] for upstream pixel gradients `d_rgb`.
///
/// Gradients are accumulated per fixed chunk of rays and merged in chunk
/// order, so the result does not depend on the thread count.
pub fn render_backward(
    srf: &SparseRadianceField,
    rays: &RayBundle,
    cfg: &RenderConfig,
    d_rgb: &[[f64; 3]],
) -> RenderGradients {
    assert_eq!(d_rgb.len(), rays.len(), "one gradient per ray");
    let m = srf.len();
    let d = srf.color_dim();
    let w = 1 + d;
    let n = rays.len();
    let chunks = par::map_chunks(n, ray_chunk(n), |_, range| {
        let mut acc = vec![0.0f64; m * w];
        let mut touched = vec![false; m];
        let mut slots = Vec::new();
        for r in range {
            let g = d_rgb[r];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let dir = &rays.directions[r];
            let tr = trace_ray(srf, &rays.origins[r], dir, rays.near, rays.far, cfg, true);
            let (basis, nb) = sh_basis(d, dir);
            // suffix = sum_{j>i} w_j c_j + T_final * bg, projected on g
            let mut suffix: f64 = (0..3).map(|ch| g[ch] * cfg.background[ch]).sum::<f64>()
                * tr.transmittance;
            for s in tr.samples.iter().rev() {
                let gc: f64 = (0..3).map(|ch| g[ch] * s.color[ch]).sum();
                let t_next = s.transmittance * (-s.sigma * cfg.step_size).exp();
                let d_sigma = cfg.step_size * (t_next * gc - suffix);
                let d_raw = d_sigma * cfg.activation.derivative(s.raw_density);
                suffix += s.weight * gc;
                let mut d_val = [0.0; 3];
                for ch in 0..3 {
                    if s.pass[ch] {
                        d_val[ch] = g[ch] * s.weight;
                    }
                }
                for c in 0..8 {
                    if s.present & (1 << c) == 0 {
                        continue;
                    }
                    let slot = s.slots[c] as usize;
                    let cw = s.weights[c];
                    if !touched[slot] {
                        touched[slot] = true;
                        slots.push(slot as u32);
                    }
                    let row = &mut acc[slot * w..(slot + 1) * w];
                    row[0] += cw * d_raw;
                    for ch in 0..3 {
                        if d_val[ch] != 0.0 {
                            for b in 0..nb {
                                row[1 + ch * nb + b] += cw * d_val[ch] * basis[b];
                            }
                        }
                    }
                }
            }
        }
        slots.sort_unstable();
        let mut values = Vec::with_capacity(slots.len() * w);
        for &s in &slots {
            values.extend_from_slice(&acc[s as usize * w..(s as usize + 1) * w]);
        }
        ChunkGrad { slots, values }
    });
    let mut grads = RenderGradients::zeros(m, d);
    for chunk in chunks {
        for (k, &s) in chunk.slots.iter().enumerate() {
            let s = s as usize;
            let v = &chunk.values[k * w..(k + 1) * w];
            grads.d_density[s] += v[0];
            for (dst, src) in grads.d_radiance[s * d..(s + 1) * d].iter_mut().zip(&v[1..]) {
                *dst += src;
            }
        }
    }
    grads
}

/// For every voxel, the largest compositing weight it contributed to any
/// sample along `rays` (sample weight times trilinear weight).
pub fn max_voxel_weights(srf: &SparseRadianceField, rays: &RayBundle, cfg: &RenderConfig) -> Vec<f64> {
    let m = srf.len();
    let n = rays.len();
    let parts = par::map_chunks(n, ray_chunk(n), |_, range| {
        let mut best = vec![0.0f64; m];
        for r in range {
            let tr = trace_ray(
                srf,
                &rays.origins[r],
                &rays.directions[r],
                rays.near,
                rays.far,
                cfg,
                true,
            );
            for s in &tr.samples {
                for c in 0..8 {
                    if s.present & (1 << c) != 0 {
                        let slot = s.slots[c] as usize;
                        best[slot] = best[slot].max(s.weight * s.weights[c]);
                    }
                }
            }
        }
        best
    });
    let mut out = vec![0.0f64; m];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o = o.max(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraIntrinsics, Pose, Split};

    fn rgb_field(h: u32) -> SparseRadianceField {
        SparseRadianceField::new(h, 3).unwrap()
    }

    #[test]
    fn dc_only_sh_is_isotropic() {
        let mut c = [0.0; 12];
        c[0] = 1.0;
        c[4] = 2.0;
        c[8] = 3.0;
        let a = eval_sh(&c, &Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let b = eval_sh(&c, &Vec3::new(0.0, -0.6, 0.8)).unwrap();
        assert_eq!(a, b);
        assert!((a[0] - SH_C0).abs() < 1e-15);
    }

    #[test]
    fn rgb_mode_passes_through() {
        let c = [0.2, 0.4, 0.6];
        for d in [Vec3::x(), -Vec3::z(), Vec3::new(0.6, 0.8, 0.0)] {
            assert_eq!(eval_sh(&c, &d).unwrap(), [0.2, 0.4, 0.6]);
        }
    }

    #[test]
    fn opposite_directions_differ_by_twice_degree_one() {
        let c: Vec<f64> = (0..12).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13).collect();
        let v = Vec3::new(0.3, -0.5, 0.7).normalize();
        let a = eval_sh_raw(&c, &v);
        let b = eval_sh_raw(&c, &-v);
        for ch in 0..3 {
            let deg1 = SH_C1 * (c[ch * 4 + 1] * v.y + c[ch * 4 + 2] * v.z + c[ch * 4 + 3] * v.x);
            assert!((a[ch] - b[ch] - 2.0 * deg1).abs() < 1e-12);
        }
    }

    #[test]
    fn sh_contract_errors() {
        assert!(matches!(
            eval_sh(&[0.0; 12], &Vec3::new(1.0, 1.0, 0.0)),
            Err(Error::Contract(_))
        ));
        assert!(eval_sh(&[0.0; 5], &Vec3::x()).is_err());
    }

    #[test]
    fn trilinear_examples() {
        let mut s = rgb_field(8);
        s.insert([2, 3, 4], &[7.0, 0.1, 0.2, 0.3]).unwrap();
        assert_eq!(sample_trilinear(&s, [2.0, 3.0, 4.0]), vec![7.0, 0.1, 0.2, 0.3]);

        let mut s = rgb_field(8);
        s.insert([2, 2, 2], &[0.0, 0.0, 0.0, 0.0]).unwrap();
        s.insert([3, 2, 2], &[10.0, 0.0, 0.0, 0.0]).unwrap();
        // face midpoint of the x-pair: weights 0.5 * 0.5 * 0.5 on each of them
        let v = sample_trilinear(&s, [2.5, 2.5, 2.5]);
        assert!((v[0] - 1.25).abs() < 1e-12);
        // midpoint on the connecting edge itself: 0.5 * 10
        let v = sample_trilinear(&s, [2.5, 2.0, 2.0]);
        assert!((v[0] - 5.0).abs() < 1e-12);
        // centre of the face shared with two empty corners in y: 0.5 * 0.5 * 10
        let v = sample_trilinear(&s, [2.5, 2.5, 2.0]);
        assert!((v[0] - 2.5).abs() < 1e-12);

        assert!(sample_trilinear(&s, [6.0, 6.0, 6.0]).iter().all(|&x| x == 0.0));
        assert!(sample_trilinear(&s, [-0.1, 2.0, 2.0]).iter().all(|&x| x == 0.0));
        assert!(sample_trilinear(&s, [7.5, 2.0, 2.0]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_sample_closed_form() {
        let ln2 = std::f64::consts::LN_2;
        let (c1, c2, bg) = ([0.9, 0.1, 0.3], [0.2, 0.7, 0.5], [1.0, 1.0, 1.0]);
        let (rgb, t) = composite(&[(ln2 / 0.5, c1), (ln2 / 0.5, c2)], 0.5, bg);
        for ch in 0..3 {
            let want = 0.5 * c1[ch] + 0.25 * c2[ch] + 0.25 * bg[ch];
            assert!((rgb[ch] - want).abs() < 1e-12);
        }
        assert!((t - 0.25).abs() < 1e-12);
    }

    fn axis_view(size: u32) -> CameraView {
        CameraView {
            pose: Pose::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros()),
            intrinsics: CameraIntrinsics::new(size, size, 4.0 * size as f64).unwrap(),
            split: Split::Test,
        }
    }

    #[test]
    fn empty_field_renders_background() {
        let s = rgb_field(16);
        let cfg = RenderConfig {
            background: [0.2, 0.4, 0.6],
            ..Default::default()
        };
        let out = render_rays(&s, &generate_rays(&axis_view(8)), &cfg);
        for p in 0..64 {
            assert_eq!(out.rgb[p], [0.2, 0.4, 0.6]);
            assert_eq!(out.transmittance[p], 1.0);
            assert_eq!(out.alpha[p], 0.0);
        }
    }

    #[test]
    fn opaque_slab_shows_its_color() {
        let h = 16;
        let mut s = rgb_field(h);
        for i in 0..h {
            for j in 0..h {
                for k in 8..h {
                    s.insert([i, j, k], &[1e4, 0.25, 0.5, 0.75]).unwrap();
                }
            }
        }
        let out = render_rays(&s, &generate_rays(&axis_view(8)), &RenderConfig::default());
        for p in 0..64 {
            for ch in 0..3 {
                assert!((out.rgb[p][ch] - [0.25, 0.5, 0.75][ch]).abs() < 1e-6);
            }
            assert!(out.transmittance[p] < 1e-6);
            assert!((out.alpha[p] + out.transmittance[p] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let mut s = rgb_field(8);
        s.insert([4, 4, 4], &[3.0, 0.5, 0.5, 0.5]).unwrap();
        let rays = generate_rays(&axis_view(8));
        let g = render_backward(&s, &rays, &RenderConfig::default(), &vec![[0.0; 3]; rays.len()]);
        assert!(g.d_density.iter().chain(&g.d_radiance).all(|&v| v == 0.0));
    }

    #[test]
    fn density_never_raises_transmittance() {
        let mut s = rgb_field(8);
        s.insert([3, 3, 3], &[0.5, 0.5, 0.5, 0.5]).unwrap();
        s.insert([3, 4, 4], &[1.5, 0.5, 0.5, 0.5]).unwrap();
        let view = CameraView {
            pose: Pose::look_at(Vec3::new(0.1, 0.05, 3.0), Vec3::new(-0.1, -0.05, 0.0)),
            intrinsics: CameraIntrinsics::new(8, 8, 8.0).unwrap(),
            split: Split::Test,
        };
        let rays = generate_rays(&view);
        let cfg = RenderConfig::default();
        let mut prev = render_rays(&s, &rays, &cfg).transmittance;
        for step in 1..20 {
            let mut bumped = s.clone();
            bumped.feature_mut(0)[0] = 0.5 + step as f64 * 0.7;
            let t = render_rays(&bumped, &rays, &cfg).transmittance;
            for (a, b) in t.iter().zip(&prev) {
                assert!(a <= b);
            }
            prev = t;
        }
    }

    #[test]
    fn image_rendering_is_deterministic() {
        let mut s = SparseRadianceField::new(8, 12).unwrap();
        for i in 2..6 {
            let mut f = [0.3; 13];
            f[0] = i as f64;
            s.insert([i, 4, 3], &f).unwrap();
        }
        let v = axis_view(12);
        let a = render_image(&s, &v, &RenderConfig::default());
        let b = render_image(&s, &v, &RenderConfig::default());
        assert_eq!(a, b);
    }
}
