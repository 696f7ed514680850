//! Fitting sparse radiance fields to posed images.
//!
//! The optimiser is plain gradient descent with separate step sizes for
//! density and radiance. Fits start from a visual hull at the first grid
//! resolution, regularise with total variation over face neighbours, prune
//! empty voxels and subdivide on a fixed schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, CameraView, RayBundle};
use crate::error::{Error, Result};
use crate::metrics::{psnr, psnr_from_mse};
use crate::par;
use crate::raster::ImageBuffer;
use crate::render::{
    max_voxel_weights, render_backward, render_image, render_rays, RenderConfig, SH_C0,
};
use crate::srf::{voxel_center, Coord, SparseRadianceField};

/// Starting density of hull voxels.
pub const INIT_DENSITY: f64 = 0.1;
/// Starting grey level of hull voxels.
pub const INIT_GRAY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate_density: f64,
    pub learning_rate_color: f64,
    /// Step sizes decay exponentially to this fraction by the last iteration.
    pub learning_rate_final_fraction: f64,
    pub tv_weight_density: f64,
    pub tv_weight_color: f64,
    pub prune_threshold: f64,
    /// Iterations at which the grid moves to the next resolution.
    pub upsample_schedule: Vec<usize>,
    pub rays_per_step: usize,
    /// Grid resolutions, coarse to fine; the last one is the output size.
    pub resolution_schedule: Vec<u32>,
    pub color_dim: usize,
    pub render: RenderConfig,
    /// Record the batch PSNR every this many iterations.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 3600,
            learning_rate_density: 2.0e4,
            learning_rate_color: 1.0e4,
            learning_rate_final_fraction: 0.1,
            tv_weight_density: 1e-3,
            tv_weight_color: 1e-4,
            prune_threshold: 0.01,
            upsample_schedule: vec![1200],
            rays_per_step: 4096,
            resolution_schedule: vec![16, 32],
            color_dim: 12,
            render: RenderConfig::default(),
            log_every: 100,
            seed: 0,
        }
    }
}

impl FitConfig {
    /// Defaults for a whole fit at output resolution `h`.
    pub fn whole(h: u32) -> Self {
        Self {
            resolution_schedule: vec![(h / 2).max(2), h],
            ..Self::default()
        }
    }

    /// Shorter RGB-only schedule used for partial fits.
    pub fn partial(h: u32) -> Self {
        Self {
            iterations: 1200,
            upsample_schedule: vec![400],
            resolution_schedule: vec![(h / 2).max(2), h],
            color_dim: 3,
            ..Self::default()
        }
    }

    pub fn target_resolution(&self) -> u32 {
        *self.resolution_schedule.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return cfg("iterations must be positive".into());
        }
        if self.rays_per_step == 0 {
            return cfg("rays_per_step must be positive".into());
        }
        for (name, v) in [
            ("learning_rate_density", self.learning_rate_density),
            ("learning_rate_color", self.learning_rate_color),
            ("learning_rate_final_fraction", self.learning_rate_final_fraction),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return cfg(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("tv_weight_density", self.tv_weight_density),
            ("tv_weight_color", self.tv_weight_color),
            ("prune_threshold", self.prune_threshold),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return cfg(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.resolution_schedule.is_empty() {
            return cfg("resolution_schedule is empty".into());
        }
        if self.resolution_schedule[0] < 2 {
            return cfg("resolutions must be at least 2".into());
        }
        for w in self.resolution_schedule.windows(2) {
            upsample_factor(w[0], w[1])?;
        }
        if self.upsample_schedule.len() + 1 != self.resolution_schedule.len() {
            return cfg(format!(
                "{} resolutions need {} upsample iterations, got {}",
                self.resolution_schedule.len(),
                self.resolution_schedule.len() - 1,
                self.upsample_schedule.len()
            ));
        }
        if self.upsample_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return cfg("upsample_schedule must be strictly ascending".into());
        }
        if self.upsample_schedule.iter().any(|&i| i == 0 || i >= self.iterations) {
            return cfg("upsample iterations must lie in (0, iterations)".into());
        }
        if !crate::srf::valid_color_dim(self.color_dim) {
            return cfg(format!("color_dim must be 3 or 12, got {}", self.color_dim));
        }
        if self.log_every == 0 {
            return cfg("log_every must be positive".into());
        }
        self.render.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStage {
    pub resolution: u32,
    pub start_iteration: usize,
    /// Voxel count at the end of the stage, after pruning.
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean PSNR over the input views, rendered and quantised to 8 bits.
    pub final_train_psnr: f64,
    /// `(iteration, batch PSNR)` samples.
    pub psnr_curve: Vec<(usize, f64)>,
    pub stages: Vec<FitStage>,
}

/// Total-variation penalty split into its density and radiance parts, each
/// normalised by the number of occupied face-neighbour pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TvPenalty {
    pub density: f64,
    pub color: f64,
    pub pairs: usize,
    /// Gradients in the field's feature layout.
    pub grad_density: Vec<f64>,
    pub grad_color: Vec<f64>,
}

/// TV over face-neighbour pairs where both voxels are present.
pub fn tv_penalty(srf: &SparseRadianceField) -> TvPenalty {
    let w = srf.width();
    let m = srf.len();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (a, c) in srf.coords().iter().enumerate() {
        for axis in 0..3 {
            let mut n = c.map(i64::from);
            n[axis] += 1;
            if let Some(b) = srf.find(n) {
                pairs.push((a, b));
            }
        }
    }
    let mut out = TvPenalty {
        density: 0.0,
        color: 0.0,
        pairs: pairs.len(),
        grad_density: vec![0.0; m * w],
        grad_color: vec![0.0; m * w],
    };
    if pairs.is_empty() {
        return out;
    }
    let norm = 1.0 / pairs.len() as f64;
    for (a, b) in pairs {
        let (fa, fb) = (srf.feature(a), srf.feature(b));
        for k in 0..w {
            let diff = fa[k] - fb[k];
            let (sum, grad) = if k == 0 {
                (&mut out.density, &mut out.grad_density)
            } else {
                (&mut out.color, &mut out.grad_color)
            };
            *sum += diff * diff * norm;
            grad[a * w + k] += 2.0 * diff * norm;
            grad[b * w + k] -= 2.0 * diff * norm;
        }
    }
    out
}

/// Drop voxels whose activated density and largest compositing weight along
/// `probe` are both below `threshold`.
pub fn prune(
    srf: &SparseRadianceField,
    threshold: f64,
    probe: &RayBundle,
    cfg: &RenderConfig,
) -> SparseRadianceField {
    let weights = max_voxel_weights(srf, probe, cfg);
    srf.retain_slots(|i| {
        cfg.activation.apply(srf.density(i)) >= threshold || weights[i] >= threshold
    })
}

fn upsample_factor(from: u32, to: u32) -> Result<u32> {
    if to == from * 2 || to == from * 4 {
        Ok(to / from)
    } else {
        Err(Error::Config(format!(
            "can only upsample by 2 or 4, not from {from} to {to}"
        )))
    }
}

/// Subdivide every voxel into `f^3` children at `new_h = f * H`, `f` in {2, 4}.
///
/// Children take the trilinear blend of the parent field at their centre,
/// renormalised over the present parent voxels so that edges of the occupied
/// region do not fade. Densities are per unit voxel length, so they are
/// divided by `f` to keep renders unchanged.
pub fn upsample(srf: &SparseRadianceField, new_h: u32) -> Result<SparseRadianceField> {
    let h = srf.resolution();
    let f = upsample_factor(h, new_h)?;
    let w = srf.width();
    let children: Vec<(Coord, Vec<f64>)> = par::map_range(srf.len(), |slot| {
        let c = srf.coords()[slot];
        let mut out = Vec::with_capacity((f * f * f) as usize);
        for o in 0..f * f * f {
            let off = [o % f, (o / f) % f, o / (f * f)];
            let child = [0, 1, 2].map(|a| c[a] as u32 * f + off[a]);
            let g = child.map(|v| (v as f64 + 0.5) / f as f64 - 0.5);
            let base = g.map(|v| v.floor() as i64);
            let mut acc = vec![0.0; w];
            let mut total = 0.0;
            for n in 0..8 {
                let corner = [0, 1, 2].map(|a| base[a] + ((n >> a) & 1) as i64);
                let Some(s) = srf.find(corner) else { continue };
                let wt: f64 = (0..3)
                    .map(|a| {
                        let t = g[a] - base[a] as f64;
                        if corner[a] == base[a] { 1.0 - t } else { t }
                    })
                    .product();
                if wt <= 0.0 {
                    continue;
                }
                total += wt;
                for (x, v) in acc.iter_mut().zip(srf.feature(s)) {
                    *x += wt * v;
                }
            }
            // the parent itself always carries positive weight
            for x in &mut acc {
                *x /= total;
            }
            acc[0] /= f as f64;
            out.push((child.map(|v| v as u16), acc));
        }
        out
    })
    .into_iter()
    .flatten()
    .collect();
    let mut coords = Vec::with_capacity(children.len());
    let mut feats = Vec::with_capacity(children.len() * w);
    for (c, v) in children {
        coords.push(c);
        feats.extend(v);
    }
    SparseRadianceField::from_parts(new_h, srf.color_dim(), coords, feats)
}

fn check_inputs(views: &[CameraView], images: &[ImageBuffer]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::Contract("fitting needs at least one view".into()));
    }
    if views.len() != images.len() {
        return Err(Error::Contract(format!(
            "{} views but {} images",
            views.len(),
            images.len()
        )));
    }
    for (v, img) in views.iter().zip(images) {
        v.intrinsics.validate()?;
        if v.intrinsics.width != img.width || v.intrinsics.height != img.height {
            return Err(Error::Contract(format!(
                "image is {}x{} but its view is {}x{}",
                img.width, img.height, v.intrinsics.width, v.intrinsics.height
            )));
        }
    }
    Ok(())
}

/// Voxels whose centre falls inside the silhouette of at least
/// `max(1, n / 4)` views, grown by one voxel in every direction.
pub fn visual_hull(
    views: &[CameraView],
    images: &[ImageBuffer],
    resolution: u32,
    color_dim: usize,
) -> Result<SparseRadianceField> {
    let need = (views.len() / 4).max(1);
    let h = resolution as usize;
    let inside: Vec<bool> = par::map_range(h * h * h, |idx| {
        let (i, j, k) = (idx / (h * h), (idx / h) % h, idx % h);
        let p = crate::camera::Vec3::new(
            voxel_center(i as f64, resolution),
            voxel_center(j as f64, resolution),
            voxel_center(k as f64, resolution),
        );
        let mut hits = 0;
        for (v, img) in views.iter().zip(images) {
            if let Some((x, y)) = v.pose.project(&v.intrinsics, &p) {
                let (col, row) = (x.floor(), y.floor());
                if col >= 0.0 && row >= 0.0 && col < img.width as f64 && row < img.height as f64 {
                    let px = row as usize * img.width as usize + col as usize;
                    if img.alpha(px) > 0.5 {
                        hits += 1;
                    }
                }
            }
        }
        hits >= need
    });
    let mut grown = inside.clone();
    for idx in 0..h * h * h {
        if !inside[idx] {
            continue;
        }
        let (i, j, k) = (idx / (h * h), (idx / h) % h, idx % h);
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dk in -1i64..=1 {
                    let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                    if [a, b, c].iter().all(|&v| v >= 0 && v < h as i64) {
                        grown[(a as usize * h + b as usize) * h + c as usize] = true;
                    }
                }
            }
        }
    }
    let mut init = vec![0.0; 1 + color_dim];
    init[0] = INIT_DENSITY;
    if color_dim == 3 {
        init[1..].fill(INIT_GRAY);
    } else {
        for ch in 0..3 {
            init[1 + ch * 4] = INIT_GRAY / SH_C0;
        }
    }
    let mut srf = SparseRadianceField::new(resolution, color_dim)?;
    for (idx, _) in grown.iter().enumerate().filter(|(_, g)| **g) {
        let c = [idx / (h * h), (idx / h) % h, idx % h].map(|v| v as u32);
        srf.insert(c, &init)?;
    }
    Ok(srf)
}

/// All pixels of all views as one ray bundle plus their target colours.
struct RayPool {
    rays: RayBundle,
    targets: Vec<[f64; 3]>,
}

impl RayPool {
    fn new(views: &[CameraView], images: &[ImageBuffer]) -> Self {
        let mut rays = RayBundle {
            origins: Vec::new(),
            directions: Vec::new(),
            near: f64::INFINITY,
            far: 0.0,
        };
        let mut targets = Vec::new();
        for (v, img) in views.iter().zip(images) {
            let r = generate_rays(v);
            rays.origins.extend(r.origins);
            rays.directions.extend(r.directions);
            rays.near = rays.near.min(r.near);
            rays.far = rays.far.max(r.far);
            targets.extend((0..img.pixel_count()).map(|p| img.rgb(p)));
        }
        Self { rays, targets }
    }
}

fn mean_train_psnr(
    srf: &SparseRadianceField,
    views: &[CameraView],
    images: &[ImageBuffer],
    cfg: &RenderConfig,
) -> Result<f64> {
    let scores = views
        .iter()
        .zip(images)
        .map(|(v, img)| psnr(&render_image(srf, v, cfg).quantized(), &img.quantized(), None))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Fit a field at `cfg.color_dim` channels to the given views.
///
/// Returns an empty field when no image has any foreground, which is the
/// exact optimum for such targets.
pub fn fit_srf(
    views: &[CameraView],
    images: &[ImageBuffer],
    cfg: &FitConfig,
) -> Result<(SparseRadianceField, FitReport)> {
    cfg.validate()?;
    check_inputs(views, images)?;
    let rcfg = &cfg.render;
    let mut srf = visual_hull(views, images, cfg.resolution_schedule[0], cfg.color_dim)?;
    let has_foreground = images
        .iter()
        .any(|img| (0..img.pixel_count()).any(|p| img.alpha(p) > 0.5));
    if srf.is_empty() && !has_foreground {
        let empty = SparseRadianceField::new(cfg.target_resolution(), cfg.color_dim)?;
        let report = FitReport {
            final_train_psnr: mean_train_psnr(&empty, views, images, rcfg)?,
            psnr_curve: Vec::new(),
            stages: vec![FitStage {
                resolution: cfg.target_resolution(),
                start_iteration: 0,
                voxels: 0,
            }],
        };
        return Ok((empty, report));
    }

    let pool = RayPool::new(views, images);
    let total = pool.targets.len();
    let batch = cfg.rays_per_step.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FitReport {
        final_train_psnr: 0.0,
        psnr_curve: Vec::new(),
        stages: vec![FitStage {
            resolution: srf.resolution(),
            start_iteration: 0,
            voxels: srf.len(),
        }],
    };
    let mut stage = 0;
    let w = srf.width();
    let decay = cfg.learning_rate_final_fraction.powf(1.0 / cfg.iterations as f64);

    for it in 0..cfg.iterations {
        if stage < cfg.upsample_schedule.len() && it == cfg.upsample_schedule[stage] {
            srf = prune(&srf, cfg.prune_threshold, &pool.rays, rcfg);
            report.stages[stage].voxels = srf.len();
            stage += 1;
            srf = upsample(&srf, cfg.resolution_schedule[stage])?;
            report.stages.push(FitStage {
                resolution: srf.resolution(),
                start_iteration: it,
                voxels: srf.len(),
            });
        }
        if srf.is_empty() {
            return Err(Error::DegenerateFit(format!(
                "no voxels left at iteration {it}"
            )));
        }

        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..total)).collect();
        let rays = pool.rays.select(&idx);
        let out = render_rays(&srf, &rays, rcfg);
        let mut sq = 0.0;
        let scale = 2.0 / (3.0 * batch as f64);
        let d_rgb: Vec<[f64; 3]> = idx
            .iter()
            .zip(&out.rgb)
            .map(|(&p, rgb)| {
                let t = pool.targets[p];
                let diff = [0, 1, 2].map(|c| rgb[c] - t[c]);
                sq += diff.iter().map(|d| d * d).sum::<f64>();
                diff.map(|d| d * scale)
            })
            .collect();
        let mse = sq / (3.0 * batch as f64);
        if !mse.is_finite() {
            return Err(Error::Divergence(format!(
                "photometric loss is {mse} at iteration {it}"
            )));
        }
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            report.psnr_curve.push((it, psnr_from_mse(mse)));
        }

        let grads = render_backward(&srf, &rays, rcfg, &d_rgb);
        let tv = if cfg.tv_weight_density > 0.0 || cfg.tv_weight_color > 0.0 {
            Some(tv_penalty(&srf))
        } else {
            None
        };
        let lr_scale = decay.powi(it as i32);
        let lr_d = cfg.learning_rate_density * lr_scale;
        let lr_c = cfg.learning_rate_color * lr_scale;
        let d = srf.color_dim();
        let feats = srf.features_mut();
        for (slot, row) in feats.chunks_exact_mut(w).enumerate() {
            let mut g = grads.d_density[slot];
            if let Some(tv) = &tv {
                g += cfg.tv_weight_density * tv.grad_density[slot * w];
            }
            row[0] -= lr_d * g;
            for k in 0..d {
                let mut g = grads.d_radiance[slot * d + k];
                if let Some(tv) = &tv {
                    g += cfg.tv_weight_color * tv.grad_color[slot * w + 1 + k];
                }
                row[1 + k] -= lr_c * g;
            }
        }
        if srf.features().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite parameters after iteration {it}"
            )));
        }
    }

    srf = prune(&srf, cfg.prune_threshold, &pool.rays, rcfg);
    if srf.is_empty() {
        return Err(Error::DegenerateFit(
            "every voxel was pruned although the images have foreground".into(),
        ));
    }
    srf.round_to_storage();
    report.stages.last_mut().expect("one stage").voxels = srf.len();
    report.final_train_psnr = mean_train_psnr(&srf, views, images, rcfg)?;
    Ok((srf, report))
}

/// Quick RGB-only fit from exactly one or three views.
pub fn fit_partial(
    views: &[CameraView],
    images: &[ImageBuffer],
    cfg: &FitConfig,
) -> Result<(SparseRadianceField, FitReport)> {
    if views.len() != 1 && views.len() != 3 {
        return Err(Error::Contract(format!(
            "partial fits take 1 or 3 views, got {}",
            views.len()
        )));
    }
    let cfg = FitConfig {
        color_dim: 3,
        ..cfg.clone()
    };
    fit_srf(views, images, &cfg)
}
