//! Training loss for predicted fields: occupancy cross-entropy at sampled
//! coordinates, masked radiance L1 and a rendering L1 on foreground pixels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, CameraView, RayBundle};
use crate::error::{Error, Result};
use crate::raster::ImageBuffer;
use crate::render::{render_backward, render_rays, RenderConfig};
use crate::srf::{Coord, NormalizationSpec, SparseRadianceField};

/// Logit assumed for coordinates the prediction does not contain.
pub const EMPTY_LOGIT: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QGaussianSpec {
    pub sigma: f64,
    pub multiplier_k: usize,
    pub seed: u64,
}

impl Default for QGaussianSpec {
    fn default() -> Self {
        Self {
            sigma: 0.444,
            multiplier_k: 40,
            seed: 0,
        }
    }
}

impl QGaussianSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.multiplier_k == 0 {
            return Err(Error::Config("multiplier_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where the occupancy loss looks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSampling {
    #[default]
    QGaussian,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_alpha: f64,
    pub lambda_rho: f64,
    pub lambda_r: f64,
    /// Ground-truth density above which a voxel counts as solid.
    pub alpha_dense: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_alpha: 30.0,
            lambda_rho: 1.0,
            lambda_r: 1.0,
            alpha_dense: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_alpha", self.lambda_alpha),
            ("lambda_rho", self.lambda_rho),
            ("lambda_r", self.lambda_r),
            ("alpha_dense", self.alpha_dense),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// A loss value and its gradient in the prediction's feature layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_alpha: f64,
    pub l_rho: f64,
    pub l_r: f64,
    pub total: f64,
    /// Unweighted per-term gradients, prediction feature layout.
    pub grad_alpha: Vec<f64>,
    pub grad_rho: Vec<f64>,
    pub grad_r: Vec<f64>,
    /// Weighted sum of the three blocks.
    pub grad: Vec<f64>,
}

fn clamp_coord(v: f64, h: u32) -> u16 {
    v.round().clamp(0.0, (h - 1) as f64) as u16
}

/// Integer coordinates from a normal centred on the grid with per-axis
/// variance `H sigma^2 / 2`, rounded and clamped into the grid.
pub fn q_gaussian_sample_with<R: Rng>(h: u32, sigma: f64, count: usize, rng: &mut R) -> Vec<Coord> {
    let mean = h as f64 / 2.0;
    let std = (h as f64 * sigma * sigma / 2.0).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| [0; 3].map(|_: u8| clamp_coord(mean + std * normal.sample(rng), h)))
        .collect()
}

/// [`q_gaussian_sample_with`] seeded from `spec.seed`.
pub fn q_gaussian_sample(h: u32, spec: &QGaussianSpec, count: usize) -> Vec<Coord> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    q_gaussian_sample_with(h, spec.sigma, count, &mut rng)
}

/// Coordinates drawn uniformly over the grid.
pub fn uniform_sample_with<R: Rng>(h: u32, count: usize, rng: &mut R) -> Vec<Coord> {
    (0..count)
        .map(|_| [0; 3].map(|_: u8| rng.random_range(0..h) as u16))
        .collect()
}

/// `K x input_voxels` loss coordinates from the chosen strategy.
pub fn loss_sample_coords<R: Rng>(
    h: u32,
    sampling: LossSampling,
    spec: &QGaussianSpec,
    input_voxels: usize,
    rng: &mut R,
) -> Vec<Coord> {
    let count = spec.multiplier_k * input_voxels.max(1);
    match sampling {
        LossSampling::QGaussian => q_gaussian_sample_with(h, spec.sigma, count, rng),
        LossSampling::Uniform => uniform_sample_with(h, count, rng),
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn same_resolution(pred: &SparseRadianceField, gt: &SparseRadianceField) -> Result<()> {
    if pred.resolution() != gt.resolution() {
        return Err(Error::Contract(format!(
            "prediction is at H={} but ground truth at H={}",
            pred.resolution(),
            gt.resolution()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy between occupancy labels (ground-truth density
/// above `alpha_dense`) and the sigmoid of the predicted density logit.
pub fn density_loss(
    pred: &SparseRadianceField,
    gt: &SparseRadianceField,
    coords: &[Coord],
    alpha_dense: f64,
) -> Result<LossTerm> {
    same_resolution(pred, gt)?;
    let w = pred.width();
    let mut grad = vec![0.0; pred.len() * w];
    if coords.is_empty() {
        return Ok(LossTerm { value: 0.0, grad });
    }
    let inv = 1.0 / coords.len() as f64;
    let mut sum = 0.0;
    for c in coords {
        let c = c.map(i64::from);
        let label = match gt.find(c) {
            Some(s) if gt.density(s) > alpha_dense => 1.0,
            _ => 0.0,
        };
        let slot = pred.find(c);
        let z = slot.map_or(EMPTY_LOGIT, |s| pred.density(s));
        // BCE(y, sigmoid(z)) = softplus(z) - y z
        sum += softplus(z) - label * z;
        if let Some(s) = slot {
            grad[s * w] += (sigmoid(z) - label) * inv;
        }
    }
    Ok(LossTerm { value: sum * inv, grad })
}

/// Mean over solid ground-truth voxels of the L1 distance between predicted
/// and true radiance; missing predictions count as zero radiance.
pub fn color_loss(
    pred: &SparseRadianceField,
    gt: &SparseRadianceField,
    alpha_dense: f64,
) -> Result<LossTerm> {
    same_resolution(pred, gt)?;
    if pred.color_dim() != gt.color_dim() {
        return Err(Error::Contract(format!(
            "prediction has d={} but ground truth d={}",
            pred.color_dim(),
            gt.color_dim()
        )));
    }
    let w = pred.width();
    let d = pred.color_dim();
    let mut grad = vec![0.0; pred.len() * w];
    let masked: Vec<usize> = (0..gt.len()).filter(|&s| gt.density(s) > alpha_dense).collect();
    if masked.is_empty() {
        return Ok(LossTerm { value: 0.0, grad });
    }
    let inv = 1.0 / masked.len() as f64;
    let zeros = vec![0.0; d];
    let mut sum = 0.0;
    for s in masked {
        let c = gt.coords()[s].map(i64::from);
        let slot = pred.find(c);
        let p = slot.map_or(&zeros[..], |i| pred.radiance(i));
        for (k, (a, b)) in p.iter().zip(gt.radiance(s)).enumerate() {
            let diff = a - b;
            sum += diff.abs();
            if let Some(i) = slot {
                if diff != 0.0 {
                    grad[i * w + 1 + k] += diff.signum() * inv;
                }
            }
        }
    }
    Ok(LossTerm { value: sum * inv, grad })
}

/// Foreground rays of the targets (alpha above one half) and their colours.
fn foreground_rays(views: &[CameraView], targets: &[ImageBuffer]) -> Result<(RayBundle, Vec<[f64; 3]>)> {
    if views.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} views but {} target images",
            views.len(),
            targets.len()
        )));
    }
    let mut rays = RayBundle {
        origins: Vec::new(),
        directions: Vec::new(),
        near: f64::INFINITY,
        far: 0.0,
    };
    let mut colors = Vec::new();
    for (v, img) in views.iter().zip(targets) {
        if v.intrinsics.width != img.width || v.intrinsics.height != img.height {
            return Err(Error::Contract("target size does not match its view".into()));
        }
        let all = generate_rays(v);
        let keep: Vec<usize> = (0..img.pixel_count()).filter(|&p| img.alpha(p) > 0.5).collect();
        let sel = all.select(&keep);
        rays.origins.extend(sel.origins);
        rays.directions.extend(sel.directions);
        rays.near = rays.near.min(all.near);
        rays.far = rays.far.max(all.far);
        colors.extend(keep.iter().map(|&p| img.rgb(p)));
    }
    Ok((rays, colors))
}

/// Mean L1 between rendered and target colour over foreground pixels.
///
/// Only radiance receives gradient: the density block is left at zero.
pub fn perceptual_loss(
    pred: &SparseRadianceField,
    views: &[CameraView],
    targets: &[ImageBuffer],
    cfg: &RenderConfig,
) -> Result<LossTerm> {
    let (rays, colors) = foreground_rays(views, targets)?;
    let w = pred.width();
    let d = pred.color_dim();
    let mut grad = vec![0.0; pred.len() * w];
    if rays.is_empty() {
        return Ok(LossTerm { value: 0.0, grad });
    }
    let out = render_rays(pred, &rays, cfg);
    let inv = 1.0 / (3 * rays.len()) as f64;
    let mut sum = 0.0;
    let d_rgb: Vec<[f64; 3]> = out
        .rgb
        .iter()
        .zip(&colors)
        .map(|(r, t)| {
            [0, 1, 2].map(|c| {
                let diff = r[c] - t[c];
                sum += diff.abs();
                if diff == 0.0 {
                    0.0
                } else {
                    diff.signum() * inv
                }
            })
        })
        .collect();
    let g = render_backward(pred, &rays, cfg, &d_rgb);
    for s in 0..pred.len() {
        grad[s * w + 1..(s + 1) * w].copy_from_slice(&g.d_radiance[s * d..(s + 1) * d]);
    }
    Ok(LossTerm { value: sum * inv, grad })
}

/// Everything the rendering term needs besides the prediction.
#[derive(Debug, Clone, Copy)]
pub struct RenderTargets<'a> {
    pub views: &'a [CameraView],
    pub images: &'a [ImageBuffer],
    pub render: &'a RenderConfig,
    /// Predictions live in normalised units; rendering undoes this.
    pub normalization: &'a NormalizationSpec,
}

/// Weighted sum of the three terms with merged gradients.
///
/// `pred` and `gt` are in normalised units. The rendering term renders
/// the denormalised prediction and maps its gradient back.
pub fn total_loss(
    pred: &SparseRadianceField,
    gt: &SparseRadianceField,
    targets: &RenderTargets<'_>,
    weights: &LossWeights,
    coords: &[Coord],
) -> Result<LossReport> {
    weights.validate()?;
    let alpha = density_loss(pred, gt, coords, weights.alpha_dense)?;
    let rho = color_loss(pred, gt, weights.alpha_dense)?;
    let renderable = pred.denormalize(targets.normalization);
    let mut r = perceptual_loss(&renderable, targets.views, targets.images, targets.render)?;
    let cs = targets.normalization.color_scale;
    for (k, g) in r.grad.iter_mut().enumerate() {
        if k % pred.width() != 0 {
            *g *= cs;
        }
    }
    let grad = alpha
        .grad
        .iter()
        .zip(&rho.grad)
        .zip(&r.grad)
        .map(|((a, b), c)| weights.lambda_alpha * a + weights.lambda_rho * b + weights.lambda_r * c)
        .collect();
    Ok(LossReport {
        l_alpha: alpha.value,
        l_rho: rho.value,
        l_r: r.value,
        total: weights.lambda_alpha * alpha.value
            + weights.lambda_rho * rho.value
            + weights.lambda_r * r.value,
        grad_alpha: alpha.grad,
        grad_rho: rho.grad,
        grad_r: r.grad,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(entries: &[([u32; 3], f64)]) -> SparseRadianceField {
        let mut s = SparseRadianceField::new(8, 3).unwrap();
        for (c, rho) in entries {
            s.insert(*c, &[*rho, 0.1, 0.2, 0.3]).unwrap();
        }
        s
    }

    #[test]
    fn degenerate_gaussian_hits_centre() {
        let spec = QGaussianSpec { sigma: 1e-9, ..Default::default() };
        assert!(q_gaussian_sample(128, &spec, 1000).iter().all(|c| *c == [64, 64, 64]));
    }

    #[test]
    fn samples_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in q_gaussian_sample_with(4, 5.0, 10_000, &mut rng) {
            assert!(c.iter().all(|&v| v < 4));
        }
        for c in uniform_sample_with(5, 10_000, &mut rng) {
            assert!(c.iter().all(|&v| v < 5));
        }
    }

    #[test]
    fn sample_count_scales_with_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = QGaussianSpec::default();
        assert_eq!(loss_sample_coords(8, LossSampling::Uniform, &spec, 7, &mut rng).len(), 280);
    }

    #[test]
    fn empty_space_bce_matches_closed_form() {
        let gt = field(&[]);
        let pred = field(&[]);
        let coords = vec![[1u16, 2, 3]; 10];
        let l = density_loss(&pred, &gt, &coords, 0.0).unwrap();
        let want = (1.0 + (-10.0f64).exp()).ln();
        assert!((l.value - want).abs() < 1e-15);
        assert!((l.value - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn saturated_prediction_has_tiny_loss() {
        let gt = field(&[([1, 1, 1], 5.0), ([2, 2, 2], 3.0)]);
        let pred = field(&[([1, 1, 1], 10.0), ([2, 2, 2], 10.0)]);
        let coords = [[1, 1, 1], [2, 2, 2], [5, 5, 5], [0, 0, 0]];
        assert!(density_loss(&pred, &gt, &coords, 0.0).unwrap().value < 1e-3);
    }

    #[test]
    fn color_loss_masks_and_zero_cases() {
        let gt = field(&[([1, 1, 1], 0.0), ([2, 2, 2], -1.0)]);
        let pred = field(&[([1, 1, 1], 1.0)]);
        assert_eq!(color_loss(&pred, &gt, 0.0).unwrap().value, 0.0);
        let gt = field(&[([1, 1, 1], 2.0)]);
        assert_eq!(color_loss(&gt, &gt, 0.0).unwrap().value, 0.0);
        // absent prediction counts as zero radiance
        let l = color_loss(&field(&[]), &gt, 0.0).unwrap();
        assert!((l.value - 0.6).abs() < 1e-12);
    }

    #[test]
    fn mismatched_inputs_are_contract_errors() {
        let a = field(&[]);
        let b = SparseRadianceField::new(16, 3).unwrap();
        let c = SparseRadianceField::new(8, 12).unwrap();
        assert!(matches!(density_loss(&a, &b, &[], 0.0), Err(Error::Contract(_))));
        assert!(matches!(color_loss(&a, &c, 0.0), Err(Error::Contract(_))));
        assert!(matches!(
            perceptual_loss(&a, &[], &[ImageBuffer::new(2, 2)], &RenderConfig::default()),
            Err(Error::Contract(_))
        ));
    }
}
