//! Pinhole cameras, view rigs and per-pixel ray generation.
//!
//! Camera frames follow the OpenGL convention: the camera looks down its local
//! `-z` axis with `+y` up, and a pose maps camera coordinates to world
//! coordinates. World up is `+z`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
}

impl CameraIntrinsics {
    pub fn new(width: u32, height: u32, focal: f64) -> Result<Self> {
        let k = Self {
            width,
            height,
            focal,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square image whose focal length frames the unit cube from the default rig.
    pub fn square(size: u32) -> Result<Self> {
        Self::new(size, size, 1.2 * size as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 || !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::Config(format!(
                "intrinsics need width, height >= 8 and focal > 0, got {}x{} f={}",
                self.width, self.height, self.focal
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Ood,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(pub Matrix4<f64>);

impl Pose {
    /// Camera at `eye` looking at `target`. The reference up axis switches from
    /// `+z` to `+y` when the view direction is nearly vertical.
    pub fn look_at(eye: Vec3, target: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut up_ref = Vec3::z();
        if forward.dot(&up_ref).abs() > 0.999 {
            up_ref = Vec3::y();
        }
        let right = forward.cross(&up_ref).normalize();
        let up = right.cross(&forward);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&up);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&(-forward));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Pose(m)
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::Shape(format!("pose needs 16 values, got {}", v.len())));
        }
        let pose = Pose(Matrix4::from_row_slice(v));
        if !pose.is_rigid(1e-6) {
            return Err(Error::Contract("pose is not a rigid transform".into()));
        }
        Ok(pose)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vec3 {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Unit viewing direction (camera `-z`).
    pub fn forward(&self) -> Vec3 {
        -self.0.fixed_view::<3, 1>(0, 2).into_owned()
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max() <= tol;
        let bottom = self.0[(3, 0)] == 0.0
            && self.0[(3, 1)] == 0.0
            && self.0[(3, 2)] == 0.0
            && self.0[(3, 3)] == 1.0;
        ortho && (r.determinant() - 1.0).abs() <= tol && bottom && self.center().iter().all(|v| v.is_finite())
    }

    /// Project a world point to continuous pixel coordinates; `None` behind the camera.
    pub fn project(&self, k: &CameraIntrinsics, p: &Vec3) -> Option<(f64, f64)> {
        let local = self.rotation().transpose() * (p - self.center());
        if local.z >= -1e-9 {
            return None;
        }
        let depth = -local.z;
        let u = k.focal * local.x / depth + k.width as f64 / 2.0;
        let v = -k.focal * local.y / depth + k.height as f64 / 2.0;
        Some((u, v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub split: Split,
}

/// Rays for a block of pixels sharing near/far bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: f64,
    pub far: f64,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Sub-bundle of the listed ray indices.
    pub fn select(&self, idx: &[usize]) -> RayBundle {
        RayBundle {
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            directions: idx.iter().map(|&i| self.directions[i]).collect(),
            near: self.near,
            far: self.far,
        }
    }
}

/// Near/far interval that brackets the `[-1, 1]^3` grid cube from `center`.
pub fn cube_bounds(center: &Vec3) -> (f64, f64) {
    let d = center.norm();
    ((d - SQRT3).max(0.0), d + SQRT3)
}

/// Unit direction through the centre of pixel `(col, row)`.
pub fn pixel_direction(view: &CameraView, col: u32, row: u32) -> Vec3 {
    let k = &view.intrinsics;
    let x = (col as f64 + 0.5 - k.width as f64 / 2.0) / k.focal;
    let y = -(row as f64 + 0.5 - k.height as f64 / 2.0) / k.focal;
    (view.pose.rotation() * Vec3::new(x, y, -1.0)).normalize()
}

/// One ray per pixel, row-major from the top-left corner.
pub fn generate_rays(view: &CameraView) -> RayBundle {
    let k = &view.intrinsics;
    let origin = view.pose.center();
    let mut directions = Vec::with_capacity(k.pixel_count());
    for row in 0..k.height {
        for col in 0..k.width {
            directions.push(pixel_direction(view, col, row));
        }
    }
    let (near, far) = cube_bounds(&origin);
    RayBundle {
        origins: vec![origin; directions.len()],
        directions,
        near,
        far,
    }
}

/// Rays for an explicit list of row-major pixel indices.
pub fn generate_pixel_rays(view: &CameraView, pixels: &[usize]) -> RayBundle {
    let w = view.intrinsics.width as usize;
    let origin = view.pose.center();
    let directions = pixels
        .iter()
        .map(|&p| pixel_direction(view, (p % w) as u32, (p / w) as u32))
        .collect::<Vec<_>>();
    let (near, far) = cube_bounds(&origin);
    RayBundle {
        origins: vec![origin; directions.len()],
        directions,
        near,
        far,
    }
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653_3;

/// `n` cameras on a Fibonacci lattice over the sphere, both poles included,
/// all looking at the origin.
pub fn spherical_rig(n: usize, radius: f64) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let z = if n == 1 {
                1.0
            } else {
                1.0 - 2.0 * i as f64 / (n - 1) as f64
            };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = GOLDEN_ANGLE * i as f64;
            let dir = Vec3::new(r * phi.cos(), r * phi.sin(), z);
            Pose::look_at(dir * radius, Vec3::zeros())
        })
        .collect()
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// `n` cameras at uniformly random directions on the sphere of `radius`.
pub fn random_sphere_views(n: usize, radius: f64, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Pose::look_at(random_direction(&mut rng) * radius, Vec3::zeros()))
        .collect()
}

/// `n` cameras at random directions and distances uniform in
/// `[lo * radius, hi * radius]`.
pub fn random_ood_views(
    n: usize,
    radius: f64,
    dist_range: (f64, f64),
    seed: u64,
) -> Result<Vec<Pose>> {
    let (lo, hi) = dist_range;
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(Error::Config(format!(
            "OOD distance range needs 0 < lo < hi, got ({lo}, {hi})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(lo * radius, hi * radius).expect("valid range");
    Ok((0..n)
        .map(|_| {
            let dir = random_direction(&mut rng);
            let d = dist.sample(&mut rng);
            Pose::look_at(dir * d, Vec3::zeros())
        })
        .collect())
}

/// Orbit at fixed elevation used for preview sequences.
pub fn spiral_path(frames: usize, radius: f64, elevation_deg: f64) -> Vec<Pose> {
    let el = elevation_deg.to_radians();
    (0..frames)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / frames.max(1) as f64;
            let eye = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * radius;
            Pose::look_at(eye, Vec3::zeros())
        })
        .collect()
}

/// View counts and geometry of a dataset rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub train: usize,
    pub test: usize,
    pub ood: usize,
    pub radius: f64,
    pub ood_range: (f64, f64),
    pub seed: u64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            train: 400,
            test: 20,
            ood: 10,
            radius: 2.5,
            ood_range: (0.5, 2.0),
            seed: 0,
        }
    }
}

impl RigSpec {
    /// Scaled-down rig: 50 train, 10 test, 5 OOD views.
    pub fn desk() -> Self {
        Self {
            train: 50,
            test: 10,
            ood: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("rig radius must be positive, got {}", self.radius)));
        }
        let (lo, hi) = self.ood_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Config(format!(
                "OOD distance range needs 0 < lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    /// All views in manifest order: train, then test, then OOD.
    pub fn build_views(&self, intrinsics: CameraIntrinsics) -> Result<Vec<CameraView>> {
        self.validate()?;
        intrinsics.validate()?;
        let tag = |poses: Vec<Pose>, split| {
            poses.into_iter().map(move |pose| CameraView {
                pose,
                intrinsics,
                split,
            })
        };
        let mut views: Vec<CameraView> =
            tag(spherical_rig(self.train, self.radius), Split::Train).collect();
        views.extend(tag(
            random_sphere_views(self.test, self.radius, self.seed.wrapping_mul(2).wrapping_add(1)),
            Split::Test,
        ));
        views.extend(tag(
            random_ood_views(
                self.ood,
                self.radius,
                self.ood_range,
                self.seed.wrapping_mul(2).wrapping_add(2),
            )?,
            Split::Ood,
        ));
        Ok(views)
    }
}

/// Dataset manifest as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    pub intrinsics: CameraIntrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    pub views: Vec<ManifestView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub pose: Vec<f64>,
    pub split: Split,
    pub image: String,
}

fn schema_v1() -> u32 {
    1
}
