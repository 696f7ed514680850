//! Procedural ground-truth scenes, a sphere-tracing reference renderer and
//! on-disk posed-image datasets.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::camera::{
    cube_bounds, pixel_direction, CameraIntrinsics, CameraView, Manifest, ManifestView, Pose,
    RigSpec, Split, Vec3,
};
use crate::error::{Error, Result};
use crate::par;
use crate::raster::ImageBuffer;

/// Objects must fit inside this half-extent.
pub const SCENE_BOUND: f64 = 0.8;

type ScalarField = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;
type ColorField = Arc<dyn Fn(&Vec3) -> [f64; 3] + Send + Sync>;

/// Parameters for one of the built-in scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSpec {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Torus { major: f64, minor: f64 },
    TwoSpheres { radius: f64, separation: f64 },
    CheckerSphere { radius: f64, cells: u32 },
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::Sphere { radius: 0.5 }
    }
}

impl SceneSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SceneSpec::Sphere { .. } => "sphere",
            SceneSpec::Box { .. } => "box",
            SceneSpec::Torus { .. } => "torus",
            SceneSpec::TwoSpheres { .. } => "two_spheres",
            SceneSpec::CheckerSphere { .. } => "checker_sphere",
        }
    }

    /// Default parameters for a scene kind given by name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "sphere" => SceneSpec::Sphere { radius: 0.5 },
            "box" => SceneSpec::Box {
                half_extents: [0.4, 0.3, 0.35],
            },
            "torus" => SceneSpec::Torus {
                major: 0.5,
                minor: 0.2,
            },
            "two_spheres" => SceneSpec::TwoSpheres {
                radius: 0.3,
                separation: 0.8,
            },
            "checker_sphere" => SceneSpec::CheckerSphere {
                radius: 0.55,
                cells: 4,
            },
            other => return Err(Error::Config(format!("unknown scene kind '{other}'"))),
        })
    }

    /// Half-extent of the axis-aligned box enclosing the object.
    fn extent(&self) -> [f64; 3] {
        match *self {
            SceneSpec::Sphere { radius } | SceneSpec::CheckerSphere { radius, .. } => [radius; 3],
            SceneSpec::Box { half_extents } => half_extents,
            SceneSpec::Torus { major, minor } => [major + minor, major + minor, minor],
            SceneSpec::TwoSpheres { radius, separation } => {
                [separation / 2.0 + radius, radius, radius]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = match *self {
            SceneSpec::Sphere { radius } => radius > 0.0,
            SceneSpec::CheckerSphere { radius, cells } => radius > 0.0 && cells > 0,
            SceneSpec::Box { half_extents } => half_extents.iter().all(|&v| v > 0.0),
            SceneSpec::Torus { major, minor } => minor > 0.0 && major > minor,
            SceneSpec::TwoSpheres { radius, separation } => radius > 0.0 && separation >= 0.0,
        };
        if !positive {
            return Err(Error::Config(format!("invalid {} parameters: {self:?}", self.name())));
        }
        if self.extent().iter().any(|&e| e > SCENE_BOUND + 1e-12) {
            return Err(Error::Config(format!(
                "{} does not fit in [-{SCENE_BOUND}, {SCENE_BOUND}]^3",
                self.name()
            )));
        }
        Ok(())
    }
}

/// An implicit surface with a colour field.
#[derive(Clone)]
pub struct AnalyticScene {
    pub name: String,
    sdf: ScalarField,
    albedo: ColorField,
}

impl std::fmt::Debug for AnalyticScene {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalyticScene").field("name", &self.name).finish()
    }
}

impl AnalyticScene {
    /// Scene from arbitrary closures. `sdf` must be 1-Lipschitz.
    pub fn new(
        name: impl Into<String>,
        sdf: impl Fn(&Vec3) -> f64 + Send + Sync + 'static,
        albedo: impl Fn(&Vec3) -> [f64; 3] + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            sdf: Arc::new(sdf),
            albedo: Arc::new(albedo),
        }
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        (self.sdf)(p)
    }

    pub fn albedo(&self, p: &Vec3) -> [f64; 3] {
        (self.albedo)(p)
    }

    fn normal(&self, p: &Vec3) -> Vec3 {
        let h = 1e-5;
        let e = |a: Vec3| self.sdf(&(p + a)) - self.sdf(&(p - a));
        Vec3::new(
            e(Vec3::new(h, 0.0, 0.0)),
            e(Vec3::new(0.0, h, 0.0)),
            e(Vec3::new(0.0, 0.0, h)),
        )
        .normalize()
    }
}

fn sphere_sdf(p: &Vec3, c: &Vec3, r: f64) -> f64 {
    (p - c).norm() - r
}

pub fn make_scene(spec: &SceneSpec) -> Result<AnalyticScene> {
    spec.validate()?;
    let name = spec.name();
    Ok(match *spec {
        SceneSpec::Sphere { radius } => AnalyticScene::new(
            name,
            move |p| p.norm() - radius,
            |_| [0.8, 0.35, 0.2],
        ),
        SceneSpec::Box { half_extents } => {
            let b = Vec3::from(half_extents);
            AnalyticScene::new(
                name,
                move |p| {
                    let q = p.abs() - b;
                    q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
                },
                |_| [0.2, 0.55, 0.85],
            )
        }
        SceneSpec::Torus { major, minor } => AnalyticScene::new(
            name,
            move |p| {
                let ring = (p.x * p.x + p.y * p.y).sqrt() - major;
                (ring * ring + p.z * p.z).sqrt() - minor
            },
            |_| [0.3, 0.75, 0.35],
        ),
        SceneSpec::TwoSpheres { radius, separation } => {
            let a = Vec3::new(-separation / 2.0, 0.0, 0.0);
            let b = Vec3::new(separation / 2.0, 0.0, 0.0);
            AnalyticScene::new(
                name,
                move |p| sphere_sdf(p, &a, radius).min(sphere_sdf(p, &b, radius)),
                |p| {
                    if p.x < 0.0 {
                        [0.85, 0.25, 0.25]
                    } else {
                        [0.25, 0.35, 0.85]
                    }
                },
            )
        }
        SceneSpec::CheckerSphere { radius, cells } => {
            let size = 2.0 * radius / cells as f64;
            AnalyticScene::new(
                name,
                move |p| p.norm() - radius,
                move |p| {
                    let idx = (p.x / size).floor() as i64
                        + (p.y / size).floor() as i64
                        + (p.z / size).floor() as i64;
                    if idx.rem_euclid(2) == 0 {
                        [0.9, 0.85, 0.2]
                    } else {
                        [0.2, 0.25, 0.75]
                    }
                },
            )
        }
    })
}

const TRACE_EPS: f64 = 1e-6;
const TRACE_MAX_STEPS: usize = 1024;

/// Sphere-trace one ray; returns the hit distance.
fn sphere_trace(scene: &AnalyticScene, o: &Vec3, d: &Vec3, near: f64, far: f64) -> Option<f64> {
    let mut t = near;
    for _ in 0..TRACE_MAX_STEPS {
        if t > far {
            return None;
        }
        let dist = scene.sdf(&(o + d * t));
        if dist < TRACE_EPS {
            return Some(t);
        }
        t += dist;
    }
    None
}

/// Ground-truth image: albedo times a headlight Lambert term on hits, opaque;
/// white with alpha 0 on misses.
pub fn trace_reference(scene: &AnalyticScene, view: &CameraView) -> ImageBuffer {
    let k = view.intrinsics;
    let origin = view.pose.center();
    let (near, far) = cube_bounds(&origin);
    let rows = par::map_range(k.height as usize, |row| {
        (0..k.width)
            .map(|col| {
                let d = pixel_direction(view, col, row as u32);
                match sphere_trace(scene, &origin, &d, near, far) {
                    Some(t) => {
                        let p = origin + d * t;
                        let lambert = scene.normal(&p).dot(&-d).max(0.0);
                        let a = scene.albedo(&p);
                        [a[0] * lambert, a[1] * lambert, a[2] * lambert, 1.0]
                    }
                    None => [1.0, 1.0, 1.0, 0.0],
                }
            })
            .collect::<Vec<_>>()
    });
    let mut img = ImageBuffer::new(k.width, k.height);
    for (p, px) in rows.into_iter().flatten().enumerate() {
        img.set_pixel(p, px);
    }
    img
}

/// Posed images plus the manifest they came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub views: Vec<CameraView>,
    pub images: Vec<ImageBuffer>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| self.views[i].split == split)
            .collect()
    }
}

/// Render every rig view of `scene` to PNG and write `manifest.json`.
pub fn emit_dataset(
    scene: &AnalyticScene,
    rig: &RigSpec,
    intrinsics: CameraIntrinsics,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let views = rig.build_views(intrinsics)?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let images = par::map_slice(&views, |v| trace_reference(scene, v));
    let mut counters = [0usize; 3];
    let mut entries = Vec::with_capacity(views.len());
    for (view, img) in views.iter().zip(&images) {
        let slot = match view.split {
            Split::Train => 0,
            Split::Test => 1,
            Split::Ood => 2,
        };
        let rel = format!("images/{}_{:03}.png", view.split.name(), counters[slot]);
        counters[slot] += 1;
        img.save_png(out_dir.join(&rel))?;
        entries.push(ManifestView {
            pose: view.pose.to_row_major().to_vec(),
            split: view.split,
            image: rel,
        });
    }
    let manifest = Manifest {
        schema_version: 1,
        intrinsics,
        seed: Some(rig.seed),
        scene: Some(scene.name.clone()),
        views: entries,
    };
    let path = out_dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let m: Manifest = read_json(path.as_ref())?;
    m.intrinsics.validate()?;
    Ok(m)
}

/// Views and images of a manifest, in manifest order.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let k = manifest.intrinsics;
    let mut views = Vec::with_capacity(manifest.views.len());
    let mut images = Vec::with_capacity(manifest.views.len());
    for entry in &manifest.views {
        let pose = Pose::from_row_major(&entry.pose)?;
        let path = base.join(&entry.image);
        let img = ImageBuffer::load_png(&path)?;
        if img.width != k.width || img.height != k.height {
            return Err(Error::Shape(format!(
                "{} is {}x{}, manifest intrinsics say {}x{}",
                path.display(),
                img.width,
                img.height,
                k.width,
                k.height
            )));
        }
        views.push(CameraView {
            pose,
            intrinsics: k,
            split: entry.split,
        });
        images.push(img);
    }
    Ok(Dataset {
        manifest,
        views,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::spherical_rig;

    #[test]
    fn sdf_examples() {
        let s = make_scene(&SceneSpec::Sphere { radius: 0.5 }).unwrap();
        assert_eq!(s.sdf(&Vec3::zeros()), -0.5);
        assert!(s.sdf(&Vec3::new(0.5, 0.0, 0.0)).abs() < 1e-15);
        let t = make_scene(&SceneSpec::Torus {
            major: 0.5,
            minor: 0.2,
        })
        .unwrap();
        assert!((t.sdf(&Vec3::new(0.5, 0.0, 0.0)) + 0.2).abs() < 1e-15);
        let b = make_scene(&SceneSpec::Box {
            half_extents: [0.4, 0.3, 0.2],
        })
        .unwrap();
        assert!((b.sdf(&Vec3::new(0.6, 0.0, 0.0)) - 0.2).abs() < 1e-15);
        assert!((b.sdf(&Vec3::zeros()) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn out_of_bounds_scene_is_rejected() {
        assert!(matches!(
            make_scene(&SceneSpec::Sphere { radius: 0.9 }),
            Err(Error::Config(_))
        ));
        assert!(make_scene(&SceneSpec::Torus {
            major: 0.7,
            minor: 0.2
        })
        .is_err());
        assert!(SceneSpec::from_name("teapot").is_err());
        for n in ["sphere", "box", "torus", "two_spheres", "checker_sphere"] {
            make_scene(&SceneSpec::from_name(n).unwrap()).unwrap();
        }
    }

    fn view(pose: Pose, size: u32) -> CameraView {
        CameraView {
            pose,
            intrinsics: CameraIntrinsics::square(size).unwrap(),
            split: Split::Train,
        }
    }

    #[test]
    fn empty_scene_is_white_and_transparent() {
        let empty = AnalyticScene::new("empty", |_| f64::INFINITY, |_| [0.0; 3]);
        let img = trace_reference(&empty, &view(spherical_rig(3, 2.5)[1], 16));
        for p in 0..img.pixel_count() {
            assert_eq!(img.pixel(p), [1.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn sphere_silhouette_matches_projected_disk() {
        let r = 0.5;
        let s = make_scene(&SceneSpec::Sphere { radius: r }).unwrap();
        let v = view(spherical_rig(7, 2.5)[2], 128);
        let img = trace_reference(&s, &v);
        let covered: f64 = (0..img.pixel_count()).map(|p| img.alpha(p)).sum();
        let dist = 2.5f64;
        let rad_px = v.intrinsics.focal * r / (dist * dist - r * r).sqrt();
        let area = std::f64::consts::PI * rad_px * rad_px;
        assert!((covered - area).abs() / area < 0.02, "{covered} vs {area}");
        // every alpha is exactly 0 or 1
        assert!((0..img.pixel_count()).all(|p| img.alpha(p) == 0.0 || img.alpha(p) == 1.0));
    }

    #[test]
    fn hit_mask_agrees_with_analytic_intersection() {
        let r = 0.5;
        let s = make_scene(&SceneSpec::Sphere { radius: r }).unwrap();
        let v = view(spherical_rig(11, 2.5)[4], 48);
        let img = trace_reference(&s, &v);
        let o = v.pose.center();
        let k = v.intrinsics;
        let pixel_angle = 1.0 / k.focal;
        for row in 0..k.height {
            for col in 0..k.width {
                let d = pixel_direction(&v, col, row);
                // closest approach of the ray to the centre
                let miss = (o - d * o.dot(&d)).norm() - r;
                if miss.abs() < 2.5 * pixel_angle * o.norm() {
                    continue;
                }
                let p = (row * k.width + col) as usize;
                assert_eq!(img.alpha(p) == 1.0, miss < 0.0, "pixel {col},{row}");
            }
        }
    }

    #[test]
    fn reference_is_deterministic() {
        let s = make_scene(&SceneSpec::from_name("checker_sphere").unwrap()).unwrap();
        let v = view(spherical_rig(5, 2.5)[3], 24);
        assert_eq!(trace_reference(&s, &v), trace_reference(&s, &v));
    }

    #[test]
    fn emit_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = make_scene(&SceneSpec::default()).unwrap();
        let rig = RigSpec {
            train: 6,
            test: 2,
            ood: 2,
            ..RigSpec::desk()
        };
        let k = CameraIntrinsics::square(16).unwrap();
        let path = emit_dataset(&scene, &rig, k, dir.path()).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.views.len(), 10);
        let expected = rig.build_views(k).unwrap();
        for (a, b) in ds.views.iter().zip(&expected) {
            assert!((a.pose.0 - b.pose.0).abs().max() < 1e-12);
            assert_eq!(a.split, b.split);
        }
        for (img, v) in ds.images.iter().zip(&expected) {
            assert_eq!(img, &trace_reference(&scene, v).quantized());
        }
        let first = std::fs::read(&path).unwrap();
        let path2 = emit_dataset(&scene, &rig, k, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(path2).unwrap());
    }

    #[test]
    fn load_errors_are_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let k = CameraIntrinsics::square(8).unwrap();
        let manifest = Manifest {
            schema_version: 1,
            intrinsics: k,
            seed: None,
            scene: None,
            views: vec![ManifestView {
                pose: spherical_rig(1, 2.5)[0].to_row_major().to_vec(),
                split: Split::Train,
                image: "images/gone.png".into(),
            }],
        };
        write_json(&path, &manifest).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
        assert!(err.to_string().contains("gone.png"));

        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        ImageBuffer::new(9, 8)
            .save_png(dir.path().join("images/gone.png"))
            .unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Shape(_))));

        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Json { .. })));

        let empty = Manifest {
            views: vec![],
            ..manifest
        };
        write_json(&path, &empty).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert!(ds.views.is_empty() && ds.images.is_empty());
    }
}
