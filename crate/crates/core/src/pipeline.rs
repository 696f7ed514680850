//! Experiment configuration and the end-to-end commands behind the CLI.
//!
//! Every command takes an [`ExperimentConfig`] plus paths and writes its
//! artifacts deterministically: the same config, seed and inputs give
//! byte-identical outputs.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{spiral_path, CameraIntrinsics, CameraView, RigSpec, Split};
use crate::error::{Error, Result};
use crate::fit::{fit_partial, fit_srf, FitConfig, FitReport};
use crate::loss::LossWeights;
use crate::mesh::{default_iso, marching_cubes};
use crate::metrics::{psnr, ssim, validation_accuracy, MetricReport};
use crate::net::{NetConfig, Network, TrainConfig, TrainSample, Trainer};
use crate::render::render_image;
use crate::scene::{emit_dataset, load_dataset, make_scene, read_json, write_json, Dataset, SceneSpec};
use crate::srf::{NormalizationSpec, SparseRadianceField};

/// Version tag written into every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Independent stages that each get their own seed from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Rig = 1,
    Fit = 2,
    PartialViews = 3,
    PartialFit = 4,
    NetInit = 5,
    Train = 6,
}

/// SplitMix64 of the root seed and the stage number.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    let mut z = root
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stage as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything needed to run the whole pipeline.
///
/// Seed fields inside the nested configs are overwritten with values derived
/// from `seed`, so one number reproduces a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub image_size: u32,
    pub scene: SceneSpec,
    pub rig: RigSpec,
    pub fit: FitConfig,
    pub partial_fit: FitConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("srfkit-out"),
            image_size: 64,
            scene: SceneSpec::default(),
            rig: RigSpec::default(),
            fit: FitConfig::whole(32),
            partial_fit: FitConfig::partial(32),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl ExperimentConfig {
    /// Laptop-sized run: 50/10/5 views, H = 32, unit normalisation.
    pub fn desk() -> Self {
        Self {
            rig: RigSpec::desk(),
            train: TrainConfig {
                normalization: NormalizationSpec::new(1.0, 1.0).expect("positive scales"),
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        make_scene(&self.scene)?;
        self.rig.validate()?;
        self.fit.validate()?;
        self.partial_fit.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let h = self.fit.target_resolution();
        if self.partial_fit.target_resolution() != h {
            return Err(Error::Config(format!(
                "whole fits end at H={h} but partial fits at H={}",
                self.partial_fit.target_resolution()
            )));
        }
        if h % self.net.total_stride() != 0 {
            return Err(Error::Config(format!(
                "H={h} is not a multiple of the network's total stride {}",
                self.net.total_stride()
            )));
        }
        Ok(())
    }

    /// Copy with all stage seeds derived from the root seed.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.rig.seed = stage_seed(self.seed, Stage::Rig);
        c.fit.seed = stage_seed(self.seed, Stage::Fit);
        c.partial_fit.seed = stage_seed(self.seed, Stage::PartialFit);
        c.net.seed = stage_seed(self.seed, Stage::NetInit);
        c.train.seed = stage_seed(self.seed, Stage::Train);
        c
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::square(self.image_size)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    /// Replace both fit schedules with the defaults for final resolution `h`.
    pub fn with_resolution(mut self, h: u32) -> Self {
        self.fit = FitConfig { render: self.fit.render, ..FitConfig::whole(h) };
        self.partial_fit = FitConfig { render: self.partial_fit.render, ..FitConfig::partial(h) };
        self
    }

    /// Apply a `section.key=value` override. Values are parsed as TOML and
    /// fall back to a bare string.
    pub fn set(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut root = toml::Table::try_from(self).expect("config serialises");
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut table = &mut root;
        for p in path {
            table = table
                .get_mut(*p)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown config section '{p}' in '{key}'")))?;
        }
        table.insert(last.to_string(), value);
        root.try_into().map_err(|e| Error::Config(format!("bad override '{assignment}': {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_toml(&text)
    }
}

/// Create `dir` or fail with a configuration error naming it.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".srfkit-write-test");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

/// Render the configured scene over its rig; returns the manifest path.
pub fn cmd_generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    prepare_output_dir(out_dir)?;
    let cfg = cfg.seeded();
    let scene = make_scene(&cfg.scene)?;
    emit_dataset(&scene, &cfg.rig, cfg.intrinsics()?, out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "views")]
pub enum FitMode {
    Whole,
    Partial(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: FitMode,
    /// Manifest indices of the views that were fitted.
    pub input_views: Vec<usize>,
    pub voxels: usize,
    pub report: FitReport,
}

/// Train views to use for a fit: all of them, or `k` chosen by seed.
pub fn fit_view_indices(data: &Dataset, mode: FitMode, root_seed: u64) -> Result<Vec<usize>> {
    let train = data.split_indices(Split::Train);
    match mode {
        FitMode::Whole => {
            if train.is_empty() {
                return Err(Error::Contract("dataset has no train views".into()));
            }
            Ok(train)
        }
        FitMode::Partial(k) => {
            if k != 1 && k != 3 {
                return Err(Error::Contract(format!("partial fits take 1 or 3 views, got {k}")));
            }
            if train.len() < k {
                return Err(Error::Contract(format!(
                    "need {k} train views, dataset has {}",
                    train.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(root_seed, Stage::PartialViews));
            let mut picked: Vec<usize> = sample(&mut rng, train.len(), k).into_iter().map(|i| train[i]).collect();
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

/// Fit a field to a dataset; writes `<stem>.srf` and `<stem>.json` into
/// `out_dir` and returns the field path.
pub fn cmd_fit(
    cfg: &ExperimentConfig,
    manifest: &Path,
    mode: FitMode,
    out_dir: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    if let FitMode::Partial(k) = mode {
        if k != 1 && k != 3 {
            return Err(Error::Contract(format!("partial fits take 1 or 3 views, got {k}")));
        }
    }
    prepare_output_dir(out_dir)?;
    let cfg = cfg.seeded();
    let data = load_dataset(manifest)?;
    let idx = fit_view_indices(&data, mode, cfg.seed)?;
    let views: Vec<CameraView> = idx.iter().map(|&i| data.views[i].clone()).collect();
    let images: Vec<_> = idx.iter().map(|&i| data.images[i].clone()).collect();
    let (srf, report) = match mode {
        FitMode::Whole => fit_srf(&views, &images, &cfg.fit)?,
        FitMode::Partial(_) => fit_partial(&views, &images, &cfg.partial_fit)?,
    };
    let stem = match mode {
        FitMode::Whole => "whole".to_string(),
        FitMode::Partial(k) => format!("partial{k}"),
    };
    let path = out_dir.join(format!("{stem}.srf"));
    srf.save(&path)?;
    let record = FitRecord {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        mode,
        input_views: idx,
        voxels: srf.len(),
        report,
    };
    write_json(&out_dir.join(format!("{stem}.json")), &record)?;
    Ok(path)
}

/// One training pair on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPaths {
    pub partial: PathBuf,
    pub whole: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub schema_version: u32,
    pub seed: u64,
    pub epochs: usize,
    pub history: Vec<crate::net::EpochStats>,
}

pub fn load_pair(p: &PairPaths) -> Result<TrainSample> {
    let partial = SparseRadianceField::load(&p.partial)?;
    let whole = SparseRadianceField::load(&p.whole)?;
    let data = load_dataset(&p.manifest)?;
    let train = data.split_indices(Split::Train);
    Ok(TrainSample {
        partial,
        whole,
        views: train.iter().map(|&i| data.views[i].clone()).collect(),
        images: train.iter().map(|&i| data.images[i].clone()).collect(),
    })
}

/// Train (or resume training) the completion network; writes
/// `checkpoint.snet` and `history.json` and returns the checkpoint path.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    pairs: &[PairPaths],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Contract("training needs at least one pair".into()));
    }
    prepare_output_dir(out_dir)?;
    let cfg = cfg.seeded();
    let data = pairs.iter().map(load_pair).collect::<Result<Vec<_>>>()?;
    let mut trainer = match resume {
        Some(path) => Trainer::load(path, Some(&cfg.net))?,
        None => Trainer::new(Network::new(cfg.net.clone())?),
    };
    let remaining = cfg.train.epochs.saturating_sub(trainer.epoch);
    trainer.train(&data, &cfg.train, &cfg.loss, remaining)?;
    let ckpt = out_dir.join("checkpoint.snet");
    trainer.save(&ckpt)?;
    write_json(
        &out_dir.join("history.json"),
        &TrainRecord {
            schema_version: SCHEMA_VERSION,
            seed: cfg.seed,
            epochs: trainer.epoch,
            history: trainer.history.clone(),
        },
    )?;
    Ok(ckpt)
}

/// Camera placements for rendering.
#[derive(Debug, Clone, PartialEq)]
pub enum RenderPoses {
    Spiral { frames: usize, radius: f64, elevation_deg: f64 },
    /// Views of one split of a dataset manifest.
    Manifest { path: PathBuf, split: Split },
}

/// Render a field; returns the written PNG paths in order.
pub fn cmd_render(
    cfg: &ExperimentConfig,
    srf_path: &Path,
    poses: &RenderPoses,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let srf = SparseRadianceField::load(srf_path)?;
    let views: Vec<CameraView> = match poses {
        RenderPoses::Spiral { frames, radius, elevation_deg } => {
            if *frames == 0 {
                return Err(Error::Contract("spiral needs at least one frame".into()));
            }
            let k = cfg.intrinsics()?;
            spiral_path(*frames, *radius, *elevation_deg)
                .into_iter()
                .map(|pose| CameraView { pose, intrinsics: k, split: Split::Test })
                .collect()
        }
        RenderPoses::Manifest { path, split } => {
            let data = load_dataset(path)?;
            data.split_indices(*split).into_iter().map(|i| data.views[i].clone()).collect()
        }
    };
    prepare_output_dir(out_dir)?;
    let rcfg = &cfg.fit.render;
    let mut out = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let path = out_dir.join(format!("frame_{i:03}.png"));
        render_image(&srf, v, rcfg).save_png(&path)?;
        out.push(path);
    }
    Ok(out)
}

/// What to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalModel {
    Field(PathBuf),
    /// A network checkpoint applied to a partial field.
    Network { checkpoint: PathBuf, partial: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ood: Option<MetricReport>,
}

impl EvalRecord {
    pub fn split(&self, split: Split) -> Option<&MetricReport> {
        match split {
            Split::Train => self.train.as_ref(),
            Split::Test => self.test.as_ref(),
            Split::Ood => self.ood.as_ref(),
        }
    }
}

/// Mean PSNR and SSIM of `srf` over the views of one split, on 8-bit images.
pub fn split_metrics(
    srf: &SparseRadianceField,
    data: &Dataset,
    split: Split,
    cfg: &crate::render::RenderConfig,
) -> Result<Option<MetricReport>> {
    let idx = data.split_indices(split);
    if idx.is_empty() {
        return Ok(None);
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for &i in &idx {
        let img = render_image(srf, &data.views[i], cfg).quantized();
        let gt = data.images[i].quantized();
        p += psnr(&img, &gt, None)?;
        s += ssim(&img, &gt)?;
    }
    let n = idx.len() as f64;
    Ok(Some(MetricReport { psnr: p / n, ssim: s / n, validation_accuracy: None }))
}

/// Materialise the field to evaluate, denormalised and renderable.
pub fn resolve_model(cfg: &ExperimentConfig, model: &EvalModel) -> Result<SparseRadianceField> {
    match model {
        EvalModel::Field(path) => SparseRadianceField::load(path),
        EvalModel::Network { checkpoint, partial } => {
            let net = crate::net::load_net(checkpoint, Some(&cfg.net))?;
            let partial = SparseRadianceField::load(partial)?;
            let norm = &cfg.train.normalization;
            Ok(net.forward(&partial.normalize(norm))?.denormalize(norm))
        }
    }
}

/// Per-split metrics of a model on a dataset, written to `out`.
///
/// With `reference` (a whole-field fit), each block also carries the
/// validation accuracy against the reference's PSNR on the same split.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    model: &EvalModel,
    manifest: &Path,
    reference: Option<&Path>,
    out: &Path,
) -> Result<EvalRecord> {
    cfg.validate()?;
    let srf = resolve_model(cfg, model)?;
    let data = load_dataset(manifest)?;
    let reference = reference.map(SparseRadianceField::load).transpose()?;
    let rcfg = &cfg.fit.render;
    let mut record = EvalRecord { schema_version: SCHEMA_VERSION, train: None, test: None, ood: None };
    for split in [Split::Train, Split::Test, Split::Ood] {
        let Some(mut m) = split_metrics(&srf, &data, split, rcfg)? else {
            log::warn!("split '{}' has no views; its block is omitted", split.name());
            continue;
        };
        if let Some(r) = &reference {
            let whole = split_metrics(r, &data, split, rcfg)?.expect("split is nonempty");
            m.validation_accuracy = Some(validation_accuracy(m.psnr, whole.psnr)?);
        }
        match split {
            Split::Train => record.train = Some(m),
            Split::Test => record.test = Some(m),
            Split::Ood => record.ood = Some(m),
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_output_dir(parent)?;
    }
    write_json(out, &record)?;
    Ok(record)
}

pub fn read_eval(path: &Path) -> Result<EvalRecord> {
    read_json(path)
}

/// Extract a mesh at `iso` (default half the peak density) and write OBJ.
pub fn cmd_mesh(cfg: &ExperimentConfig, srf_path: &Path, iso: Option<f64>, out: &Path) -> Result<usize> {
    let srf = SparseRadianceField::load(srf_path)?;
    let act = cfg.fit.render.activation;
    let iso = iso.unwrap_or_else(|| default_iso(&srf, act));
    if !iso.is_finite() {
        return Err(Error::Contract(format!("iso must be finite, got {iso}")));
    }
    let mesh = if iso > 0.0 { marching_cubes(&srf, iso, act) } else { Default::default() };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_output_dir(parent)?;
    }
    mesh.write_obj(out)?;
    Ok(mesh.triangles.len())
}
