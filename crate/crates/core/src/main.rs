use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use srfkit::camera::Split;
use srfkit::pipeline::{
    cmd_eval, cmd_fit, cmd_generate, cmd_mesh, cmd_render, cmd_train, EvalModel, ExperimentConfig, FitMode,
    PairPaths, RenderPoses,
};
use srfkit::scene::SceneSpec;
use srfkit::{Error, Result};

#[derive(Parser)]
#[command(name = "srfkit", version, about = "Sparse voxel radiance fields")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults to the desk-scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Final voxel resolution H (resets both fit schedules).
    #[arg(long, global = true)]
    resolution: Option<u32>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker thread cap.
    #[arg(long, global = true, env = "SRFKIT_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural scene into a posed image dataset.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scene kind: sphere, box, torus, two_spheres, checker_sphere.
        #[arg(long)]
        scene: Option<String>,
        /// View counts as TRAIN/TEST/OOD.
        #[arg(long, value_parser = parse_views)]
        views: Option<(usize, usize, usize)>,
        #[arg(long)]
        image_size: Option<u32>,
    },
    /// Fit a field to the train views of a dataset.
    Fit {
        manifest: PathBuf,
        #[arg(long, conflicts_with = "partial")]
        whole: bool,
        /// Fit a partial field from k random train views (1 or 3).
        #[arg(long, value_name = "K")]
        partial: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the completion network on (partial, whole) pairs.
    Train {
        /// PARTIAL.srf,WHOLE.srf,MANIFEST.json; repeatable.
        #[arg(long = "pair", required = true, value_parser = parse_pair)]
        pairs: Vec<PairPaths>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a field to PNGs along a spiral or at dataset views.
    Render {
        srf: PathBuf,
        #[arg(long, value_name = "FRAMES", conflicts_with = "manifest")]
        spiral: Option<usize>,
        #[arg(long, default_value_t = 2.5)]
        radius: f64,
        #[arg(long, default_value_t = 20.0)]
        elevation: f64,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-split PSNR/SSIM of a field or network on a dataset.
    Eval {
        #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
        srf: Option<PathBuf>,
        #[arg(long, requires = "partial")]
        checkpoint: Option<PathBuf>,
        /// Partial field fed to the network.
        #[arg(long)]
        partial: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Whole-field fit used to report validation accuracy.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract an OBJ isosurface.
    Mesh {
        srf: PathBuf,
        #[arg(long)]
        iso: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_views(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('/').collect();
    if parts.len() != 3 {
        return Err("expected TRAIN/TEST/OOD".into());
    }
    let n = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}"));
    Ok((n(parts[0])?, n(parts[1])?, n(parts[2])?))
}

fn parse_pair(s: &str) -> std::result::Result<PairPaths, String> {
    match s.split(',').collect::<Vec<_>>()[..] {
        [p, w, m] => Ok(PairPaths { partial: p.into(), whole: w.into(), manifest: m.into() }),
        _ => Err("expected PARTIAL,WHOLE,MANIFEST".into()),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "ood" => Ok(Split::Ood),
        _ => Err(format!("unknown split '{s}'")),
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(h) = c.resolution {
        cfg = cfg.with_resolution(h);
    }
    for o in &c.overrides {
        cfg = cfg.set(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out_or = |out: Option<PathBuf>, cfg: &ExperimentConfig, sub: &str| {
        out.unwrap_or_else(|| cfg.output_dir.join(sub))
    };
    match cli.command {
        Command::Generate { out, scene, views, image_size } => {
            if let Some(s) = scene {
                cfg.scene = SceneSpec::from_name(&s)?;
            }
            if let Some((a, b, c)) = views {
                (cfg.rig.train, cfg.rig.test, cfg.rig.ood) = (a, b, c);
            }
            if let Some(s) = image_size {
                cfg.image_size = s;
            }
            let out = out_or(out, &cfg, "dataset");
            println!("{}", cmd_generate(&cfg, &out)?.display());
        }
        Command::Fit { manifest, whole, partial, out } => {
            let mode = match (whole, partial) {
                (_, Some(k)) => FitMode::Partial(k),
                _ => FitMode::Whole,
            };
            let out = out_or(out, &cfg, "fit");
            println!("{}", cmd_fit(&cfg, &manifest, mode, &out)?.display());
        }
        Command::Train { pairs, epochs, resume, out } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let out = out_or(out, &cfg, "train");
            println!("{}", cmd_train(&cfg, &pairs, &out, resume.as_deref())?.display());
        }
        Command::Render { srf, spiral, radius, elevation, manifest, split, out } => {
            let poses = match manifest {
                Some(path) => RenderPoses::Manifest { path, split },
                None => RenderPoses::Spiral { frames: spiral.unwrap_or(8), radius, elevation_deg: elevation },
            };
            let out = out_or(out, &cfg, "render");
            for p in cmd_render(&cfg, &srf, &poses, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { srf, checkpoint, partial, manifest, reference, out } => {
            let model = match (srf, checkpoint, partial) {
                (Some(s), _, _) => EvalModel::Field(s),
                (None, Some(checkpoint), Some(partial)) => EvalModel::Network { checkpoint, partial },
                _ => return Err(Error::Contract("eval needs --srf or --checkpoint with --partial".into())),
            };
            let out = out_or(out, &cfg, "eval.json");
            let report = cmd_eval(&cfg, &model, &manifest, reference.as_deref(), &out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
        }
        Command::Mesh { srf, iso, out } => {
            let out = out_or(out, &cfg, "mesh.obj");
            let n = cmd_mesh(&cfg, &srf, iso, &out)?;
            println!("{} ({n} triangles)", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    srfkit::par::init_threads(cli.common.threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
