use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use s3_cli::config::ExperimentConfig;
use s3_cli::dataset::{read_dataset, Scene};
use s3_cli::{
    ablate_with, ablation_csv, animate, evaluate, gen_data, load_checkpoint, load_config, parse_usize_list, read_clip,
    read_model, reconstruct, train, write_config_echo, write_frames, write_model, write_report, CliError, Metric,
};
use s3_core::extraction::posed_ground_truth_model;

#[derive(Parser)]
#[command(name = "s3", version, about = "Animatable character reconstruction from simulated LiDAR and depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of posed, sensed characters.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a field on a dataset; writes checkpoint.s3f and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Extract an animatable model for one scene.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        /// Write the analytic model of the scene instead.
        #[arg(long, conflicts_with = "checkpoint")]
        ground_truth: bool,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        iso: Option<f64>,
    },
    /// Retarget a model to the frames of a clip.
    Animate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// Clip frames to export, comma-separated; all when omitted.
        #[arg(long)]
        frames: Option<String>,
    },
    /// Score a model against the scene's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "chamfer,p2s,normal,mpjpe")]
        metrics: String,
        /// Retarget frame offsets, comma-separated.
        #[arg(long)]
        frames: Option<String>,
    },
    /// Train and score every configured variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        iso: Option<f64>,
    },
}

fn config(common: &Common) -> Result<ExperimentConfig, CliError> {
    load_config(common.config.as_deref())
}

fn checked(cfg: ExperimentConfig) -> Result<ExperimentConfig, CliError> {
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = config(&common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let records = gen_data(&checked(cfg)?, &common.out)?;
            println!("{} scenes written to {}", records.len(), common.out.display());
        }
        Command::Train { common, dataset } => {
            let mut cfg = config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let out = train(&checked(cfg)?, &dataset, &common.out)?;
            if let Some(last) = out.history.last() {
                println!("step {} L_total {}", last.step, last.parts.total);
            }
        }
        Command::Reconstruct { common, scene, checkpoint, ground_truth, resolution, iso } => {
            let mut cfg = config(&common)?;
            if let Some(r) = resolution {
                cfg.extract.resolution = r;
            }
            if let Some(i) = iso {
                cfg.extract.iso = i;
            }
            let cfg = checked(cfg)?;
            let s = Scene::read(&scene)?;
            let model = match (&checkpoint, ground_truth) {
                (_, true) => posed_ground_truth_model(&s.character, &s.pose, cfg.extract.resolution)?,
                (Some(c), false) => reconstruct(&load_checkpoint(c)?, &s, cfg.extract.resolution, cfg.extract.iso)?,
                (None, false) => return Err(CliError::Validation("need --checkpoint or --ground-truth".into())),
            };
            write_model(&model, &common.out)?;
            write_config_echo(&cfg, &common.out)?;
            println!("{} vertices, {} faces", model.mesh().vertices().len(), model.mesh().faces().len());
        }
        Command::Animate { common, model, clip, frames } => {
            let cfg = checked(config(&common)?)?;
            let frames = frames.as_deref().map(parse_usize_list).transpose()?;
            let meshes = animate(&read_model(&model)?, &read_clip(&clip)?, frames.as_deref())?;
            write_frames(&meshes, &common.out)?;
            write_config_echo(&cfg, &common.out)?;
            println!("{} frames written", meshes.len());
        }
        Command::Eval { common, pred, scene, metrics, frames } => {
            let mut cfg = config(&common)?;
            if let Some(s) = common.seed {
                cfg.metrics.seed = s;
            }
            if let Some(f) = frames {
                cfg.metrics.offsets = parse_usize_list(&f)?;
            }
            let cfg = checked(cfg)?;
            let metrics = Metric::parse_list(&metrics)?;
            let rep = evaluate(&read_model(&pred)?, &Scene::read(&scene)?, &metrics, &cfg.metrics)?;
            write_report(&rep, &common.out)?;
            write_config_echo(&cfg, &common.out)?;
            let mut text = Vec::new();
            rep.write_text(&mut text)?;
            print!("{}", String::from_utf8_lossy(&text));
        }
        Command::Ablate { common, dataset, resolution, iso } => {
            let mut cfg = config(&common)?;
            if let Some(s) = common.seed {
                cfg.ablation.seeds = vec![s];
            }
            if let Some(r) = resolution {
                cfg.ablation.resolution = r;
            }
            if let Some(i) = iso {
                cfg.extract.iso = i;
            }
            let cfg = checked(cfg)?;
            let scenes = read_dataset(&dataset)?;
            let rows = ablate_with(&cfg, &scenes, |r| eprintln!("{} seed {}: chamfer {} cm", r.variant, r.seed, r.scores.chamfer_cm))?;
            write_config_echo(&cfg, &common.out)?;
            let csv = ablation_csv(&rows);
            let path = common.out.join("ablation.csv");
            std::fs::write(&path, &csv).map_err(|e| CliError::io(Path::new(&path), e))?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
