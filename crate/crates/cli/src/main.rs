use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use snarf::eval::{evaluate, render_loaded, run_experiment, train_model, REPORT_CSV_HEADER};
use snarf::simdata::{generate_dataset, AnyDataset, ExperimentConfig, Split};
use snarf::train::{ArticulatedModel, LoadedModel};

/// Articulated implicit shapes with differentiable forward skinning.
#[derive(Parser)]
#[command(name = "snarf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train and test splits into a directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the forward model (or the backward-skinning baseline).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.snrd (and optionally test.snrd for validation).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        baseline: bool,
    },
    /// IoU of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// A .snrd file or a directory holding test.snrd.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: data, both models, reports, images, sweep.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Occupancy image of a checkpoint at a pose (joint angles in degrees).
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("rejected config {}", path.display()))
}

fn dataset_path(path: &Path, split: Split) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{}.snrd", split.name()))
    } else {
        path.to_path_buf()
    }
}

fn load_data(path: &Path) -> Result<AnyDataset> {
    AnyDataset::load(path).with_context(|| format!("cannot read dataset {}", path.display()))
}

fn parse_pose(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad angle {s:?} in --pose")))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let config = load_config(&config)?;
            for split in [Split::Train, Split::Test] {
                let data = generate_dataset(&config, split)?;
                let path = data.save(&out, split.name())?;
                log::info!("wrote {} ({} frames)", path.display(), data.manifest().frame_count);
            }
        }
        Command::Train {
            config,
            data,
            out,
            baseline,
        } => {
            let config = load_config(&config)?;
            let train = load_data(&dataset_path(&data, Split::Train))?;
            if train.manifest().d != config.dimension() || train.manifest().n_b != config.n_bones() {
                bail!("dataset shape does not match config (d and bone count must agree)");
            }
            let test_path = data.join("test.snrd");
            let validation = if data.is_dir() && test_path.exists() {
                Some(load_data(&test_path)?)
            } else {
                None
            };
            let validation = validation.map(|v| match v {
                AnyDataset::Stick(d) => AnyDataset::Stick(d.head(config.validation_frames)),
                AnyDataset::Capsule(d) => AnyDataset::Capsule(d.head(config.validation_frames)),
            });
            let (model, metrics) = train_model(&config, &train, validation.as_ref(), baseline, Some(&out))?;
            let ckpt = match &model {
                LoadedModel::Forward(m) => ArticulatedModel::<2>::to_checkpoint(m)?,
                LoadedModel::Baseline(m) => ArticulatedModel::<2>::to_checkpoint(m)?,
            };
            let mut bytes = Vec::new();
            snarf::nn::write_checkpoint(&mut bytes, &ckpt)?;
            std::fs::write(out.join("model.snrf"), bytes)?;
            if let Some(last) = metrics.last() {
                println!("epoch {}: loss_bce {}", last.epoch, last.loss_bce);
            }
        }
        Command::Eval { model, data, out } => {
            let model = LoadedModel::load(&model).with_context(|| format!("cannot read checkpoint {}", model.display()))?;
            let data = load_data(&dataset_path(&data, Split::Test))?;
            let report = evaluate(&model, &data)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            let name = match model {
                LoadedModel::Forward(_) => "forward",
                LoadedModel::Baseline(_) => "baseline",
            };
            std::fs::write(
                out.join("report.csv"),
                format!("{REPORT_CSV_HEADER}\n{}", report.csv_rows(name)),
            )?;
            println!("iou_bbox {} iou_surface {}", report.iou_bbox, report.iou_surface);
        }
        Command::Experiment { config, out } => {
            let config = load_config(&config)?;
            let s = run_experiment(&config, &out)?;
            println!(
                "forward iou_bbox {} baseline iou_bbox {}",
                s.forward.iou_bbox, s.baseline.iou_bbox
            );
        }
        Command::Render {
            model,
            pose,
            out,
            resolution,
        } => {
            let model = LoadedModel::load(&model).with_context(|| format!("cannot read checkpoint {}", model.display()))?;
            render_loaded(&model, &parse_pose(&pose)?, resolution, &out)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    snarf::configure_threads_from_env();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
