use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use hiermine::data::manifest::{load_manifest, save_manifest};
use hiermine::data::{generate_synthetic, SyntheticConfig};
use hiermine::evaluation::{self, LocalizationCriterion, DEFAULT_BIN_THRESHOLD};
use hiermine::pipeline::{
    self, ablation, load_checkpoint, load_config_file, ExperimentConfig, Split, TrainConfig, SEED_ENV,
};

#[derive(Parser)]
#[command(name = "hiermine", version, about = "Hierarchical attention mining for weakly-supervised localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes <out>/checkpoint and <out>/loss_log.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine the box masks of a training manifest with a separately trained network.
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BIN_THRESHOLD)]
        bin_threshold: f64,
    },
    /// Run the ablation lattice described by an experiment config and write a CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
        tiou: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5")]
        tior: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_BIN_THRESHOLD)]
        bin_threshold: f64,
        #[arg(long)]
        dump_heatmaps: Option<PathBuf>,
        /// Report CSV path; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic dataset as a manifest plus HTSR images.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 0.1)]
        annotated_fraction: f64,
        #[arg(long, default_value_t = 0.6)]
        positive_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v}"))?)),
        Err(_) => Ok(None),
    }
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = load_config_file(&config)?;
            let cfg = cfg.with_seed_override()?;
            let samples = load_manifest(&data).with_context(|| format!("loading {}", data.display()))?;
            let outcome = pipeline::train(&samples, &cfg, Some(&out))?;
            let last = outcome.log.last().expect("at least one step");
            println!(
                "trained {} steps; final total loss {} (l_ab {})",
                last.step, last.breakdown.total, last.breakdown.l_ab
            );
        }
        Command::Refine {
            checkpoint,
            data,
            out,
            bin_threshold,
        } => {
            let (model, manifest) = load_checkpoint(&checkpoint)?;
            let samples = load_manifest(&data)?;
            let refined = pipeline::self_refine(
                &samples,
                Split::Train,
                &model,
                manifest.config.ablation_flags.arch(),
                bin_threshold,
            )?;
            let n: usize = refined.iter().map(|s| s.refined.len()).sum();
            let narrowed = refined
                .iter()
                .flat_map(|s| &s.refined)
                .filter(|r| r.provenance == hiermine::data::Provenance::RefinedIntersection)
                .count();
            save_manifest(&out, &refined)?;
            println!("refined {narrowed} of {n} annotated masks -> {}", out.display());
        }
        Command::Ablate { config, out } => {
            let mut cfg: ExperimentConfig = load_config_file(&config)?;
            if let Some(seed) = seed_override()? {
                cfg.train.seed = seed;
            }
            let results = ablation::run_ablation(&cfg)?;
            let csv = ablation::results_csv(&results);
            write_output(&out, &csv)?;
            print!("{csv}");
        }
        Command::Eval {
            checkpoint,
            data,
            tiou,
            tior,
            bin_threshold,
            dump_heatmaps,
            report,
        } => {
            let (model, manifest) = load_checkpoint(&checkpoint)?;
            let samples = load_manifest(&data)?;
            let mut criteria = Vec::new();
            for t in tiou {
                criteria.push(LocalizationCriterion::iou(t)?);
            }
            for t in tior {
                criteria.push(LocalizationCriterion::ior(t)?);
            }
            if criteria.is_empty() {
                bail!("no localization criteria given");
            }
            let rep = evaluation::evaluate(
                &model,
                manifest.config.ablation_flags.arch(),
                &samples,
                &criteria,
                bin_threshold,
                dump_heatmaps.as_deref(),
            )?;
            let csv = rep.to_csv();
            match report {
                Some(path) => write_output(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::GenerateData {
            out,
            count,
            annotated_fraction,
            positive_fraction,
            seed,
        } => {
            let cfg = SyntheticConfig {
                count,
                annotated_fraction,
                positive_fraction,
                seed: seed_override()?.unwrap_or(seed),
                ..SyntheticConfig::default()
            };
            let samples = generate_synthetic(&cfg)?;
            save_manifest(&out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
