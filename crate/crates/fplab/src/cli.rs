//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fplab_core::psg::PoisonGenerator;

use crate::config::{parse_csv_list, ExperimentConfig, SweepParam, SweepSpec};
use crate::dataset::export_dataset;
use crate::error::{HarnessError, Result};
use crate::experiment::run_experiment;
use crate::grid::{default_checkpoints, export_sample_grid, save_png, train_checkpoints};
use crate::io::{load_generator, save_generator};

#[derive(Debug, Parser)]
#[command(name = "fplab", version, about = "Federated poisoning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured dataset's train/test splits as PNG folders.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment into a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment per (value, seed) and aggregate the results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render charts for a run or sweep directory.
    Plot { dir: PathBuf },
    /// Tile generator samples, one row per checkpoint.
    Grid {
        /// Train checkpoints from this config's generator settings.
        #[arg(long, conflicts_with = "generators")]
        config: Option<PathBuf>,
        /// Comma-separated saved generators to use instead of training.
        #[arg(long)]
        generators: Option<String>,
        /// Comma-separated iteration counts; default four even steps.
        #[arg(long)]
        checkpoints: Option<String>,
        #[arg(long, default_value_t = 8)]
        per_checkpoint: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a run's summary against its round log.
    Check { dir: PathBuf },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.federation.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Executes a parsed command, printing progress to stdout.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = match config {
                Some(p) => load_config(&p, seed)?,
                None => {
                    let mut cfg = ExperimentConfig::default();
                    cfg.federation.seed = seed.unwrap_or(0);
                    cfg
                }
            };
            let (train, test, warnings) = cfg.load_data()?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            let a = export_dataset(&train, &out.join("train"))?;
            let b = export_dataset(&test, &out.join("test"))?;
            println!("wrote {} train and {} test images to {}", a.files.len(), b.files.len(), out.display());
        }
        Command::Run { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let s = run_experiment(&cfg, &dir)?;
            println!("{}\n{}", crate::experiment::RunSummary::CSV_HEADER, s.csv_row());
        }
        Command::Sweep { config, param, values, seeds, out } => {
            let cfg = load_config(&config, None)?;
            let spec = SweepSpec {
                param: param.parse::<SweepParam>()?,
                values: parse_csv_list(&values, "value")?,
                seeds: parse_csv_list(&seeds, "seed")?,
            };
            let dir = out.unwrap_or_else(|| cfg.output_dir.join(format!("sweep_{}", spec.param.name())));
            let report = crate::sweep::run_sweep(&spec, &cfg, &dir)?;
            print!("{}", std::fs::read_to_string(dir.join(crate::sweep::SWEEP_TABLE)).unwrap_or_default());
            let failed: Vec<_> = report.failures().collect();
            if !failed.is_empty() {
                for f in &failed {
                    eprintln!("run {}={} seed {} failed: {}", report.param, f.value, f.seed, f.result.as_ref().unwrap_err());
                }
                return Err(HarnessError::Runtime(format!("{} of {} runs failed", failed.len(), report.runs.len())));
            }
        }
        Command::Plot { dir } => {
            for p in crate::plot::emit_plots(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::Grid { config, generators, checkpoints, per_checkpoint, seed, out } => {
            std::fs::create_dir_all(&out).map_err(HarnessError::io(&out))?;
            let gens: Vec<PoisonGenerator> = match (config, generators) {
                (_, Some(list)) => {
                    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|p| load_generator(Path::new(p))).collect::<Result<_>>()?
                }
                (Some(path), None) => {
                    let cfg = load_config(&path, None)?;
                    let points = match checkpoints {
                        Some(c) => parse_csv_list(&c, "checkpoint")?,
                        None => default_checkpoints(cfg.psg.iterations, 4),
                    };
                    let gens = train_checkpoints(&cfg, &points)?;
                    for (g, n) in gens.iter().zip(&points) {
                        save_generator(&out.join(format!("generator_{n}.fplb")), g)?;
                    }
                    gens
                }
                (None, None) => return Err(HarnessError::Validation("grid needs --config or --generators".into())),
            };
            let img = export_sample_grid(&gens, per_checkpoint, seed)?;
            let path = out.join("grid.png");
            save_png(&img, &path)?;
            println!("{}", path.display());
        }
        Command::Check { dir } => {
            let report = crate::check::check_run(&dir)?;
            if !report.ok() {
                return Err(HarnessError::Runtime(format!("summary mismatch: {}", report.mismatches.join("; "))));
            }
            println!("ok: {}", report.stored.csv_row());
        }
    }
    Ok(())
}
