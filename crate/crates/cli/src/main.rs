use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use metadm::datasets::{ingest_folder, IngestOptions, MANIFEST_FILE};
use metadm::pipeline::{
    run_ablation, run_eval, run_generate, run_synth, run_train_diffusion, run_train_fsl,
    AblationAxis, AblationGrid, FslMethod, RunConfig, AUGMENTED_DIR, DENOISER_FILE,
    EMBEDDER_FILE,
};
use metadm::{Error, Result};

/// Diffusion pseudo-samples for episodic few-shot learning.
///
/// Configuration is a TOML file with sections [dataset], [diffusion],
/// [metadm] and [fsl]; omitted keys take their defaults (see `metadm config`).
/// Precedence: defaults < config file < METADM_OUTPUT_DIR < flags.
#[derive(Parser, Debug)]
#[command(name = "metadm", version)]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file and the environment.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the fully resolved configuration as TOML.
    Config,
    /// Render the synthetic shapes dataset.
    Synth,
    /// Convert a directory-per-class image folder into a dataset.
    Ingest {
        /// Folder with one sub-directory per class.
        #[arg(long)]
        src: PathBuf,
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
        /// Square side length of the resized images.
        #[arg(long, default_value_t = 32)]
        size: u32,
    },
    /// Train the denoiser on the training split.
    TrainDiffusion,
    /// Build the augmented training set.
    Generate {
        /// Denoiser checkpoint (default: <output_dir>/diffusion/denoiser.mddn).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Episodic Prototypical-Network training.
    TrainFsl {
        /// Augmented manifest (default: <output_dir>/augmented/manifest.json).
        #[arg(long)]
        augmented: Option<PathBuf>,
        /// Train on the original split only, ignoring generated data.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate an embedding checkpoint on the test split.
    Eval {
        /// Embedding checkpoint (default: <output_dir>/fsl/embedder.mdem).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Support shots per way; repeat for several (default: fsl.k_shot).
        #[arg(long = "shots", value_delimiter = ',')]
        shots: Vec<usize>,
    },
    /// Sweep one ablation axis through the full pipeline.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Axis values, comma separated (none for module-completeness).
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Seeds, comma separated (default: the run seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Shots evaluated for every arm, comma separated.
        #[arg(long = "shots", value_delimiter = ',')]
        shots: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    StrengthGood,
    StrengthBad,
    BadCount,
    ModuleCompleteness,
}

impl From<Axis> for AblationAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::StrengthGood => AblationAxis::StrengthGood,
            Axis::StrengthBad => AblationAxis::StrengthBad,
            Axis::BadCount => AblationAxis::BadCount,
            Axis::ModuleCompleteness => AblationAxis::ModuleCompleteness,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default().resolved(),
    };
    cfg = cfg.apply_env();
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn default_path(cfg: &RunConfig, given: &Option<PathBuf>, rel: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.output_dir.join(rel))
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml()?);
        }
        Command::Synth => {
            let ds = run_synth(&cfg)?;
            println!(
                "dataset {}: {} classes, {} images, digest {}",
                ds.root.display(),
                ds.manifest.classes.len(),
                ds.manifest.image_count(),
                ds.manifest.digest
            );
        }
        Command::Ingest { src, out, size } => {
            let opts = IngestOptions {
                size: [*size, *size],
                seed: cfg.seed,
                ..IngestOptions::default()
            };
            let ds = ingest_folder(src, out, &opts)?;
            println!(
                "ingested {} classes, {} images into {}",
                ds.manifest.classes.len(),
                ds.manifest.image_count(),
                out.join(MANIFEST_FILE).display()
            );
        }
        Command::TrainDiffusion => {
            let out = run_train_diffusion(&cfg)?;
            let first = out.epoch_losses.first().copied().unwrap_or(f64::NAN);
            let last = out.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "denoiser {} ({} epochs, loss {first:.5} -> {last:.5}), digest {}",
                out.checkpoint.display(),
                out.epoch_losses.len(),
                out.digest
            );
        }
        Command::Generate { checkpoint } => {
            let ckpt = default_path(&cfg, checkpoint, DENOISER_FILE);
            let out = run_generate(&cfg, &ckpt)?;
            println!(
                "original {} good {} bad {} fake_classes {}",
                out.original, out.good, out.bad, out.fake_classes
            );
            println!("manifest {} digest {}", out.manifest.display(), out.digest);
        }
        Command::TrainFsl {
            augmented,
            baseline,
        } => {
            if *baseline {
                cfg.fsl.method = FslMethod::Baseline;
            }
            let aug = match cfg.fsl.method {
                FslMethod::Baseline => None,
                FslMethod::Metadm => Some(default_path(
                    &cfg,
                    augmented,
                    &format!("{AUGMENTED_DIR}/{MANIFEST_FILE}"),
                )),
            };
            let out = run_train_fsl(&cfg, aug.as_deref())?;
            let best = out.log.best_val();
            println!(
                "embedder {} ({} episodes, {} fake ways sampled), digest {}",
                out.checkpoint.display(),
                out.log.losses.len(),
                out.log.total_fake_ways(),
                out.digest
            );
            if let Some(b) = best {
                println!(
                    "best val accuracy {:.4} +- {:.4} at episode {}",
                    b.mean_accuracy, b.ci95_halfwidth, b.episode
                );
            }
        }
        Command::Eval { checkpoint, shots } => {
            let ckpt = default_path(&cfg, checkpoint, EMBEDDER_FILE);
            let shots = if shots.is_empty() {
                vec![cfg.fsl.k_shot]
            } else {
                shots.clone()
            };
            for k in shots {
                let r = run_eval(&cfg, &ckpt, Some(k))?;
                println!(
                    "{}-way {}-shot: {:.4} +- {:.4} over {} episodes",
                    r.n_way, r.k_shot, r.mean_accuracy, r.ci95_halfwidth, r.n_episodes
                );
            }
        }
        Command::Ablate {
            axis,
            values,
            seeds,
            shots,
        } => {
            let mut grid = AblationGrid::new((*axis).into(), values.clone(), cfg.clone());
            if !seeds.is_empty() {
                grid.seeds = seeds.clone();
            }
            grid.eval_shots = shots.clone();
            let out = run_ablation(&grid)?;
            for r in &out.rows {
                match r.mean_accuracy {
                    Some(m) => println!(
                        "{} seed {} {}-shot: {m:.4} +- {:.4}",
                        r.arm,
                        r.seed,
                        r.k_shot,
                        r.ci95_halfwidth.unwrap_or(f64::NAN)
                    ),
                    None => println!("{} seed {}: {}", r.arm, r.seed, r.status),
                }
            }
            println!("{}", out.csv_path.display());
            println!("{}", out.plot_path.display());
            if out.rows.iter().any(|r| r.mean_accuracy.is_none()) {
                return Err(Error::Insufficient("some ablation arms failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
