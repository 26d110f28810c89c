//! Command-line surface for the few-shot OOD detection pipeline.
//!
//! Exit codes: 0 success, 1 validation error, 2 data error, 3 numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oodsynth::config::RunConfig;
use oodsynth::data::{convert_cifar, generate_synthetic, CifarVariant, SyntheticConfig};
use oodsynth::error::Error;
use oodsynth::pipeline;

#[derive(Parser)]
#[command(
    name = "oodsynth",
    about = "Few-shot out-of-distribution detection with synthesized outlier supervision",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the run config file. Flags win over the
/// file; the resolved result is written beside the command's outputs.
#[derive(Args, Clone)]
struct Overrides {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta_loss: Option<f64>,
    #[arg(long)]
    beta_ctx: Option<f64>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(run_id) = &self.run_id {
            cfg.run_id = run_id.clone();
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(shots) = self.shots {
            cfg.episode.shots = shots;
        }
        if let Some(lr) = self.learning_rate {
            cfg.train.learning_rate = lr;
        }
        if let Some(batch) = self.batch_size {
            cfg.train.batch_size = batch;
        }
        if let Some(beta) = self.beta_loss {
            cfg.train.beta_loss = beta;
        }
        if let Some(beta) = self.beta_ctx {
            cfg.context.beta_ctx = beta;
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train prompt contexts on a sampled few-shot episode.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Dump synthesized outliers with provenance as JSON lines.
        #[arg(long)]
        dump_outliers: Option<PathBuf>,
    },
    /// Score the configured test sets with a trained checkpoint.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint file; defaults to <run dir>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export foreground masks and score heatmaps for images.
    Mask {
        #[command(flatten)]
        overrides: Overrides,
        /// Class name the masks are computed against.
        #[arg(long)]
        class: String,
        /// Optional checkpoint with learned prompts.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image files to mask.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train and evaluate pipeline variants for comparison.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated variants; defaults to all of
        /// full,no_masking,no_synthesis,entropy_loss,topk_masking.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Retrain across neighborhood-context weights and record AUROC per value.
    SweepBeta {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated beta values; defaults to 0.0,0.1,...,0.8.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Convert CIFAR-style binary archives into the image-folder layout.
    ConvertDataset {
        /// Directory with the binary batch files.
        #[arg(long)]
        input: PathBuf,
        /// Output dataset root (manifest + class folders).
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_cifar_variant, default_value = "cifar10")]
        variant: CifarVariant,
        /// Fine-label names file (one per line); required for cifar100.
        #[arg(long)]
        class_names: Option<PathBuf>,
    },
    /// Generate the synthetic desk-scale ID/OOD datasets.
    GenSynthetic {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 3)]
        id_classes: usize,
        #[arg(long, default_value_t = 2)]
        ood_classes: usize,
        #[arg(long, default_value_t = 10)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        #[arg(long, default_value_t = 16)]
        image_px: u32,
        #[arg(long, default_value_t = 0.03)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip aligning class colors with the toy backbone's text
        /// embeddings and use a fixed hue palette instead.
        #[arg(long)]
        unaligned: bool,
        /// Run config whose (toy) backbone the colors are aligned to;
        /// defaults to the stock toy backbone.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_cifar_variant(s: &str) -> Result<CifarVariant, String> {
    match s {
        "cifar10" => Ok(CifarVariant::Cifar10),
        "cifar100" => Ok(CifarVariant::Cifar100),
        other => Err(format!("unknown variant {other:?}; expected cifar10 or cifar100")),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            overrides,
            dump_outliers,
        } => {
            let cfg = overrides.load()?;
            let artifacts = pipeline::run_train(&cfg, dump_outliers.as_deref())?;
            for (epoch, report) in artifacts.history.iter().enumerate() {
                println!(
                    "epoch {epoch}: id_loss={:.6} ood_loss={:.6} total={:.6}",
                    report.id_loss, report.ood_loss, report.total
                );
            }
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("loss history: {}", artifacts.loss_csv.display());
            Ok(())
        }
        Command::Eval {
            overrides,
            checkpoint,
        } => {
            let cfg = overrides.load()?;
            let checkpoint =
                checkpoint.unwrap_or_else(|| cfg.run_dir().join("checkpoint.json"));
            let artifacts = pipeline::run_eval(&cfg, &checkpoint)?;
            print!("{}", artifacts.table);
            println!("metrics: {}", artifacts.metrics_csv.display());
            Ok(())
        }
        Command::Mask {
            overrides,
            class,
            checkpoint,
            images,
        } => {
            let cfg = overrides.load()?;
            let artifacts = pipeline::run_mask(&cfg, &images, &class, checkpoint.as_deref())?;
            for stem in &artifacts.stems {
                println!(
                    "{}: {}_mask.png {}_heat.png {}_scores.txt",
                    artifacts.mask_dir.display(),
                    stem,
                    stem,
                    stem
                );
            }
            Ok(())
        }
        Command::Ablate {
            overrides,
            variants,
        } => {
            let cfg = overrides.load()?;
            let variants = variants.unwrap_or_else(|| {
                ["full", "no_masking", "no_synthesis", "entropy_loss", "topk_masking"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect()
            });
            let artifacts = pipeline::run_ablate(&cfg, &variants)?;
            println!("{:24}  {:>9}  {:>11}", "variant", "avg_auroc", "id_accuracy");
            for row in &artifacts.rows {
                println!(
                    "{:24}  {:>9.4}  {:>11.4}",
                    row.variant, row.average_auroc, row.id_accuracy
                );
            }
            println!("ablation table: {}", artifacts.csv.display());
            Ok(())
        }
        Command::SweepBeta { overrides, betas } => {
            let cfg = overrides.load()?;
            let betas = betas.unwrap_or_else(|| (0..=8).map(|i| i as f64 / 10.0).collect());
            let artifacts = pipeline::run_sweep_beta(&cfg, &betas)?;
            println!("{:>8}  {:>9}", "beta_ctx", "avg_auroc");
            for (beta, auroc) in &artifacts.rows {
                println!("{beta:>8.2}  {auroc:>9.4}");
            }
            println!("sweep table: {}", artifacts.csv.display());
            Ok(())
        }
        Command::ConvertDataset {
            input,
            output,
            variant,
            class_names,
        } => {
            convert_cifar(&input, &output, variant, class_names.as_deref())?;
            println!("converted dataset written to {}", output.display());
            Ok(())
        }
        Command::GenSynthetic {
            output,
            id_classes,
            ood_classes,
            train_per_class,
            test_per_class,
            image_px,
            noise,
            seed,
            unaligned,
            config,
        } => {
            let cfg = SyntheticConfig {
                id_classes,
                ood_classes,
                train_per_class,
                test_per_class,
                image_px,
                noise,
                seed,
            };
            let backbone = if unaligned {
                None
            } else {
                Some(match config {
                    Some(path) => RunConfig::load(&path)?.backbone.build()?,
                    None => oodsynth::config::BackboneConfig::default().build()?,
                })
            };
            let layout = generate_synthetic(&output, &cfg, backbone.as_ref())?;
            println!("id dataset: {}", layout.id_root.display());
            println!("ood dataset: {}", layout.ood_root.display());
            Ok(())
        }
    }
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::InputContract(_) => 1,
        Error::Data(_) | Error::Resolution { .. } | Error::Io(_) | Error::Image(_) | Error::Serde(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}
