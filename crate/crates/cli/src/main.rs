//! `ugnn`: train, evaluate, and run the graph-bottleneck segmentation
//! network, generate synthetic datasets, and produce the distortion
//! ablation report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ugnn_cli::config::{LossKind, RunConfig};
use ugnn_cli::eval::cmd_eval;
use ugnn_cli::predict::cmd_predict;
use ugnn_cli::report::{cmd_report, BenchmarkSettings};
use ugnn_cli::train::cmd_train;
use ugnn_core::data;
use ugnn_core::model::Variant;
use ugnn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ugnn", version, about = "Graph-bottleneck semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and/or flags.
    Train {
        /// Flat key-value config file (dotted keys, `model.depth = 4`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training dataset manifest (overrides data.train_manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory for checkpoint and logs (overrides out.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["unet_gnn", "unet_baseline"])]
        variant: Option<String>,
        #[arg(long, value_parser = ["ce", "gwd"])]
        loss: Option<String>,
        /// Cost-matrix file for the gwd loss.
        #[arg(long)]
        cost_matrix: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint over a manifest and print/write the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for eval_report.json (report prints to stdout anyway).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict paletted PNG masks for image files.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-class probability maps.
        #[arg(long)]
        probs: bool,
        /// Input image files.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Run the fisheye ablation benchmark (unet_gnn vs unet_baseline).
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate a synthetic shapes dataset (PNG images, masks, manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Apply an equidistant fisheye warp with this focal-like scale.
        #[arg(long)]
        fisheye: Option<f64>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 3,
        Error::Format(_) => 4,
        Error::Shape(_) => 5,
        Error::State(_) => 6,
        Error::Degenerate(_) => 7,
        Error::Train(_) => 8,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            manifest,
            out,
            variant,
            loss,
            cost_matrix,
            epochs,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = manifest {
                cfg.train_manifest = Some(m);
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(v) = variant {
                cfg.model.variant = Variant::parse(&v)?;
            }
            if let Some(l) = loss {
                cfg.loss = LossKind::parse(&l)?;
            }
            if let Some(cm) = cost_matrix {
                cfg.cost_matrix = Some(cm);
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let outcome = cmd_train(cfg)?;
            if let Some(stats) = outcome.final_stats {
                println!("{}", stats.log_line());
            }
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("log:        {}", outcome.log_path.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let outcome = cmd_eval(&checkpoint, &manifest, out.as_deref())?;
            print!("{}", outcome.report.render_text());
            if let Some(path) = outcome.json_path {
                println!("report: {}", path.display());
            }
            Ok(())
        }
        Command::Predict {
            checkpoint,
            out,
            probs,
            images,
        } => {
            let outcome = cmd_predict(&checkpoint, &images, &out, probs)?;
            for p in &outcome.written {
                println!("wrote {}", p.display());
            }
            for (path, err) in &outcome.failures {
                eprintln!("failed {}: {err}", path.display());
            }
            if let Some((_, first)) = outcome.failures.first() {
                return Err(Error::Data(format!(
                    "{} of {} inputs failed; first failure: {first}",
                    outcome.failures.len(),
                    outcome.failures.len() + outcome.written.len()
                )));
            }
            Ok(())
        }
        Command::Report { out, seed, epochs } => {
            let mut settings = BenchmarkSettings::default();
            if let Some(s) = seed {
                settings.seed = s;
            }
            if let Some(e) = epochs {
                settings.epochs = e;
            }
            let (report, path) = cmd_report(&out, settings)?;
            println!(
                "unet_gnn macro mIoU      {:.4}",
                report.unet_gnn.macro_miou
            );
            println!(
                "unet_baseline macro mIoU {:.4}",
                report.unet_baseline.macro_miou
            );
            println!("observed delta           {:+.4}", report.macro_miou_delta);
            println!("report: {}", path.display());
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            count,
            size,
            classes,
            fisheye,
        } => {
            let mut samples = data::synth_shapes(seed, count, size, classes)?;
            let mut ignore = None;
            if let Some(f) = fisheye {
                let params = data::FisheyeParams::centered(size, size, f as ugnn_core::Real);
                samples = samples
                    .iter()
                    .map(|s| data::fisheye_warp(s, &params))
                    .collect::<Result<_>>()?;
                ignore = Some(255);
            }
            let manifest = data::write_dataset(&out, &samples, classes, &[], ignore)?;
            println!("manifest: {}", manifest.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
