use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use facekp::model::weights::save_weights;
use facekp::model::{BackboneRegistry, ModelConfig};
use facekp_cli::bench::run_bench;
use facekp_cli::config::{config_template, DetectorConfig};
use facekp_cli::detect::run_detect;
use facekp_cli::eval_cmd::{run_eval, EvalOptions};
use facekp_cli::selftest::run_selftest;
use facekp_cli::CliError;

#[derive(Parser)]
#[command(name = "facekp", version, about = "Single-stage face and landmark detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect faces in PGM/PPM images and print one JSON line per face.
    Detect {
        #[command(flatten)]
        detector: DetectorArgs,
        /// Write detections here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Time batch-1 latency against batched throughput.
    Bench {
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Input height; defaults to the input long side.
        #[arg(long)]
        height: Option<usize>,
        /// Input width; defaults to the input long side.
        #[arg(long)]
        width: Option<usize>,
    },
    /// Score detection JSON lines against ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// False-positive budgets for recall; repeatable.
        #[arg(long = "fp-budget", default_values_t = [50])]
        fp_budgets: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 100)]
        topk: usize,
    },
    /// Run the built-in invariant checks.
    Selftest {
        /// Also load and run this weight file.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write a weight file with seeded random weights.
    InitWeights {
        #[arg(long, default_value = "drnet")]
        backbone: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        num_keypoints: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print a commented configuration file with the defaults.
    ConfigTemplate,
}

#[derive(Args)]
struct DetectorArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    input_long_side: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    max_proposals: Option<usize>,
    /// Ten comma-separated floats: eyes, nose, mouth corners.
    #[arg(long, value_delimiter = ',', num_args = 10)]
    template: Option<Vec<f64>>,
    /// Worker threads (also FACEKP_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for random weights when no model is given.
    #[arg(long)]
    seed: Option<u64>,
}

impl DetectorArgs {
    fn resolve(self) -> Result<DetectorConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => DetectorConfig::from_toml_file(p)?,
            None => DetectorConfig::default(),
        };
        if self.model.is_some() {
            cfg.model = self.model;
        }
        if let Some(v) = self.backbone {
            cfg.backbone = v;
        }
        if let Some(v) = self.input_long_side {
            cfg.input_long_side = v;
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = self.nms_iou {
            cfg.nms_iou = v;
        }
        if let Some(v) = self.max_proposals {
            cfg.max_proposals = v;
        }
        if self.template.is_some() {
            cfg.template = self.template;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Detect {
            detector,
            output,
            images,
        } => {
            let cfg = detector.resolve()?;
            let det = cfg.build_detector()?;
            let threads = cfg.thread_count()?;
            let mut out: Box<dyn Write> = match &output {
                Some(p) => Box::new(BufWriter::new(
                    File::create(p).with_context(|| format!("creating {}", p.display()))?,
                )),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            let summary = run_detect(&det, cfg.input_long_side, &images, threads, &mut out, &mut io::stderr())?;
            out.flush()?;
            eprintln!(
                "{} images, {} failed, {} detections",
                summary.images, summary.failed, summary.detections
            );
            Ok(true)
        }
        Command::Bench {
            detector,
            batch,
            iters,
            height,
            width,
        } => {
            let cfg = detector.resolve()?;
            let det = cfg.build_detector()?;
            let h = height.unwrap_or(cfg.input_long_side);
            let w = width.unwrap_or(cfg.input_long_side);
            let report = run_bench(&det, h, w, batch, iters, cfg.thread_count()?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Eval {
            predictions,
            ground_truth,
            fp_budgets,
            iou,
            topk,
        } => {
            if !(iou > 0.0 && iou <= 1.0) {
                return Err(CliError::Flag {
                    flag: "--iou",
                    message: format!("must be in (0, 1], got {iou}"),
                }
                .into());
            }
            let opts = EvalOptions {
                fp_budgets,
                iou_thresh: iou,
                topk,
            };
            let report = run_eval(&predictions, &ground_truth, &opts)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Selftest { weights, json } => {
            let report = run_selftest(weights.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
            Ok(report.passed())
        }
        Command::InitWeights {
            backbone,
            seed,
            num_keypoints,
            output,
        } => {
            let cfg = ModelConfig {
                num_keypoints,
                ..ModelConfig::default()
            };
            let graph = BackboneRegistry::with_builtins().build(&backbone, &cfg)?.randomized(seed);
            std::fs::write(&output, save_weights(&graph))
                .with_context(|| format!("writing {}", output.display()))?;
            Ok(true)
        }
        Command::ConfigTemplate => {
            print!("{}", config_template());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
