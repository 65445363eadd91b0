//! Command line for the refinement pipeline: dataset synthesis, training,
//! single-frame inference, evaluation, and the attention ablations.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use georefine::checkpoint::TrainState;
use georefine::config::TrainConfig;
use georefine::dataset::{Dataset, Split};
use georefine::grid::ImageExtent;
use georefine::infer::{evaluate, evaluate_coarse, infer, mean_reports, InferOptions};
use georefine::metrics::MetricReport;
use georefine::model::Variant;
use georefine::pfm::write_pfm;
use georefine::scene::{make_dataset, DatasetParams};
use georefine::train::{train, write_trace};

#[derive(Parser)]
#[command(
    name = "georefine",
    about = "Train and run a multi-patch transformer that refines coarse \
             depth and surface normals against synthetic ground truth"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of rendered frames with degraded coarse inputs.
    Gen {
        /// Number of scenes (split 80/10/10 into train/val/test).
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for rasters and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a refiner and write checkpoints, the loss trace, and a report.
    Train {
        /// `key = value` config file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine one frame from a dataset and write the result as PFMs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest path of the dataset holding the frame.
        #[arg(long)]
        dataset: PathBuf,
        /// Frame id from the manifest.
        #[arg(long)]
        id: String,
        /// Tile stride in pixels; 0 = tile size (non-overlapping).
        #[arg(long, default_value_t = 0)]
        stride: usize,
        #[arg(long, default_value_t = 16384)]
        token_budget: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or the coarse baseline) on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Score the coarse inputs themselves instead of a checkpoint.
        #[arg(long)]
        baseline: bool,
        /// Directory for the report file; defaults to stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the full model against the no-cross-attention and
    /// patch-local-coordinate variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated training seeds to average over.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Builds the effective training config: defaults, then the file, then flags.
fn load_config(
    config: Option<&Path>,
    dataset: Option<&Path>,
    seed: Option<u64>,
    iterations: Option<usize>,
) -> Result<TrainConfig, CliError> {
    let mut cfg = match config {
        Some(path) => TrainConfig::from_file(path).map_err(usage)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = dataset {
        cfg.dataset = d.to_path_buf();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(i) = iterations {
        cfg.iterations = i;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn split_report(name: &str, report: Option<&MetricReport>) -> String {
    match report {
        Some(r) => format!("## {name} metrics\n{}\n", r.to_text()),
        None => format!("## {name} metrics\n(split empty)\n\n"),
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { count, height, width, seed, out } => {
            if count == 0 {
                return Err(CliError::Usage("--count must be at least 1".into()));
            }
            if height < 16 || width < 16 || height % 4 != 0 || width % 4 != 0 {
                return Err(CliError::Usage(format!(
                    "extent {height}x{width} must be at least 16x16 and divisible by 4"
                )));
            }
            let params = DatasetParams {
                scenes: count,
                extent: ImageExtent { h: height, w: width },
                seed,
                ..DatasetParams::desk(count, seed)
            };
            let manifest = make_dataset(&params, &out).map_err(runtime)?;
            println!("wrote {count} frames; manifest at {}", manifest.display());
            Ok(())
        }

        Command::Train { config, dataset, seed, iterations, out } => {
            let cfg = load_config(
                config.as_deref(),
                dataset.as_deref(),
                seed,
                iterations,
            )?;
            let outcome = train(&cfg, Variant::full(), &out).map_err(runtime)?;
            write_trace(&out.join("trace.csv"), &outcome.trace).map_err(runtime)?;

            let ds = Dataset::load(&cfg.dataset).map_err(runtime)?;
            let opts = InferOptions::default();
            let mut scored = Vec::new();
            for split in [Split::Val, Split::Test] {
                let report = if ds.split_indices(split).is_empty() {
                    None
                } else {
                    Some(evaluate(&outcome.state.params, &ds, split, &opts).map_err(runtime)?)
                };
                scored.push((split, report));
            }

            let mut report = format!(
                "# training run\nwall_seconds = {:.1}\niterations_run = {}\n\
                 final_checkpoint = {}\n\n## config\n{}\n",
                outcome.wall_seconds,
                outcome.trace.len(),
                outcome.checkpoints.last().expect("final checkpoint").display(),
                cfg.to_text(),
            );
            for (split, r) in &scored {
                report.push_str(&split_report(split.name(), r.as_ref()));
            }
            write_text(&out.join("report.txt"), &report)?;
            match &scored[1].1 {
                Some(r) => println!(
                    "trained {} iterations in {:.1}s; test absrel {:.4}, normal mean {:.2} deg",
                    outcome.trace.len(),
                    outcome.wall_seconds,
                    r.absrel,
                    r.normal_mean
                ),
                None => println!(
                    "trained {} iterations in {:.1}s",
                    outcome.trace.len(),
                    outcome.wall_seconds
                ),
            }
            Ok(())
        }

        Command::Infer { checkpoint, dataset, id, stride, token_budget, out } => {
            let state = TrainState::load(&checkpoint).map_err(runtime)?;
            let ds = Dataset::load(&dataset).map_err(runtime)?;
            let index = ds
                .records
                .iter()
                .position(|r| r.id == id)
                .ok_or_else(|| usage(format!("frame id {id:?} not in the manifest")))?;
            let frame = ds.load_frame(index).map_err(runtime)?;
            let opts = InferOptions {
                stride_y: stride,
                stride_x: stride,
                token_budget,
                ..InferOptions::default()
            };
            let result = infer(
                &state.params,
                &frame.gt.rgb,
                &frame.coarse_depth,
                &frame.coarse_normal,
                &opts,
            )
            .map_err(runtime)?;
            std::fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            let depth_path = out.join(format!("{id}_refined_depth.pfm"));
            let normal_path = out.join(format!("{id}_refined_normal.pfm"));
            write_pfm(&depth_path, &result.depth).map_err(runtime)?;
            write_pfm(&normal_path, &result.normal).map_err(runtime)?;
            println!(
                "refined {id} ({} tiles{}); wrote {} and {}",
                result.tiles.len(),
                if result.row_banded { ", row-banded" } else { "" },
                depth_path.display(),
                normal_path.display(),
            );
            Ok(())
        }

        Command::Eval { checkpoint, dataset, split, baseline, out } => {
            let split = Split::parse(&split)
                .ok_or_else(|| usage(format!("unknown split {split:?}")))?;
            if baseline && checkpoint.is_some() {
                return Err(usage("--baseline and --checkpoint are mutually exclusive"));
            }
            let ds = Dataset::load(&dataset).map_err(runtime)?;
            let opts = InferOptions::default();
            let (label, report) = if baseline {
                ("coarse baseline".to_string(), evaluate_coarse(&ds, split, &opts).map_err(runtime)?)
            } else {
                let path = checkpoint
                    .ok_or_else(|| usage("--checkpoint is required unless --baseline is set"))?;
                let state = TrainState::load(&path).map_err(runtime)?;
                (
                    path.display().to_string(),
                    evaluate(&state.params, &ds, split, &opts).map_err(runtime)?,
                )
            };
            let text = format!(
                "# evaluation\nsubject = {label}\nsplit = {}\nframes = {}\n\n{}",
                split.name(),
                ds.split_indices(split).len(),
                report.to_text()
            );
            print!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)
                    .map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
                write_text(&dir.join("eval_report.txt"), &text)?;
            }
            Ok(())
        }

        Command::Ablate { config, dataset, seeds, iterations, out } => {
            let base = load_config(config.as_deref(), Some(&dataset), None, iterations)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|_| usage(format!("bad --seeds list {seeds:?}")))?;
            if seeds.is_empty() {
                return Err(usage("--seeds must name at least one seed"));
            }
            let ds = Dataset::load(&base.dataset).map_err(runtime)?;
            let eval_split = if ds.split_indices(Split::Val).is_empty() {
                return Err(runtime("ablation needs a non-empty val split"));
            } else {
                Split::Val
            };

            let mut summary = String::from("variant      absrel       ce\n");
            for name in ["full", "no-cross", "local-rope"] {
                let variant = Variant::from_name(name).map_err(runtime)?;
                let mut reports = Vec::new();
                for &seed in &seeds {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    let run_dir = out.join(format!("{name}_seed{seed}"));
                    let outcome = train(&cfg, variant, &run_dir).map_err(runtime)?;
                    write_trace(&run_dir.join("trace.csv"), &outcome.trace)
                        .map_err(runtime)?;
                    let opts = InferOptions { variant, ..InferOptions::default() };
                    reports.push(
                        evaluate(&outcome.state.params, &ds, eval_split, &opts)
                            .map_err(runtime)?,
                    );
                }
                let mean = mean_reports(&reports);
                write_text(
                    &out.join(format!("report_{name}.txt")),
                    &format!(
                        "# ablation variant {name}\nseeds = {seeds:?}\n\
                         iterations = {}\nsplit = {}\n\n{}",
                        base.iterations,
                        eval_split.name(),
                        mean.to_text()
                    ),
                )?;
                summary.push_str(&format!(
                    "{name:<12} {:<12.6} {:<12.6}\n",
                    mean.absrel, mean.ce
                ));
            }
            write_text(&out.join("ablation.txt"), &summary)?;
            print!("{summary}");
            Ok(())
        }
    }
}
