use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcads_core::checks::run_suite;
use mcads_core::gradcheck::GradCheck;
use mcads_core::model::summarize;
use mcads_core::run::{evaluate_dirs, predict_image, train, Predictor, RunConfig};
use mcads_core::{Element, Error};

#[derive(Parser)]
#[command(name = "mcads", version, about = "Train, run and verify the MCADS segmentation network")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for patch inference and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Compute in double precision.
    #[arg(long = "f64", global = true)]
    double: bool,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write checkpoints plus a loss log.
    Train {
        /// Output directory; defaults to `train.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment an image file, or every image in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output directory; defaults to `eval.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted masks against ground truth and print a JSON report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and block.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Parameter and multiply-accumulate counts.
    Summary {
        /// Square input extent for the cost estimate.
        #[arg(long, default_value_t = 256)]
        hw: usize,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Backward(_) | Error::MissingGradient(_) => {
            EXIT_NUMERIC
        }
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads.max(1)).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(g: &Global) -> mcads_core::Result<RunConfig> {
    let mut sets = g.overrides.clone();
    if let Some(seed) = g.seed {
        sets.push(format!("train.seed={seed}"));
    }
    if g.double {
        sets.push("train.f64=true".into());
    }
    RunConfig::load(g.config.as_deref(), &sets)
}

fn run(cli: Cli) -> mcads_core::Result<u8> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Train { out } => {
            let out = out.unwrap_or_else(|| cfg.train.output_dir.clone());
            if cfg.train.f64 {
                cmd_train::<f64>(&cfg, &out)
            } else {
                cmd_train::<f32>(&cfg, &out)
            }
        }
        Command::Predict { checkpoint, input, out } => {
            let out = out.unwrap_or_else(|| cfg.eval.output_dir.clone());
            if cfg.train.f64 {
                cmd_predict::<f64>(&cfg, &checkpoint, &input, &out)
            } else {
                cmd_predict::<f32>(&cfg, &checkpoint, &input, &out)
            }
        }
        Command::Eval { pred, gt, out } => {
            let report = evaluate_dirs(&pred, &gt)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(path) = out {
                fs::write(path, &json)?;
            }
            println!("{json}");
            Ok(0)
        }
        Command::Gradcheck { inject_fault } => cmd_gradcheck(cfg.train.seed, inject_fault),
        Command::Summary { hw, json } => cmd_summary(&cfg, hw, json),
    }
}

fn cmd_train<T: Element>(cfg: &RunConfig, out: &Path) -> mcads_core::Result<u8> {
    let samples = cfg.data.load(cfg.train.seed)?;
    let mut report = |r: &mcads_core::run::StepRecord| {
        if r.step == 1 || r.step.is_multiple_of(10) {
            eprintln!("step {:>6}  epoch {:>4}  loss {:.5}", r.step, r.epoch, r.total);
        }
    };
    let trained = train::<T>(cfg, samples, Some(out), &mut report)?;
    let o = &trained.outcome;
    println!(
        "trained {} steps on {} patches ({} validation); loss {} -> {}; checkpoints in {}",
        o.steps,
        o.train_patches,
        o.val_patches,
        o.initial_loss.map_or("-".into(), |v| format!("{v:.5}")),
        o.final_loss.map_or("-".into(), |v| format!("{v:.5}")),
        out.display()
    );
    Ok(0)
}

fn cmd_predict<T: Element>(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> mcads_core::Result<u8> {
    let predictor = Predictor::<T>::load(cfg, checkpoint)?;
    let images: Vec<PathBuf> = if input.is_dir() {
        let dir = if input.join("images").is_dir() { input.join("images") } else { input.to_path_buf() };
        let mut v: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    for path in images {
        let (mask, patches) = predict_image(&predictor, &path, out, cfg.eval.threshold, cfg.eval.save_probability)?;
        println!("{}: {}x{}, {} patches, {} foreground pixels", path.display(), mask.h, mask.w, patches, mask.count());
    }
    Ok(0)
}

fn cmd_gradcheck(seed: u64, fault: bool) -> mcads_core::Result<u8> {
    let gc = GradCheck { seed, fault, ..GradCheck::default() };
    let outcomes = run_suite(gc)?;
    println!("{:<24} {:>12} {:>8} {:>7} {:>8}  result", "check", "rel_err", "tol", "coords", "skipped");
    let mut failed = 0;
    for o in &outcomes {
        let ok = o.passed();
        failed += !ok as usize;
        println!(
            "{:<24} {:>12.3e} {:>8.0e} {:>7} {:>8}  {}",
            o.name,
            o.rel_err,
            o.tol,
            o.coords,
            o.skipped,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("{} checks, {} failed", outcomes.len(), failed);
    Ok(if failed == 0 { 0 } else { EXIT_NUMERIC })
}

fn cmd_summary(cfg: &RunConfig, hw: usize, json: bool) -> mcads_core::Result<u8> {
    let s = summarize(&cfg.model, (hw, hw))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        return Ok(0);
    }
    println!("{:<24} {:>14}", "module", "parameters");
    for (name, n) in &s.modules {
        println!("{name:<24} {n:>14}");
    }
    println!("{:<24} {:>14}", "total", s.trainable);
    println!("{:<24} {:>14}", "running statistics", s.buffers);
    println!("{:<24} {:>14.3}", format!("GMACs at {hw}x{hw}"), s.macs as f64 / 1e9);
    Ok(0)
}
