use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use wish_core::data::{load_checkpoint, read_bundles_file, save_checkpoint};
use wish_core::gradcheck::run_gradcheck;
use wish_core::inference::{
    evaluate_by_id, iou_contact_baseline, load_predictions, predict, write_predictions,
};
use wish_core::synthgen::{generate_dataset, SynthConfig};
use wish_core::trainer::{pseudo_label_dump, train};
use wish_core::{Result, TrainConfig, WishError};

#[derive(Parser)]
#[command(name = "wish", version, about = "In-hand object segmentation from narration supervision")]
struct Cli {
    /// JSON config for the subcommand (SynthConfig for synth, TrainConfig for train)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only log errors
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train.jsonl and eval.jsonl
    Synth,
    /// Train a model and write its checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Per-epoch log as JSON Lines
        #[arg(long)]
        log: Option<PathBuf>,
        /// Pseudo-labels of the trained model as JSON Lines
        #[arg(long)]
        dump_labels: Option<PathBuf>,
    },
    /// Predict in-hand masks for every bundle
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score predictions against ground-truth bundles
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Predict with the IoU-contact heuristic
    Baseline {
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every gradient
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

enum Failure {
    Wish(WishError),
    /// Not caused by bad input.
    Runtime(String),
}

impl From<WishError> for Failure {
    fn from(e: WishError) -> Self {
        Failure::Wish(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Wish(e.into())
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| WishError::Config(format!("{}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Synth => {
            let mut cfg: SynthConfig = read_config(cli.config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let dir = out.unwrap_or(Path::new("."));
            let (train_path, eval_path) = generate_dataset(&cfg, dir)?;
            log::info!("wrote {} and {}", train_path.display(), eval_path.display());
        }
        Command::Train {
            data,
            log: log_path,
            dump_labels,
        } => {
            let mut cfg: TrainConfig = read_config(cli.config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let bundles = read_bundles_file(&data)?;
            let started = Instant::now();
            let (state, train_log) = train(&bundles, &cfg)?;
            log::info!("trained in {:.1}s", started.elapsed().as_secs_f64());
            let ckpt = out.unwrap_or(Path::new("model.json"));
            save_checkpoint(&state, ckpt)?;
            log::info!("checkpoint written to {}", ckpt.display());
            if let Some(p) = log_path {
                std::fs::write(p, train_log.to_jsonl()?)?;
            }
            if let Some(p) = dump_labels {
                let mut w = BufWriter::new(File::create(p)?);
                for d in pseudo_label_dump(&state, &bundles, &cfg)? {
                    serde_json::to_writer(&mut w, &d).map_err(WishError::from)?;
                    writeln!(w)?;
                }
                w.flush()?;
            }
        }
        Command::Predict { checkpoint, data } => {
            let state = load_checkpoint(&checkpoint)?;
            let bundles = read_bundles_file(&data)?;
            let preds = bundles
                .iter()
                .map(|b| predict(&state, &b.visual()))
                .collect::<Result<Vec<_>>>()?;
            let mut w = output(out)?;
            write_predictions(&mut w, &preds)?;
            w.flush()?;
        }
        Command::Eval { predictions, gt } => {
            let preds = load_predictions(BufReader::new(File::open(&predictions)?))?;
            let gts = read_bundles_file(&gt)?;
            let report = evaluate_by_id(&preds, &gts)?;
            if let Some(p) = out {
                let json = serde_json::to_string_pretty(&report).map_err(WishError::from)?;
                std::fs::write(p, json + "\n")?;
            }
            if !cli.quiet {
                println!("{report}");
            }
        }
        Command::Baseline { data } => {
            let bundles = read_bundles_file(&data)?;
            let preds = bundles
                .iter()
                .map(|b| iou_contact_baseline(&b.visual()))
                .collect::<Result<Vec<_>>>()?;
            let mut w = output(out)?;
            write_predictions(&mut w, &preds)?;
            w.flush()?;
        }
        Command::Gradcheck { seeds } => {
            let started = Instant::now();
            let report = run_gradcheck(seeds)?;
            if !cli.quiet {
                println!("{report}");
                println!("elapsed {:.2}s", started.elapsed().as_secs_f64());
            }
            if let Some(p) = out {
                let json = serde_json::to_string_pretty(&report).map_err(WishError::from)?;
                std::fs::write(p, json + "\n")?;
            }
            if !report.passed() {
                return Err(Failure::Runtime("finite-difference check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Wish(e)) => {
            log::error!("{e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
        Err(Failure::Runtime(msg)) => {
            log::error!("{msg}");
            ExitCode::from(2)
        }
    }
}
