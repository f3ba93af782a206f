mod commands;
mod config;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nct_core::Error;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "nct", version, about = "Negative-critical sequence training pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set gen.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output directory (defaults to $NCT_OUT_DIR or ./nct-run).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic topic-keyed corpus and matching embeddings.
    SynthCorpus,
    /// Filter, split and encode the raw corpus; build the vocabulary.
    Preprocess,
    /// Train the coherence and/or cohesion discriminator.
    TrainDisc {
        #[arg(long, default_value = "both")]
        kind: String,
    },
    /// Pre-train the generator with teacher-forced MLE.
    TrainGen,
    /// Fine-tune the generator with discriminator rewards.
    FinetuneRl {
        #[arg(long)]
        w_coherence: Option<f64>,
        #[arg(long)]
        w_cohesion: Option<f64>,
        /// Baseline ensemble size; must be odd (2B - 1 for batch size B).
        #[arg(long)]
        ensemble_size: Option<usize>,
        /// `alternate` or `none`.
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Greedy-decode continuations for a split.
    Generate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute NLL, PPL, BLEU, unique-n and length ratio.
    Eval {
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Itemized coherence and cohesion scores for a processed dataset file.
    Score {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Score these generations against their sources instead of the
        /// reference targets.
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Print a per-sentence table.
        #[arg(long)]
        table: bool,
    },
}

fn resolve(g: &GlobalArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &g.sets {
        cfg.set_pair(s)?;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = resolve(&cli.global)?;
    match cli.command {
        Command::SynthCorpus => commands::synth_corpus(&mut cfg),
        Command::Preprocess => commands::preprocess(&mut cfg),
        Command::TrainDisc { kind } => commands::train_disc(&mut cfg, &kind),
        Command::TrainGen => commands::train_gen(&mut cfg),
        Command::FinetuneRl {
            w_coherence,
            w_cohesion,
            ensemble_size,
            mix,
            epochs,
        } => {
            if let Some(w) = w_coherence {
                cfg.rl.weights.coherence = w;
            }
            if let Some(w) = w_cohesion {
                cfg.rl.weights.cohesion = w;
            }
            if let Some(n) = ensemble_size {
                if n < 3 || n % 2 == 0 {
                    return Err(Error::Config {
                        key: "ensemble-size".into(),
                        detail: format!("{n} is not of the form 2B - 1 with B >= 2"),
                    });
                }
                cfg.rl.batch_size = n.div_ceil(2);
            }
            if let Some(m) = mix {
                cfg.set("rl.mix", &m)?;
            }
            if let Some(e) = epochs {
                cfg.rl.epochs = e;
            }
            commands::finetune_rl(&mut cfg)
        }
        Command::Generate { model, split, output } => commands::generate(&mut cfg, model, &split, output),
        Command::Eval {
            generations,
            model,
            split,
        } => commands::eval(&mut cfg, generations, model, &split),
        Command::Score {
            input,
            generations,
            output,
            table,
        } => commands::score(&mut cfg, input, generations, output, table),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
