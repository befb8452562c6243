use std::path::PathBuf;
use std::process::ExitCode;

use civt_cli::commands;
use civt_cli::{error_line, RunConfig};
use civt_core::{Error, Mode};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "civt", version, about = "Cross-inductive-bias distillation for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a cnn or inn teacher with cross-entropy.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Train a student against frozen teachers.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long = "teacher")]
        teachers: Vec<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Top-1 accuracy of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// Also print per-class confusion counts.
        #[arg(long)]
        confusion: bool,
    },
    /// KL similarity between student tokens and teachers, as CSV.
    KlTable {
        #[command(flatten)]
        common: Common,
        student: PathBuf,
        #[arg(long = "teacher")]
        teachers: Vec<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Per-module parameter counts of a preset, spec file or checkpoint.
    Inspect { target: String },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(common: &Common) -> civt_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn write_out(cfg: &RunConfig, file: &str, text: &str) -> civt_core::Result<()> {
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(file), text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> civt_core::Result<(String, bool)> {
    Ok(match cli.command {
        Command::TrainTeacher { common } => (commands::train_teacher(&load_config(&common)?)?, true),
        Command::Distill { common, teachers, mode } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            (commands::distill(&cfg, &teachers)?, true)
        }
        Command::Eval { common, checkpoint, confusion } => {
            let cfg = load_config(&common)?;
            let (_, text) = commands::eval(&cfg, &checkpoint, confusion)?;
            write_out(&cfg, "eval.txt", &text)?;
            (text, true)
        }
        Command::KlTable { common, student, teachers } => {
            let cfg = load_config(&common)?;
            let csv = commands::kl_table(&cfg, &student, &teachers)?.to_csv();
            write_out(&cfg, "kl_table.csv", &csv)?;
            (csv, true)
        }
        Command::Gradcheck => {
            let (entries, text) = commands::gradcheck()?;
            (text, entries.iter().all(|e| e.report.passed))
        }
        Command::Inspect { target } => (commands::inspect(&target)?.1, true),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((text, true)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok((text, false)) => {
            print!("{text}");
            eprintln!("{}", error_line("gradcheck", "one or more gradient checks failed"));
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(2)
        }
    }
}
