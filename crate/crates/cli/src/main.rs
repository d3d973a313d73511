mod commands;
mod config;

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use kgr_core::degreembed::ModelError;

use commands::MissingData;
use config::{CommonArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "kgr", version, about = "Learn and inspect logic rules over knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and epoch log
    Train(CommonArgs),
    /// Filtered MRR and Hit@k of a checkpoint, as JSON on stdout
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Split to evaluate
        #[arg(long)]
        split: Option<String>,
    },
    /// Rules mined from a checkpoint's attention
    Rules {
        #[command(flatten)]
        common: CommonArgs,
        /// Head relation to report (repeatable; default all)
        #[arg(long = "head", value_name = "REL")]
        heads: Vec<String>,
        #[arg(long, value_name = "N")]
        top_n: Option<usize>,
        #[arg(long, value_name = "F")]
        min_normalized: Option<f64>,
    },
    /// Structural saturation of every relation pattern
    Saturation {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "head", value_name = "REL")]
        heads: Vec<String>,
        #[arg(long, value_name = "N")]
        max_len: Option<usize>,
        /// Count single-relation patterns in the walk universe
        #[arg(long)]
        include_unary: bool,
        #[arg(long, value_name = "N")]
        top_n: Option<usize>,
    },
    /// Per-entity degree embeddings as TSV
    ExportEmb(CommonArgs),
}

fn run(cli: Cli) -> Result<()> {
    let (common, run_cmd): (&CommonArgs, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Train(c) => (c, commands::cmd_train),
        Command::Eval { common, .. } => (common, commands::cmd_eval),
        Command::Rules { common, .. } => (common, commands::cmd_rules),
        Command::Saturation { common, .. } => (common, commands::cmd_saturation),
        Command::ExportEmb(c) => (c, commands::cmd_export_embeddings),
    };
    let mut cfg = RunConfig::load(common)?;
    match &cli.command {
        Command::Eval { split: Some(s), .. } => cfg.eval.split = s.clone(),
        Command::Rules {
            heads,
            top_n,
            min_normalized,
            ..
        } => {
            if !heads.is_empty() {
                cfg.rules.heads = heads.clone();
            }
            if let Some(n) = top_n {
                cfg.rules.top_n = *n;
            }
            if let Some(m) = min_normalized {
                cfg.rules.min_normalized = *m;
            }
        }
        Command::Saturation {
            heads,
            max_len,
            include_unary,
            top_n,
            ..
        } => {
            if !heads.is_empty() {
                cfg.saturation.heads = heads.clone();
            }
            if let Some(n) = max_len {
                cfg.saturation.max_len = *n;
            }
            cfg.saturation.include_unary |= include_unary;
            if top_n.is_some() {
                cfg.saturation.top_n = *top_n;
            }
        }
        _ => {}
    }
    if let Some(n) = cfg.thread_count()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    run_cmd(&cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<MissingData>() {
            return 2;
        }
        if let Some(
            ModelError::CheckpointIo { .. }
            | ModelError::BadCheckpoint(_)
            | ModelError::VocabMismatch(_),
        ) = cause.downcast_ref::<ModelError>()
        {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
