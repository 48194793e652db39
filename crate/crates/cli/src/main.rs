use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hyperevent_cli::{
    cmd_eval, cmd_gradcheck, cmd_inspect_hypergraph, cmd_synth, cmd_train, exit_code, Invocation,
};
use hyperevent_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "hyperevent", version, about = "RGB-event hypergraph completion experiments")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth,
    /// Train and write checkpoints plus JSON-lines metrics.
    Train,
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the configured data source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic and numeric gradients on a small reference model.
    Gradcheck,
    /// Dump one sample's hypergraph and every sample's pooled embedding.
    InspectHypergraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("report serializes"));
}

fn run(cli: Cli) -> Result<()> {
    let inv = Invocation::load(cli.config.as_deref(), cli.seed, cli.out.as_deref())?;
    match cli.command {
        Command::Synth => print_json(&cmd_synth(&inv)?),
        Command::Train => {
            let report = cmd_train(&inv)?;
            for m in &report.history {
                print_json(m);
            }
            eprintln!("checkpoint: {}", report.checkpoint.display());
        }
        Command::Eval { checkpoint, data } => print_json(&cmd_eval(&inv, &checkpoint, data.as_deref())?),
        Command::Gradcheck => {
            let outcomes = cmd_gradcheck(&inv)?;
            let mut failed = 0;
            for o in &outcomes {
                for t in &o.report.tensors {
                    let status = if t.passed { "pass" } else { "FAIL" };
                    println!("{:?} {:<28} {:>10.3e} {status}", o.task, t.name, t.max_rel_error);
                    failed += usize::from(!t.passed);
                }
            }
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} tensors failed the gradient check")));
            }
        }
        Command::InspectHypergraph {
            checkpoint,
            sample,
            data,
        } => print_json(&cmd_inspect_hypergraph(&inv, &checkpoint, &sample, data.as_deref())?),
    }
    Ok(())
}

fn main() -> ExitCode {
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
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
