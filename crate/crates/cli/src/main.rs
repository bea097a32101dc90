mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use bertlite::BalanceStrategy;
use clap::{Args, Parser, Subcommand};

use failure::Failure;

#[derive(Parser)]
#[command(name = "bertlite", version, about = "Small BERT-style sentiment classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from labeled datasets and/or a pretraining corpus.
    BuildVocab(commands::BuildVocab),
    /// Masked-LM + next-sentence pretraining on a plain-text corpus.
    Pretrain(commands::Pretrain),
    /// Fine-tune the sentiment classifier.
    Train(commands::Train),
    /// Score a checkpoint on a labeled dataset.
    Evaluate(commands::Evaluate),
    /// Label raw texts, one per line.
    Predict(commands::Predict),
    /// Rebalance a labeled dataset and report class histograms.
    Rebalance(commands::Rebalance),
    /// Render a metrics report as text.
    Report(commands::Report),
    /// Write the template-generated review corpus.
    Synth(commands::Synth),
}

fn parse_balance(s: &str) -> Result<BalanceStrategy, String> {
    s.parse()
}

fn run(cli: Cli) -> failure::CliResult<()> {
    match cli.command {
        Command::BuildVocab(a) => commands::build_vocab(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
        Command::Rebalance(a) => commands::rebalance(a),
        Command::Report(a) => commands::report(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&message).trim_start_matches("error: ");
            eprintln!("{}", Failure::usage(first).to_json());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.error.exit_code() as u8)
        }
    }
}
