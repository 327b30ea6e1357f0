mod commands;
mod settings;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};

use settings::Settings;

#[derive(Parser)]
#[command(name = "dim", version, about = "Persona-conditioned response selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, vocabulary and training log.
    Train(Settings),
    /// Score a test file with a checkpoint.
    Eval(Settings),
    /// Train and evaluate the two reduced DIM models.
    Ablate(Settings),
    /// Train on each persona version and evaluate on both.
    Transfer(Settings),
    /// Export response-to-context and response-to-persona attention.
    #[command(name = "attn-dump")]
    AttnDump(Settings),
    /// Build a vocabulary from a training file.
    Vocab(Settings),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Transfer(_) => "transfer",
            Command::AttnDump(_) => "attn-dump",
            Command::Vocab(_) => "vocab",
        }
    }
}

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = match cli.command {
        Command::Train(s) => with_config(s, commands::train),
        Command::Eval(s) => with_config(s, commands::eval),
        Command::Ablate(s) => with_config(s, commands::ablate),
        Command::Transfer(s) => with_config(s, commands::transfer),
        Command::AttnDump(s) => with_config(s, commands::attn_dump),
        Command::Vocab(s) => with_config(s, commands::vocab),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            let mut cmd = Cli::command();
            let sub = cmd
                .find_subcommand_mut(name)
                .expect("subcommand exists")
                .clone()
                .bin_name(format!("dim {name}"));
            sub.clone().error(ErrorKind::MissingRequiredArgument, msg).exit()
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn with_config(
    mut s: Settings,
    run: fn(&Settings) -> Result<(), Failure>,
) -> Result<(), Failure> {
    s.merge_config_file().map_err(Failure::Usage)?;
    s.check_inputs().map_err(Failure::Usage)?;
    run(&s)
}
