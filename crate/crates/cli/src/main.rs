//! `dtok`: manifest-driven pipeline stages over the `dtok` library.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or format
//! error. Data goes to files and stdout, logs and the resolved-config echo to
//! stderr.

mod commands;
mod config_file;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "dtok", version, about = "Discrete speech tokens: train, encode, augment, measure")]
struct Cli {
    /// key=value file of defaults for the subcommand's flags; flags given on
    /// the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for per-utterance work (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Train a k-means, grouped or residual quantizer on a manifest.
    TrainQuantizer(commands::TrainArgs),
    /// Map every utterance of an embedding manifest to a token file.
    Encode(commands::EncodeArgs),
    /// Turn token files back into embeddings through the codebook.
    Decode(commands::DecodeArgs),
    /// Apply the augmentation policy to token files.
    Augment(commands::AugmentArgs),
    /// Token usage, PNMI and bandwidth over a token manifest.
    Stats(commands::StatsArgs),
    /// Print the header of any dtok file as JSON.
    Inspect(commands::InspectArgs),
    /// Create a token embedding table.
    InitTable(commands::InitTableArgs),
    /// Create a random fusion projection.
    InitProjection(commands::InitProjectionArgs),
}

fn parse(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cmd = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_owned()).collect();
    let args = config_file::expand(args, &names).map_err(|e| {
        Cli::command().error(clap::error::ErrorKind::InvalidValue, e.to_string())
    })?;
    let matches = cmd.try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dtok::Error>() {
            return if e.is_config() { 2 } else { 3 };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    match serde_json::to_string(&cli.command) {
        Ok(json) => eprintln!("resolved config: {json}"),
        Err(e) => log::warn!("could not serialize the resolved config: {e}"),
    }

    let result = match &cli.command {
        Command::TrainQuantizer(a) => commands::train_quantizer(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Augment(a) => commands::augment(a),
        Command::Stats(a) => commands::stats(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::InitTable(a) => commands::init_table(a),
        Command::InitProjection(a) => commands::init_projection(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &[&str]) -> Vec<OsString> {
        s.iter().map(OsString::from).collect()
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn later_flags_override_earlier_ones() {
        let cli = parse(argv(&[
            "dtok", "augment", "--tokens", "t", "--out-dir", "o", "--seed", "1", "--seed", "2",
        ]))
        .unwrap();
        let Command::Augment(a) = cli.command else { panic!() };
        assert_eq!(a.seed, 2);
    }

    #[test]
    fn augment_flag_defaults_match_library() {
        let cli = parse(argv(&["dtok", "augment", "--tokens", "t", "--out-dir", "o", "--seed", "9"])).unwrap();
        let Command::Augment(a) = cli.command else { panic!() };
        let expected = dtok::augment::AugmentationConfig {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(a.policy.to_config(9), expected);
    }

    #[test]
    fn seed_is_required() {
        let err = parse(argv(&["dtok", "augment", "--tokens", "t", "--out-dir", "o"])).unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::MissingRequiredArgument);
    }
}
