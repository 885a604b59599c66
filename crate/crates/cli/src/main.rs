use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use typhoon_core::pipeline::{self, RunConfig, OUTPUT_DIR_ENV};

/// Typhoon intensity classification from best-track data and tweets.
///
/// Settings come from the JSON config (or built-in defaults), then the
/// TYPHOON_OUTPUT_DIR environment variable, then trailing --key=value
/// overrides. Keys are dotted paths such as --training.epochs=30; a bare
/// name works when it is unique, e.g. --mode=standalone_env_only.
#[derive(Parser, Debug)]
#[command(name = "typhoon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic best-track, tweet and sentiment corpus.
    Synth(Args),
    /// Clean and tokenize tweets and pair them with observations.
    Preprocess(Args),
    /// Train skip-gram vectors and merge entity vectors.
    Embed(Args),
    /// Train the extractor and classifier.
    Train(Args),
    /// Score the trained model on the held-out split.
    Evaluate(Args),
    /// Print the resolved configuration as JSON.
    Config(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// JSON run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Overrides, each --key=value.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|a| {
            let Some(body) = a.strip_prefix("--") else {
                bail!("override {a:?} must look like --key=value");
            };
            match body.split_once('=') {
                Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
                _ => bail!("override {a:?} must look like --key=value"),
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let (name, args) = match &cli.command {
        Command::Synth(a) => ("synth", a),
        Command::Preprocess(a) => ("preprocess", a),
        Command::Embed(a) => ("embed", a),
        Command::Train(a) => ("train", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Config(a) => ("config", a),
    };
    let overrides = parse_overrides(&args.overrides)?;
    let env_dir = std::env::var(OUTPUT_DIR_ENV).ok();
    let cfg = RunConfig::load(args.config.as_deref(), env_dir.as_deref(), &overrides)?;
    match name {
        "synth" => {
            let gt = pipeline::run_synth(&cfg)?;
            println!(
                "{}",
                serde_json::json!({"bayes_env_only": gt.bayes_env_only, "bayes_combined": gt.bayes_combined})
            );
        }
        "preprocess" => {
            let r = pipeline::run_preprocess(&cfg)?;
            println!(
                "{}",
                serde_json::json!({"observations": r.observations, "tweets_paired": r.tweets_paired,
                    "tweets_discarded": r.tweets_discarded, "rejected": r.rejected.len()})
            );
        }
        "embed" => {
            let s = pipeline::run_embed(&cfg)?;
            println!("{}", serde_json::json!({"vocab": s.vocab, "d": s.d, "epoch_losses": s.epoch_losses}));
        }
        "train" => {
            let r = pipeline::run_train(&cfg)?;
            let last = r.last().context("training produced no epochs")?;
            println!("{}", serde_json::to_string(last)?);
        }
        "evaluate" => {
            let s = pipeline::run_evaluate(&cfg)?;
            println!(
                "{}",
                serde_json::json!({"accuracy": s.metrics.accuracy, "f1_micro": s.metrics.f1_micro,
                    "f1_macro": s.metrics.f1_macro})
            );
        }
        _ => println!("{}", serde_json::to_string_pretty(&cfg.to_value())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<typhoon_core::Error>()
                .map_or("error", typhoon_core::Error::kind);
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", serde_json::json!({"error": kind, "message": message}));
            ExitCode::FAILURE
        }
    }
}
