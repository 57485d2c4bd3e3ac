use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use hiercat::cli::{run, Command, RunConfig};

/// Hierarchical product categorization: dataset generation, training,
/// evaluation, prediction, audits, and parameter accounting.
#[derive(Parser)]
#[command(name = "hiercat", disable_version_flag = true)]
struct Args {
    /// generate | train | evaluate | predict | audit | params | stats
    command: String,

    /// Flat key=value config file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// final | no_mp | backbone_indep | baseline
    #[arg(long)]
    variant: Option<String>,

    /// Attribute decision threshold.
    #[arg(long)]
    threshold: Option<f64>,

    /// Route baseline specialists by the annotated category.
    #[arg(long)]
    oracle_category: bool,

    /// Account for the reference configuration (backbone 2048, d 1024,
    /// classes 64/95/75) including the backbone constant.
    #[arg(long)]
    paper_defaults: bool,

    /// Extra key=value overrides, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn build_config(args: &Args) -> hiercat::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in &args.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            hiercat::Error::Config(format!("--set expects KEY=VALUE, got {pair:?}"))
        })?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(variant) = &args.variant {
        config.variant = variant.parse()?;
    }
    if let Some(threshold) = args.threshold {
        config.threshold = threshold;
    }
    if args.oracle_category {
        config.oracle_category = true;
    }
    if args.paper_defaults {
        config.paper_defaults = true;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = args.command.parse::<Command>().and_then(|command| {
        let config = build_config(&args)?;
        run(&config, command, &mut std::io::stdout().lock())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // A downstream `head` closing the pipe is not a failure.
        Err(hiercat::Error::Io(err)) if err.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("hiercat: {err}");
            ExitCode::FAILURE
        }
    }
}
