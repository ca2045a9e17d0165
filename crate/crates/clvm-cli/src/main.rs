//! `clvm` — fit, probe, and evaluate contrastive latent variable models
//! from the command line.
//!
//! Every command reads and writes plain CSV/JSON inside `--out-dir`, takes
//! all randomness from `--seed`, and reports failures as a single
//! machine-parseable line on stderr with a category-specific exit code:
//! 2 for configuration problems, 3 for data problems, 4 for numerical
//! failures.

mod config;
mod eval_cmd;
mod fit;
mod generate;
mod latents;
mod sweep;
mod transform;

use std::process::ExitCode;

use clap::Parser;
use clvm::error::ClvmError;

#[derive(Parser)]
#[command(
    name = "clvm",
    version,
    about = "Contrastive latent variable models: shared vs target-specific structure",
    after_help = "All randomness flows from --seed through named substreams (data, init, mc),\n\
                  so two runs with the same seed and --threads 1 are byte-identical."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Write a synthetic benchmark: target.csv, background.csv, labels.csv
    Generate(generate::GenerateArgs),
    /// Fit a model; writes model.json, latents.csv, trace.jsonl, resolved_config.json
    Fit(fit::FitArgs),
    /// Project new rows through a saved model; writes latents.csv
    Transform(transform::TransformArgs),
    /// Fit across a hyperparameter grid; writes per-point latents and summary.json
    Sweep(sweep::SweepArgs),
    /// Score a latent CSV: cluster agreement, silhouette, subspace distance
    Eval(eval_cmd::EvalArgs),
}

/// Exit code buckets: how the failure should be handled by a caller.
fn exit_code(err: &ClvmError) -> u8 {
    match err {
        ClvmError::Config(_) | ClvmError::Dimension(_) => 2,
        ClvmError::Io(_)
        | ClvmError::Csv(_)
        | ClvmError::ParseRow { .. }
        | ClvmError::ParseCell { .. }
        | ClvmError::MissingData(_) => 3,
        ClvmError::NotSymmetric { .. }
        | ClvmError::Factorization(_)
        | ClvmError::Conditioning(_)
        | ClvmError::Integration(_)
        | ClvmError::NonFinite(_)
        | ClvmError::Numerical(_) => 4,
    }
}

fn error_kind(err: &ClvmError) -> &'static str {
    match err {
        ClvmError::Config(_) => "config",
        ClvmError::Dimension(_) => "dimension",
        ClvmError::Io(_) => "io",
        ClvmError::Csv(_) => "csv",
        ClvmError::ParseRow { .. } => "parse_row",
        ClvmError::ParseCell { .. } => "parse_cell",
        ClvmError::MissingData(_) => "missing_data",
        ClvmError::NotSymmetric { .. } => "not_symmetric",
        ClvmError::Factorization(_) => "factorization",
        ClvmError::Conditioning(_) => "conditioning",
        ClvmError::Integration(_) => "integration",
        ClvmError::NonFinite(_) => "non_finite",
        ClvmError::Numerical(_) => "numerical",
    }
}

/// One line, grep-friendly, quotes JSON-escaped so the message never spills
/// onto a second line.
fn report(err: &ClvmError) -> ExitCode {
    let msg = serde_json::to_string(&err.to_string())
        .unwrap_or_else(|_| "\"unprintable error\"".into());
    eprintln!("clvm: error: kind={} msg={}", error_kind(err), msg);
    ExitCode::from(exit_code(err))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            // Collapse clap's multi-line rendering into the standard
            // one-line error format; bad flags are configuration errors.
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ")
                .to_string();
            return report(&ClvmError::Config(first));
        }
    };
    let result = match cli.command {
        Command::Generate(args) => generate::run(args),
        Command::Fit(args) => fit::run(args),
        Command::Transform(args) => transform::run(args),
        Command::Sweep(args) => sweep::run(args),
        Command::Eval(args) => eval_cmd::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
