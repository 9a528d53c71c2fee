//! `ptq`: fixtures, calibration, quantization, evaluation, sweeps and reports.
//!
//! Output is JSON on stdout. Failures print a JSON error listing on stderr
//! and exit non-zero.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};

use commands::*;
use ptq_core::PtqError;

#[derive(Parser, Debug)]
#[command(name = "ptq", version, about = "Post-training quantization toolkit")]
struct Cli {
    /// Flat `key = value` file of flag values; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for evaluation and sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the toy model, dataset and golden pair.
    #[command(args_override_self = true)]
    Fixtures(FixturesArgs),
    /// Collect activation statistics into a calibration profile.
    #[command(args_override_self = true)]
    Calibrate(CalibrateArgs),
    /// Fold BN, insert Quant nodes and resolve every scale.
    #[command(args_override_self = true)]
    Quantize(QuantizeArgs),
    /// Accuracy, error and cost figures of one model.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Quantize and evaluate a grid of plans.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
    /// Pareto fronts, correlations and acc_diff histograms from a sweep.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

/// Prints to stdout, ignoring a closed pipe (e.g. output piped into `head`).
fn emit(v: &Value) {
    let _ = writeln!(std::io::stdout(), "{v:#}");
}

fn error_entry(e: &PtqError) -> Value {
    json!({ "kind": e.kind(), "message": e.to_string() })
}

fn fail(errors: Vec<Value>) -> ExitCode {
    eprintln!("{}", json!({ "errors": errors }));
    ExitCode::FAILURE
}

/// The `--config` path, if any, from the raw arguments.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn subcommand_name(argv: &[OsString]) -> Option<String> {
    let names: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    argv.iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .find(|a| names.contains(a))
}

fn main() -> ExitCode {
    let mut argv: Vec<OsString> = std::env::args_os().collect();
    if let (Some(path), Some(sub)) = (config_path(&argv), subcommand_name(&argv)) {
        match config::load_config(&path) {
            Ok(extra) => argv = config::splice_after_subcommand(&argv, &sub, extra),
            Err(e) => return fail(vec![error_entry(&e)]),
        }
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return fail(vec![json!({ "kind": "usage", "message": e.render().to_string().trim() })]);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            return fail(vec![json!({ "kind": "jobs", "message": e.to_string() })]);
        }
    }

    let outcome = match &cli.command {
        Command::Fixtures(a) => cmd_fixtures(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Sweep(a) => match cmd_sweep(a) {
            Ok((summary, failed)) if !failed.is_empty() => {
                emit(&summary);
                let errors = failed
                    .iter()
                    .map(|(i, r)| {
                        json!({
                            "kind": "sweep_row",
                            "row": i,
                            "plan": r.plan().map(|p| p.to_string()).unwrap_or_default(),
                            "message": r.error.clone().unwrap_or_default(),
                        })
                    })
                    .collect();
                return fail(errors);
            }
            other => other.map(|(summary, _)| summary),
        },
    };
    match outcome {
        Ok(v) => {
            emit(&v);
            ExitCode::SUCCESS
        }
        Err(e) => fail(vec![error_entry(&e)]),
    }
}
