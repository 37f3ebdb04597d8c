use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod args;
mod commands;

use commands::{AdmmArgs, CalibrateArgs, EvalArgs, GenArgs, MemoryArgs, RunArgs, VerifyArgs, VerifyFailed};

/// Structured pruning of toy transformer models.
///
/// Exit status is 0 on success, 1 on invalid input and 2 when a numerical
/// solver fails or `verify` finds a disagreement.
#[derive(Debug, Parser)]
#[command(name = "struprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded toy model.
    Gen(GenArgs),
    /// Sample a calibration set for a model.
    Calibrate(CalibrateArgs),
    /// Score every structured unit (importance.csv).
    Importance(RunArgs),
    /// Allocate per-layer sparsities (plan.csv, sweep.csv when a grid is swept).
    Plan(RunArgs),
    /// Full pipeline: scores, plan, masks, solver, report.
    Prune(RunArgs),
    /// Run the alternating solver from a plan (model/ and trace.csv).
    Admm(AdmmArgs),
    /// Evaluate a pruned model against its dense reference.
    Eval(EvalArgs),
    /// Sweep allocation temperatures (sweep.csv and the best plan.csv).
    Sweep(RunArgs),
    /// Parameter and memory tables of the OPT family.
    Memory(MemoryArgs),
    /// Check the closed forms against brute-force and iterative oracles.
    Verify(VerifyArgs),
}

fn dispatch(cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::Gen(a) => commands::gen(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Importance(a) => commands::importance(a),
        Command::Plan(a) => commands::plan(a),
        Command::Prune(a) => commands::prune(a),
        Command::Admm(a) => commands::admm(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Memory(a) => commands::memory(a),
        Command::Verify(a) => commands::verify(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let solver = err.chain().any(|e| {
        e.downcast_ref::<struprune::Error>()
            .is_some_and(struprune::Error::is_solver)
            || e.is::<VerifyFailed>()
    });
    if solver {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STRUPRUNE_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors; --help and --version are not
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
