//! patchprobe: every experiment as a subcommand; outputs ship with run
//! manifests for byte-identical regeneration.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4
//! runtime/numeric error.

use clap::Parser;
use patchprobe::cli;
use patchprobe::commands;
use patchprobe_core::error::Error;

fn main() {
    let parsed = cli::Cli::parse(); // clap exits with code 2 on usage errors
    if let Some(jobs) = parsed.jobs {
        // results are independent of the pool size by construction
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let result = dispatch(parsed.command);
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn dispatch(command: cli::Command) -> patchprobe_core::error::Result<()> {
    use cli::Command::*;
    match command {
        Train(args) => commands::run_train(args.resolve()?),
        PairTrain(args) => commands::run_pair_train(args.resolve()?),
        Attack(args) => commands::run_attack(args.resolve()?),
        CorruptEval(args) => commands::run_corrupt_eval(args.resolve()?),
        Rollout(args) => commands::run_rollout(args.resolve()?),
        Saliency(args) => commands::run_saliency(args.resolve()?),
        Deviation(args) => commands::run_deviation(args.resolve()?),
        Transfer(args) => commands::run_transfer(args.resolve()?),
        SharedAttack(args) => commands::run_shared_attack(args.resolve()?),
        MinIters(args) => commands::run_min_iters(args.resolve()?),
        TempSweep(args) => commands::run_temp_sweep(args.resolve()?),
        Gradcheck(args) => commands::run_gradcheck(args.resolve()?),
        Rerun(args) => commands::run_rerun(&args.manifest),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Unsupported(_) => 2,
        Error::Format(_) | Error::Io(_) | Error::EmptyEvalSet => 3,
        Error::Numeric(_)
        | Error::Training { .. }
        | Error::Integrity(_)
        | Error::NoSuccessfulAttacks => 4,
    }
}
