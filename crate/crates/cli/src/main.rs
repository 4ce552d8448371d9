mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use simnet_core::Execution;

use args::{Cli, Command};

fn run(cli: &Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Warmup(a) => commands::warmup_cmd(exec, a),
        Command::Train(a) => commands::train_cmd(exec, a),
        Command::Mine(a) => commands::mine_cmd(exec, a),
        Command::Eval(a) => commands::eval_cmd(exec, a),
        Command::Compare(a) => commands::compare_cmd(exec, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
