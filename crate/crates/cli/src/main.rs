use std::process::ExitCode;

use bitstash_cli::args::{Cli, Command};
use bitstash_cli::output::write_report;
use bitstash_cli::{bench, footprint, hist, opcount, train_cmd, CommandOutput};
use clap::Parser;

fn run(cli: &Cli) -> bitstash_core::Result<(CommandOutput, Option<std::path::PathBuf>)> {
    Ok(match &cli.command {
        Command::Bench(args) => (bench::cmd_bench(args)?, args.output.out.clone()),
        Command::Train(args) => (train_cmd::cmd_train(args)?, args.output.out.clone()),
        Command::Footprint(args) => (footprint::cmd_footprint(args)?, args.output.out.clone()),
        Command::Hist(args) => (hist::cmd_hist(args)?, args.output.out.clone()),
        Command::Opcount(args) => (opcount::cmd_opcount(args)?, args.output.out.clone()),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok((output, out_path)) => {
            for warning in &output.warnings {
                eprintln!("warning: {warning}");
            }
            if let Err(e) = write_report(out_path.as_deref(), &output.text) {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
