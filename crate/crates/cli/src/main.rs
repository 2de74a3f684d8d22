mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, ToyCommand};
use commands::RunContext;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };

    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads as usize)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let ctx = RunContext {
        seed: cli.seed,
        out: cli.out.clone(),
    };
    let result = pool.install(|| match &cli.command {
        Command::Stats(a) => commands::stats(&ctx, a),
        Command::Fit(a) => commands::fit_cmd(&ctx, a),
        Command::Apply(a) => commands::apply(&ctx, a),
        Command::Seqcal(a) => commands::seqcal(&ctx, a),
        Command::Toy(ToyCommand::Gen(a)) => commands::toy_gen(&ctx, a),
        Command::Toy(ToyCommand::Beamsweep(a)) => commands::toy_beamsweep(&ctx, a),
    });

    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
