mod args;
mod commands;
mod error;

use clap::Parser;

use crate::args::{Cli, Command};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        Command::Qstar(a) => commands::qstar(a),
        Command::Run(a) => commands::run(a),
        Command::GammaSweep(a) => commands::gamma_sweep(a),
        Command::DeltaSweep(a) => commands::delta_sweep(a),
        Command::CompareG(a) => commands::compare_g(a),
        Command::ValidateModel(a) => commands::validate_model(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
