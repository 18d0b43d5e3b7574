use clap::Parser;

use hseg::cli::{exit_code, run, Cli};

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("hseg: {err}");
        std::process::exit(exit_code(&err));
    }
}
