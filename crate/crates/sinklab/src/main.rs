// SPDX-License-Identifier: MIT OR Apache-2.0

use clap::Parser;

use sinklab::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(error) = cli::run(cli) {
        eprintln!("error: {error}");
        std::process::exit(cli::exit_code(&error));
    }
}
