use clap::Parser;

use chartflow_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut log = std::io::stderr();
    if let Err(e) = run(cli, &mut log) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
