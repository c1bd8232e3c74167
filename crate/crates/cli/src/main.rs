use clap::Parser;
use dtr_cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dtr_cli::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
