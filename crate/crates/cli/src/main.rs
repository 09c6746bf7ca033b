use clap::Parser;
use lightning_cli::commands::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    let code = execute(cli, &mut std::io::stdout());
    std::process::exit(code);
}
