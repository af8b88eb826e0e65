use clap::Parser;
use prunetrack_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
        }
        Err(e) => {
            eprintln!("prunetrack: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
