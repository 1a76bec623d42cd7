use clap::Parser;
use fmvit_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            print!("{}", outcome.output);
            std::process::exit(outcome.code);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
