use clap::Parser;
use consinstancy_cli::UsageError;

fn main() {
    if let Err(e) = consinstancy_cli::run(consinstancy_cli::Cli::parse()) {
        eprintln!("error: {e:#}");
        let code = if e.is::<UsageError>() { 2 } else { 1 };
        std::process::exit(code);
    }
}
