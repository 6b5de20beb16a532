use clap::Parser;
use sma_snn::cli::{init_threads, run, Cli};
use sma_snn::error::ErrorCategory;

fn main() {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| run(cli));
    if let Err(e) = result {
        eprintln!("error: {}", e);
        let code = match e.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Numeric => 4,
        };
        std::process::exit(code);
    }
}
