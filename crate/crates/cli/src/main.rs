use clap::Parser;
use spconj_cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = execute(&cli.command) {
        let report = serde_json::json!({ "error": e.class(), "message": e.to_string() });
        eprintln!("{report}");
        std::process::exit(1);
    }
}
