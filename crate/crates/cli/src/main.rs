use clap::Parser;
use pii_cli::{error_record, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let rec = error_record(&err);
        eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| format!("{err:#}")));
        std::process::exit(rec.exit_code);
    }
}
