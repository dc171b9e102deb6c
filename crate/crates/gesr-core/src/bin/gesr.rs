use clap::Parser as _;

use gesr_core::cli::{run, Cli};
use gesr_core::error::GesrError;

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("gesr: {err}");
        let code = match err {
            GesrError::Usage(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
