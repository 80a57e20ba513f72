//! Encodes raw 8-bit pixels as an RLI image.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sandcage::guest::format;

#[derive(Parser)]
#[command(name = "rli-encode", about = "Encode raw row-major 8-bit pixels as RLI")]
struct Cli {
    raw: PathBuf,
    width: u32,
    height: u32,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> Result<(), String> {
        let raw = std::fs::read(&cli.raw).map_err(|e| format!("{}: {e}", cli.raw.display()))?;
        let enc = format::encode(&raw, cli.width, cli.height).map_err(|e| e.to_string())?;
        std::fs::write(&cli.output, enc).map_err(|e| format!("{}: {e}", cli.output.display()))
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rli-encode: {e}");
            ExitCode::FAILURE
        }
    }
}
