//! Guest-side worker for the process backend. Spawned by the host; not
//! meant to be run by hand.

use clap::Parser;
use sandcage::backend::process::worker::{self, WorkerArgs};
use sandcage::guest::GuestVariant;

#[derive(Parser)]
#[command(about = "sandcage process-backend worker")]
struct Cli {
    /// Name of the shared-memory object holding the region.
    #[arg(long)]
    shm: String,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value = "clean")]
    guest: GuestVariant,
    #[arg(long, default_value_t = sandcage::backend::process::DEFAULT_SPIN_LIMIT)]
    spin_limit: u64,
}

fn main() {
    let cli = Cli::parse();
    let code = worker::run(&WorkerArgs {
        shm: cli.shm,
        size: cli.size,
        guest: cli.guest,
        spin_limit: cli.spin_limit,
    });
    std::process::exit(code);
}
