//! Stand-in training task for integration tests: allocates and touches
//! memory, optionally sleeps, copies params_in to params_out.

use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::Parser;

#[derive(Parser, Debug)]
struct Args {
    #[arg(long)]
    params_in: Option<PathBuf>,
    #[arg(long)]
    params_out: Option<PathBuf>,
    /// MiB to allocate and touch page by page.
    #[arg(long, default_value_t = 0)]
    alloc_mib: u64,
    #[arg(long, default_value_t = 0.0)]
    sleep_s: f64,
    /// Sleep until killed.
    #[arg(long)]
    hold: bool,
    #[arg(long, default_value_t = 0)]
    exit_code: u8,
}

fn main() -> ExitCode {
    let args = Args::parse();

    let mut block: Vec<u8> = Vec::new();
    if args.alloc_mib > 0 {
        let bytes = (args.alloc_mib as usize) << 20;
        block.reserve_exact(bytes);
        // Touch each page so the memory is actually charged.
        for _ in (0..bytes).step_by(4096) {
            block.push(1);
            block.resize(block.len() + 4095, 0);
        }
        eprintln!("allocated {} MiB", args.alloc_mib);
    }

    if args.sleep_s > 0.0 {
        thread::sleep(Duration::from_secs_f64(args.sleep_s));
    }
    if args.hold {
        loop {
            thread::sleep(Duration::from_secs(1));
        }
    }

    if let Some(out) = &args.params_out {
        let content = match &args.params_in {
            Some(p) => std::fs::read(p).unwrap_or_default(),
            None => Vec::new(),
        };
        // An empty params_in still yields a nonempty artifact.
        let content = if content.is_empty() { b"probe".to_vec() } else { content };
        if let Err(e) = std::fs::write(out, content) {
            eprintln!("writing {}: {e}", out.display());
            return ExitCode::from(4);
        }
    }
    std::hint::black_box(&block);
    ExitCode::from(args.exit_code)
}
