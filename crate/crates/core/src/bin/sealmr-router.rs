use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use sealmr::region::{RegionKeys, SealMode};
use sealmr::router::{Router, RouterConfig};

/// Content-based router. Reads SEALMR_HEADER_KEY (hex) unless the mode is plain.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:7400")]
    listen: String,
    /// sealed, crypto-only or plain.
    #[arg(long, default_value = "sealed")]
    seal_mode: SealMode,
    /// Append every frame crossing the router to this file.
    #[arg(long)]
    capture: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let keys = RegionKeys::from_env(args.seal_mode, false)?;
    let mut cfg = RouterConfig::new(args.listen.clone(), args.seal_mode, keys);
    cfg.capture = args.capture.is_some();
    cfg.capture_file = args.capture;
    let handle = Router::spawn(cfg).with_context(|| format!("binding {}", args.listen))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "sealmr-router ({}) listening on {}", args.seal_mode, handle.addr())?;
    out.flush()?;
    drop(out);
    handle.wait();
    Ok(())
}
