use std::io::Write;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::Parser;
use sealmr::region::{RegionKeys, SealMode};
use sealmr::script::{Role, DEFAULT_BUDGET};
use sealmr::worker::{Worker, WorkerConfig};

/// MapReduce worker. Reads SEALMR_HEADER_KEY and SEALMR_PAYLOAD_KEY (hex)
/// unless the mode is plain.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7400")]
    router: String,
    /// Roles to volunteer for.
    #[arg(long, value_delimiter = ',', default_value = "mapper,reducer")]
    roles: Vec<Role>,
    #[arg(long, default_value = "sealed")]
    seal_mode: SealMode,
    /// Instruction budget per script invocation.
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    script_budget: u64,
    /// Hold back this mapper's end-of-stream messages (testing aid).
    #[arg(long, default_value_t = 0)]
    eos_delay_ms: u64,
    /// How long to keep retrying the router connection.
    #[arg(long, default_value_t = 10)]
    connect_secs: u64,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let keys = RegionKeys::from_env(args.seal_mode, true)?;
    let mut cfg = WorkerConfig::new(args.seal_mode, keys, args.roles.iter().copied());
    cfg.budget = args.script_budget;
    cfg.eos_delay = Duration::from_millis(args.eos_delay_ms);
    cfg.patience = Duration::from_secs(args.connect_secs);
    let worker = Worker::connect(&args.router, cfg)?;
    let roles: Vec<&str> = args.roles.iter().map(|r| r.as_str()).collect();
    let mut out = std::io::stdout().lock();
    writeln!(out, "sealmr-worker {} ready as {}", worker.id(), roles.join(","))?;
    out.flush()?;
    drop(out);
    let report = worker.run(&AtomicBool::new(false))?;
    log::info!("worker {} finished {} jobs", report.worker_id, report.jobs_done);
    Ok(())
}
