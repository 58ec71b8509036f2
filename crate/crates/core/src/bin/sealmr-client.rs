use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sealmr::client::{run_iterative_kmeans, Client, ClientConfig, JobMetrics, JobSpec, KmeansJob};
use sealmr::kmeans::{self, StopRule};
use sealmr::region::{RegionKeys, SealMode};

/// MapReduce client. Reads SEALMR_HEADER_KEY and SEALMR_PAYLOAD_KEY (hex)
/// unless the mode is plain.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one job, or an iterative k-means loop, and print results as JSON.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Iterative {
    Kmeans,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, default_value = "127.0.0.1:7400")]
    router: String,
    /// Lua map script (map, hash and optional combine).
    #[arg(long)]
    map: PathBuf,
    /// Lua reduce script.
    #[arg(long)]
    reduce: PathBuf,
    #[arg(long, default_value_t = 1)]
    mappers: usize,
    #[arg(long, default_value_t = 1)]
    reducers: usize,
    /// Line-oriented input file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "sealed")]
    seal_mode: SealMode,
    #[arg(long)]
    iterative: Option<Iterative>,
    /// Number of centers for k-means.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Stop when mean center movement is below this fraction of the
    /// bounding-box diagonal.
    #[arg(long, default_value_t = StopRule::DEFAULT_FRAC)]
    threshold_frac: f64,
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
    /// Seed for picking initial centers among the input points.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Initial centers file (`x,y` per line) instead of seeded sampling.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Per-iteration metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value = "job")]
    job_id: String,
    #[arg(long, default_value_t = 30)]
    hiring_timeout_secs: u64,
    #[arg(long, default_value_t = 600)]
    result_timeout_secs: u64,
}

#[derive(Serialize)]
struct ClientRow {
    iteration: usize,
    wall_ms: f64,
    split_bytes: u64,
    shuffle_bytes: u64,
    output_bytes: u64,
    seal_mode: String,
}

fn row(iteration: usize, m: &JobMetrics, mode: SealMode) -> ClientRow {
    ClientRow {
        iteration,
        wall_ms: m.wall_ms,
        split_bytes: m.split_bytes,
        shuffle_bytes: m.shuffle_bytes,
        output_bytes: m.output_bytes,
        seal_mode: mode.to_string(),
    }
}

fn read(path: &PathBuf) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let keys = RegionKeys::from_env(args.seal_mode, true)?;
    let mut cfg = ClientConfig::new(args.seal_mode, keys);
    cfg.hiring_timeout = Duration::from_secs(args.hiring_timeout_secs);
    cfg.result_timeout = Duration::from_secs(args.result_timeout_secs);
    let client = Client::connect(args.router.clone(), cfg)?;
    let map_script = read(&args.map)?;
    let reduce_script = read(&args.reduce)?;
    let input: Arc<str> = read(&args.input)?.into();
    let (output, rows) = match args.iterative {
        None => {
            let spec = JobSpec::new(args.job_id, map_script, reduce_script, args.mappers, args.reducers, input);
            let out = client.run_job(&spec)?;
            (serde_json::to_value(&out.results.0)?, vec![row(1, &out.metrics, args.seal_mode)])
        }
        Some(Iterative::Kmeans) => {
            let points = kmeans::parse_points(&input)?;
            let init = match &args.init {
                Some(p) => kmeans::parse_points(&read(p)?)?,
                None => {
                    if args.k > points.len() {
                        bail!("k = {} exceeds the {} input points", args.k, points.len());
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                    let mut idx = rand::seq::index::sample(&mut rng, points.len(), args.k).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| points[i]).collect()
                }
            };
            if init.len() != args.k {
                bail!("expected {} initial centers, got {}", args.k, init.len());
            }
            let job = KmeansJob {
                job_prefix: args.job_id,
                map_script,
                reduce_script,
                n_mappers: args.mappers,
                n_reducers: args.reducers,
                input,
                init_centers: init,
                rule: StopRule { threshold_frac: args.threshold_frac, max_iterations: args.max_iterations },
            };
            let out = run_iterative_kmeans(&client, &job)?;
            let rows = out.history.iter().map(|h| row(h.iteration, &h.metrics, args.seal_mode)).collect();
            (json!({ "centers": out.centers, "iterations": out.iterations, "diagonal": out.diagonal }), rows)
        }
    };
    if let Some(path) = &args.metrics {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(args) => run(args),
    }
}
