use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use serde_json::json;
use sealmr::bench::{self, BenchConfig, GenParams, InitCenters};
use sealmr::deploy::Launch;
use sealmr::kmeans::StopRule;
use sealmr::region::SealMode;

/// k-means benchmark over a matrix of sizes, center counts and seal modes.
/// Launches a local router and workers per cell.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Point counts.
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
    n: Vec<usize>,
    /// Center counts.
    #[arg(long, value_delimiter = ',', default_value = "10,50")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "plain,crypto-only,sealed")]
    modes: Vec<SealMode>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[arg(long, default_value_t = 8)]
    mappers: usize,
    #[arg(long, default_value_t = 5)]
    reducers: usize,
    #[arg(long, default_value_t = StopRule::DEFAULT_FRAC)]
    threshold_frac: f64,
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
    /// Corner fraction of the domain for initial centers.
    #[arg(long, default_value_t = 0.1)]
    corner: f64,
    /// Run router and workers as threads instead of child processes.
    #[arg(long)]
    threads: bool,
    /// Only write generated points (first n and k) to this file and print
    /// their bounding box.
    #[arg(long)]
    gen_points: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Some(path) = &args.gen_points {
        let (n, k) = (args.n[0], args.k[0]);
        let data = bench::gen_points(&GenParams { init: InitCenters::Corner(args.corner), ..GenParams::new(n, k, args.seed) });
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        bench::write_points(&data, BufWriter::new(f))?;
        let out = json!({
            "points": n,
            "bbox": { "min": data.bbox.min, "max": data.bbox.max },
            "diagonal": data.bbox.diagonal(),
            "init_centers": data.init_centers,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    let mut cfg = BenchConfig::new(args.n, args.k, args.modes, args.seed);
    cfg.repetitions = args.repetitions;
    cfg.n_mappers = args.mappers;
    cfg.n_reducers = args.reducers;
    cfg.rule = StopRule { threshold_frac: args.threshold_frac, max_iterations: args.max_iterations };
    cfg.init = InitCenters::Corner(args.corner);
    cfg.launch = if args.threads { Launch::Threads } else { Launch::sibling_processes()? };
    let report = bench::run_matrix(&cfg)?;
    let f = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    bench::write_csv(&report, BufWriter::new(f))?;
    for c in &report.cells {
        eprintln!(
            "n={:>7} k={:>3} {:<11} iterations={:>3} mean_iteration_ms={:>9.2} cv={:.3}",
            c.n, c.k, c.mode, c.iterations, c.mean_iteration_ms, c.cv_iteration_ms
        );
    }
    for o in &report.overheads {
        let show = |v: Option<f64>| v.map_or("n/a".to_owned(), |p| format!("{p:.1}%"));
        eprintln!(
            "n={:>7} k={:>3} encryption overhead {} region overhead {}",
            o.n,
            o.k,
            show(o.encryption_overhead_pct),
            show(o.region_overhead_pct)
        );
    }
    eprintln!("wrote {}", args.out.display());
    Ok(())
}
