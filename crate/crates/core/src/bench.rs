//! Synthetic k-means data and the benchmark matrix.

use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::client::{self, ClientError, KmeansJob, KmeansOutcome};
use crate::deploy::{ClusterSpec, Launch, LaunchError, LocalCluster};
use crate::kmeans::{self, BoundingBox, Point, StopRule};
use crate::region::SealMode;
use crate::scripts;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("mode {mode} produced different centers than {reference} for n={n}, k={k}")]
    ModeMismatch { mode: SealMode, reference: SealMode, n: usize, k: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// How initial centers are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitCenters {
    /// Uniform in the bottom-left corner: `[0, frac*w] x [0, frac*h]`.
    Corner(f64),
    /// The first `k` generated points.
    FromData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenParams {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    /// Points lie in `[0, width] x [0, height]`.
    pub width: f64,
    pub height: f64,
    /// Standard deviation of each blob as a fraction of the domain width.
    pub spread: f64,
    pub init: InitCenters,
}

impl GenParams {
    pub fn new(n: usize, k: usize, seed: u64) -> Self {
        GenParams { n, k, seed, width: 1000.0, height: 1000.0, spread: 0.05, init: InitCenters::Corner(0.1) }
    }

    pub fn domain(&self) -> BoundingBox {
        BoundingBox { min: [0.0, 0.0], max: [self.width, self.height] }
    }
}

#[derive(Debug, Clone)]
pub struct PointSet {
    pub points: Vec<Point>,
    /// One `x,y` line per point; parses back to exactly `points`.
    pub text: Arc<str>,
    pub bbox: BoundingBox,
    pub init_centers: Vec<Point>,
}

fn quantize(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

/// Gaussian blobs around `k` uniformly placed true centers, clamped to the
/// domain and rounded to six decimals. Deterministic per seed.
pub fn gen_points(p: &GenParams) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let k = p.k.max(1);
    let truth: Vec<Point> =
        (0..k).map(|_| [rng.gen_range(0.0..=p.width), rng.gen_range(0.0..=p.height)]).collect();
    let noise = Normal::new(0.0, p.spread * p.width).expect("finite spread");
    let mut points = Vec::with_capacity(p.n);
    let mut text = String::with_capacity(p.n * 24);
    for _ in 0..p.n {
        let c = truth[rng.gen_range(0..k)];
        let x = quantize((c[0] + noise.sample(&mut rng)).clamp(0.0, p.width));
        let y = quantize((c[1] + noise.sample(&mut rng)).clamp(0.0, p.height));
        text.push_str(&format!("{x:.6},{y:.6}\n"));
        points.push([x, y]);
    }
    let init_centers = match p.init {
        InitCenters::Corner(frac) => (0..p.k)
            .map(|_| {
                [quantize(rng.gen_range(0.0..=frac * p.width)), quantize(rng.gen_range(0.0..=frac * p.height))]
            })
            .collect(),
        InitCenters::FromData => points.iter().take(p.k).copied().collect(),
    };
    let bbox = BoundingBox::of(&points).unwrap_or_else(|| p.domain());
    PointSet { points, text: text.into(), bbox, init_centers }
}

/// One CSV row per k-means iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub wall_ms: f64,
    pub split_bytes: u64,
    pub shuffle_bytes: u64,
    pub output_bytes: u64,
    pub mode: String,
    pub cache_proxy: f64,
}

pub fn metrics_rows(outcome: &KmeansOutcome, mode: SealMode) -> Vec<MetricsRow> {
    outcome
        .history
        .iter()
        .map(|it| MetricsRow {
            iteration: it.iteration,
            wall_ms: it.metrics.wall_ms,
            split_bytes: it.metrics.split_bytes,
            shuffle_bytes: it.metrics.shuffle_bytes,
            output_bytes: it.metrics.output_bytes,
            mode: mode.to_string(),
            cache_proxy: if mode.guarded() { it.metrics.cache_proxy() } else { 0.0 },
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n_points: Vec<usize>,
    pub k_centers: Vec<usize>,
    pub n_mappers: usize,
    pub n_reducers: usize,
    pub seal_modes: Vec<SealMode>,
    pub seed: u64,
    pub repetitions: usize,
    pub rule: StopRule,
    pub init: InitCenters,
    pub launch: Launch,
}

impl BenchConfig {
    pub fn new(n_points: Vec<usize>, k_centers: Vec<usize>, seal_modes: Vec<SealMode>, seed: u64) -> Self {
        BenchConfig {
            n_points,
            k_centers,
            n_mappers: 8,
            n_reducers: 5,
            seal_modes,
            seed,
            repetitions: 1,
            rule: StopRule::new(StopRule::DEFAULT_FRAC),
            init: InitCenters::Corner(0.1),
            launch: Launch::Threads,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Section {
    pub mode: SealMode,
    pub n: usize,
    pub k: usize,
    pub repetition: usize,
    pub rows: Vec<MetricsRow>,
}

/// Mean per-iteration time of one (n, k, mode) cell across repetitions.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub n: usize,
    pub k: usize,
    pub mode: String,
    pub iterations: usize,
    pub mean_iteration_ms: f64,
    pub cv_iteration_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverheadRow {
    pub n: usize,
    pub k: usize,
    /// Mean over the available with/without-encryption pairs.
    pub encryption_overhead_pct: Option<f64>,
    /// Guarded region versus encryption alone.
    pub region_overhead_pct: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub sections: Vec<Section>,
    pub cells: Vec<CellSummary>,
    pub overheads: Vec<OverheadRow>,
    /// Final centers per (n, k), identical across modes.
    pub centers: Vec<((usize, usize), Vec<Point>)>,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample coefficient of variation; zero for fewer than two samples.
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let m = mean(xs);
    if xs.len() < 2 || m == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt() / m
}

fn pct(with: f64, without: f64) -> f64 {
    (with / without - 1.0) * 100.0
}

/// Encryption overhead averaged over every (with, without) pair that was
/// measured. Only the unguarded pair exists here: a guarded region without
/// encryption is not a supported mode.
pub fn encryption_overhead(time_of: impl Fn(SealMode) -> Option<f64>) -> Option<f64> {
    let pairs = [(SealMode::PassthroughCrypto, SealMode::PassthroughNoCrypto)];
    let values: Vec<f64> =
        pairs.iter().filter_map(|&(with, without)| Some(pct(time_of(with)?, time_of(without)?))).collect();
    (!values.is_empty()).then(|| mean(&values))
}

pub fn region_overhead(time_of: impl Fn(SealMode) -> Option<f64>) -> Option<f64> {
    Some(pct(time_of(SealMode::Sealed)?, time_of(SealMode::PassthroughCrypto)?))
}

/// Runs every (n, k, mode, repetition) cell on a fresh local cluster.
/// Aborts if any mode's final centers differ from the first mode's.
pub fn run_matrix(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.seal_modes.is_empty() || cfg.repetitions == 0 {
        return Err(BenchError::Config("need at least one mode and one repetition".into()));
    }
    let mut report = BenchReport::default();
    for &n in &cfg.n_points {
        for &k in &cfg.k_centers {
            let data = gen_points(&GenParams { init: cfg.init, ..GenParams::new(n, k, cfg.seed) });
            let mut reference: Option<(SealMode, Vec<Point>)> = None;
            let mut cell_times = Vec::new();
            for &mode in &cfg.seal_modes {
                let mut per_rep = Vec::new();
                let mut iterations = 0;
                for repetition in 0..cfg.repetitions {
                    let outcome = run_once(cfg, mode, &data, &format!("bench-{n}-{k}-{mode}-{repetition}"))?;
                    match &reference {
                        None => reference = Some((mode, outcome.centers.clone())),
                        Some((ref_mode, centers)) if *centers != outcome.centers => {
                            return Err(BenchError::ModeMismatch { mode, reference: *ref_mode, n, k });
                        }
                        Some(_) => {}
                    }
                    let rows = metrics_rows(&outcome, mode);
                    per_rep.push(mean(&rows.iter().map(|r| r.wall_ms).collect::<Vec<_>>()));
                    iterations = outcome.iterations;
                    report.sections.push(Section { mode, n, k, repetition, rows });
                    log::info!("bench n={n} k={k} mode={mode} rep={repetition}: {iterations} iterations");
                }
                let summary = CellSummary {
                    n,
                    k,
                    mode: mode.to_string(),
                    iterations,
                    mean_iteration_ms: mean(&per_rep),
                    cv_iteration_ms: coefficient_of_variation(&per_rep),
                };
                cell_times.push((mode, summary.mean_iteration_ms));
                report.cells.push(summary);
            }
            let time_of = |m: SealMode| cell_times.iter().find(|(mode, _)| *mode == m).map(|(_, t)| *t);
            report.overheads.push(OverheadRow {
                n,
                k,
                encryption_overhead_pct: encryption_overhead(time_of),
                region_overhead_pct: region_overhead(time_of),
            });
            if let Some((_, centers)) = reference {
                report.centers.push(((n, k), centers));
            }
        }
    }
    Ok(report)
}

fn run_once(cfg: &BenchConfig, mode: SealMode, data: &PointSet, prefix: &str) -> Result<KmeansOutcome, BenchError> {
    let mut spec = ClusterSpec::new(mode, cfg.n_mappers, cfg.n_reducers);
    spec.launch = cfg.launch.clone();
    let cluster = LocalCluster::start(spec)?;
    let mut client_cfg = cluster.client_config();
    client_cfg.result_timeout = Duration::from_secs(600);
    let client = client::Client::connect(cluster.addr(), client_cfg)?;
    let job = KmeansJob {
        job_prefix: prefix.to_owned(),
        map_script: scripts::KMEANS_MAP.to_owned(),
        reduce_script: scripts::KMEANS_REDUCE.to_owned(),
        n_mappers: cfg.n_mappers,
        n_reducers: cfg.n_reducers,
        input: Arc::clone(&data.text),
        init_centers: data.init_centers.clone(),
        rule: cfg.rule,
    };
    let outcome = client::run_iterative_kmeans(&client, &job)?;
    drop(client);
    cluster.shutdown();
    Ok(outcome)
}

fn section<W: Write>(out: &mut W, title: &str, rows: impl IntoIterator<Item = impl Serialize>) -> Result<(), BenchError> {
    writeln!(out, "# {title}")?;
    let mut w = csv::Writer::from_writer(&mut *out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One CSV section per (mode, n, k, repetition), then the per-cell summary
/// and the overhead table. Section titles are `#` comment lines.
pub fn write_csv<W: Write>(report: &BenchReport, mut out: W) -> Result<(), BenchError> {
    for s in &report.sections {
        section(&mut out, &format!("mode={} n={} k={} repetition={}", s.mode, s.n, s.k, s.repetition), &s.rows)?;
    }
    section(&mut out, "summary", &report.cells)?;
    section(&mut out, "overhead", &report.overheads)?;
    Ok(())
}

/// Writes `points` as `x,y` lines.
pub fn write_points<W: Write>(data: &PointSet, mut out: W) -> std::io::Result<()> {
    out.write_all(data.text.as_bytes())
}

pub fn format_centers(centers: &[Point]) -> Vec<String> {
    centers.iter().map(kmeans::format_point).collect()
}
