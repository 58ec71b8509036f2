use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use sealmr::deploy::{ClusterSpec, Launch, LocalCluster};
use sealmr::region::SealMode;

const ROUTER: &str = env!("CARGO_BIN_EXE_sealmr-router");
const CLIENT: &str = env!("CARGO_BIN_EXE_sealmr-client");
const BENCH: &str = env!("CARGO_BIN_EXE_sealmr-bench");

fn bin_dir() -> PathBuf {
    Path::new(ROUTER).parent().unwrap().to_path_buf()
}

fn script(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scripts").join(name)
}

fn process_cluster(mode: SealMode, mappers: usize, reducers: usize) -> LocalCluster {
    let mut spec = ClusterSpec::new(mode, mappers, reducers);
    spec.launch = Launch::Processes { bin_dir: bin_dir() };
    LocalCluster::start(spec).unwrap()
}

#[test]
fn child_process_cluster_runs_a_job() {
    let cluster = process_cluster(SealMode::Sealed, 2, 2);
    let client = cluster.client().unwrap();
    let spec = sealmr::client::JobSpec::new(
        "proc",
        sealmr::scripts::WORDCOUNT_MAP,
        sealmr::scripts::WORDCOUNT_REDUCE,
        2,
        2,
        "to be or not to be\n",
    );
    let out = client.run_job(&spec).unwrap();
    let got: BTreeMap<&str, u64> = out.results.0.iter().map(|(k, v)| (k.as_str(), v.as_u64().unwrap())).collect();
    assert_eq!(got, BTreeMap::from([("be", 2), ("not", 1), ("or", 1), ("to", 2)]));
}

#[test]
fn client_binary_prints_results_and_writes_metrics() {
    let cluster = process_cluster(SealMode::Sealed, 2, 1);
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    std::fs::write(&input, "Apple apple\nbanana APPLE\n").unwrap();
    let metrics = dir.path().join("metrics.csv");
    let out = Command::new(CLIENT)
        .args(["run", "--router", cluster.addr(), "--mappers", "2", "--reducers", "1", "--seal-mode", "sealed"])
        .arg("--map")
        .arg(script("wordcount_map.lua"))
        .arg("--reduce")
        .arg(script("wordcount_reduce.lua"))
        .arg("--input")
        .arg(&input)
        .arg("--metrics")
        .arg(&metrics)
        .envs(cluster.keys().to_env())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(results, serde_json::json!({"apple": 3, "banana": 1}));
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "iteration,wall_ms,split_bytes,shuffle_bytes,output_bytes,seal_mode");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!((row[0], row[5]), ("1", "sealed"));
}

#[test]
fn client_binary_runs_iterative_kmeans() {
    let cluster = process_cluster(SealMode::PassthroughCrypto, 2, 1);
    let dir = tempfile::tempdir().unwrap();
    let points = dir.path().join("points.txt");
    let init = dir.path().join("init.txt");
    std::fs::write(&points, "0,0\n0,1\n1,0\n10,10\n10,11\n11,10\n").unwrap();
    std::fs::write(&init, "0,0\n1,0\n").unwrap();
    let out = Command::new(CLIENT)
        .args(["run", "--router", cluster.addr(), "--mappers", "2", "--reducers", "1"])
        .args(["--seal-mode", "crypto-only", "--iterative", "kmeans", "--k", "2", "--threshold-frac", "0"])
        .arg("--map")
        .arg(script("kmeans_map.lua"))
        .arg("--reduce")
        .arg(script("kmeans_reduce.lua"))
        .arg("--input")
        .arg(&points)
        .arg("--init")
        .arg(&init)
        .envs(cluster.keys().to_env())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let centers: Vec<[f64; 2]> = serde_json::from_value(v["centers"].clone()).unwrap();
    let third = 1.0 / 3.0;
    let expected = [[third, third], [31.0 / 3.0, 31.0 / 3.0]];
    for (c, e) in centers.iter().zip(expected) {
        assert!((c[0] - e[0]).abs() < 1e-12 && (c[1] - e[1]).abs() < 1e-12, "{centers:?}");
    }
}

#[test]
fn bench_binary_generates_points() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("points.txt");
    let out = Command::new(BENCH)
        .args(["--n", "250", "--k", "4", "--seed", "3", "--gen-points"])
        .arg(&file)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let meta: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(meta["points"], 250);
    assert_eq!(meta["init_centers"].as_array().unwrap().len(), 4);
    let text = std::fs::read_to_string(&file).unwrap();
    assert_eq!(text.lines().count(), 250);
}

#[test]
fn bench_binary_writes_sections_and_overhead() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = Command::new(BENCH)
        .args(["--n", "300", "--k", "3", "--modes", "plain,crypto-only", "--seed", "5"])
        .args(["--mappers", "2", "--reducers", "1", "--max-iterations", "3", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.contains("# mode=plain n=300 k=3 repetition=0"));
    assert!(text.contains("# mode=crypto-only n=300 k=3 repetition=0"));
    assert!(text.contains("# overhead"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("encryption overhead"));
}

#[test]
fn router_binary_rejects_bad_keys() {
    let out = Command::new(ROUTER)
        .args(["--listen", "127.0.0.1:0", "--seal-mode", "sealed"])
        .env("SEALMR_HEADER_KEY", "zz")
        .env("RUST_BACKTRACE", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SEALMR_HEADER_KEY"));
}
