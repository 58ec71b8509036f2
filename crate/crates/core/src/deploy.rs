//! Single-host deployments: one router plus dedicated mapper and reducer
//! workers, either as threads of this process or as child processes.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::client::{Client, ClientConfig, ClientError};
use crate::region::{RegionKeys, SealMode};
use crate::router::server::Capture;
use crate::router::{Router, RouterConfig, RouterHandle};
use crate::script::{Role, DEFAULT_BUDGET};
use crate::worker::{self, WorkerConfig, WorkerError, WorkerHandle};

pub const ROUTER_BIN: &str = "sealmr-router";
pub const WORKER_BIN: &str = "sealmr-worker";

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("router: {0}")]
    Router(std::io::Error),
    #[error(transparent)]
    Worker(#[from] WorkerError),
    #[error("spawning {bin}: {source}")]
    Spawn { bin: String, source: std::io::Error },
    #[error("{bin} exited before reporting readiness")]
    NotReady { bin: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Launch {
    Threads,
    /// Child processes started from the binaries in this directory.
    Processes { bin_dir: PathBuf },
}

impl Launch {
    /// Child processes next to the running executable.
    pub fn sibling_processes() -> std::io::Result<Launch> {
        let exe = std::env::current_exe()?;
        let dir = exe.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Launch::Processes { bin_dir: dir })
    }
}

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub mode: SealMode,
    pub mappers: usize,
    pub reducers: usize,
    pub keys: RegionKeys,
    pub budget: u64,
    /// EOS delay per mapper worker, by launch order; missing entries mean none.
    pub mapper_eos_delays: Vec<Duration>,
    pub capture: bool,
    pub launch: Launch,
}

impl ClusterSpec {
    pub fn new(mode: SealMode, mappers: usize, reducers: usize) -> Self {
        ClusterSpec {
            mode,
            mappers,
            reducers,
            keys: RegionKeys::random(),
            budget: DEFAULT_BUDGET,
            mapper_eos_delays: Vec::new(),
            capture: false,
            launch: Launch::Threads,
        }
    }
}

enum RouterProc {
    InProcess(RouterHandle),
    Child(Child),
}

enum WorkerProc {
    Thread(WorkerHandle),
    Child(Child),
}

pub struct LocalCluster {
    spec: ClusterSpec,
    addr: String,
    router: Option<RouterProc>,
    workers: Vec<WorkerProc>,
}

fn spawn_child(bin: &Path, args: &[String], keys: &RegionKeys) -> Result<(Child, BufReader<ChildStdout>, String), LaunchError> {
    let name = bin.display().to_string();
    let mut cmd = Command::new(bin);
    cmd.args(args).stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::inherit());
    for (k, v) in keys.to_env() {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().map_err(|source| LaunchError::Spawn { bin: name.clone(), source })?;
    let mut out = BufReader::new(child.stdout.take().expect("piped stdout"));
    let mut line = String::new();
    if out.read_line(&mut line).unwrap_or(0) == 0 {
        let _ = child.kill();
        let _ = child.wait();
        return Err(LaunchError::NotReady { bin: name });
    }
    Ok((child, out, line.trim().to_owned()))
}

/// Keeps a child's stdout drained so it never blocks on a full pipe.
fn drain(out: BufReader<ChildStdout>) {
    std::thread::spawn(move || {
        for line in out.lines() {
            if line.is_err() {
                break;
            }
        }
    });
}

impl LocalCluster {
    pub fn start(spec: ClusterSpec) -> Result<Self, LaunchError> {
        let mut cluster = LocalCluster { addr: String::new(), router: None, workers: Vec::new(), spec };
        let spec = cluster.spec.clone();
        match &spec.launch {
            Launch::Threads => {
                let mut cfg = RouterConfig::new("127.0.0.1:0", spec.mode, spec.keys.router_only());
                cfg.capture = spec.capture;
                let handle = Router::spawn(cfg).map_err(LaunchError::Router)?;
                cluster.addr = handle.addr().to_string();
                cluster.router = Some(RouterProc::InProcess(handle));
            }
            Launch::Processes { bin_dir } => {
                let mut args = vec!["--listen".into(), "127.0.0.1:0".into(), "--seal-mode".into(), spec.mode.to_string()];
                if spec.capture {
                    args.push("--capture".into());
                }
                let (child, out, line) = spawn_child(&bin_dir.join(ROUTER_BIN), &args, &spec.keys.router_only())?;
                cluster.router = Some(RouterProc::Child(child));
                cluster.addr = line.rsplit(' ').next().unwrap_or_default().to_owned();
                drain(out);
            }
        }
        for i in 0..spec.mappers + spec.reducers {
            let (role, delay) = if i < spec.mappers {
                (Role::Mapper, spec.mapper_eos_delays.get(i).copied().unwrap_or_default())
            } else {
                (Role::Reducer, Duration::ZERO)
            };
            let w = cluster.start_worker(role, delay)?;
            cluster.workers.push(w);
        }
        Ok(cluster)
    }

    fn start_worker(&self, role: Role, eos_delay: Duration) -> Result<WorkerProc, LaunchError> {
        let spec = &self.spec;
        match &spec.launch {
            Launch::Threads => {
                let mut cfg = WorkerConfig::new(spec.mode, spec.keys.clone(), [role]);
                cfg.budget = spec.budget;
                cfg.eos_delay = eos_delay;
                Ok(WorkerProc::Thread(worker::spawn(self.addr.clone(), cfg)?))
            }
            Launch::Processes { bin_dir } => {
                let args = vec![
                    "--router".into(),
                    self.addr.clone(),
                    "--roles".into(),
                    role.as_str().into(),
                    "--seal-mode".into(),
                    spec.mode.to_string(),
                    "--script-budget".into(),
                    spec.budget.to_string(),
                    "--eos-delay-ms".into(),
                    eos_delay.as_millis().to_string(),
                ];
                let (child, out, _) = spawn_child(&bin_dir.join(WORKER_BIN), &args, &spec.keys)?;
                drain(out);
                Ok(WorkerProc::Child(child))
            }
        }
    }

    /// Adds one more worker (e.g. a surplus volunteer).
    pub fn add_worker(&mut self, role: Role) -> Result<(), LaunchError> {
        let w = self.start_worker(role, Duration::ZERO)?;
        self.workers.push(w);
        Ok(())
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn mode(&self) -> SealMode {
        self.spec.mode
    }

    pub fn keys(&self) -> &RegionKeys {
        &self.spec.keys
    }

    pub fn router(&self) -> Option<&RouterHandle> {
        match &self.router {
            Some(RouterProc::InProcess(h)) => Some(h),
            _ => None,
        }
    }

    pub fn capture(&self) -> Option<Arc<Capture>> {
        self.router().and_then(RouterHandle::capture)
    }

    /// Worker ids of in-process workers, in launch order.
    pub fn worker_ids(&self) -> Vec<u64> {
        self.workers
            .iter()
            .filter_map(|w| match w {
                WorkerProc::Thread(h) => Some(h.id()),
                WorkerProc::Child(_) => None,
            })
            .collect()
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig::new(self.spec.mode, self.spec.keys.clone())
    }

    pub fn client(&self) -> Result<Client, ClientError> {
        Client::connect(self.addr.clone(), self.client_config())
    }

    /// Stops workers first, then the router. Returns reports of in-process
    /// workers.
    pub fn shutdown(mut self) -> Vec<worker::WorkerReport> {
        self.stop_all()
    }

    fn stop_all(&mut self) -> Vec<worker::WorkerReport> {
        let mut reports = Vec::new();
        for w in self.workers.drain(..) {
            match w {
                WorkerProc::Thread(h) => match h.stop() {
                    Ok(r) => reports.push(r),
                    Err(e) => log::warn!("worker stopped with error: {e}"),
                },
                WorkerProc::Child(mut c) => {
                    let _ = c.kill();
                    let _ = c.wait();
                }
            }
        }
        match self.router.take() {
            Some(RouterProc::InProcess(h)) => h.shutdown(),
            Some(RouterProc::Child(mut c)) => {
                let _ = c.kill();
                let _ = c.wait();
            }
            None => {}
        }
        reports
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        self.stop_all();
    }
}
