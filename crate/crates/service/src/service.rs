//! Long-running service: a ticker thread driving the simulator and the
//! sync pipeline, plus the HTTP API.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use syncer_core::clock::SystemClock;
use syncer_core::fetcher::SimAdapter;
use tokio::sync::oneshot;

use crate::api;
use crate::config::ServiceConfig;
use crate::node::Node;
use crate::simulation::Producer;

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SimProgress {
    ticks: u64,
}

fn sim_progress_path(dir: &Path) -> PathBuf {
    dir.join("simulator.json")
}

/// Rebuilds the simulated chains, fast-forwarding through the ticks a
/// previous process already produced.
fn restore_producer(config: &ServiceConfig) -> anyhow::Result<Producer> {
    let mut producer = Producer::new(config.simulator.seed, config.chains.clone(), config.emitters.clone())?;
    producer.prefill()?;
    let path = sim_progress_path(&config.data_dir);
    let done: SimProgress = match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).with_context(|| format!("corrupt {}", path.display()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => SimProgress::default(),
        Err(e) => return Err(e).with_context(|| format!("cannot read {}", path.display())),
    };
    for _ in 0..done.ticks {
        producer.step()?;
    }
    Ok(producer)
}

fn save_producer_ticks(dir: &Path, ticks: u64) -> std::io::Result<()> {
    let tmp = dir.join("simulator.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec(&SimProgress { ticks }).expect("serializes"))?;
    std::fs::rename(tmp, sim_progress_path(dir))
}

pub struct ServiceHandle {
    pub addr: SocketAddr,
    pub node: Arc<Node>,
    stop: Arc<AtomicBool>,
    ticker: Option<JoinHandle<()>>,
    http_shutdown: Option<oneshot::Sender<()>>,
    http: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

impl std::fmt::Debug for ServiceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceHandle").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl ServiceHandle {
    /// Stops accepting requests, lets the in-flight tick finish and joins.
    pub async fn shutdown(mut self) -> anyhow::Result<()> {
        if let Some(tx) = self.http_shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(http) = self.http.take() {
            http.await??;
        }
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.ticker.take() {
            tokio::task::spawn_blocking(move || t.join())
                .await?
                .map_err(|_| anyhow::anyhow!("ticker thread panicked"))?;
        }
        Ok(())
    }
}

/// Opens state, binds the API and starts ticking.
pub async fn start_service(config: ServiceConfig) -> anyhow::Result<ServiceHandle> {
    config.validate()?;
    config.prepare_paths()?;
    let producer = restore_producer(&config)?;
    let node = Node::open(
        SimAdapter::all(producer.sim()),
        Arc::new(SystemClock),
        config.node_options(),
        None,
    )?;
    let node = Arc::new(node);

    let listener = tokio::net::TcpListener::bind(config.api.bind)
        .await
        .with_context(|| format!("cannot bind {}", config.api.bind))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = api::router(node.clone());
    let http = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });

    let stop = Arc::new(AtomicBool::new(false));
    let ticker = {
        let node = node.clone();
        let stop = stop.clone();
        let mut producer = producer;
        let interval = Duration::from_millis(config.scheduler.tick_interval_ms);
        let dir = config.data_dir.clone();
        std::thread::Builder::new().name("ticker".into()).spawn(move || {
            let mut ticks = restore_ticks(&dir);
            while !stop.load(Ordering::SeqCst) {
                let started = std::time::Instant::now();
                if let Err(err) = producer.step() {
                    tracing::error!(%err, "block production failed");
                }
                ticks += 1;
                if let Err(err) = save_producer_ticks(&dir, ticks) {
                    tracing::error!(%err, "cannot record simulator progress");
                }
                let (report, delivery) = node.tick();
                tracing::debug!(jobs = report.jobs.len(), delivered = delivery.delivered, "tick");
                let rest = interval.saturating_sub(started.elapsed());
                let deadline = std::time::Instant::now() + rest;
                while !stop.load(Ordering::SeqCst) && std::time::Instant::now() < deadline {
                    std::thread::sleep(Duration::from_millis(10).min(rest));
                }
            }
        })?
    };

    Ok(ServiceHandle {
        addr,
        node,
        stop,
        ticker: Some(ticker),
        http_shutdown: Some(tx),
        http: Some(http),
    })
}

fn restore_ticks(dir: &Path) -> u64 {
    std::fs::read(sim_progress_path(dir))
        .ok()
        .and_then(|b| serde_json::from_slice::<SimProgress>(&b).ok())
        .map_or(0, |p| p.ticks)
}
