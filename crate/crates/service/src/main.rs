use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use syncer_core::fetcher::{FetchRequest, Fetcher, SimAdapter};
use syncer_core::faults::FaultInjector;
use syncer_core::types::{ChainId, EventKey};
use syncer_service::config::{ServiceConfig, CONFIG_ENV};
use syncer_service::scenario::{run_scenario, RunOptions};
use syncer_service::service::start_service;
use syncer_service::simulation::Producer;

#[derive(Debug, Parser)]
#[command(name = "syncer", version, about = "Multi-chain event syncer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the syncer with its HTTP API.
    Serve(ServeArgs),
    /// Register an event of interest with a running service.
    Register(RegisterArgs),
    /// Subscribe a webhook URL to a registration.
    Subscribe(SubscribeArgs),
    /// Run a query against the event store.
    Query(QueryArgs),
    /// Show backfill progress per registration.
    BackfillStatus(ApiArgs),
    /// Run a scenario file and check its assertions.
    Scenario(ScenarioArgs),
    /// One-shot range fetch from the configured chains, split across sporks.
    Fetch(FetchArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file; also read from the SYNCER_CONFIG environment variable.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ServiceConfig> {
        match &self.config {
            Some(p) => Ok(ServiceConfig::load(p)?),
            None => Ok(ServiceConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    bind: Option<std::net::SocketAddr>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    store_path: Option<PathBuf>,
    #[arg(long)]
    queue_path: Option<PathBuf>,
    #[arg(long)]
    worker_count: Option<usize>,
    #[arg(long)]
    tick_interval_ms: Option<u64>,
    #[arg(long)]
    partition_size: Option<u64>,
    #[arg(long)]
    max_attempts: Option<u32>,
}

#[derive(Debug, Args)]
struct ApiArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    api: String,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[command(flatten)]
    api: ApiArgs,
    #[arg(long)]
    chain: String,
    #[arg(long)]
    contract: String,
    #[arg(long)]
    signature: String,
    #[arg(long, default_value_t = 0)]
    init: u64,
    /// Mapping schema as a JSON file.
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Debug, Args)]
struct SubscribeArgs {
    #[command(flatten)]
    api: ApiArgs,
    #[arg(long)]
    registration: String,
    #[arg(long)]
    url: String,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[command(flatten)]
    api: ApiArgs,
    /// QuerySpec JSON file, or `-` for stdin.
    spec: PathBuf,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    file: PathBuf,
    /// Keep journals here so the run can be resumed after a crash.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Kill the process with SIGKILL at the N-th checkpoint.
    #[arg(long)]
    crash_after_checkpoints: Option<u64>,
    /// Write the final report as JSON to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct FetchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    chain: String,
    #[arg(long)]
    from: u64,
    #[arg(long)]
    to: u64,
    /// Simulator ticks to run before fetching.
    #[arg(long, default_value_t = 0)]
    ticks: u64,
    #[arg(long, requires = "signature")]
    contract: Option<String>,
    #[arg(long, requires = "contract")]
    signature: Option<String>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,syncer_service=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Register(a) => register(a),
        Command::Subscribe(a) => subscribe(a),
        Command::Query(a) => query(a),
        Command::BackfillStatus(a) => get(&a.api, "/v1/backfill"),
        Command::Scenario(a) => return scenario(a),
        Command::Fetch(a) => fetch(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let mut config = args.config.load()?;
    if let Some(b) = args.bind {
        config.api.bind = b;
    }
    if let Some(d) = args.data_dir {
        config.data_dir = d;
    }
    if args.store_path.is_some() {
        config.store_path = args.store_path;
    }
    if args.queue_path.is_some() {
        config.queue_path = args.queue_path;
    }
    if let Some(w) = args.worker_count {
        config.scheduler.worker_count = w;
    }
    if let Some(t) = args.tick_interval_ms {
        config.scheduler.tick_interval_ms = t;
    }
    if args.partition_size.is_some() {
        config.scheduler.partition_size = args.partition_size;
    }
    if let Some(m) = args.max_attempts {
        config.delivery.max_attempts = m;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let handle = start_service(config).await?;
        eprintln!("listening on http://{}", handle.addr);
        shutdown_signal().await;
        eprintln!("shutting down");
        handle.shutdown().await
    })
}

async fn shutdown_signal() {
    let ctrl_c = tokio::signal::ctrl_c();
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = ctrl_c.await;
    }
}

fn print_response(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> anyhow::Result<()> {
    let mut resp = resp?;
    let status = resp.status();
    let body = resp.body_mut().read_to_string()?;
    match serde_json::from_str::<serde_json::Value>(&body) {
        Ok(v) => println!("{}", serde_json::to_string_pretty(&v)?),
        Err(_) => println!("{body}"),
    }
    if !status.is_success() {
        bail!("request failed with {status}");
    }
    Ok(())
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(api: &str, path: &str) -> anyhow::Result<()> {
    print_response(agent().get(&format!("{}{path}", api.trim_end_matches('/'))).call())
}

fn post_json(api: &str, path: &str, body: &serde_json::Value) -> anyhow::Result<()> {
    print_response(
        agent()
            .post(&format!("{}{path}", api.trim_end_matches('/')))
            .header("content-type", "application/json")
            .send(serde_json::to_vec(body)?),
    )
}

fn read_json(path: &PathBuf) -> anyhow::Result<serde_json::Value> {
    let text = if path.as_os_str() == "-" {
        std::io::read_to_string(std::io::stdin())?
    } else {
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?
    };
    serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))
}

fn register(args: RegisterArgs) -> anyhow::Result<()> {
    let schema = read_json(&args.schema)?;
    let body = serde_json::json!({
        "chainId": args.chain,
        "contractAddress": args.contract,
        "eventSignature": args.signature,
        "initBlockHeight": args.init,
        "mappingSchema": schema,
    });
    post_json(&args.api.api, "/v1/registrations", &body)
}

fn subscribe(args: SubscribeArgs) -> anyhow::Result<()> {
    let body = serde_json::json!({ "registrationId": args.registration, "url": args.url });
    post_json(&args.api.api, "/v1/subscriptions", &body)
}

fn query(args: QueryArgs) -> anyhow::Result<()> {
    let spec = read_json(&args.spec)?;
    post_json(&args.api.api, "/v1/query", &spec)
}

fn scenario(args: ScenarioArgs) -> ExitCode {
    let on_checkpoint = args.crash_after_checkpoints.map(|limit| {
        let seen = Arc::new(AtomicU64::new(0));
        Arc::new(move |_| {
            if seen.fetch_add(1, Ordering::SeqCst) + 1 >= limit {
                // Simulates a hard crash: no destructors, no flushing beyond
                // what the journals already did.
                unsafe {
                    libc::kill(libc::getpid(), libc::SIGKILL);
                }
            }
        }) as syncer_core::sync::CheckpointHook
    });
    let options = RunOptions {
        data_dir: args.data_dir,
        on_checkpoint,
        verbose: args.verbose,
    };
    match run_scenario(&args.file, options) {
        Ok(report) => {
            for a in &report.assertions {
                println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.check, a.message);
            }
            println!(
                "{} {} after {} ticks ({} checkpoints, {} ms)",
                if report.passed { "PASSED" } else { "FAILED" },
                report.name,
                report.ticks,
                report.checkpoints,
                report.elapsed_ms
            );
            if let Some(first) = report.first_failure() {
                eprintln!("first failing assertion: #{} {}", first.index, first.check);
            }
            if let Some(path) = args.report {
                let json = serde_json::to_vec_pretty(&report).expect("report serializes");
                if let Err(e) = std::fs::write(&path, json) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn fetch(args: FetchArgs) -> anyhow::Result<()> {
    let config = args.config.load()?;
    if config.chains.is_empty() {
        bail!("no chains configured; pass --config");
    }
    let mut producer = Producer::new(config.simulator.seed, config.chains.clone(), config.emitters.clone())?;
    producer.prefill()?;
    for _ in 0..args.ticks {
        producer.step()?;
    }
    let fetcher = Fetcher::new(SimAdapter::all(producer.sim()), Arc::new(FaultInjector::new()));
    let chain = ChainId::new(args.chain);
    let request = FetchRequest {
        chain_id: chain.clone(),
        from_height: args.from,
        to_height: args.to,
        eoi_filter: match (args.contract, args.signature) {
            (Some(c), Some(s)) => BTreeSet::from([EventKey::new(c, s)]),
            _ => BTreeSet::new(),
        },
    };
    for piece in fetcher.split(&request)? {
        eprintln!("[{}, {}] via {}", piece.from, piece.to, piece.endpoint);
    }
    let events = fetcher.fetch_raw(&chain, args.from, args.to)?;
    let mut out = std::io::stdout().lock();
    for e in events.iter().filter(|e| request.eoi_filter.is_empty() || request.eoi_filter.contains(&e.key())) {
        use std::io::Write;
        writeln!(out, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}
