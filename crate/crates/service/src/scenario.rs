//! Deterministic scenario runner.
//!
//! A scenario is a TOML file: chains, random emitters, receivers, a tick
//! script of chain and registry actions, and assertions checked at the end.
//! Ticks run on a virtual clock. With a data directory the run is
//! resumable: after a crash the chain is rebuilt from the seed up to the
//! last completed tick and everything else is reopened from its journals.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use syncer_core::chain_sim::{EventSpec, SimError};
use syncer_core::clock::{Clock, VirtualClock};
use syncer_core::dispatcher::RetryPolicy;
use syncer_core::faults::FaultStage;
use syncer_core::fetcher::{decode, SimAdapter};
use syncer_core::registry::NewRegistration;
use syncer_core::schema::{apply_schema, MappingSchema};
use syncer_core::store::{Page, QuerySpec};
use syncer_core::sync::{CheckpointHook, SchedulerConfig};
use syncer_core::types::{ChainId, Millis, NotificationId, RegistrationId, Value};

use crate::config::{validate_chains, validate_retry, validate_scheduler, ConfigError};
use crate::node::{Node, NodeError, NodeOptions, StateDump};
use crate::receiver::{FollowUp, QueryFn, ReceiverMode, SimReceiver};
use crate::simulation::{ChainDef, EmitterDef, Producer};

const CLOCK_START: Millis = 1_700_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EventDef {
    pub contract: String,
    pub signature: String,
    #[serde(default)]
    pub payload: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FollowUpDef {
    /// Registration name whose events trigger the lookup.
    pub on: String,
    /// Registration name whose records are looked up.
    pub lookup: String,
    pub column: String,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ReceiverDef {
    pub name: String,
    #[serde(default)]
    pub mode: ReceiverMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follow_up: Option<FollowUpDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum Action {
    Mint {
        at: u64,
        chain: ChainId,
        #[serde(default = "one")]
        blocks: u64,
        #[serde(default)]
        events: Vec<EventDef>,
    },
    Reorg {
        at: u64,
        chain: ChainId,
        depth: u64,
    },
    #[serde(rename_all = "camelCase")]
    Register {
        at: u64,
        name: String,
        chain: ChainId,
        contract: String,
        signature: String,
        #[serde(default)]
        init_block_height: u64,
        schema: MappingSchema,
    },
    Subscribe {
        at: u64,
        registration: String,
        receiver: String,
    },
    Fault {
        at: u64,
        stage: FaultStage,
    },
}

fn one() -> u64 {
    1
}

impl Action {
    pub fn at(&self) -> u64 {
        match self {
            Action::Mint { at, .. }
            | Action::Reorg { at, .. }
            | Action::Register { at, .. }
            | Action::Subscribe { at, .. }
            | Action::Fault { at, .. } => *at,
        }
    }

    fn touches_chain(&self) -> bool {
        matches!(self, Action::Mint { .. } | Action::Reorg { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "check")]
pub enum Assertion {
    /// Every active registration's records equal a direct scan of the
    /// canonical chain mapped through its schema.
    StoreMatchesChain,
    StoreCount {
        registration: String,
        #[serde(default)]
        equals: Option<u64>,
        #[serde(default)]
        min: Option<u64>,
    },
    ChecksumsPass,
    /// The receiver saw exactly one notification per persisted record of
    /// every registration it is subscribed to.
    ReceiverCoversStore {
        receiver: String,
    },
    /// Every triggering event produced a follow-up lookup.
    FollowUpsComplete {
        receiver: String,
        #[serde(default)]
        min: u64,
    },
    #[serde(rename_all = "camelCase")]
    UnifiedQuery {
        query: QuerySpec,
        chains: Vec<ChainId>,
    },
    DeadLetters {
        equals: u64,
    },
    Alarms {
        #[serde(default)]
        source: Option<String>,
        equals: u64,
    },
    Halted {
        registration: String,
        equals: bool,
    },
    BackfillComplete,
    CursorsAtSafeHead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    /// Scripted ticks; the run then continues until the node is idle.
    #[serde(default)]
    pub ticks: u64,
    #[serde(default = "default_drain")]
    pub max_drain_ticks: u64,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub delivery: RetryPolicy,
    #[serde(default)]
    pub chains: Vec<ChainDef>,
    #[serde(default)]
    pub emitters: Vec<EmitterDef>,
    #[serde(default)]
    pub receivers: Vec<ReceiverDef>,
    #[serde(default)]
    pub script: Vec<Action>,
    #[serde(default, rename = "assert")]
    pub assertions: Vec<Assertion>,
}

fn default_drain() -> u64 {
    2_000
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("script[{index}]: {message}")]
    Script { index: usize, message: String },
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("receiver {name}: {message}")]
    Receiver { name: String, message: String },
    #[error("progress file {path}: {message}")]
    Progress { path: PathBuf, message: String },
}

impl Scenario {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ScenarioError> {
        let scenario: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Registration names to the ids they resolve to.
    pub fn registration_ids(&self) -> BTreeMap<String, RegistrationId> {
        self.script
            .iter()
            .filter_map(|a| match a {
                Action::Register {
                    name,
                    chain,
                    contract,
                    signature,
                    ..
                } => Some((name.clone(), RegistrationId::derive(chain, contract, signature))),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        validate_chains(&self.chains, &self.emitters)?;
        validate_scheduler(&self.scheduler)?;
        validate_retry("delivery", &self.delivery)?;
        let chains: BTreeSet<&ChainId> = self.chains.iter().map(|c| &c.id).collect();
        let receivers: BTreeSet<&str> = self.receivers.iter().map(|r| r.name.as_str()).collect();
        let mut names = BTreeSet::new();
        let mut last = 0;
        for (index, action) in self.script.iter().enumerate() {
            let fail = |message: String| ScenarioError::Script { index, message };
            if action.at() < last {
                return Err(fail(format!("tick {} is earlier than the previous action", action.at())));
            }
            if action.at() > self.ticks {
                return Err(fail(format!("tick {} is past the last tick {}", action.at(), self.ticks)));
            }
            last = action.at();
            match action {
                Action::Mint { chain, .. } | Action::Reorg { chain, .. } if !chains.contains(chain) => {
                    return Err(fail(format!("unknown chain {chain}")));
                }
                Action::Reorg { chain, .. } if self.chains.iter().any(|c| &c.id == chain && c.sporks.is_some()) => {
                    return Err(fail(format!("chain {chain} is sporked and cannot reorg")));
                }
                Action::Register { name, chain, .. } => {
                    if !chains.contains(chain) {
                        return Err(fail(format!("unknown chain {chain}")));
                    }
                    if !names.insert(name.as_str()) {
                        return Err(fail(format!("registration name {name} is used twice")));
                    }
                }
                Action::Subscribe {
                    registration, receiver, ..
                } => {
                    if !names.contains(registration.as_str()) {
                        return Err(fail(format!("registration {registration} is not registered earlier")));
                    }
                    if !receivers.contains(receiver.as_str()) {
                        return Err(fail(format!("unknown receiver {receiver}")));
                    }
                }
                _ => {}
            }
        }
        let all_names: BTreeSet<String> = self.registration_ids().into_keys().collect();
        for r in &self.receivers {
            if let Some(f) = &r.follow_up {
                for n in [&f.on, &f.lookup] {
                    if !all_names.contains(n) {
                        return Err(ScenarioError::Receiver {
                            name: r.name.clone(),
                            message: format!("unknown registration {n}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Default)]
pub struct RunOptions {
    /// Journals and progress live here; `None` runs fully in memory.
    pub data_dir: Option<PathBuf>,
    /// Extra hook invoked at every checkpoint, after counting it.
    pub on_checkpoint: Option<CheckpointHook>,
    /// Log one line per tick.
    pub verbose: bool,
}

impl std::fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunOptions")
            .field("data_dir", &self.data_dir)
            .field("verbose", &self.verbose)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Progress {
    completed_tick: Option<u64>,
    clock: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AssertionResult {
    pub index: usize,
    pub check: String,
    pub passed: bool,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    pub assertions: Vec<AssertionResult>,
    pub ticks: u64,
    pub resumed_from: Option<u64>,
    pub checkpoints: u64,
    pub elapsed_ms: u64,
    pub state: StateDump,
}

impl ScenarioReport {
    pub fn first_failure(&self) -> Option<&AssertionResult> {
        self.assertions.iter().find(|a| !a.passed)
    }
}

/// A scenario in progress, exposed so tests can inspect every part.
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub producer: Producer,
    pub node: Node,
    pub clock: Arc<VirtualClock>,
    pub receivers: BTreeMap<String, Arc<SimReceiver>>,
    pub names: BTreeMap<String, RegistrationId>,
    checkpoints: Arc<AtomicU64>,
    options: RunOptions,
    next_tick: u64,
    resumed_from: Option<u64>,
    started: Instant,
}

impl std::fmt::Debug for ScenarioRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScenarioRun")
            .field("scenario", &self.scenario.name)
            .field("next_tick", &self.next_tick)
            .finish_non_exhaustive()
    }
}

fn progress_path(dir: &Path) -> PathBuf {
    dir.join("progress.json")
}

fn read_progress(dir: &Path) -> Result<Progress, ScenarioError> {
    let path = progress_path(dir);
    match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| ScenarioError::Progress {
            path,
            message: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Progress::default()),
        Err(e) => Err(ScenarioError::Progress {
            path,
            message: e.to_string(),
        }),
    }
}

fn write_progress(dir: &Path, progress: Progress) -> Result<(), ScenarioError> {
    let path = progress_path(dir);
    let tmp = dir.join("progress.json.tmp");
    let bytes = serde_json::to_vec(&progress).expect("progress serializes");
    std::fs::write(&tmp, bytes)
        .and_then(|_| std::fs::rename(&tmp, &path))
        .map_err(|e| ScenarioError::Progress {
            path,
            message: e.to_string(),
        })
}

impl ScenarioRun {
    /// Builds the simulator and node, replaying chain history when the
    /// data directory holds progress from an earlier run.
    pub fn start(scenario: Scenario, options: RunOptions) -> Result<Self, ScenarioError> {
        let progress = match &options.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| ScenarioError::Progress {
                    path: dir.clone(),
                    message: e.to_string(),
                })?;
                read_progress(dir)?
            }
            None => Progress::default(),
        };
        let mut producer = Producer::new(scenario.seed, scenario.chains.clone(), scenario.emitters.clone())?;
        producer.prefill()?;
        let clock = Arc::new(VirtualClock::new(CLOCK_START));

        if let Some(done) = progress.completed_tick {
            for tick in 0..=done.min(scenario.ticks) {
                if tick > 0 {
                    producer.step()?;
                }
                for action in scenario.script.iter().filter(|a| a.at() == tick && a.touches_chain()) {
                    apply_chain_action(&mut producer, action)?;
                }
            }
            clock.set(progress.clock);
        }

        let checkpoints = Arc::new(AtomicU64::new(0));
        let hook: CheckpointHook = {
            let counter = checkpoints.clone();
            let extra = options.on_checkpoint.clone();
            Arc::new(move |point| {
                counter.fetch_add(1, Ordering::SeqCst);
                if let Some(extra) = &extra {
                    extra(point);
                }
            })
        };
        let node_options = NodeOptions {
            data_dir: options.data_dir.clone(),
            scheduler: scenario.scheduler.clone(),
            delivery: scenario.delivery,
            ..NodeOptions::default()
        };
        let node = Node::open(SimAdapter::all(producer.sim()), clock.clone(), node_options, Some(hook))?;

        let names = scenario.registration_ids();
        let mut receivers = BTreeMap::new();
        for def in &scenario.receivers {
            let follow_up = def.follow_up.as_ref().map(|f| {
                let store = node.store.clone();
                let query: QueryFn = Arc::new(move |spec| store.query(spec));
                (
                    FollowUp {
                        on: names[&f.on].clone(),
                        lookup: names[&f.lookup].clone(),
                        column: f.column.clone(),
                        sources: f.sources.clone(),
                    },
                    query,
                )
            });
            let journal = options
                .data_dir
                .as_ref()
                .map(|d| d.join("receivers").join(format!("{}.journal", def.name)));
            if let Some(parent) = journal.as_ref().and_then(|j| j.parent()) {
                std::fs::create_dir_all(parent).map_err(|e| ScenarioError::Receiver {
                    name: def.name.clone(),
                    message: e.to_string(),
                })?;
            }
            let receiver = SimReceiver::open(
                &def.name,
                def.mode,
                scenario.seed,
                node.registry.clone(),
                follow_up,
                journal.as_deref(),
            )
            .map_err(|e| ScenarioError::Receiver {
                name: def.name.clone(),
                message: e.to_string(),
            })?;
            let receiver = Arc::new(receiver);
            node.transport.mount(&def.name, receiver.clone());
            receivers.insert(def.name.clone(), receiver);
        }

        Ok(Self {
            next_tick: progress.completed_tick.map_or(0, |t| t + 1),
            resumed_from: progress.completed_tick,
            scenario,
            producer,
            node,
            clock,
            receivers,
            names,
            checkpoints,
            options,
            started: Instant::now(),
        })
    }

    pub fn checkpoints(&self) -> u64 {
        self.checkpoints.load(Ordering::SeqCst)
    }

    pub fn next_tick(&self) -> u64 {
        self.next_tick
    }

    fn apply_action(&mut self, action: &Action) -> Result<(), ScenarioError> {
        match action {
            Action::Mint { .. } | Action::Reorg { .. } => apply_chain_action(&mut self.producer, action)?,
            Action::Register {
                name,
                chain,
                contract,
                signature,
                init_block_height,
                schema,
                ..
            } => {
                // Already journaled when resuming inside this tick.
                if self.node.registry.get(&self.names[name]).is_err() {
                    self.node.register(NewRegistration {
                        chain_id: chain.clone(),
                        contract_address: contract.clone(),
                        event_signature: signature.clone(),
                        init_block_height: *init_block_height,
                        mapping_schema: schema.clone(),
                    })?;
                }
            }
            Action::Subscribe {
                registration, receiver, ..
            } => {
                let id = &self.names[registration];
                let url = format!("sim://{receiver}");
                let exists = self
                    .node
                    .registry
                    .active_subscriptions(id)
                    .iter()
                    .any(|s| s.url == url);
                if !exists {
                    self.node.subscribe(id, &url)?;
                }
            }
            Action::Fault { stage, .. } => self.node.faults.arm(*stage, None),
        }
        Ok(())
    }

    fn finish_tick(&mut self, tick: u64) -> Result<(), ScenarioError> {
        let (report, delivery) = self.node.tick();
        if self.options.verbose {
            tracing::info!(
                tick,
                jobs = report.jobs.len(),
                failed = report.jobs.iter().filter(|j| !j.succeeded()).count(),
                delivered = delivery.delivered,
                pending = self.node.dispatcher.pending(),
                "tick"
            );
        }
        if let Some(dir) = &self.options.data_dir {
            write_progress(
                dir,
                Progress {
                    completed_tick: Some(tick),
                    clock: self.clock.now(),
                },
            )?;
        }
        self.next_tick = tick + 1;
        Ok(())
    }

    /// Runs one scripted tick. Returns false once the script is exhausted.
    pub fn step(&mut self) -> Result<bool, ScenarioError> {
        let tick = self.next_tick;
        if tick > self.scenario.ticks {
            return Ok(false);
        }
        if tick > 0 {
            self.clock.advance(self.scenario.scheduler.tick_interval_ms);
            self.producer.step()?;
        }
        let actions: Vec<Action> = self.scenario.script.iter().filter(|a| a.at() == tick).cloned().collect();
        for action in &actions {
            self.apply_action(action)?;
        }
        self.finish_tick(tick)?;
        Ok(true)
    }

    /// Ticks without chain activity until the node has nothing left to do.
    pub fn drain(&mut self) -> Result<(), ScenarioError> {
        for _ in 0..self.scenario.max_drain_ticks {
            if self.node.is_idle() {
                break;
            }
            let tick = self.next_tick;
            let mut next = self.clock.now() + self.scenario.scheduler.tick_interval_ms;
            // Only deliveries remain: skip straight to the next due one.
            if self.node.engine.plan(&self.node.engine.heads()).is_empty() {
                if let Some(due) = self.node.dispatcher.next_due() {
                    next = next.max(due);
                }
            }
            self.clock.set(next);
            self.finish_tick(tick)?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<(), ScenarioError> {
        while self.step()? {}
        self.drain()
    }

    pub fn state_dump(&self) -> StateDump {
        let mut dump = self.node.state_dump();
        dump.receivers = self
            .receivers
            .iter()
            .map(|(n, r)| (n.clone(), r.received_ids().into_iter().map(|i| i.0).collect()))
            .collect();
        dump
    }

    pub fn evaluate(&self) -> Vec<AssertionResult> {
        self.scenario
            .assertions
            .iter()
            .enumerate()
            .map(|(index, a)| {
                let (passed, message) = match self.check(a) {
                    Ok(msg) => (true, msg),
                    Err(msg) => (false, msg),
                };
                AssertionResult {
                    index,
                    check: describe(a),
                    passed,
                    message,
                }
            })
            .collect()
    }

    pub fn report(&self) -> ScenarioReport {
        let assertions = self.evaluate();
        ScenarioReport {
            name: self.scenario.name.clone(),
            passed: assertions.iter().all(|a| a.passed),
            assertions,
            ticks: self.next_tick,
            resumed_from: self.resumed_from,
            checkpoints: self.checkpoints(),
            elapsed_ms: self.started.elapsed().as_millis() as u64,
            state: self.state_dump(),
        }
    }

    fn registration(&self, name: &str) -> Result<RegistrationId, String> {
        self.names.get(name).cloned().ok_or_else(|| format!("unknown registration {name}"))
    }

    fn receiver(&self, name: &str) -> Result<&Arc<SimReceiver>, String> {
        self.receivers.get(name).ok_or_else(|| format!("unknown receiver {name}"))
    }

    fn check(&self, assertion: &Assertion) -> Result<String, String> {
        let node = &self.node;
        match assertion {
            Assertion::StoreMatchesChain => {
                let mismatches = store_vs_chain(self)?;
                if mismatches.is_empty() {
                    Ok(format!("{} records match the canonical chain", node.store.len()))
                } else {
                    Err(mismatches.join("; "))
                }
            }
            Assertion::StoreCount { registration, equals, min } => {
                let id = self.registration(registration)?;
                let n = node.store.count_by_type().get(&id).copied().unwrap_or(0);
                if equals.is_some_and(|e| e != n) || min.is_some_and(|m| n < m) {
                    Err(format!("{registration} has {n} records"))
                } else {
                    Ok(format!("{registration} has {n} records"))
                }
            }
            Assertion::ChecksumsPass => {
                let records = node.integrity.records();
                let failures = node.integrity.failures();
                let open = records.iter().filter(|r| !r.is_final()).count();
                if failures.is_empty() && open == 0 {
                    Ok(format!("{} checksum records, all passed", records.len()))
                } else {
                    Err(format!("{} failed and {open} unfinished of {}", failures.len(), records.len()))
                }
            }
            Assertion::ReceiverCoversStore { receiver } => {
                let rx = self.receiver(receiver)?;
                let url = format!("sim://{receiver}");
                let mut expected = BTreeSet::new();
                for sub in node.registry.subscriptions().iter().filter(|s| s.url == url) {
                    for record in node.store.records().iter().filter(|r| r.event_type == sub.registration_id) {
                        expected.insert(NotificationId::derive(&record.key, &sub.subscription_id));
                    }
                }
                let got = rx.received_ids();
                if got == expected {
                    Ok(format!("{} notifications received", got.len()))
                } else {
                    Err(format!(
                        "expected {} notifications, received {} ({} missing, {} unexpected)",
                        expected.len(),
                        got.len(),
                        expected.difference(&got).count(),
                        got.difference(&expected).count()
                    ))
                }
            }
            Assertion::FollowUpsComplete { receiver, min } => {
                let rx = self.receiver(receiver)?;
                let Some(def) = self
                    .scenario
                    .receivers
                    .iter()
                    .find(|r| &r.name == receiver)
                    .and_then(|r| r.follow_up.as_ref())
                else {
                    return Err(format!("receiver {receiver} has no follow-up"));
                };
                let on = self.registration(&def.on)?;
                let follow_ups = rx.follow_ups();
                let triggers: Vec<_> = rx.received().into_values().filter(|r| r.event_type == on).collect();
                let missing = triggers
                    .iter()
                    .filter(|t| follow_ups.get(&t.notification_id).is_none_or(|f| f.queried.is_empty()))
                    .count();
                if missing == 0 && triggers.len() as u64 >= *min {
                    let found: usize = follow_ups.values().map(|f| f.found.len()).sum();
                    Ok(format!("{} follow-ups, {found} metadata records found", triggers.len()))
                } else {
                    Err(format!("{missing} of {} triggers lack a follow-up", triggers.len()))
                }
            }
            Assertion::UnifiedQuery { query, chains } => {
                let mut spec = query.clone();
                spec.event_types = spec.event_types.map(|types| {
                    types
                        .into_iter()
                        .map(|t| self.names.get(t.as_str()).cloned().unwrap_or(t))
                        .collect()
                });
                let mut seen = BTreeSet::new();
                let mut total = 0;
                loop {
                    let page = node.store.query(&spec).map_err(|e| e.to_string())?;
                    total += page.records.len();
                    seen.extend(page.records.iter().map(|r| r.key.chain_id.clone()));
                    match page.next_cursor {
                        Some(c) => {
                            spec.page = Page {
                                cursor: Some(c),
                                offset: None,
                                ..spec.page
                            }
                        }
                        None => break,
                    }
                }
                let missing: Vec<_> = chains.iter().filter(|c| !seen.contains(*c)).collect();
                if missing.is_empty() {
                    Ok(format!("{total} records across {} chains", seen.len()))
                } else {
                    Err(format!("no records from {missing:?} among {total}"))
                }
            }
            Assertion::DeadLetters { equals } => {
                let n = node.dispatcher.dead_letters().len() as u64;
                if n == *equals {
                    Ok(format!("{n} dead letters"))
                } else {
                    Err(format!("{n} dead letters, expected {equals}"))
                }
            }
            Assertion::Alarms { source, equals } => {
                let n = match source {
                    Some(s) => node.alarms.count_by_source().get(s).copied().unwrap_or(0),
                    None => node.alarms.len() as u64,
                };
                if n == *equals {
                    Ok(format!("{n} alarms"))
                } else {
                    Err(format!("{n} alarms, expected {equals}"))
                }
            }
            Assertion::Halted { registration, equals } => {
                let reg = node
                    .registry
                    .get(&self.registration(registration)?)
                    .map_err(|e| e.to_string())?;
                let halted = !reg.is_active();
                if halted == *equals {
                    Ok(format!("{registration} halted={halted}"))
                } else {
                    Err(format!("{registration} halted={halted}, expected {equals}"))
                }
            }
            Assertion::BackfillComplete => {
                let pending: Vec<_> = node
                    .registry
                    .list_registrations(None)
                    .into_iter()
                    .filter(|r| r.is_active() && r.synced_start_block_height != r.init_block_height)
                    .map(|r| r.registration_id.to_string())
                    .collect();
                if pending.is_empty() {
                    Ok("all backfills collapsed".into())
                } else {
                    Err(format!("backfill pending for {}", pending.join(", ")))
                }
            }
            Assertion::CursorsAtSafeHead => {
                let heads = node.engine.heads();
                let mut behind = Vec::new();
                for r in node.registry.list_registrations(None).iter().filter(|r| r.is_active()) {
                    let depth = node.engine.params()[&r.chain_id].confirmation_depth;
                    let safe = heads[&r.chain_id].latest_height.saturating_sub(depth);
                    if r.synced_latest_block_height != safe.max(r.init_block_height) {
                        behind.push(format!("{} at {} of {safe}", r.registration_id, r.synced_latest_block_height));
                    }
                }
                if behind.is_empty() {
                    Ok("all cursors at the safe head".into())
                } else {
                    Err(behind.join(", "))
                }
            }
        }
    }
}

fn describe(a: &Assertion) -> String {
    match a {
        Assertion::StoreMatchesChain => "store_matches_chain".into(),
        Assertion::StoreCount { registration, .. } => format!("store_count({registration})"),
        Assertion::ChecksumsPass => "checksums_pass".into(),
        Assertion::ReceiverCoversStore { receiver } => format!("receiver_covers_store({receiver})"),
        Assertion::FollowUpsComplete { receiver, .. } => format!("follow_ups_complete({receiver})"),
        Assertion::UnifiedQuery { chains, .. } => format!("unified_query({chains:?})"),
        Assertion::DeadLetters { .. } => "dead_letters".into(),
        Assertion::Alarms { source, .. } => format!("alarms({})", source.as_deref().unwrap_or("any")),
        Assertion::Halted { registration, .. } => format!("halted({registration})"),
        Assertion::BackfillComplete => "backfill_complete".into(),
        Assertion::CursorsAtSafeHead => "cursors_at_safe_head".into(),
    }
}

fn apply_chain_action(producer: &mut Producer, action: &Action) -> Result<(), SimError> {
    match action {
        Action::Mint { chain, blocks, events, .. } => {
            let extra = events
                .iter()
                .map(|e| EventSpec::new(e.contract.clone(), e.signature.clone(), e.payload.clone().into_iter().collect()))
                .collect();
            producer.mint(chain, *blocks, extra)
        }
        Action::Reorg { chain, depth, .. } => producer.sim().reorg(chain, *depth).map(|_| ()),
        _ => Ok(()),
    }
}

/// Compares every active registration's stored records with a direct scan
/// of the canonical chain over `[init, latest]`.
fn store_vs_chain(run: &ScenarioRun) -> Result<Vec<String>, String> {
    let node = &run.node;
    let sim = run.producer.sim();
    let stored = node.store.records();
    let mut problems = Vec::new();
    for reg in node.registry.list_registrations(None).iter().filter(|r| r.is_active()) {
        let schema = node.registry.schema(&reg.schema_id).ok_or("schema missing")?;
        let raw = sim
            .scan_canonical(&reg.chain_id, reg.init_block_height, reg.synced_latest_block_height)
            .map_err(|e| e.to_string())?;
        let key = reg.event_key();
        let mut expected = Vec::new();
        for ev in raw.iter().filter(|e| e.matches(&key)) {
            let decoded = decode(ev, reg).map_err(|e| e.to_string())?;
            let record = apply_schema(&decoded, &schema, 0).map_err(|e| e.to_string())?;
            expected.push(record.content());
        }
        let actual: Vec<_> = stored
            .iter()
            .filter(|r| r.event_type == reg.registration_id)
            .map(|r| r.content())
            .collect();
        let expected_bytes = serde_json::to_vec(&expected).expect("records serialize");
        let actual_bytes = serde_json::to_vec(&actual).expect("records serialize");
        if expected_bytes != actual_bytes {
            problems.push(format!(
                "{}: {} stored vs {} on chain",
                reg.registration_id,
                actual.len(),
                expected.len()
            ));
        }
    }
    Ok(problems)
}

/// Loads, runs and evaluates a scenario in one call.
pub fn run_scenario(path: &Path, options: RunOptions) -> Result<ScenarioReport, ScenarioError> {
    let scenario = Scenario::load(path)?;
    let mut run = ScenarioRun::start(scenario, options)?;
    run.run_to_end()?;
    Ok(run.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scenario_passes_with_no_assertions() {
        let s = Scenario::parse("name = \"empty\"\nseed = 0\n", Path::new("empty.toml")).unwrap();
        let mut run = ScenarioRun::start(s, RunOptions::default()).unwrap();
        run.run_to_end().unwrap();
        let report = run.report();
        assert!(report.passed);
        assert!(report.assertions.is_empty());
    }

    #[test]
    fn script_must_be_monotone_and_reference_known_names() {
        let base = r#"
            name = "x"
            seed = 1
            ticks = 5
            [[chains]]
            id = "eth"
            maxBatch = 10
            confirmationDepth = 1
        "#;
        let out_of_order = format!(
            "{base}\n[[script]]\naction = \"mint\"\nat = 3\nchain = \"eth\"\n[[script]]\naction = \"mint\"\nat = 1\nchain = \"eth\"\n"
        );
        let err = Scenario::parse(&out_of_order, Path::new("x")).unwrap_err().to_string();
        assert!(err.starts_with("script[1]"), "{err}");
        let unknown = format!("{base}\n[[script]]\naction = \"mint\"\nat = 1\nchain = \"sol\"\n");
        assert!(Scenario::parse(&unknown, Path::new("x")).is_err());
        let subscribe = format!(
            "{base}\n[[receivers]]\nname = \"r\"\n[[script]]\naction = \"subscribe\"\nat = 1\nregistration = \"nope\"\nreceiver = \"r\"\n"
        );
        assert!(Scenario::parse(&subscribe, Path::new("x")).is_err());
    }
}
