//! Wires the pipeline stages together over a data directory.
//!
//! Layout under the data dir:
//!
//! ```text
//! registry.journal
//! checksums.journal
//! alarms.journal
//! store/records.journal      (or the configured store path)
//! queue/queue.journal        (or the configured queue path)
//! queue/deadletter.journal
//! receivers/<name>.journal   (scenario receivers only)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use syncer_core::chain_sim::ChainParams;
use syncer_core::clock::Clock;
use syncer_core::dispatcher::{DeliveryReport, DispatchDeps, Dispatcher, HttpTransport, RetryPolicy, RoutingTransport};
use syncer_core::faults::FaultInjector;
use syncer_core::fetcher::{ChainAdapter, Fetcher};
use syncer_core::integrity::{AlarmLog, Integrity, Metrics};
use syncer_core::journal::Durability;
use syncer_core::registry::{EventRegistration, NewRegistration, Registry, RegistryError, WebhookSubscription};
use syncer_core::store::EventStore;
use syncer_core::sync::{Checkpoint, CheckpointHook, EngineDeps, SchedulerConfig, SyncEngine, TickReport};
use syncer_core::types::{BlockHash, ChainId, RegistrationId, SubscriptionId};

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("unknown chain {0}")]
    UnknownChain(ChainId),
    #[error("chain {chain} is unavailable: {reason}")]
    ChainUnavailable { chain: ChainId, reason: String },
}

#[derive(Debug, Clone)]
pub struct NodeOptions {
    /// `None` keeps every journal in memory.
    pub data_dir: Option<PathBuf>,
    pub store_path: Option<PathBuf>,
    pub queue_path: Option<PathBuf>,
    pub durability: Durability,
    pub scheduler: SchedulerConfig,
    pub delivery: RetryPolicy,
    pub http_timeout: Duration,
}

impl Default for NodeOptions {
    fn default() -> Self {
        Self {
            data_dir: None,
            store_path: None,
            queue_path: None,
            durability: Durability::Flush,
            scheduler: SchedulerConfig::default(),
            delivery: RetryPolicy::default(),
            http_timeout: Duration::from_secs(10),
        }
    }
}

fn open_err<E: std::error::Error + Send + Sync + 'static>(path: &Path) -> impl FnOnce(E) -> NodeError + '_ {
    move |e| NodeError::Open {
        path: path.to_path_buf(),
        source: Box::new(e),
    }
}

pub struct Node {
    pub clock: Arc<dyn Clock>,
    pub faults: Arc<FaultInjector>,
    pub registry: Arc<Registry>,
    pub store: Arc<EventStore>,
    pub alarms: Arc<AlarmLog>,
    pub metrics: Arc<Metrics>,
    pub integrity: Arc<Integrity>,
    pub dispatcher: Arc<Dispatcher>,
    pub fetcher: Arc<Fetcher>,
    pub transport: Arc<RoutingTransport>,
    pub engine: SyncEngine,
    data_dir: Option<PathBuf>,
    checkpoint: Option<CheckpointHook>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").field("data_dir", &self.data_dir).finish_non_exhaustive()
    }
}

impl Node {
    pub fn open(
        adapters: Vec<Arc<dyn ChainAdapter>>,
        clock: Arc<dyn Clock>,
        options: NodeOptions,
        checkpoint: Option<CheckpointHook>,
    ) -> Result<Self, NodeError> {
        let faults = Arc::new(FaultInjector::new());
        let metrics = Arc::new(Metrics::new());
        let transport = Arc::new(RoutingTransport::new(Some(Arc::new(HttpTransport::new(options.http_timeout)))));
        let d = options.durability;

        let (registry, store, alarms, integrity, queue_dir) = match &options.data_dir {
            None => {
                let alarms = Arc::new(AlarmLog::in_memory(clock.clone()));
                (
                    Registry::in_memory(),
                    EventStore::in_memory(faults.clone()),
                    alarms.clone(),
                    Integrity::in_memory(alarms, metrics.clone(), clock.clone()),
                    None,
                )
            }
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(open_err(dir))?;
                let registry_path = dir.join("registry.journal");
                let registry = Registry::open(&registry_path, d).map_err(open_err(&registry_path))?;
                let store_path = options.store_path.clone().unwrap_or_else(|| dir.join("store"));
                std::fs::create_dir_all(&store_path).map_err(open_err(&store_path))?;
                let records = store_path.join("records.journal");
                let store = EventStore::open(&records, d, faults.clone()).map_err(open_err(&records))?;
                let alarms_path = dir.join("alarms.journal");
                let alarms =
                    Arc::new(AlarmLog::open(&alarms_path, d, clock.clone()).map_err(open_err(&alarms_path))?);
                let checksums = dir.join("checksums.journal");
                let integrity = Integrity::open(&checksums, d, alarms.clone(), metrics.clone(), clock.clone())
                    .map_err(open_err(&checksums))?;
                let queue_dir = options.queue_path.clone().unwrap_or_else(|| dir.join("queue"));
                std::fs::create_dir_all(&queue_dir).map_err(open_err(&queue_dir))?;
                (registry, store, alarms, integrity, Some(queue_dir))
            }
        };
        let registry = Arc::new(registry);
        let store = Arc::new(store);
        let integrity = Arc::new(integrity);

        let deps = DispatchDeps {
            registry: registry.clone(),
            transport: transport.clone(),
            policy: options.delivery,
            alarms: alarms.clone(),
            metrics: metrics.clone(),
            faults: faults.clone(),
            clock: clock.clone(),
        };
        let dispatcher = Arc::new(match &queue_dir {
            None => Dispatcher::in_memory(deps),
            Some(q) => Dispatcher::open(q, d, deps).map_err(open_err(q))?,
        });
        let fetcher = Arc::new(Fetcher::new(adapters, faults.clone()));

        for reg in registry.list_registrations(None) {
            if let Some(schema) = registry.schema(&reg.schema_id) {
                store.bind_schema(&reg.registration_id, &schema);
            }
        }

        let mut engine = SyncEngine::new(
            EngineDeps {
                registry: registry.clone(),
                fetcher: fetcher.clone(),
                store: store.clone(),
                integrity: integrity.clone(),
                dispatcher: dispatcher.clone(),
                clock: clock.clone(),
            },
            options.scheduler.clone(),
        );
        if let Some(hook) = &checkpoint {
            engine = engine.with_checkpoint(hook.clone());
        }

        Ok(Self {
            clock,
            faults,
            registry,
            store,
            alarms,
            metrics,
            integrity,
            dispatcher,
            fetcher,
            transport,
            engine,
            data_dir: options.data_dir,
            checkpoint,
        })
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    pub fn chain_params(&self, chain: &ChainId) -> Result<ChainParams, NodeError> {
        self.engine
            .params()
            .get(chain)
            .cloned()
            .ok_or_else(|| NodeError::UnknownChain(chain.clone()))
    }

    /// Registers an event of interest with cursors at the chain's safe head.
    pub fn register(&self, new: NewRegistration) -> Result<EventRegistration, NodeError> {
        let params = self.chain_params(&new.chain_id)?;
        let adapter = self
            .fetcher
            .adapter(&new.chain_id)
            .map_err(|_| NodeError::UnknownChain(new.chain_id.clone()))?;
        let head = adapter.latest_height().map_err(|e| NodeError::ChainUnavailable {
            chain: new.chain_id.clone(),
            reason: e.to_string(),
        })?;
        let safe_hash = |h: u64| -> Option<BlockHash> { adapter.block_hash(h).ok() };
        let reg = self
            .registry
            .register_event(new, &params, head.latest_height, safe_hash, self.clock.now())?;
        if let Some(schema) = self.registry.schema(&reg.schema_id) {
            self.store.bind_schema(&reg.registration_id, &schema);
        }
        Ok(reg)
    }

    pub fn subscribe(&self, registration: &RegistrationId, url: &str) -> Result<WebhookSubscription, NodeError> {
        Ok(self.registry.subscribe(registration, url, self.clock.now())?)
    }

    pub fn unsubscribe(&self, id: &SubscriptionId) -> Result<WebhookSubscription, NodeError> {
        Ok(self.registry.unsubscribe(id)?)
    }

    /// One sync cycle followed by a delivery pass.
    pub fn tick(&self) -> (TickReport, DeliveryReport) {
        let report = self.engine.tick();
        let delivery = self.dispatcher.deliver_due();
        if let Some(hook) = &self.checkpoint {
            hook(Checkpoint::Delivered);
        }
        (report, delivery)
    }

    /// True when no registration has work left below the safe head and no
    /// notification awaits delivery.
    pub fn is_idle(&self) -> bool {
        if self.dispatcher.pending() > 0 {
            return false;
        }
        let heads = self.engine.heads();
        let parked = !self.engine.parked_jobs().is_empty();
        self.registry.list_registrations(None).iter().filter(|r| r.is_active()).all(|r| {
            let Some(head) = heads.get(&r.chain_id) else {
                return true;
            };
            let depth = self.engine.params().get(&r.chain_id).map_or(0, |p| p.confirmation_depth);
            let safe = head.latest_height.saturating_sub(depth);
            parked || (r.synced_latest_block_height >= safe && r.backfill_range().is_none())
        })
    }

    pub fn metrics_text(&self) -> String {
        let regs = self.registry.list_registrations(None);
        let halted = regs.iter().filter(|r| !r.is_active()).count() as u64;
        self.metrics.render(&[
            ("registrations", regs.len() as u64),
            ("registrations_halted", halted),
            ("store_records", self.store.len() as u64),
            ("notifications_pending", self.dispatcher.pending() as u64),
            ("notifications_dead", self.dispatcher.dead_letters().len() as u64),
            ("alarms", self.alarms.len() as u64),
        ])
    }

    pub fn backfill_status(&self) -> Vec<BackfillStatus> {
        self.registry
            .list_registrations(None)
            .into_iter()
            .map(|r| BackfillStatus {
                missing: r.backfill_missing(),
                done_blocks: r.backfill_done.iter().map(|(a, b)| b - a + 1).sum(),
                range: r.backfill_range(),
                complete: r.backfill_complete,
                registration_id: r.registration_id,
                init_block_height: r.init_block_height,
                synced_start_block_height: r.synced_start_block_height,
            })
            .collect()
    }

    pub fn state_dump(&self) -> StateDump {
        StateDump {
            registrations: self
                .registry
                .list_registrations(None)
                .into_iter()
                .map(|r| CursorDump {
                    registration_id: r.registration_id,
                    init_block_height: r.init_block_height,
                    synced_start_block_height: r.synced_start_block_height,
                    synced_latest_block_height: r.synced_latest_block_height,
                    backfill_complete: r.backfill_complete,
                    active: matches!(r.status, syncer_core::registry::RegistrationStatus::Active),
                })
                .collect(),
            store_records: self.store.len() as u64,
            store_digest: self.store.content_digest(),
            records_by_type: self.store.count_by_type(),
            checksum_records: self.integrity.records().len() as u64,
            checksum_failures: self.integrity.failures().len() as u64,
            queue_pending: self.dispatcher.pending() as u64,
            delivered: self.dispatcher.delivered_count() as u64,
            dead_letters: self.dispatcher.dead_letters().len() as u64,
            alarms: self.alarms.count_by_source(),
            receivers: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BackfillStatus {
    pub registration_id: RegistrationId,
    pub init_block_height: u64,
    pub synced_start_block_height: u64,
    pub range: Option<(u64, u64)>,
    pub done_blocks: u64,
    pub missing: Vec<(u64, u64)>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CursorDump {
    pub registration_id: RegistrationId,
    pub init_block_height: u64,
    pub synced_start_block_height: u64,
    pub synced_latest_block_height: u64,
    pub backfill_complete: bool,
    pub active: bool,
}

/// Comparable snapshot of everything a run leaves behind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StateDump {
    pub registrations: Vec<CursorDump>,
    pub store_records: u64,
    pub store_digest: String,
    pub records_by_type: BTreeMap<RegistrationId, u64>,
    pub checksum_records: u64,
    pub checksum_failures: u64,
    pub queue_pending: u64,
    pub delivered: u64,
    pub dead_letters: u64,
    pub alarms: BTreeMap<String, u64>,
    /// Receiver name to the sorted notification ids it has seen.
    pub receivers: BTreeMap<String, Vec<String>>,
}
