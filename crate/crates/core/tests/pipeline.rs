//! The sync pipeline assembled from its parts: simulator, fetcher,
//! registry, engine, store, checksums and dispatcher.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use proptest::prelude::*;
use syncer_core::chain_sim::{ChainParams, ChainSim, ChainSpec, EventSpec};
use syncer_core::clock::{Clock, VirtualClock};
use syncer_core::dispatcher::{
    verify_signature, DispatchDeps, Dispatcher, PostResult, RetryPolicy, WebhookPayload, WebhookTransport,
    SIGNATURE_HEADER,
};
use syncer_core::faults::FaultInjector;
use syncer_core::fetcher::{Fetcher, SimAdapter};
use syncer_core::integrity::{AlarmLog, Integrity, Metrics};
use syncer_core::journal::Durability;
use syncer_core::registry::{EventRegistration, NewRegistration, Registry};
use syncer_core::schema::MappingSchema;
use syncer_core::store::EventStore;
use syncer_core::sync::{EngineDeps, SchedulerConfig, SyncEngine};
use syncer_core::types::{ChainId, RecordKey, Value, ValueType};

const SIG: &str = "Transfer(uint256)";

#[derive(Default)]
struct Sink {
    posts: Mutex<Vec<(Vec<u8>, String)>>,
}

impl WebhookTransport for Sink {
    fn post(&self, _url: &str, body: &[u8], headers: &[(&str, String)]) -> PostResult {
        let sig = headers
            .iter()
            .find(|(h, _)| *h == SIGNATURE_HEADER)
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        self.posts.lock().push((body.to_vec(), sig));
        PostResult::Status(200)
    }
}

struct Pipeline {
    sim: Arc<ChainSim>,
    clock: Arc<VirtualClock>,
    registry: Arc<Registry>,
    store: Arc<EventStore>,
    integrity: Arc<Integrity>,
    dispatcher: Arc<Dispatcher>,
    engine: SyncEngine,
    sink: Arc<Sink>,
}

fn eth() -> ChainId {
    ChainId::from("eth")
}

fn pipeline(sim: Arc<ChainSim>, dir: Option<&Path>) -> Pipeline {
    let clock = Arc::new(VirtualClock::new(1_000_000));
    let clock_dyn: Arc<dyn Clock> = clock.clone();
    let faults = Arc::new(FaultInjector::new());
    let metrics = Arc::new(Metrics::new());
    let sink = Arc::new(Sink::default());
    let (registry, store, alarms, integrity, dispatcher);
    let deps = |registry: &Arc<Registry>, alarms: &Arc<AlarmLog>| DispatchDeps {
        registry: registry.clone(),
        transport: sink.clone(),
        policy: RetryPolicy::default(),
        alarms: alarms.clone(),
        metrics: metrics.clone(),
        faults: faults.clone(),
        clock: clock_dyn.clone(),
    };
    match dir {
        Some(dir) => {
            let d = Durability::Flush;
            registry = Arc::new(Registry::open(dir.join("registry.journal"), d).unwrap());
            store = Arc::new(EventStore::open(dir.join("records.journal"), d, faults.clone()).unwrap());
            alarms = Arc::new(AlarmLog::open(dir.join("alarms.journal"), d, clock_dyn.clone()).unwrap());
            integrity = Arc::new(
                Integrity::open(dir.join("checksums.journal"), d, alarms.clone(), metrics.clone(), clock_dyn.clone())
                    .unwrap(),
            );
            dispatcher = Arc::new(Dispatcher::open(dir.join("queue"), d, deps(&registry, &alarms)).unwrap());
        }
        None => {
            registry = Arc::new(Registry::in_memory());
            store = Arc::new(EventStore::in_memory(faults.clone()));
            alarms = Arc::new(AlarmLog::in_memory(clock_dyn.clone()));
            integrity = Arc::new(Integrity::in_memory(alarms.clone(), metrics.clone(), clock_dyn.clone()));
            dispatcher = Arc::new(Dispatcher::in_memory(deps(&registry, &alarms)));
        }
    }
    for reg in registry.list_registrations(None) {
        store.bind_schema(&reg.registration_id, &registry.schema(&reg.schema_id).unwrap());
    }
    let fetcher = Arc::new(Fetcher::new(SimAdapter::all(&sim), faults.clone()));
    let engine = SyncEngine::new(
        EngineDeps {
            registry: registry.clone(),
            fetcher,
            store: store.clone(),
            integrity: integrity.clone(),
            dispatcher: dispatcher.clone(),
            clock: clock_dyn,
        },
        SchedulerConfig {
            worker_count: 2,
            ..SchedulerConfig::default()
        },
    );
    Pipeline {
        sim,
        clock,
        registry,
        store,
        integrity,
        dispatcher,
        engine,
        sink,
    }
}

impl Pipeline {
    fn register(&self, contract: &str, init: u64) -> EventRegistration {
        let params = self.sim.spec(&eth()).unwrap().params.clone();
        let head = self.sim.latest_height(&eth()).unwrap().latest_height;
        let reg = self
            .registry
            .register_event(
                NewRegistration {
                    chain_id: eth(),
                    contract_address: contract.into(),
                    event_signature: SIG.into(),
                    init_block_height: init,
                    mapping_schema: MappingSchema::identity(format!("{contract}-v1"), &[("id", ValueType::Int)]),
                },
                &params,
                head,
                |h| self.sim.header(&eth(), h).ok().map(|b| b.block_hash),
                self.clock.now(),
            )
            .unwrap();
        self.store
            .bind_schema(&reg.registration_id, &self.registry.schema(&reg.schema_id).unwrap());
        reg
    }

    /// Ticks until no job is planned and the queue is empty.
    fn settle(&self) {
        for _ in 0..1_000 {
            self.clock.advance(1_000);
            let report = self.engine.tick();
            self.dispatcher.deliver_due();
            if report.jobs.is_empty() && self.dispatcher.pending() == 0 {
                return;
            }
        }
        panic!("pipeline did not settle");
    }

    /// Registered events on the canonical chain up to the safe head.
    fn expected_keys(&self, contracts: &[&str], gamma: u64) -> Vec<RecordKey> {
        let head = self.sim.latest_height(&eth()).unwrap().latest_height;
        let Some(safe) = head.checked_sub(gamma) else {
            return Vec::new();
        };
        self.sim
            .scan_canonical(&eth(), 0, safe)
            .unwrap()
            .iter()
            .filter(|e| contracts.contains(&e.contract_address.as_str()))
            .map(|e| e.record_key())
            .collect()
    }

    fn stored_keys(&self) -> Vec<RecordKey> {
        let mut keys: Vec<RecordKey> = self.store.records().into_iter().map(|r| r.key).collect();
        keys.sort();
        keys
    }
}

fn chain(seed: u64, max_batch: u64, gamma: u64) -> Arc<ChainSim> {
    Arc::new(ChainSim::new(seed, [ChainSpec::linear(ChainParams::new("eth", max_batch, gamma))]).unwrap())
}

fn mint(sim: &ChainSim, contracts: &[&str], id: &mut i64) {
    let events = contracts
        .iter()
        .map(|c| {
            *id += 1;
            EventSpec::new(*c, SIG, vec![("id".into(), Value::Int(*id))])
        })
        .collect();
    sim.mint_block(&eth(), events).unwrap();
}

#[test]
fn backfill_and_live_sync_deliver_every_record_once() {
    let sim = chain(1, 5, 2);
    let mut id = 0;
    for h in 0..30 {
        let contracts: &[&str] = if h % 3 == 0 { &["0xa", "0xb"] } else { &["0xa"] };
        mint(&sim, contracts, &mut id);
    }
    let p = pipeline(sim.clone(), None);
    let reg = p.register("0xa", 0);
    let sub = p.registry.subscribe(&reg.registration_id, "http://hooks.test/a", 0).unwrap();
    p.settle();
    for _ in 0..7 {
        mint(&sim, &["0xa", "0xb"], &mut id);
        p.settle();
    }

    let reg = p.registry.get(&reg.registration_id).unwrap();
    let head = sim.latest_height(&eth()).unwrap().latest_height;
    assert!(reg.backfill_complete);
    assert_eq!(reg.synced_start_block_height, 0);
    assert_eq!(reg.synced_latest_block_height, head - 2);
    assert_eq!(p.stored_keys(), p.expected_keys(&["0xa"], 2));
    assert!(p.integrity.failures().is_empty());

    let posts = p.sink.posts.lock();
    assert_eq!(posts.len(), p.store.len());
    let mut seen: Vec<RecordKey> = posts
        .iter()
        .map(|(body, sig)| {
            assert!(verify_signature(&sub.secret, body, sig));
            serde_json::from_slice::<WebhookPayload>(body).unwrap().record_key()
        })
        .collect();
    seen.sort();
    assert_eq!(seen, p.stored_keys());
}

#[test]
fn reopened_journals_resume_where_they_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let sim = chain(2, 4, 1);
    let mut id = 0;
    for _ in 0..20 {
        mint(&sim, &["0xa"], &mut id);
    }
    let (reg_id, cursor, len) = {
        let p = pipeline(sim.clone(), Some(dir.path()));
        let reg = p.register("0xa", 5);
        p.settle();
        let reg = p.registry.get(&reg.registration_id).unwrap();
        (reg.registration_id, reg.synced_latest_block_height, p.store.len())
    };
    for _ in 0..10 {
        mint(&sim, &["0xa"], &mut id);
    }
    let p = pipeline(sim.clone(), Some(dir.path()));
    let reg = p.registry.get(&reg_id).unwrap();
    assert_eq!(reg.synced_latest_block_height, cursor);
    assert_eq!(p.store.len(), len);
    p.settle();
    let reg = p.registry.get(&reg_id).unwrap();
    assert_eq!(reg.synced_latest_block_height, sim.latest_height(&eth()).unwrap().latest_height - 1);
    let expected: Vec<RecordKey> = p
        .expected_keys(&["0xa"], 1)
        .into_iter()
        .filter(|k| k.block_height >= 5)
        .collect();
    assert_eq!(p.stored_keys(), expected);
}

#[derive(Debug, Clone)]
enum Step {
    Mint(Vec<u8>),
    Reorg(u64),
}

fn steps(gamma: u64) -> impl Strategy<Value = Vec<Step>> {
    prop::collection::vec(
        prop_oneof![
            3 => prop::collection::vec(0u8..3, 0..4).prop_map(Step::Mint),
            1 => (1..=gamma.max(1)).prop_map(Step::Reorg),
        ],
        1..40,
    )
}

const CONTRACTS: [&str; 3] = ["0xa", "0xb", "0xnoise"];

/// Applies `steps`, ticking after each; reorgs are skipped when `calm`.
fn drive(seed: u64, max_batch: u64, gamma: u64, steps: &[Step], calm: bool) -> Pipeline {
    let sim = chain(seed, max_batch, gamma);
    let mut id = 0;
    for _ in 0..10 {
        mint(&sim, &CONTRACTS, &mut id);
    }
    let p = pipeline(sim.clone(), None);
    p.register("0xa", 0);
    p.register("0xb", 3);
    for step in steps {
        match step {
            Step::Mint(picks) => {
                let contracts: Vec<&str> = picks.iter().map(|i| CONTRACTS[*i as usize]).collect();
                mint(&sim, &contracts, &mut id);
            }
            Step::Reorg(depth) => {
                if !calm && gamma > 0 {
                    let len = sim.latest_height(&eth()).unwrap().latest_height + 1;
                    sim.reorg(&eth(), (*depth).min(gamma).min(len)).unwrap();
                }
            }
        }
        p.clock.advance(1_000);
        p.engine.tick();
    }
    p.settle();
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every event a job scans is either outside its scope or persisted.
    #[test]
    fn jobs_conserve_events(seed in 0u64..1_000, max_batch in 1u64..12, gamma in 0u64..4, steps in steps(3)) {
        let p = drive(seed, max_batch, gamma, &steps, false);
        let records = p.integrity.records();
        prop_assert!(!records.is_empty());
        for rec in &records {
            let c = &rec.counts;
            prop_assert_eq!(c.count_all_events, c.count_non_persisted + c.persisted_total());
            prop_assert!(rec.passed());
        }
        let head = p.sim.latest_height(&eth()).unwrap().latest_height;
        let expected: Vec<RecordKey> = match head.checked_sub(gamma) {
            Some(safe) => p
                .sim
                .scan_canonical(&eth(), 0, safe)
                .unwrap()
                .iter()
                .filter(|e| e.contract_address == "0xa" || (e.contract_address == "0xb" && e.block_height >= 3))
                .map(|e| e.record_key())
                .collect(),
            None => Vec::new(),
        };
        prop_assert_eq!(p.stored_keys(), expected);
    }

    /// Reorgs no deeper than the confirmation depth leave no trace.
    #[test]
    fn shallow_reorgs_are_invisible(seed in 0u64..1_000, max_batch in 1u64..12, gamma in 1u64..4, steps in steps(3)) {
        let stormy = drive(seed, max_batch, gamma, &steps, false);
        let calm = drive(seed, max_batch, gamma, &steps, true);
        prop_assert_eq!(stormy.store.content_digest(), calm.store.content_digest());
        prop_assert!(stormy.integrity.failures().is_empty());
        prop_assert!(stormy.registry.list_registrations(None).iter().all(|r| r.is_active()));
        let cursors = |p: &Pipeline| -> BTreeMap<_, _> {
            p.registry
                .list_registrations(None)
                .into_iter()
                .map(|r| (r.registration_id, r.synced_latest_block_height))
                .collect()
        };
        prop_assert_eq!(cursors(&stormy), cursors(&calm));
    }
}
