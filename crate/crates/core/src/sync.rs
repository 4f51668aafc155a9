//! Block syncer: plans regular and backfill jobs, runs them on a worker
//! pool and moves the registry cursors forward.
//!
//! A regular job scans `[latest + 1, latest + K]` with
//! `K = min(maxBatch, head - depth - latest)`, so nothing within the
//! confirmation depth of the head is ever read. Backfill jobs partition the
//! historical range `[init, start]` and run alongside regular jobs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::Mutex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain_sim::{ChainHead, ChainParams};
use crate::clock::Clock;
use crate::dispatcher::{Dispatcher, RetryPolicy};
use crate::fetcher::{FetchRequest, Fetcher};
use crate::integrity::{AlarmDetail, Integrity, JobCounts, JobKind, NotifyVerdict, Verdict};
use crate::registry::{CursorUpdate, EventRegistration, Registry};
use crate::schema::{apply_schema, MappedRecord};
use crate::store::EventStore;
use crate::types::{BlockHash, ChainId, Millis, RegistrationId};

/// `min(maxBatch, head - depth - latest)`. Zero or less means no job.
pub fn compute_batch(synced_latest: u64, head: u64, params: &ChainParams) -> i64 {
    compute_batch_with(params.max_batch, synced_latest, head, params.confirmation_depth)
}

fn compute_batch_with(max_batch: u64, synced_latest: u64, head: u64, depth: u64) -> i64 {
    let room = head as i128 - depth as i128 - synced_latest as i128;
    room.min(max_batch as i128).clamp(i64::MIN as i128, i64::MAX as i128) as i64
}

/// Optional override of a chain's batch cap, e.g. one that follows
/// observed throughput. Without a policy the static `maxBatch` is used.
pub trait BatchPolicy: Send + Sync {
    fn max_batch(&self, params: &ChainParams, head: &ChainHead) -> u64;
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SyncJob {
    pub job_id: String,
    pub kind: JobKind,
    pub chain_id: ChainId,
    pub scope: Vec<RegistrationId>,
    pub from_height: u64,
    pub to_height: u64,
    pub attempt: u32,
}

impl SyncJob {
    pub fn new(kind: JobKind, chain_id: ChainId, scope: Vec<RegistrationId>, from: u64, to: u64) -> Self {
        let mut hasher = Sha256::new();
        for id in &scope {
            hasher.update(id.as_str().as_bytes());
            hasher.update(b"\n");
        }
        let digest = hex::encode(hasher.finalize());
        Self {
            job_id: format!("{}:{}:{}-{}:{}", kind.as_str(), chain_id, from, to, &digest[..16]),
            kind,
            chain_id,
            scope,
            from_height: from,
            to_height: to,
            attempt: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum JobError {
    #[error("fetch failed: {0}")]
    Fetch(String),
    #[error("schema mapping failed: {0}")]
    Mapping(String),
    #[error("persistence failed: {0}")]
    Persist(String),
    #[error("fetch checksum mismatch")]
    FetchChecksum,
    #[error("queue unavailable: {0}")]
    Queue(String),
    #[error("notify checksum mismatch")]
    NotifyChecksum,
    #[error("chain changed at height {0} while the job ran")]
    ChainChanged(u64),
    #[error("registry update failed: {0}")]
    Registry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobReport {
    pub job: SyncJob,
    pub count_all_events: u64,
    pub count_non_persisted: u64,
    pub per_type_persisted: BTreeMap<RegistrationId, u64>,
    pub inserted: u64,
    pub duplicates: u64,
    pub notifications_sent: u64,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<JobError>,
}

impl JobReport {
    fn new(job: &SyncJob) -> Self {
        Self {
            job: job.clone(),
            count_all_events: 0,
            count_non_persisted: 0,
            per_type_persisted: BTreeMap::new(),
            inserted: 0,
            duplicates: 0,
            notifications_sent: 0,
            status: JobStatus::Failed,
            error: None,
        }
    }

    fn fail(mut self, error: JobError) -> Self {
        self.status = JobStatus::Failed;
        self.error = Some(error);
        self
    }

    pub fn succeeded(&self) -> bool {
        self.status == JobStatus::Success
    }
}

/// Regular jobs for every active registration that is behind.
pub fn plan_regular_jobs(
    registrations: &[EventRegistration],
    heads: &BTreeMap<ChainId, ChainHead>,
    params: &BTreeMap<ChainId, ChainParams>,
    policy: Option<&dyn BatchPolicy>,
) -> Vec<SyncJob> {
    registrations
        .iter()
        .filter(|r| r.is_active())
        .filter_map(|r| {
            let head = heads.get(&r.chain_id)?;
            let p = params.get(&r.chain_id)?;
            let max_batch = policy.map_or(p.max_batch, |pol| pol.max_batch(p, head)).max(1);
            let k = compute_batch_with(max_batch, r.synced_latest_block_height, head.latest_height, p.confirmation_depth);
            (k >= 1).then(|| {
                let from = r.synced_latest_block_height + 1;
                SyncJob::new(
                    JobKind::Regular,
                    r.chain_id.clone(),
                    vec![r.registration_id.clone()],
                    from,
                    from + k as u64 - 1,
                )
            })
        })
        .collect()
}

/// Partitions the outstanding backfill range `[init, start]` into pieces
/// of at most `partition_size` blocks, leaving out pieces already done.
pub fn plan_backfill_jobs(registration: &EventRegistration, partition_size: u64) -> Vec<SyncJob> {
    let Some((init, start)) = registration.backfill_range() else {
        return Vec::new();
    };
    let size = partition_size.max(1);
    let mut jobs = Vec::new();
    let mut from = init;
    while from <= start {
        let to = from.saturating_add(size - 1).min(start);
        if registration.backfill_done.get(&from) != Some(&to) {
            jobs.push(SyncJob::new(
                JobKind::Backfill,
                registration.chain_id.clone(),
                vec![registration.registration_id.clone()],
                from,
                to,
            ));
        }
        if to == u64::MAX {
            break;
        }
        from = to + 1;
    }
    jobs
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default = "default_tick")]
    pub tick_interval_ms: Millis,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
    /// Backfill partition size; the chain's maxBatch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_size: Option<u64>,
    #[serde(default)]
    pub job_retry: RetryPolicy,
}

fn default_tick() -> Millis {
    1_000
}

fn default_workers() -> usize {
    4
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            tick_interval_ms: default_tick(),
            worker_count: default_workers(),
            partition_size: None,
            job_retry: RetryPolicy::default(),
        }
    }
}

/// Named points in job execution, reported to the checkpoint hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    Persisted,
    FetchVerified,
    Enqueued,
    CursorMoved,
    TickDone,
    /// Raised by callers after a delivery pass.
    Delivered,
}

pub type CheckpointHook = Arc<dyn Fn(Checkpoint) + Send + Sync>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TickReport {
    pub jobs: Vec<JobReport>,
    pub halted: Vec<RegistrationId>,
    pub parked: Vec<String>,
    pub backfills_completed: Vec<RegistrationId>,
}

#[derive(Debug, Clone, Copy)]
struct RetryState {
    failures: u32,
    next_at: Millis,
}

/// Handles the engine works through.
#[derive(Clone)]
pub struct EngineDeps {
    pub registry: Arc<Registry>,
    pub fetcher: Arc<Fetcher>,
    pub store: Arc<EventStore>,
    pub integrity: Arc<Integrity>,
    pub dispatcher: Arc<Dispatcher>,
    pub clock: Arc<dyn Clock>,
}

pub struct SyncEngine {
    deps: EngineDeps,
    params: BTreeMap<ChainId, ChainParams>,
    config: SchedulerConfig,
    pool: rayon::ThreadPool,
    retries: Mutex<BTreeMap<String, RetryState>>,
    parked: Mutex<BTreeSet<String>>,
    batch_policy: Option<Arc<dyn BatchPolicy>>,
    checkpoint: Option<CheckpointHook>,
}

impl std::fmt::Debug for SyncEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyncEngine")
            .field("chains", &self.params.keys().collect::<Vec<_>>())
            .field("config", &self.config)
            .finish()
    }
}

impl SyncEngine {
    pub fn new(deps: EngineDeps, config: SchedulerConfig) -> Self {
        let params = deps
            .fetcher
            .chains()
            .filter_map(|c| deps.fetcher.adapter(c).ok().map(|a| (c.clone(), a.params().clone())))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.worker_count.max(1))
            .thread_name(|i| format!("sync-worker-{i}"))
            .build()
            .expect("worker pool");
        Self {
            deps,
            params,
            config,
            pool,
            retries: Mutex::new(BTreeMap::new()),
            parked: Mutex::new(BTreeSet::new()),
            batch_policy: None,
            checkpoint: None,
        }
    }

    pub fn with_batch_policy(mut self, policy: Arc<dyn BatchPolicy>) -> Self {
        self.batch_policy = Some(policy);
        self
    }

    pub fn with_checkpoint(mut self, hook: CheckpointHook) -> Self {
        self.checkpoint = Some(hook);
        self
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<ChainId, ChainParams> {
        &self.params
    }

    fn checkpoint(&self, point: Checkpoint) {
        if let Some(hook) = &self.checkpoint {
            hook(point);
        }
    }

    pub fn heads(&self) -> BTreeMap<ChainId, ChainHead> {
        self.params
            .keys()
            .filter_map(|c| {
                let adapter = self.deps.fetcher.adapter(c).ok()?;
                adapter.latest_height().ok().map(|h| (c.clone(), h))
            })
            .collect()
    }

    /// Halts registrations whose last scanned block is no longer canonical.
    pub fn probe_reorgs(&self) -> Vec<RegistrationId> {
        let mut halted = Vec::new();
        for reg in self.deps.registry.list_registrations(None) {
            let Some(stored) = reg.synced_latest_hash.filter(|_| reg.is_active()) else {
                continue;
            };
            let Ok(adapter) = self.deps.fetcher.adapter(&reg.chain_id) else {
                continue;
            };
            let Ok(observed) = adapter.block_hash(reg.synced_latest_block_height) else {
                continue;
            };
            if observed == stored {
                continue;
            }
            let reason = format!(
                "block {} changed from {stored} to {observed}",
                reg.synced_latest_block_height
            );
            match self.deps.registry.halt(&reg.registration_id, &reason) {
                Ok(true) => {
                    self.deps.integrity.alarms().raise(AlarmDetail::DeepReorg {
                        registration_id: reg.registration_id.clone(),
                        chain_id: reg.chain_id.clone(),
                        height: reg.synced_latest_block_height,
                        stored_hash: stored,
                        observed_hash: observed,
                    });
                    halted.push(reg.registration_id);
                }
                Ok(false) => {}
                Err(err) => tracing::error!(%err, "failed to halt registration"),
            }
        }
        halted
    }

    /// Jobs due this tick, excluding parked jobs and jobs still backing off.
    pub fn plan(&self, heads: &BTreeMap<ChainId, ChainHead>) -> Vec<SyncJob> {
        let registrations = self.deps.registry.list_registrations(None);
        let mut jobs = plan_regular_jobs(&registrations, heads, &self.params, self.batch_policy.as_deref());
        for reg in registrations.iter().filter(|r| r.is_active()) {
            let (Some(head), Some(p)) = (heads.get(&reg.chain_id), self.params.get(&reg.chain_id)) else {
                continue;
            };
            // History is only safe to read once it sits below the depth.
            let safe = head.latest_height.checked_sub(p.confirmation_depth);
            if safe.is_none_or(|s| reg.synced_start_block_height > s) {
                continue;
            }
            jobs.extend(plan_backfill_jobs(reg, self.config.partition_size.unwrap_or(p.max_batch)));
        }
        let now = self.deps.clock.now();
        let retries = self.retries.lock();
        let parked = self.parked.lock();
        jobs.into_iter()
            .filter(|j| !parked.contains(&j.job_id))
            .filter_map(|mut j| match retries.get(&j.job_id) {
                Some(r) if r.next_at > now => None,
                Some(r) => {
                    j.attempt = r.failures + 1;
                    Some(j)
                }
                None => Some(j),
            })
            .collect()
    }

    /// One scheduler cycle: probe, plan, execute in parallel, settle.
    pub fn tick(&self) -> TickReport {
        let halted = self.probe_reorgs();
        let heads = self.heads();
        let jobs = self.plan(&heads);
        let reports: Vec<JobReport> = self
            .pool
            .install(|| jobs.par_iter().map(|job| self.execute_job(job)).collect());

        let mut report = TickReport {
            halted,
            ..Default::default()
        };
        let mut touched_backfill = BTreeSet::new();
        {
            let now = self.deps.clock.now();
            let mut retries = self.retries.lock();
            let mut parked = self.parked.lock();
            for r in &reports {
                let id = &r.job.job_id;
                if r.succeeded() {
                    retries.remove(id);
                    if r.job.kind == JobKind::Backfill {
                        touched_backfill.extend(r.job.scope.iter().cloned());
                    }
                    continue;
                }
                let failures = retries.get(id).map_or(0, |s| s.failures) + 1;
                let policy = self.config.job_retry;
                if failures >= policy.max_attempts {
                    retries.remove(id);
                    parked.insert(id.clone());
                    report.parked.push(id.clone());
                    self.deps.integrity.alarms().raise(AlarmDetail::JobParked {
                        job_id: id.clone(),
                        attempts: failures,
                        error: r.error.as_ref().map(ToString::to_string).unwrap_or_default(),
                    });
                } else {
                    retries.insert(
                        id.clone(),
                        RetryState {
                            failures,
                            next_at: now.saturating_add(policy.delay(failures)),
                        },
                    );
                }
            }
        }
        for id in touched_backfill {
            if let Ok(reg) = self.deps.registry.get(&id) {
                if reg.backfill_range().is_some() && reg.backfill_missing().is_empty() {
                    match self.deps.registry.complete_backfill(&id) {
                        Ok(_) => report.backfills_completed.push(id),
                        Err(err) => tracing::warn!(%err, "backfill completion deferred"),
                    }
                }
            }
        }
        report.jobs = reports;
        self.checkpoint(Checkpoint::TickDone);
        report
    }

    pub fn parked_jobs(&self) -> Vec<String> {
        self.parked.lock().iter().cloned().collect()
    }

    fn block_hash(&self, chain: &ChainId, height: u64) -> Result<BlockHash, JobError> {
        self.deps
            .fetcher
            .adapter(chain)
            .map_err(|e| JobError::Fetch(e.to_string()))?
            .block_hash(height)
            .map_err(|e| JobError::Fetch(e.to_string()))
    }

    /// Runs one job to completion: fetch, map, persist, verify, notify,
    /// verify, then move the cursor. Any failure leaves cursors untouched;
    /// re-running a job is idempotent.
    pub fn execute_job(&self, job: &SyncJob) -> JobReport {
        let report = JobReport::new(job);
        match self.run(job, report.clone()) {
            Ok(done) => done,
            Err(failed) => {
                let (partial, error) = *failed;
                self.deps.integrity.metrics().inc("jobs_failed_total", &[("kind", job.kind.as_str())]);
                tracing::warn!(job = %job.job_id, attempt = job.attempt, %error, "job failed");
                partial.fail(error)
            }
        }
    }

    fn run(&self, job: &SyncJob, mut report: JobReport) -> Result<JobReport, Box<(JobReport, JobError)>> {
        macro_rules! bail {
            ($e:expr) => {
                return Err(Box::new((report, $e)))
            };
        }
        let mut registrations = BTreeMap::new();
        let mut schemas = BTreeMap::new();
        for id in &job.scope {
            let reg = match self.deps.registry.get(id) {
                Ok(r) => r,
                Err(e) => bail!(JobError::Registry(e.to_string())),
            };
            let Some(schema) = self.deps.registry.schema(&reg.schema_id) else {
                bail!(JobError::Mapping(format!("schema {} is not defined", reg.schema_id)));
            };
            schemas.insert(id.clone(), schema);
            registrations.insert(id.clone(), reg);
        }

        let before = match self.block_hash(&job.chain_id, job.to_height) {
            Ok(h) => h,
            Err(e) => bail!(e),
        };
        let request = FetchRequest {
            chain_id: job.chain_id.clone(),
            from_height: job.from_height,
            to_height: job.to_height,
            eoi_filter: registrations.values().map(EventRegistration::event_key).collect(),
        };
        let fetched = match self.deps.fetcher.fetch_range(&request) {
            Ok(f) => f,
            Err(e) => bail!(JobError::Fetch(e.to_string())),
        };
        let after = match self.block_hash(&job.chain_id, job.to_height) {
            Ok(h) => h,
            Err(e) => bail!(e),
        };
        if before != after {
            bail!(JobError::ChainChanged(job.to_height));
        }

        let now = self.deps.clock.now();
        let mut records: Vec<MappedRecord> = Vec::with_capacity(fetched.events.len());
        for event in &fetched.events {
            let Some(schema) = schemas.get(&event.event_type) else {
                bail!(JobError::Mapping(format!("event {} has no registration in scope", event.key)));
            };
            match apply_schema(event, schema, now) {
                Ok(r) => records.push(r),
                Err(e) => bail!(JobError::Mapping(e.to_string())),
            }
        }
        let outcome = match self.deps.store.persist(records) {
            Ok(o) => o,
            Err(e) => bail!(JobError::Persist(e.to_string())),
        };
        self.checkpoint(Checkpoint::Persisted);

        let mut per_type: BTreeMap<RegistrationId, u64> = job.scope.iter().map(|id| (id.clone(), 0)).collect();
        for (t, n) in &outcome.per_type {
            *per_type.entry(t.clone()).or_default() += n;
        }
        report.count_all_events = fetched.scanned;
        report.count_non_persisted = fetched.skipped;
        report.per_type_persisted = per_type.clone();
        report.inserted = outcome.inserted;
        report.duplicates = outcome.duplicates;

        let counts = JobCounts {
            job_id: job.job_id.clone(),
            attempt: job.attempt,
            kind: job.kind,
            chain_id: job.chain_id.clone(),
            from_height: job.from_height,
            to_height: job.to_height,
            scope: job.scope.clone(),
            count_all_events: fetched.scanned,
            count_non_persisted: fetched.skipped,
            per_type_persisted: per_type,
        };
        let record = match self.deps.integrity.verify_fetch(counts) {
            Ok(r) => r,
            Err(e) => bail!(JobError::Persist(e.to_string())),
        };
        self.checkpoint(Checkpoint::FetchVerified);
        if record.fetch_verdict == Verdict::Fail {
            bail!(JobError::FetchChecksum);
        }

        let tally = match self.deps.dispatcher.enqueue_notifications(&job.job_id, &outcome.accepted) {
            Ok(t) => t,
            Err(e) => bail!(JobError::Queue(e.to_string())),
        };
        report.notifications_sent = tally.sent;
        self.checkpoint(Checkpoint::Enqueued);
        let record = match self
            .deps
            .integrity
            .verify_notify(&job.job_id, record.counts.attempt, &tally)
        {
            Ok(r) => r,
            Err(e) => bail!(JobError::Queue(e.to_string())),
        };
        if record.notify_verdict == NotifyVerdict::Fail {
            bail!(JobError::NotifyChecksum);
        }

        for id in &job.scope {
            let result = match job.kind {
                JobKind::Regular => self
                    .deps
                    .registry
                    .advance_latest(CursorUpdate {
                        registration_id: id.clone(),
                        new_latest: job.to_height,
                        block_hash: after,
                        job_id: job.job_id.clone(),
                    })
                    .map(|_| ()),
                JobKind::Backfill => self
                    .deps
                    .registry
                    .record_backfill_partition(id, job.from_height, job.to_height, &job.job_id)
                    .map(|_| ()),
            };
            if let Err(e) = result {
                bail!(JobError::Registry(e.to_string()));
            }
        }
        self.checkpoint(Checkpoint::CursorMoved);
        report.status = JobStatus::Success;
        Ok(report)
    }
}
