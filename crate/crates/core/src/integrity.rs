//! Per-job checksum records, alarms and counters.
//!
//! A job passes its fetch check when every event it scanned is accounted
//! for: `all = skipped + sum(persisted per type)`. It passes its notify
//! check when the notifications handed to the queue equal the persisted
//! records multiplied by the active subscriptions of their type.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::journal::{Durability, Journal, JournalError};
use crate::types::{BlockHash, ChainId, Millis, NotificationId, RegistrationId, SubscriptionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Regular,
    Backfill,
}

impl JobKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::Regular => "regular",
            JobKind::Backfill => "backfill",
        }
    }
}

/// Counts produced by one execution of a sync job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobCounts {
    pub job_id: String,
    pub attempt: u32,
    pub kind: JobKind,
    pub chain_id: ChainId,
    pub from_height: u64,
    pub to_height: u64,
    pub scope: Vec<RegistrationId>,
    pub count_all_events: u64,
    pub count_non_persisted: u64,
    pub per_type_persisted: BTreeMap<RegistrationId, u64>,
}

impl JobCounts {
    pub fn persisted_total(&self) -> u64 {
        self.per_type_persisted.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotifyVerdict {
    Pending,
    Pass,
    Fail,
}

/// Notification hand-off counts for one job.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NotifyTally {
    /// Notifications present in the queue for the job's records.
    pub sent: u64,
    /// Active subscriptions per event type when the job enqueued.
    pub fanout: BTreeMap<RegistrationId, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChecksumRecord {
    #[serde(flatten)]
    pub counts: JobCounts,
    pub fetch_verdict: Verdict,
    pub notify_verdict: NotifyVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notification_sent: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notification_expected: Option<u64>,
    pub recorded_at: Millis,
}

impl ChecksumRecord {
    pub fn is_final(&self) -> bool {
        self.notify_verdict != NotifyVerdict::Pending
    }

    pub fn passed(&self) -> bool {
        self.fetch_verdict == Verdict::Pass && self.notify_verdict != NotifyVerdict::Fail
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AlarmDetail {
    FetchChecksum {
        job_id: String,
        attempt: u32,
        count_all_events: u64,
        count_non_persisted: u64,
        persisted_total: u64,
    },
    NotifyChecksum {
        job_id: String,
        attempt: u32,
        expected: u64,
        sent: u64,
        missing: i64,
    },
    DeepReorg {
        registration_id: RegistrationId,
        chain_id: ChainId,
        height: u64,
        stored_hash: BlockHash,
        observed_hash: BlockHash,
    },
    JobParked {
        job_id: String,
        attempts: u32,
        error: String,
    },
    DeliveryDead {
        notification_id: NotificationId,
        subscription_id: SubscriptionId,
        attempts: u32,
        last_error: String,
    },
}

impl AlarmDetail {
    pub fn source(&self) -> &'static str {
        match self {
            AlarmDetail::FetchChecksum { .. } => "fetch_checksum",
            AlarmDetail::NotifyChecksum { .. } => "notify_checksum",
            AlarmDetail::DeepReorg { .. } => "deep_reorg",
            AlarmDetail::JobParked { .. } => "job_parked",
            AlarmDetail::DeliveryDead { .. } => "delivery_dead",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AlarmEvent {
    pub seq: u64,
    pub raised_at: Millis,
    pub source: String,
    pub detail: AlarmDetail,
}

#[derive(Debug, thiserror::Error)]
pub enum IntegrityError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("no fetch checksum recorded for job {job_id} attempt {attempt}")]
    UnknownJob { job_id: String, attempt: u32 },
}

/// Append-only alarm log. Alarms are never dropped; a failed write is
/// reported through tracing and the alarm is still kept in memory.
#[derive(Debug)]
pub struct AlarmLog {
    alarms: RwLock<Vec<AlarmEvent>>,
    journal: Mutex<Journal<AlarmEvent>>,
    clock: Arc<dyn Clock>,
}

impl AlarmLog {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            alarms: RwLock::new(Vec::new()),
            journal: Mutex::new(Journal::in_memory()),
            clock,
        }
    }

    pub fn open(path: impl AsRef<Path>, durability: Durability, clock: Arc<dyn Clock>) -> Result<Self, IntegrityError> {
        let (journal, alarms) = Journal::open(path, durability)?;
        Ok(Self {
            alarms: RwLock::new(alarms),
            journal: Mutex::new(journal),
            clock,
        })
    }

    pub fn raise(&self, detail: AlarmDetail) -> AlarmEvent {
        let mut alarms = self.alarms.write();
        let event = AlarmEvent {
            seq: alarms.len() as u64 + 1,
            raised_at: self.clock.now(),
            source: detail.source().to_owned(),
            detail,
        };
        tracing::error!(source = %event.source, detail = ?event.detail, "alarm");
        if let Err(err) = self.journal.lock().append(&event) {
            tracing::error!(%err, "alarm journal write failed");
        }
        alarms.push(event.clone());
        event
    }

    pub fn all(&self) -> Vec<AlarmEvent> {
        self.alarms.read().clone()
    }

    pub fn len(&self) -> usize {
        self.alarms.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_by_source(&self) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        for alarm in self.alarms.read().iter() {
            *counts.entry(alarm.source.clone()).or_default() += 1;
        }
        counts
    }
}

type CounterKey = (&'static str, Vec<(&'static str, String)>);

/// Process-lifetime counters rendered in the Prometheus text format.
#[derive(Debug, Default)]
pub struct Metrics {
    counters: Mutex<BTreeMap<CounterKey, u64>>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, name: &'static str, labels: &[(&'static str, &str)], by: u64) {
        let key = (name, labels.iter().map(|(k, v)| (*k, (*v).to_owned())).collect());
        *self.counters.lock().entry(key).or_default() += by;
    }

    pub fn inc(&self, name: &'static str, labels: &[(&'static str, &str)]) {
        self.add(name, labels, 1);
    }

    pub fn get(&self, name: &str, labels: &[(&str, &str)]) -> u64 {
        self.counters
            .lock()
            .iter()
            .filter(|((n, l), _)| {
                *n == name
                    && l.len() == labels.len()
                    && l.iter().zip(labels).all(|((k, v), (k2, v2))| k == k2 && v == v2)
            })
            .map(|(_, v)| *v)
            .sum()
    }

    /// Sum of a counter over all label sets.
    pub fn total(&self, name: &str) -> u64 {
        self.counters
            .lock()
            .iter()
            .filter(|((n, _), _)| *n == name)
            .map(|(_, v)| *v)
            .sum()
    }

    pub fn render(&self, gauges: &[(&str, u64)]) -> String {
        let counters = self.counters.lock();
        let mut out = String::new();
        let mut last = "";
        for ((name, labels), value) in counters.iter() {
            if *name != last {
                let _ = writeln!(out, "# TYPE {name} counter");
                last = name;
            }
            if labels.is_empty() {
                let _ = writeln!(out, "{name} {value}");
            } else {
                let rendered: Vec<String> = labels
                    .iter()
                    .map(|(k, v)| format!("{k}=\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\"")))
                    .collect();
                let _ = writeln!(out, "{name}{{{}}} {value}", rendered.join(","));
            }
        }
        for (name, value) in gauges {
            let _ = writeln!(out, "# TYPE {name} gauge");
            let _ = writeln!(out, "{name} {value}");
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
enum ChecksumEntry {
    Fetch { record: ChecksumRecord },
    Notify {
        job_id: String,
        attempt: u32,
        sent: u64,
        expected: u64,
        verdict: NotifyVerdict,
    },
}

#[derive(Debug, Default)]
struct ChecksumState {
    records: BTreeMap<(String, u32), ChecksumRecord>,
}

impl ChecksumState {
    fn apply(&mut self, entry: &ChecksumEntry) {
        match entry {
            ChecksumEntry::Fetch { record } => {
                self.records
                    .insert((record.counts.job_id.clone(), record.counts.attempt), record.clone());
            }
            ChecksumEntry::Notify {
                job_id,
                attempt,
                sent,
                expected,
                verdict,
            } => {
                if let Some(record) = self.records.get_mut(&(job_id.clone(), *attempt)) {
                    record.notification_sent = Some(*sent);
                    record.notification_expected = Some(*expected);
                    record.notify_verdict = *verdict;
                }
            }
        }
    }

    fn next_attempt(&self, job_id: &str) -> u32 {
        self.records
            .range((job_id.to_owned(), 0)..=(job_id.to_owned(), u32::MAX))
            .next_back()
            .map_or(1, |((_, a), _)| a + 1)
    }
}

pub fn fetch_identity_holds(counts: &JobCounts) -> bool {
    counts.count_non_persisted.checked_add(counts.persisted_total()) == Some(counts.count_all_events)
}

pub fn expected_notifications(per_type: &BTreeMap<RegistrationId, u64>, fanout: &BTreeMap<RegistrationId, u64>) -> u64 {
    per_type
        .iter()
        .map(|(t, n)| n * fanout.get(t).copied().unwrap_or(0))
        .sum()
}

/// Checksum verification, persistence and analytics.
#[derive(Debug)]
pub struct Integrity {
    state: RwLock<ChecksumState>,
    journal: Mutex<Journal<ChecksumEntry>>,
    alarms: Arc<AlarmLog>,
    metrics: Arc<Metrics>,
    clock: Arc<dyn Clock>,
}

impl Integrity {
    pub fn in_memory(alarms: Arc<AlarmLog>, metrics: Arc<Metrics>, clock: Arc<dyn Clock>) -> Self {
        Self {
            state: RwLock::new(ChecksumState::default()),
            journal: Mutex::new(Journal::in_memory()),
            alarms,
            metrics,
            clock,
        }
    }

    pub fn open(
        path: impl AsRef<Path>,
        durability: Durability,
        alarms: Arc<AlarmLog>,
        metrics: Arc<Metrics>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, IntegrityError> {
        let (journal, entries) = Journal::open(path, durability)?;
        let mut state = ChecksumState::default();
        for entry in &entries {
            state.apply(entry);
        }
        Ok(Self {
            state: RwLock::new(state),
            journal: Mutex::new(journal),
            alarms,
            metrics,
            clock,
        })
    }

    pub fn alarms(&self) -> &Arc<AlarmLog> {
        &self.alarms
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    /// Records the fetch verdict for one job execution.
    ///
    /// Verifying identical counts again returns the stored record. Differing
    /// counts for an already recorded attempt are stored as a new attempt,
    /// so recorded counts never change.
    pub fn verify_fetch(&self, counts: JobCounts) -> Result<ChecksumRecord, IntegrityError> {
        let mut state = self.state.write();
        let key = (counts.job_id.clone(), counts.attempt);
        let mut counts = counts;
        if let Some(existing) = state.records.get(&key) {
            if existing.counts == counts {
                return Ok(existing.clone());
            }
            counts.attempt = state.next_attempt(&counts.job_id);
        }
        let verdict = if fetch_identity_holds(&counts) {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        let record = ChecksumRecord {
            counts,
            fetch_verdict: verdict,
            notify_verdict: NotifyVerdict::Pending,
            notification_sent: None,
            notification_expected: None,
            recorded_at: self.clock.now(),
        };
        let entry = ChecksumEntry::Fetch { record: record.clone() };
        self.journal.lock().append(&entry)?;
        state.apply(&entry);
        drop(state);

        self.metrics.inc("jobs_total", &[("kind", record.counts.kind.as_str())]);
        match verdict {
            Verdict::Pass => {
                for (t, n) in &record.counts.per_type_persisted {
                    self.metrics.add("events_persisted_total", &[("type", t.as_str())], *n);
                }
            }
            Verdict::Fail => {
                self.metrics.inc("checksum_failures_total", &[("phase", "fetch")]);
                self.alarms.raise(AlarmDetail::FetchChecksum {
                    job_id: record.counts.job_id.clone(),
                    attempt: record.counts.attempt,
                    count_all_events: record.counts.count_all_events,
                    count_non_persisted: record.counts.count_non_persisted,
                    persisted_total: record.counts.persisted_total(),
                });
            }
        }
        Ok(record)
    }

    /// Records the notify verdict of a job whose fetch verdict exists.
    pub fn verify_notify(&self, job_id: &str, attempt: u32, tally: &NotifyTally) -> Result<ChecksumRecord, IntegrityError> {
        let mut state = self.state.write();
        let key = (job_id.to_owned(), attempt);
        let existing = state.records.get(&key).ok_or_else(|| IntegrityError::UnknownJob {
            job_id: job_id.to_owned(),
            attempt,
        })?;
        let expected = expected_notifications(&existing.counts.per_type_persisted, &tally.fanout);
        let mut target = key.clone();
        if existing.is_final() {
            if existing.notification_sent == Some(tally.sent) && existing.notification_expected == Some(expected) {
                return Ok(existing.clone());
            }
            // Finalized records are immutable; a differing re-check is a new attempt.
            let mut copy = existing.clone();
            copy.counts.attempt = state.next_attempt(job_id);
            copy.notify_verdict = NotifyVerdict::Pending;
            copy.notification_sent = None;
            copy.notification_expected = None;
            copy.recorded_at = self.clock.now();
            target = (job_id.to_owned(), copy.counts.attempt);
            let entry = ChecksumEntry::Fetch { record: copy };
            self.journal.lock().append(&entry)?;
            state.apply(&entry);
        }
        let verdict = if tally.sent == expected {
            NotifyVerdict::Pass
        } else {
            NotifyVerdict::Fail
        };
        let entry = ChecksumEntry::Notify {
            job_id: job_id.to_owned(),
            attempt: target.1,
            sent: tally.sent,
            expected,
            verdict,
        };
        self.journal.lock().append(&entry)?;
        state.apply(&entry);
        let record = state.records[&target].clone();
        drop(state);
        if verdict == NotifyVerdict::Fail {
            self.metrics.inc("checksum_failures_total", &[("phase", "notify")]);
            self.alarms.raise(AlarmDetail::NotifyChecksum {
                job_id: job_id.to_owned(),
                attempt: target.1,
                expected,
                sent: tally.sent,
                missing: expected as i64 - tally.sent as i64,
            });
        }
        Ok(record)
    }

    pub fn record(&self, job_id: &str, attempt: u32) -> Option<ChecksumRecord> {
        self.state.read().records.get(&(job_id.to_owned(), attempt)).cloned()
    }

    pub fn records(&self) -> Vec<ChecksumRecord> {
        self.state.read().records.values().cloned().collect()
    }

    pub fn failures(&self) -> Vec<ChecksumRecord> {
        self.state
            .read()
            .records
            .values()
            .filter(|r| !r.passed())
            .cloned()
            .collect()
    }

    pub fn checksum_analytics(&self, query: &AnalyticsQuery) -> Analytics {
        let state = self.state.read();
        let interval = query.interval_ms.max(1);
        let mut analytics = Analytics::default();
        for record in state.records.values() {
            let c = &record.counts;
            if record.recorded_at < query.from || record.recorded_at >= query.to {
                continue;
            }
            if query.chain_id.as_ref().is_some_and(|id| id != &c.chain_id) {
                continue;
            }
            if query
                .registration_id
                .as_ref()
                .is_some_and(|id| !c.scope.contains(id))
            {
                continue;
            }
            analytics.jobs += 1;
            let bucket = query.from + (record.recorded_at - query.from) / interval * interval;
            let failed_fetch = record.fetch_verdict == Verdict::Fail;
            let failed_notify = record.notify_verdict == NotifyVerdict::Fail;
            analytics.fetch_failures += u64::from(failed_fetch);
            analytics.notify_failures += u64::from(failed_notify);
            for t in &c.scope {
                if query.registration_id.as_ref().is_some_and(|id| id != t) {
                    continue;
                }
                let stats = analytics.per_type.entry(t.clone()).or_default();
                stats.jobs += 1;
                stats.failures += u64::from(failed_fetch || failed_notify);
                if failed_fetch {
                    continue;
                }
                let n = c.per_type_persisted.get(t).copied().unwrap_or(0);
                stats.total += n;
                *stats.series.entry(bucket).or_default() += n;
            }
        }
        analytics
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnalyticsQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_id: Option<ChainId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registration_id: Option<RegistrationId>,
    /// Window start, inclusive (ms).
    #[serde(default)]
    pub from: Millis,
    /// Window end, exclusive (ms).
    #[serde(default = "max_millis")]
    pub to: Millis,
    #[serde(default = "default_interval")]
    pub interval_ms: Millis,
}

fn max_millis() -> Millis {
    Millis::MAX
}

fn default_interval() -> Millis {
    60_000
}

impl Default for AnalyticsQuery {
    fn default() -> Self {
        Self {
            chain_id: None,
            registration_id: None,
            from: 0,
            to: Millis::MAX,
            interval_ms: default_interval(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TypeStats {
    pub total: u64,
    pub jobs: u64,
    pub failures: u64,
    /// Persisted events per interval, keyed by interval start (ms).
    pub series: BTreeMap<Millis, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Analytics {
    pub jobs: u64,
    pub fetch_failures: u64,
    pub notify_failures: u64,
    pub per_type: BTreeMap<RegistrationId, TypeStats>,
}
