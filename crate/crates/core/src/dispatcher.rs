//! Durable notification queue and webhook delivery.
//!
//! Each persisted record yields one notification per active subscription
//! on its event type. Notifications are journaled before they count as
//! sent, delivered at least once, and retried with exponential backoff
//! until they succeed or exhaust their attempts. Delivery is ordered per
//! subscription: a notification waits until the one ahead of it settles.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use hmac::{Hmac, KeyInit, Mac};
use parking_lot::{Mutex, RwLock};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::faults::{FaultInjector, FaultStage};
use crate::integrity::{AlarmDetail, AlarmLog, Metrics, NotifyTally};
use crate::journal::{Durability, Journal, JournalError};
use crate::registry::{Registry, WebhookSubscription};
use crate::schema::MappedRecord;
use crate::types::{ChainId, Millis, NotificationId, RecordKey, RegistrationId, SchemaId, SubscriptionId, Value};

pub const SIGNATURE_HEADER: &str = "X-Syncer-Signature";
pub const NOTIFICATION_HEADER: &str = "X-Syncer-Notification-Id";
pub const PAYLOAD_VERSION: u32 = 1;

impl NotificationId {
    pub fn derive(key: &RecordKey, subscription: &SubscriptionId) -> Self {
        let mut hasher = Sha256::new();
        for part in [key.to_string().as_str(), subscription.as_str()] {
            hasher.update((part.len() as u64).to_be_bytes());
            hasher.update(part.as_bytes());
        }
        NotificationId(hex::encode(hasher.finalize()))
    }
}

/// Body POSTed to webhook receivers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WebhookPayload {
    pub version: u32,
    pub notification_id: NotificationId,
    pub subscription_id: SubscriptionId,
    pub event_type: RegistrationId,
    pub chain_id: ChainId,
    pub block_height: u64,
    pub tx_index: u32,
    pub log_index: u32,
    pub block_timestamp: u64,
    pub schema_id: SchemaId,
    pub columns: BTreeMap<String, Value>,
}

impl WebhookPayload {
    pub fn new(record: &MappedRecord, subscription: &SubscriptionId) -> Self {
        Self {
            version: PAYLOAD_VERSION,
            notification_id: NotificationId::derive(&record.key, subscription),
            subscription_id: subscription.clone(),
            event_type: record.event_type.clone(),
            chain_id: record.key.chain_id.clone(),
            block_height: record.key.block_height,
            tx_index: record.key.tx_index,
            log_index: record.key.log_index,
            block_timestamp: record.block_timestamp,
            schema_id: record.schema_id.clone(),
            columns: record.columns.clone(),
        }
    }

    pub fn record_key(&self) -> RecordKey {
        RecordKey {
            chain_id: self.chain_id.clone(),
            block_height: self.block_height,
            tx_index: self.tx_index,
            log_index: self.log_index,
        }
    }
}

/// `sha256=<hex>` HMAC of `body` keyed by the subscription secret.
pub fn sign(secret: &str, body: &[u8]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret.as_bytes()).expect("any key length");
    mac.update(body);
    format!("sha256={}", hex::encode(mac.finalize().into_bytes()))
}

pub fn verify_signature(secret: &str, body: &[u8], header: &str) -> bool {
    let Some(hex_sig) = header.strip_prefix("sha256=") else {
        return false;
    };
    let Ok(raw) = hex::decode(hex_sig) else {
        return false;
    };
    let mut mac = Hmac::<Sha256>::new_from_slice(secret.as_bytes()).expect("any key length");
    mac.update(body);
    mac.verify_slice(&raw).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryState {
    Pending,
    Delivered,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Notification {
    pub notification_id: NotificationId,
    pub subscription_id: SubscriptionId,
    pub url: String,
    pub payload: WebhookPayload,
    pub attempts: u32,
    pub state: DeliveryState,
    pub next_attempt_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RetryPolicy {
    pub base_ms: Millis,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_ms: 1_000,
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Wait after the `attempt`-th failure (1-based).
    pub fn delay(&self, attempt: u32) -> Millis {
        let exp = attempt.saturating_sub(1);
        (self.factor as Millis)
            .checked_pow(exp)
            .and_then(|m| self.base_ms.checked_mul(m))
            .unwrap_or(Millis::MAX)
    }
}

/// Outcome of one POST.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PostResult {
    Status(u16),
    Failed(String),
}

impl PostResult {
    pub fn is_success(&self) -> bool {
        matches!(self, PostResult::Status(s) if (200..300).contains(s))
    }

    fn describe(&self) -> String {
        match self {
            PostResult::Status(s) => format!("status {s}"),
            PostResult::Failed(e) => e.clone(),
        }
    }
}

pub trait WebhookTransport: Send + Sync {
    fn post(&self, url: &str, body: &[u8], headers: &[(&str, String)]) -> PostResult;
}

/// Outbound HTTP transport.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        Self { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(10))
    }
}

impl WebhookTransport for HttpTransport {
    fn post(&self, url: &str, body: &[u8], headers: &[(&str, String)]) -> PostResult {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        for (name, value) in headers {
            request = request.header(*name, value.as_str());
        }
        match request.send(body) {
            Ok(response) => PostResult::Status(response.status().as_u16()),
            Err(err) => PostResult::Failed(err.to_string()),
        }
    }
}

/// Sends `sim://<name>` URLs to in-process receivers and everything else
/// over HTTP.
#[derive(Clone, Default)]
pub struct RoutingTransport {
    local: Arc<RwLock<BTreeMap<String, Arc<dyn WebhookTransport>>>>,
    http: Option<Arc<dyn WebhookTransport>>,
}

impl RoutingTransport {
    pub fn new(http: Option<Arc<dyn WebhookTransport>>) -> Self {
        Self {
            local: Arc::default(),
            http,
        }
    }

    pub fn mount(&self, name: &str, receiver: Arc<dyn WebhookTransport>) {
        self.local.write().insert(name.to_owned(), receiver);
    }
}

impl WebhookTransport for RoutingTransport {
    fn post(&self, url: &str, body: &[u8], headers: &[(&str, String)]) -> PostResult {
        if let Some(rest) = url.strip_prefix("sim://") {
            let name = rest.split('/').next().unwrap_or_default();
            return match self.local.read().get(name) {
                Some(receiver) => receiver.post(url, body, headers),
                None => PostResult::Failed(format!("no receiver mounted as {name}")),
            };
        }
        match &self.http {
            Some(http) => http.post(url, body, headers),
            None => PostResult::Failed("outbound HTTP disabled".into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
enum QueueEntry {
    Enqueued { notification: Box<Notification> },
    Failed { id: NotificationId, attempts: u32, next_attempt_at: Millis, error: String },
    Acked { id: NotificationId, attempts: u32 },
    Dead { id: NotificationId, attempts: u32, error: String },
}

#[derive(Debug, Default)]
struct QueueState {
    pending: HashMap<NotificationId, Notification>,
    settled: HashMap<NotificationId, (DeliveryState, u32)>,
    topics: BTreeMap<SubscriptionId, VecDeque<NotificationId>>,
    dead: Vec<Notification>,
}

impl QueueState {
    fn knows(&self, id: &NotificationId) -> bool {
        self.pending.contains_key(id) || self.settled.contains_key(id)
    }

    fn apply(&mut self, entry: &QueueEntry) {
        match entry {
            QueueEntry::Enqueued { notification } => {
                if self.knows(&notification.notification_id) {
                    return;
                }
                self.topics
                    .entry(notification.subscription_id.clone())
                    .or_default()
                    .push_back(notification.notification_id.clone());
                self.pending
                    .insert(notification.notification_id.clone(), (**notification).clone());
            }
            QueueEntry::Failed {
                id,
                attempts,
                next_attempt_at,
                error,
            } => {
                if let Some(n) = self.pending.get_mut(id) {
                    n.attempts = *attempts;
                    n.next_attempt_at = *next_attempt_at;
                    n.last_error = Some(error.clone());
                }
            }
            QueueEntry::Acked { id, attempts } => self.settle(id, DeliveryState::Delivered, *attempts, None),
            QueueEntry::Dead { id, attempts, error } => {
                self.settle(id, DeliveryState::Dead, *attempts, Some(error.clone()))
            }
        }
    }

    fn settle(&mut self, id: &NotificationId, state: DeliveryState, attempts: u32, error: Option<String>) {
        let Some(mut n) = self.pending.remove(id) else {
            return;
        };
        if let Some(topic) = self.topics.get_mut(&n.subscription_id) {
            topic.retain(|x| x != id);
            if topic.is_empty() {
                self.topics.remove(&n.subscription_id);
            }
        }
        self.settled.insert(id.clone(), (state, attempts));
        if state == DeliveryState::Dead {
            n.attempts = attempts;
            n.state = DeliveryState::Dead;
            n.last_error = error;
            self.dead.push(n);
        }
    }

    fn head(&self, sub: &SubscriptionId) -> Option<&Notification> {
        self.topics
            .get(sub)
            .and_then(|t| t.front())
            .and_then(|id| self.pending.get(id))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DispatchError {
    #[error(transparent)]
    Journal(#[from] JournalError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeliveryReport {
    pub attempted: u64,
    pub delivered: u64,
    pub retried: u64,
    pub dead: u64,
}

impl DeliveryReport {
    fn merge(mut self, other: DeliveryReport) -> Self {
        self.attempted += other.attempted;
        self.delivered += other.delivered;
        self.retried += other.retried;
        self.dead += other.dead;
        self
    }
}

pub struct Dispatcher {
    state: Mutex<QueueState>,
    journal: Mutex<Journal<QueueEntry>>,
    dead_letters: Mutex<Journal<Notification>>,
    busy: Mutex<BTreeSet<SubscriptionId>>,
    registry: Arc<Registry>,
    transport: Arc<dyn WebhookTransport>,
    policy: RetryPolicy,
    alarms: Arc<AlarmLog>,
    metrics: Arc<Metrics>,
    faults: Arc<FaultInjector>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dispatcher")
            .field("pending", &self.pending())
            .field("policy", &self.policy)
            .finish()
    }
}

/// Shared handles a dispatcher needs.
#[derive(Clone)]
pub struct DispatchDeps {
    pub registry: Arc<Registry>,
    pub transport: Arc<dyn WebhookTransport>,
    pub policy: RetryPolicy,
    pub alarms: Arc<AlarmLog>,
    pub metrics: Arc<Metrics>,
    pub faults: Arc<FaultInjector>,
    pub clock: Arc<dyn Clock>,
}

impl Dispatcher {
    pub fn in_memory(deps: DispatchDeps) -> Self {
        Self::build(QueueState::default(), Journal::in_memory(), Journal::in_memory(), deps)
    }

    /// Opens `queue.journal` and `deadletter.journal` under `dir`.
    pub fn open(dir: impl AsRef<Path>, durability: Durability, deps: DispatchDeps) -> Result<Self, DispatchError> {
        let dir = dir.as_ref();
        let (journal, entries) = Journal::open(dir.join("queue.journal"), durability)?;
        let (dead_letters, _) = Journal::<Notification>::open(dir.join("deadletter.journal"), durability)?;
        let mut state = QueueState::default();
        for entry in &entries {
            state.apply(entry);
        }
        Ok(Self::build(state, journal, dead_letters, deps))
    }

    fn build(
        state: QueueState,
        journal: Journal<QueueEntry>,
        dead_letters: Journal<Notification>,
        deps: DispatchDeps,
    ) -> Self {
        Self {
            state: Mutex::new(state),
            journal: Mutex::new(journal),
            dead_letters: Mutex::new(dead_letters),
            busy: Mutex::new(BTreeSet::new()),
            registry: deps.registry,
            transport: deps.transport,
            policy: deps.policy,
            alarms: deps.alarms,
            metrics: deps.metrics,
            faults: deps.faults,
            clock: deps.clock,
        }
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    /// Queues one notification per (record, active subscription) pair.
    ///
    /// Returns the number of such notifications now held by the queue
    /// (including ones queued by an earlier run of the same job) together
    /// with the subscription fan-out used.
    pub fn enqueue_notifications(&self, job_id: &str, records: &[MappedRecord]) -> Result<NotifyTally, DispatchError> {
        let mut fanout: BTreeMap<RegistrationId, Vec<WebhookSubscription>> = BTreeMap::new();
        for record in records {
            if !fanout.contains_key(&record.event_type) {
                fanout.insert(
                    record.event_type.clone(),
                    self.registry.active_subscriptions(&record.event_type),
                );
            }
        }
        let now = self.clock.now();
        let mut state = self.state.lock();
        let mut sent = 0;
        let mut fresh = Vec::new();
        for record in records {
            let subs = &fanout[&record.event_type];
            if subs.is_empty() {
                continue;
            }
            if self.faults.should_drop(FaultStage::Dispatch, &record.key) {
                continue;
            }
            for sub in subs {
                let id = NotificationId::derive(&record.key, &sub.subscription_id);
                sent += 1;
                if state.knows(&id) || fresh.iter().any(|n: &Notification| n.notification_id == id) {
                    continue;
                }
                fresh.push(Notification {
                    notification_id: id,
                    subscription_id: sub.subscription_id.clone(),
                    url: sub.url.clone(),
                    payload: WebhookPayload::new(record, &sub.subscription_id),
                    attempts: 0,
                    state: DeliveryState::Pending,
                    next_attempt_at: now,
                    last_error: None,
                });
            }
        }
        let entries: Vec<QueueEntry> = fresh
            .into_iter()
            .map(|notification| QueueEntry::Enqueued {
                notification: Box::new(notification),
            })
            .collect();
        self.journal.lock().append_all(&entries)?;
        for entry in &entries {
            state.apply(entry);
        }
        self.metrics.add("notifications_enqueued_total", &[], entries.len() as u64);
        tracing::debug!(job_id, sent, "notifications queued");
        Ok(NotifyTally {
            sent,
            fanout: fanout.into_iter().map(|(t, subs)| (t, subs.len() as u64)).collect(),
        })
    }

    /// Attempts every notification whose turn has come. Each subscription
    /// stream is handled by one worker; a failed head blocks its stream
    /// until its retry time.
    pub fn deliver_due(&self) -> DeliveryReport {
        let now = self.clock.now();
        let ready: Vec<SubscriptionId> = {
            let state = self.state.lock();
            let mut busy = self.busy.lock();
            let ready: Vec<SubscriptionId> = state
                .topics
                .keys()
                .filter(|sub| !busy.contains(*sub))
                .filter(|sub| state.head(sub).is_some_and(|n| n.next_attempt_at <= now))
                .cloned()
                .collect();
            busy.extend(ready.iter().cloned());
            ready
        };
        ready
            .par_iter()
            .map(|sub| {
                let report = self.drain_stream(sub, now);
                self.busy.lock().remove(sub);
                report
            })
            .reduce(DeliveryReport::default, DeliveryReport::merge)
    }

    fn drain_stream(&self, sub: &SubscriptionId, now: Millis) -> DeliveryReport {
        let mut report = DeliveryReport::default();
        let secret = self.registry.subscription(sub).map(|s| s.secret).unwrap_or_default();
        loop {
            let Some(head) = self.state.lock().head(sub).filter(|n| n.next_attempt_at <= now).cloned() else {
                return report;
            };
            report.attempted += 1;
            let attempts = head.attempts + 1;
            let entry = match serde_json::to_vec(&head.payload) {
                Err(err) => QueueEntry::Dead {
                    id: head.notification_id.clone(),
                    attempts,
                    error: format!("payload serialization failed: {err}"),
                },
                Ok(body) => {
                    let headers = [
                        (SIGNATURE_HEADER, sign(&secret, &body)),
                        (NOTIFICATION_HEADER, head.notification_id.to_string()),
                    ];
                    let result = self.transport.post(&head.url, &body, &headers);
                    if result.is_success() {
                        QueueEntry::Acked {
                            id: head.notification_id.clone(),
                            attempts,
                        }
                    } else if attempts >= self.policy.max_attempts {
                        QueueEntry::Dead {
                            id: head.notification_id.clone(),
                            attempts,
                            error: result.describe(),
                        }
                    } else {
                        QueueEntry::Failed {
                            id: head.notification_id.clone(),
                            attempts,
                            next_attempt_at: now.saturating_add(self.policy.delay(attempts)),
                            error: result.describe(),
                        }
                    }
                }
            };
            if let Err(err) = self.record(&entry, &head) {
                // Leave the notification pending; it is retried next round.
                tracing::error!(%err, "queue journal write failed");
                return report;
            }
            match entry {
                QueueEntry::Acked { .. } => {
                    report.delivered += 1;
                    self.metrics.inc("notifications_delivered_total", &[]);
                }
                QueueEntry::Failed { .. } => {
                    report.retried += 1;
                    self.metrics.inc("notification_retries_total", &[]);
                    return report;
                }
                QueueEntry::Dead { .. } => report.dead += 1,
                QueueEntry::Enqueued { .. } => unreachable!(),
            }
        }
    }

    fn record(&self, entry: &QueueEntry, head: &Notification) -> Result<(), DispatchError> {
        self.journal.lock().append(entry)?;
        self.state.lock().apply(entry);
        if let QueueEntry::Dead { attempts, error, .. } = entry {
            let mut dead = head.clone();
            dead.attempts = *attempts;
            dead.state = DeliveryState::Dead;
            dead.last_error = Some(error.clone());
            if let Err(err) = self.dead_letters.lock().append(&dead) {
                tracing::error!(%err, "dead-letter journal write failed");
            }
            self.metrics.inc("notifications_dead_total", &[]);
            self.alarms.raise(AlarmDetail::DeliveryDead {
                notification_id: head.notification_id.clone(),
                subscription_id: head.subscription_id.clone(),
                attempts: *attempts,
                last_error: error.clone(),
            });
        }
        Ok(())
    }

    /// Earliest retry time among stream heads.
    pub fn next_due(&self) -> Option<Millis> {
        let state = self.state.lock();
        state
            .topics
            .keys()
            .filter_map(|sub| state.head(sub).map(|n| n.next_attempt_at))
            .min()
    }

    pub fn pending(&self) -> usize {
        self.state.lock().pending.len()
    }

    pub fn pending_notifications(&self) -> Vec<Notification> {
        let state = self.state.lock();
        let mut out: Vec<Notification> = state
            .topics
            .values()
            .flatten()
            .filter_map(|id| state.pending.get(id).cloned())
            .collect();
        out.sort_by(|a, b| a.notification_id.cmp(&b.notification_id));
        out
    }

    pub fn state_of(&self, id: &NotificationId) -> Option<(DeliveryState, u32)> {
        let state = self.state.lock();
        if let Some(n) = state.pending.get(id) {
            return Some((DeliveryState::Pending, n.attempts));
        }
        state.settled.get(id).copied()
    }

    pub fn delivered_count(&self) -> usize {
        self.state
            .lock()
            .settled
            .values()
            .filter(|(s, _)| *s == DeliveryState::Delivered)
            .count()
    }

    pub fn dead_letters(&self) -> Vec<Notification> {
        self.state.lock().dead.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain_sim::ChainParams;
    use crate::clock::VirtualClock;
    use crate::registry::NewRegistration;
    use crate::schema::MappingSchema;
    use crate::types::{BlockHash, ValueType};
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Receiver that answers from a script, then with `fallback`.
    struct Scripted {
        script: Mutex<VecDeque<u16>>,
        fallback: u16,
        seen: Mutex<Vec<(NotificationId, bool)>>,
        calls: AtomicUsize,
        secret: Mutex<Option<String>>,
    }

    impl Scripted {
        fn new(script: &[u16], fallback: u16) -> Arc<Self> {
            Arc::new(Self {
                script: Mutex::new(script.iter().copied().collect()),
                fallback,
                seen: Mutex::new(Vec::new()),
                calls: AtomicUsize::new(0),
                secret: Mutex::new(None),
            })
        }
    }

    impl WebhookTransport for Scripted {
        fn post(&self, _url: &str, body: &[u8], headers: &[(&str, String)]) -> PostResult {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let payload: WebhookPayload = serde_json::from_slice(body).unwrap();
            let signature = &headers.iter().find(|(k, _)| *k == SIGNATURE_HEADER).unwrap().1;
            if let Some(secret) = self.secret.lock().as_ref() {
                assert!(verify_signature(secret, body, signature));
            }
            let status = self.script.lock().pop_front().unwrap_or(self.fallback);
            self.seen.lock().push((payload.notification_id, (200..300).contains(&status)));
            PostResult::Status(status)
        }
    }

    struct Fixture {
        registry: Arc<Registry>,
        clock: Arc<VirtualClock>,
        alarms: Arc<AlarmLog>,
        faults: Arc<FaultInjector>,
        reg: RegistrationId,
    }

    fn fixture() -> Fixture {
        let registry = Arc::new(Registry::in_memory());
        let reg = registry
            .register_event(
                NewRegistration {
                    chain_id: "eth".into(),
                    contract_address: "0xa".into(),
                    event_signature: "Transfer".into(),
                    init_block_height: 0,
                    mapping_schema: MappingSchema::identity("t", &[("tokenId", ValueType::Int)]),
                },
                &ChainParams::new("eth", 10, 0),
                100,
                |_| Some(BlockHash::ZERO),
                0,
            )
            .unwrap()
            .registration_id;
        let clock = Arc::new(VirtualClock::new(0));
        Fixture {
            registry,
            alarms: Arc::new(AlarmLog::in_memory(clock.clone())),
            clock,
            faults: Arc::new(FaultInjector::new()),
            reg,
        }
    }

    impl Fixture {
        fn deps(&self, transport: Arc<dyn WebhookTransport>) -> DispatchDeps {
            DispatchDeps {
                registry: self.registry.clone(),
                transport,
                policy: RetryPolicy::default(),
                alarms: self.alarms.clone(),
                metrics: Arc::new(Metrics::new()),
                faults: self.faults.clone(),
                clock: self.clock.clone(),
            }
        }

        fn records(&self, n: u64) -> Vec<MappedRecord> {
            (0..n)
                .map(|h| MappedRecord {
                    key: RecordKey {
                        chain_id: "eth".into(),
                        block_height: h,
                        tx_index: 0,
                        log_index: 0,
                    },
                    event_type: self.reg.clone(),
                    schema_id: "t".into(),
                    columns: BTreeMap::from([("tokenId".into(), Value::Int(h as i64))]),
                    block_timestamp: h * 12,
                    stored_at: 0,
                })
                .collect()
        }
    }

    fn settle(d: &Dispatcher, clock: &VirtualClock) {
        for _ in 0..10_000 {
            d.deliver_due();
            match d.next_due() {
                Some(t) => clock.set(t.max(clock.now())),
                None => return,
            }
        }
        panic!("queue did not settle");
    }

    #[test]
    fn product_counts() {
        let f = fixture();
        let d = Dispatcher::in_memory(f.deps(Scripted::new(&[], 200)));
        assert_eq!(d.enqueue_notifications("j", &f.records(6)).unwrap().sent, 0);
        f.registry.subscribe(&f.reg, "http://a.test/hook", 0).unwrap();
        assert_eq!(d.enqueue_notifications("j", &f.records(6)).unwrap().sent, 6);
        f.registry.subscribe(&f.reg, "http://b.test/hook", 0).unwrap();
        let tally = d.enqueue_notifications("k", &f.records(2)).unwrap();
        assert_eq!(tally.sent, 4);
        assert_eq!(tally.fanout[&f.reg], 2);
        // Replays count what the queue holds without adding duplicates.
        assert_eq!(d.pending(), 6 + 2);
        assert_eq!(d.enqueue_notifications("k", &f.records(2)).unwrap().sent, 4);
        assert_eq!(d.pending(), 8);
    }

    #[test]
    fn delivered_first_try_in_order() {
        let f = fixture();
        let sub = f.registry.subscribe(&f.reg, "http://a.test/hook", 0).unwrap();
        let receiver = Scripted::new(&[], 200);
        *receiver.secret.lock() = Some(sub.secret.clone());
        let d = Dispatcher::in_memory(f.deps(receiver.clone()));
        let records = f.records(5);
        d.enqueue_notifications("j", &records).unwrap();
        let report = d.deliver_due();
        assert_eq!(report.delivered, 5);
        let order: Vec<NotificationId> = receiver.seen.lock().iter().map(|(id, _)| id.clone()).collect();
        let expected: Vec<NotificationId> = records
            .iter()
            .map(|r| NotificationId::derive(&r.key, &sub.subscription_id))
            .collect();
        assert_eq!(order, expected);
        assert_eq!(d.state_of(&expected[0]), Some((DeliveryState::Delivered, 1)));
    }

    #[test]
    fn flaky_receiver_succeeds_on_third_attempt() {
        let f = fixture();
        f.registry.subscribe(&f.reg, "http://a.test/hook", 0).unwrap();
        let receiver = Scripted::new(&[500, 503], 200);
        let d = Dispatcher::in_memory(f.deps(receiver.clone()));
        d.enqueue_notifications("j", &f.records(1)).unwrap();
        d.deliver_due();
        assert_eq!(d.next_due(), Some(1_000));
        f.clock.set(1_000);
        d.deliver_due();
        assert_eq!(d.next_due(), Some(3_000));
        f.clock.set(3_000);
        assert_eq!(d.deliver_due().delivered, 1);
        let id = receiver.seen.lock()[0].0.clone();
        assert_eq!(d.state_of(&id), Some((DeliveryState::Delivered, 3)));
        assert!(f.alarms.is_empty());
    }

    #[test]
    fn always_failing_receiver_goes_dead_after_max_attempts() {
        let f = fixture();
        f.registry.subscribe(&f.reg, "http://a.test/hook", 0).unwrap();
        let receiver = Scripted::new(&[], 500);
        let d = Dispatcher::in_memory(f.deps(receiver.clone()));
        d.enqueue_notifications("j", &f.records(3)).unwrap();
        settle(&d, &f.clock);
        assert_eq!(receiver.calls.load(Ordering::SeqCst), 15);
        let dead = d.dead_letters();
        assert_eq!(dead.len(), 3);
        assert!(dead.iter().all(|n| n.attempts == 5 && n.state == DeliveryState::Dead));
        assert_eq!(f.alarms.count_by_source()["delivery_dead"], 3);
        // Backoff 1+2+4+8 seconds per notification, one after another.
        assert_eq!(f.clock.now(), 3 * 15_000);
    }

    #[test]
    fn head_of_line_blocks_later_notifications() {
        let f = fixture();
        f.registry.subscribe(&f.reg, "http://a.test/hook", 0).unwrap();
        let receiver = Scripted::new(&[500], 200);
        let d = Dispatcher::in_memory(f.deps(receiver.clone()));
        d.enqueue_notifications("j", &f.records(3)).unwrap();
        let first = d.deliver_due();
        assert_eq!((first.attempted, first.delivered), (1, 0));
        settle(&d, &f.clock);
        let seen = receiver.seen.lock();
        let ids: Vec<&NotificationId> = seen.iter().map(|(id, _)| id).collect();
        assert_eq!(ids[0], ids[1]);
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn dispatch_fault_drops_one_record() {
        let f = fixture();
        f.registry.subscribe(&f.reg, "http://a.test/hook", 0).unwrap();
        let d = Dispatcher::in_memory(f.deps(Scripted::new(&[], 200)));
        let records = f.records(4);
        f.faults.arm(FaultStage::Dispatch, Some(records[2].key.clone()));
        assert_eq!(d.enqueue_notifications("j", &records).unwrap().sent, 3);
    }

    #[test]
    fn queue_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let f = fixture();
        let sub = f.registry.subscribe(&f.reg, "http://a.test/hook", 0).unwrap();
        {
            let d = Dispatcher::open(dir.path(), Durability::Flush, f.deps(Scripted::new(&[200, 200], 500))).unwrap();
            d.enqueue_notifications("j", &f.records(5)).unwrap();
            assert_eq!(d.deliver_due().delivered, 2);
            assert_eq!(d.pending(), 3);
        }
        let receiver = Scripted::new(&[], 200);
        let d = Dispatcher::open(dir.path(), Durability::Flush, f.deps(receiver.clone())).unwrap();
        assert_eq!(d.pending(), 3);
        assert_eq!(d.enqueue_notifications("j", &f.records(5)).unwrap().sent, 5);
        assert_eq!(d.pending(), 3);
        f.clock.set(1_000);
        assert_eq!(d.deliver_due().delivered, 3);
        let heights: Vec<u64> = receiver
            .seen
            .lock()
            .iter()
            .map(|(id, _)| {
                (0..5)
                    .find(|h| &NotificationId::derive(&f.records(5)[*h as usize].key, &sub.subscription_id) == id)
                    .unwrap()
            })
            .collect();
        assert_eq!(heights, vec![2, 3, 4]);
        assert_eq!(d.delivered_count(), 5);
    }

    #[test]
    fn signature_roundtrip() {
        let sig = sign("secret", b"{}");
        assert!(verify_signature("secret", b"{}", &sig));
        assert!(!verify_signature("other", b"{}", &sig));
        assert!(!verify_signature("secret", b"{ }", &sig));
        assert!(!verify_signature("secret", b"{}", "md5=00"));
    }

    #[test]
    fn retry_delays() {
        let p = RetryPolicy::default();
        let delays: Vec<Millis> = (1..=4).map(|a| p.delay(a)).collect();
        assert_eq!(delays, vec![1_000, 2_000, 4_000, 8_000]);
        assert_eq!(RetryPolicy { base_ms: u64::MAX, factor: 2, max_attempts: 9 }.delay(3), u64::MAX);
    }

    #[test]
    fn routing_transport_dispatches_by_scheme() {
        let local = Scripted::new(&[], 204);
        let routing = RoutingTransport::new(None);
        routing.mount("renderer", local.clone());
        let body = serde_json::to_vec(&WebhookPayload::new(&fixture().records(1)[0], &"s".into())).unwrap();
        assert!(routing.post("sim://renderer/hook", &body, &[(SIGNATURE_HEADER, "x".into())]).is_success());
        assert!(!routing.post("sim://missing", &body, &[]).is_success());
        assert!(!routing.post("http://x.test", &body, &[]).is_success());
    }

    #[test]
    fn payload_wire_format() {
        let f = fixture();
        let payload = WebhookPayload::new(&f.records(2)[1], &"sub-000001".into());
        let text = serde_json::to_string(&payload).unwrap();
        let order = [
            "version", "notificationId", "subscriptionId", "eventType", "chainId", "blockHeight",
            "txIndex", "logIndex", "blockTimestamp", "schemaId", "columns",
        ];
        let positions: Vec<usize> = order.iter().map(|k| text.find(&format!("\"{k}\":")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(json["columns"]["tokenId"], 1);
    }
}
