//! In-process webhook receivers mounted under `sim://<name>`.
//!
//! Receivers check the signature, keep a deduplicated set of notification
//! ids and optionally react to an event with follow-up queries against the
//! event store. Their state is journaled so it survives a crash.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use syncer_core::chain_sim::seeded_rng;
use syncer_core::dispatcher::{verify_signature, PostResult, WebhookPayload, WebhookTransport, SIGNATURE_HEADER};
use syncer_core::journal::{Durability, Journal, JournalError};
use syncer_core::registry::Registry;
use syncer_core::store::{Filter, Op, Page, QueryError, QueryPage, QuerySpec};
use syncer_core::types::{NotificationId, RecordKey, RegistrationId, SubscriptionId, Value};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReceiverMode {
    #[default]
    Ok,
    /// Fails each attempt independently with this probability.
    Flaky { failure_rate: f64 },
    Failing,
}

/// Follow-up lookups issued when an event of type `on` arrives: for every
/// payload column in `sources`, query records of type `lookup` whose
/// `column` equals that value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FollowUp {
    pub on: RegistrationId,
    pub lookup: RegistrationId,
    pub column: String,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Received {
    pub notification_id: NotificationId,
    pub subscription_id: SubscriptionId,
    pub event_type: RegistrationId,
    pub key: RecordKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FollowUpResult {
    pub notification_id: NotificationId,
    pub queried: Vec<Value>,
    pub found: Vec<RecordKey>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
enum Entry {
    Received(Received),
    FollowUp(FollowUpResult),
}

pub type QueryFn = Arc<dyn Fn(&QuerySpec) -> Result<QueryPage, QueryError> + Send + Sync>;

#[derive(Debug, Default)]
struct State {
    received: BTreeMap<NotificationId, Received>,
    follow_ups: BTreeMap<NotificationId, FollowUpResult>,
    attempts: BTreeMap<NotificationId, u32>,
    posts: u64,
    rejected: u64,
}

pub struct SimReceiver {
    name: String,
    mode: ReceiverMode,
    seed: u64,
    registry: Arc<Registry>,
    follow_up: Option<(FollowUp, QueryFn)>,
    state: Mutex<State>,
    journal: Mutex<Journal<Entry>>,
}

impl std::fmt::Debug for SimReceiver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimReceiver")
            .field("name", &self.name)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl SimReceiver {
    /// `journal_path` of `None` keeps state in memory only.
    pub fn open(
        name: &str,
        mode: ReceiverMode,
        seed: u64,
        registry: Arc<Registry>,
        follow_up: Option<(FollowUp, QueryFn)>,
        journal_path: Option<&Path>,
    ) -> Result<Self, JournalError> {
        let (journal, entries) = match journal_path {
            Some(p) => Journal::open(p, Durability::Flush)?,
            None => (Journal::in_memory(), Vec::new()),
        };
        let mut state = State::default();
        for entry in entries {
            match entry {
                Entry::Received(r) => {
                    state.received.insert(r.notification_id.clone(), r);
                }
                Entry::FollowUp(f) => {
                    state.follow_ups.insert(f.notification_id.clone(), f);
                }
            }
        }
        Ok(Self {
            name: name.to_owned(),
            mode,
            seed,
            registry,
            follow_up,
            state: Mutex::new(state),
            journal: Mutex::new(journal),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn received(&self) -> BTreeMap<NotificationId, Received> {
        self.state.lock().received.clone()
    }

    pub fn received_ids(&self) -> BTreeSet<NotificationId> {
        self.state.lock().received.keys().cloned().collect()
    }

    pub fn follow_ups(&self) -> BTreeMap<NotificationId, FollowUpResult> {
        self.state.lock().follow_ups.clone()
    }

    /// Total POSTs seen, including failed and rejected ones.
    pub fn posts(&self) -> u64 {
        self.state.lock().posts
    }

    pub fn rejected(&self) -> u64 {
        self.state.lock().rejected
    }

    fn should_fail(&self, id: &NotificationId, attempt: u32) -> bool {
        match self.mode {
            ReceiverMode::Ok => false,
            ReceiverMode::Failing => true,
            ReceiverMode::Flaky { failure_rate } => {
                let h = unit_hash(self.seed, &[self.name.as_bytes(), id.as_str().as_bytes(), &attempt.to_be_bytes()]);
                h < failure_rate
            }
        }
    }

    fn run_follow_up(&self, payload: &WebhookPayload) -> Option<FollowUpResult> {
        let (spec, query) = self.follow_up.as_ref()?;
        if payload.event_type != spec.on {
            return None;
        }
        let mut queried = Vec::new();
        let mut found = Vec::new();
        for source in &spec.sources {
            let Some(value) = payload.columns.get(source) else {
                continue;
            };
            queried.push(value.clone());
            let mut q = QuerySpec {
                event_types: Some(BTreeSet::from([spec.lookup.clone()])),
                filters: vec![Filter::new(spec.column.clone(), Op::Eq, value.clone())],
                page: Page::first(100),
                ..Default::default()
            };
            loop {
                match query(&q) {
                    Ok(page) => {
                        found.extend(page.records.iter().map(|r| r.key.clone()));
                        match page.next_cursor {
                            Some(c) => q.page = Page { cursor: Some(c), ..Page::first(100) },
                            None => break,
                        }
                    }
                    Err(err) => {
                        tracing::warn!(receiver = %self.name, %err, "follow-up query failed");
                        break;
                    }
                }
            }
        }
        Some(FollowUpResult {
            notification_id: payload.notification_id.clone(),
            queried,
            found,
        })
    }
}

impl WebhookTransport for SimReceiver {
    fn post(&self, _url: &str, body: &[u8], headers: &[(&str, String)]) -> PostResult {
        let Ok(payload) = serde_json::from_slice::<WebhookPayload>(body) else {
            self.state.lock().rejected += 1;
            return PostResult::Status(400);
        };
        let signature = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(SIGNATURE_HEADER))
            .map(|(_, v)| v.as_str())
            .unwrap_or_default();
        let signed = self
            .registry
            .subscription(&payload.subscription_id)
            .is_some_and(|s| verify_signature(&s.secret, body, signature));

        let attempt = {
            let mut state = self.state.lock();
            state.posts += 1;
            if !signed {
                state.rejected += 1;
                return PostResult::Status(401);
            }
            let n = state.attempts.entry(payload.notification_id.clone()).or_default();
            *n += 1;
            *n
        };
        if self.should_fail(&payload.notification_id, attempt) {
            return PostResult::Status(503);
        }

        if self.state.lock().received.contains_key(&payload.notification_id) {
            return PostResult::Status(200);
        }
        let received = Received {
            notification_id: payload.notification_id.clone(),
            subscription_id: payload.subscription_id.clone(),
            event_type: payload.event_type.clone(),
            key: payload.record_key(),
        };
        let follow_up = self.run_follow_up(&payload);
        let mut journal = self.journal.lock();
        let mut entries = vec![Entry::Received(received.clone())];
        entries.extend(follow_up.clone().map(Entry::FollowUp));
        if let Err(err) = journal.append_all(&entries) {
            tracing::error!(receiver = %self.name, %err, "receiver journal write failed");
            return PostResult::Status(500);
        }
        let mut state = self.state.lock();
        state.received.insert(received.notification_id.clone(), received);
        if let Some(f) = follow_up {
            state.follow_ups.insert(f.notification_id.clone(), f);
        }
        PostResult::Status(200)
    }
}

/// Uniform value in `[0, 1)` derived from a seed and labels.
fn unit_hash(seed: u64, labels: &[&[u8]]) -> f64 {
    seeded_rng(seed, labels).random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use syncer_core::dispatcher::sign;
    use syncer_core::types::ChainId;

    fn payload_for(sub: &SubscriptionId, event_type: &RegistrationId, token: i64) -> WebhookPayload {
        WebhookPayload {
            version: 1,
            notification_id: NotificationId::new(format!("n-{token}")),
            subscription_id: sub.clone(),
            event_type: event_type.clone(),
            chain_id: ChainId::from("eth"),
            block_height: 1,
            tx_index: 0,
            log_index: token as u32,
            block_timestamp: 0,
            schema_id: "s".into(),
            columns: BTreeMap::from([("tokenId".to_owned(), Value::Int(token))]),
        }
    }

    #[test]
    fn rejects_bad_signatures_and_dedups() {
        let registry = Arc::new(Registry::in_memory());
        let sub = {
            use syncer_core::chain_sim::ChainParams;
            use syncer_core::registry::NewRegistration;
            use syncer_core::schema::MappingSchema;
            let reg = registry
                .register_event(
                    NewRegistration {
                        chain_id: "eth".into(),
                        contract_address: "0xa".into(),
                        event_signature: "E".into(),
                        init_block_height: 0,
                        mapping_schema: MappingSchema::identity("s", &[("tokenId", syncer_core::types::ValueType::Int)]),
                    },
                    &ChainParams::new("eth", 10, 0),
                    5,
                    |_| None,
                    0,
                )
                .unwrap();
            registry.subscribe(&reg.registration_id, "sim://r", 0).unwrap()
        };
        let rx = SimReceiver::open("r", ReceiverMode::Ok, 1, registry, None, None).unwrap();
        let body = serde_json::to_vec(&payload_for(&sub.subscription_id, &sub.registration_id, 1)).unwrap();
        assert_eq!(rx.post("sim://r", &body, &[(SIGNATURE_HEADER, "sha256=00".into())]), PostResult::Status(401));
        let good = [(SIGNATURE_HEADER, sign(&sub.secret, &body))];
        assert_eq!(rx.post("sim://r", &body, &good), PostResult::Status(200));
        assert_eq!(rx.post("sim://r", &body, &good), PostResult::Status(200));
        assert_eq!(rx.received().len(), 1);
        assert_eq!(rx.posts(), 3);
        assert_eq!(rx.rejected(), 1);
    }

    #[test]
    fn flaky_rate_is_roughly_honoured() {
        let registry = Arc::new(Registry::in_memory());
        let rx = SimReceiver::open("f", ReceiverMode::Flaky { failure_rate: 0.3 }, 4, registry, None, None).unwrap();
        let fails = (0..10_000)
            .filter(|i| rx.should_fail(&NotificationId::new(format!("n{i}")), 1))
            .count();
        assert!((2_700..3_300).contains(&fails), "{fails}");
    }
}
