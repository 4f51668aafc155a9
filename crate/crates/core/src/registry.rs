//! Registrations of events of interest, their sync cursors, mapping
//! schemas and webhook subscriptions, persisted as one journal.

use std::collections::BTreeMap;
use std::path::Path;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::chain_sim::ChainParams;
use crate::journal::{Durability, Journal, JournalError};
use crate::schema::{MappingSchema, SchemaError};
use crate::types::{BlockHash, ChainId, EventKey, Millis, RegistrationId, SchemaId, SubscriptionId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RegistrationStatus {
    Active,
    /// Stopped after the chain rewrote history below the confirmation depth.
    Halted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EventRegistration {
    pub registration_id: RegistrationId,
    pub chain_id: ChainId,
    pub contract_address: String,
    pub event_signature: String,
    pub init_block_height: u64,
    pub synced_start_block_height: u64,
    pub synced_latest_block_height: u64,
    /// Hash of the block at `synced_latest_block_height` when it was scanned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synced_latest_hash: Option<BlockHash>,
    pub schema_id: SchemaId,
    /// Historical ranges already scanned, keyed by start height.
    #[serde(default)]
    pub backfill_done: BTreeMap<u64, u64>,
    #[serde(default)]
    pub backfill_complete: bool,
    pub status: RegistrationStatus,
    pub created_at: Millis,
}

impl EventRegistration {
    pub fn event_key(&self) -> EventKey {
        EventKey::new(&self.contract_address, &self.event_signature)
    }

    pub fn is_active(&self) -> bool {
        self.status == RegistrationStatus::Active
    }

    /// The historical range still owned by backfill, if any.
    ///
    /// Backfill owns the closed range `[init, start]`; regular sync begins
    /// at `start + 1`.
    pub fn backfill_range(&self) -> Option<(u64, u64)> {
        (!self.backfill_complete).then_some((self.init_block_height, self.synced_start_block_height))
    }

    /// Sub-ranges of the backfill range not yet marked done.
    pub fn backfill_missing(&self) -> Vec<(u64, u64)> {
        let Some((init, start)) = self.backfill_range() else {
            return Vec::new();
        };
        let mut missing = Vec::new();
        let mut next = init;
        for (&from, &to) in &self.backfill_done {
            if to < next {
                continue;
            }
            if from > next {
                missing.push((next, from - 1));
            }
            next = to + 1;
            if next > start {
                return missing;
            }
        }
        missing.push((next, start));
        missing
    }

    #[cfg(test)]
    pub(crate) fn for_test(chain_id: ChainId, contract_address: &str, event_signature: &str) -> Self {
        Self {
            registration_id: RegistrationId::derive(&chain_id, contract_address, event_signature),
            chain_id,
            contract_address: contract_address.into(),
            event_signature: event_signature.into(),
            init_block_height: 0,
            synced_start_block_height: 0,
            synced_latest_block_height: 0,
            synced_latest_hash: None,
            schema_id: SchemaId::from("test"),
            backfill_done: BTreeMap::new(),
            backfill_complete: false,
            status: RegistrationStatus::Active,
            created_at: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NewRegistration {
    pub chain_id: ChainId,
    pub contract_address: String,
    pub event_signature: String,
    pub init_block_height: u64,
    pub mapping_schema: MappingSchema,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CursorUpdate {
    pub registration_id: RegistrationId,
    pub new_latest: u64,
    /// Hash of the block at `new_latest` as seen by the job.
    pub block_hash: BlockHash,
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WebhookSubscription {
    pub subscription_id: SubscriptionId,
    pub registration_id: RegistrationId,
    pub url: String,
    pub active: bool,
    /// Hex key for the payload signature header.
    pub secret: String,
    pub created_at: Millis,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("registration {0} already exists")]
    Duplicate(RegistrationId),
    #[error("chain {chain} does not match parameters for {params}")]
    ChainMismatch { chain: ChainId, params: ChainId },
    #[error("initBlockHeight {init} is beyond head {head}")]
    InitBeyondHead { init: u64, head: u64 },
    #[error("unknown registration {0}")]
    UnknownRegistration(RegistrationId),
    #[error("backfill of {id} is incomplete; missing {missing:?}")]
    IncompleteBackfill { id: RegistrationId, missing: Vec<(u64, u64)> },
    #[error("range [{from}, {to}] lies outside the backfill range of {id}")]
    OutsideBackfill { id: RegistrationId, from: u64, to: u64 },
    #[error("schema {0} is already defined differently")]
    SchemaConflict(SchemaId),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("unknown subscription {0}")]
    UnknownSubscription(SubscriptionId),
    #[error("{url} is already subscribed to {registration}")]
    DuplicateSubscription { registration: RegistrationId, url: String },
    #[error("malformed url {url}: {reason}")]
    InvalidUrl { url: String, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
enum Entry {
    Schema { schema: MappingSchema },
    Registered { registration: EventRegistration },
    Advanced { update: CursorUpdate },
    Partition { registration_id: RegistrationId, from: u64, to: u64, job_id: String },
    BackfillCompleted { registration_id: RegistrationId },
    Halted { registration_id: RegistrationId, reason: String },
    Subscribed { subscription: WebhookSubscription },
    Unsubscribed { subscription_id: SubscriptionId },
}

#[derive(Debug, Default)]
struct State {
    registrations: BTreeMap<RegistrationId, EventRegistration>,
    schemas: BTreeMap<SchemaId, MappingSchema>,
    subscriptions: BTreeMap<SubscriptionId, WebhookSubscription>,
    next_subscription: u64,
}

impl State {
    fn apply(&mut self, entry: &Entry) {
        match entry {
            Entry::Schema { schema } => {
                self.schemas.insert(schema.schema_id.clone(), schema.clone());
            }
            Entry::Registered { registration } => {
                self.registrations
                    .insert(registration.registration_id.clone(), registration.clone());
            }
            Entry::Advanced { update } => {
                if let Some(reg) = self.registrations.get_mut(&update.registration_id) {
                    if update.new_latest > reg.synced_latest_block_height {
                        reg.synced_latest_block_height = update.new_latest;
                        reg.synced_latest_hash = Some(update.block_hash);
                    }
                }
            }
            Entry::Partition {
                registration_id, from, to, ..
            } => {
                if let Some(reg) = self.registrations.get_mut(registration_id) {
                    reg.backfill_done.insert(*from, *to);
                }
            }
            Entry::BackfillCompleted { registration_id } => {
                if let Some(reg) = self.registrations.get_mut(registration_id) {
                    reg.synced_start_block_height = reg.init_block_height;
                    reg.backfill_complete = true;
                    reg.backfill_done.clear();
                }
            }
            Entry::Halted { registration_id, reason } => {
                if let Some(reg) = self.registrations.get_mut(registration_id) {
                    reg.status = RegistrationStatus::Halted { reason: reason.clone() };
                }
            }
            Entry::Subscribed { subscription } => {
                self.next_subscription += 1;
                self.subscriptions
                    .insert(subscription.subscription_id.clone(), subscription.clone());
            }
            Entry::Unsubscribed { subscription_id } => {
                if let Some(sub) = self.subscriptions.get_mut(subscription_id) {
                    sub.active = false;
                }
            }
        }
    }
}

/// Result of [`Registry::advance_latest`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Advance {
    pub registration: EventRegistration,
    /// False when the update was stale and ignored.
    pub applied: bool,
}

#[derive(Debug)]
pub struct Registry {
    state: RwLock<State>,
    journal: Mutex<Journal<Entry>>,
}

impl Registry {
    pub fn in_memory() -> Self {
        Self {
            state: RwLock::new(State::default()),
            journal: Mutex::new(Journal::in_memory()),
        }
    }

    pub fn open(path: impl AsRef<Path>, durability: Durability) -> Result<Self, RegistryError> {
        let (journal, entries) = Journal::open(path, durability)?;
        let mut state = State::default();
        for entry in &entries {
            state.apply(entry);
        }
        Ok(Self {
            state: RwLock::new(state),
            journal: Mutex::new(journal),
        })
    }

    /// Journals then applies `entries` while the caller holds the write lock.
    fn commit(&self, state: &mut State, entries: &[Entry]) -> Result<(), RegistryError> {
        self.journal.lock().append_all(entries)?;
        for entry in entries {
            state.apply(entry);
        }
        Ok(())
    }

    /// Registers an event of interest with both cursors at the safe head.
    ///
    /// `safe_hash` is the hash of the block at the initial cursor, when that
    /// block is already below the confirmation depth.
    pub fn register_event(
        &self,
        new: NewRegistration,
        params: &ChainParams,
        head: u64,
        safe_hash: impl FnOnce(u64) -> Option<BlockHash>,
        now: Millis,
    ) -> Result<EventRegistration, RegistryError> {
        if new.chain_id != params.chain_id {
            return Err(RegistryError::ChainMismatch {
                chain: new.chain_id,
                params: params.chain_id.clone(),
            });
        }
        if new.init_block_height > head {
            return Err(RegistryError::InitBeyondHead {
                init: new.init_block_height,
                head,
            });
        }
        new.mapping_schema.validate()?;
        let id = RegistrationId::derive(&new.chain_id, &new.contract_address, &new.event_signature);
        let mut state = self.state.write();
        if state.registrations.contains_key(&id) {
            return Err(RegistryError::Duplicate(id));
        }
        let schema_id = new.mapping_schema.schema_id.clone();
        let mut entries = Vec::new();
        match state.schemas.get(&schema_id) {
            Some(existing) if existing != &new.mapping_schema => {
                return Err(RegistryError::SchemaConflict(schema_id));
            }
            Some(_) => {}
            None => entries.push(Entry::Schema {
                schema: new.mapping_schema.clone(),
            }),
        }
        let safe_head = head.checked_sub(params.confirmation_depth);
        let cursor = safe_head.unwrap_or(0).max(new.init_block_height);
        let hash = safe_head.filter(|s| cursor <= *s).and_then(|_| safe_hash(cursor));
        let registration = EventRegistration {
            registration_id: id.clone(),
            chain_id: new.chain_id,
            contract_address: new.contract_address,
            event_signature: new.event_signature,
            init_block_height: new.init_block_height,
            synced_start_block_height: cursor,
            synced_latest_block_height: cursor,
            synced_latest_hash: hash,
            schema_id,
            backfill_done: BTreeMap::new(),
            backfill_complete: false,
            status: RegistrationStatus::Active,
            created_at: now,
        };
        entries.push(Entry::Registered {
            registration: registration.clone(),
        });
        self.commit(&mut state, &entries)?;
        Ok(registration)
    }

    /// Moves the latest cursor forward. Stale updates are reported as
    /// not applied rather than rejected.
    pub fn advance_latest(&self, update: CursorUpdate) -> Result<Advance, RegistryError> {
        let mut state = self.state.write();
        let reg = state
            .registrations
            .get(&update.registration_id)
            .ok_or_else(|| RegistryError::UnknownRegistration(update.registration_id.clone()))?;
        if update.new_latest <= reg.synced_latest_block_height || !reg.is_active() {
            return Ok(Advance {
                registration: reg.clone(),
                applied: false,
            });
        }
        let id = update.registration_id.clone();
        self.commit(&mut state, &[Entry::Advanced { update }])?;
        Ok(Advance {
            registration: state.registrations[&id].clone(),
            applied: true,
        })
    }

    /// Marks a backfill partition as scanned.
    pub fn record_backfill_partition(
        &self,
        id: &RegistrationId,
        from: u64,
        to: u64,
        job_id: &str,
    ) -> Result<EventRegistration, RegistryError> {
        let mut state = self.state.write();
        let reg = state
            .registrations
            .get(id)
            .ok_or_else(|| RegistryError::UnknownRegistration(id.clone()))?;
        let Some((init, start)) = reg.backfill_range() else {
            return Ok(reg.clone());
        };
        if from > to || from < init || to > start {
            return Err(RegistryError::OutsideBackfill { id: id.clone(), from, to });
        }
        if reg.backfill_done.get(&from) != Some(&to) {
            self.commit(
                &mut state,
                &[Entry::Partition {
                    registration_id: id.clone(),
                    from,
                    to,
                    job_id: job_id.to_owned(),
                }],
            )?;
        }
        Ok(state.registrations[id].clone())
    }

    /// Collapses the start cursor onto the init height once every
    /// backfill partition is done. Repeated calls are no-ops.
    pub fn complete_backfill(&self, id: &RegistrationId) -> Result<EventRegistration, RegistryError> {
        let mut state = self.state.write();
        let reg = state
            .registrations
            .get(id)
            .ok_or_else(|| RegistryError::UnknownRegistration(id.clone()))?;
        if reg.backfill_complete {
            return Ok(reg.clone());
        }
        let missing = reg.backfill_missing();
        if !missing.is_empty() {
            return Err(RegistryError::IncompleteBackfill { id: id.clone(), missing });
        }
        self.commit(
            &mut state,
            &[Entry::BackfillCompleted {
                registration_id: id.clone(),
            }],
        )?;
        Ok(state.registrations[id].clone())
    }

    /// Stops all further sync for a registration. Returns false if it was
    /// already halted.
    pub fn halt(&self, id: &RegistrationId, reason: &str) -> Result<bool, RegistryError> {
        let mut state = self.state.write();
        let reg = state
            .registrations
            .get(id)
            .ok_or_else(|| RegistryError::UnknownRegistration(id.clone()))?;
        if !reg.is_active() {
            return Ok(false);
        }
        self.commit(
            &mut state,
            &[Entry::Halted {
                registration_id: id.clone(),
                reason: reason.to_owned(),
            }],
        )?;
        Ok(true)
    }

    pub fn get(&self, id: &RegistrationId) -> Result<EventRegistration, RegistryError> {
        self.state
            .read()
            .registrations
            .get(id)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownRegistration(id.clone()))
    }

    /// All registrations ordered by id, optionally for one chain.
    pub fn list_registrations(&self, chain_id: Option<&ChainId>) -> Vec<EventRegistration> {
        self.state
            .read()
            .registrations
            .values()
            .filter(|r| chain_id.is_none_or(|c| &r.chain_id == c))
            .cloned()
            .collect()
    }

    pub fn schema(&self, id: &SchemaId) -> Option<MappingSchema> {
        self.state.read().schemas.get(id).cloned()
    }

    pub fn schemas(&self) -> Vec<MappingSchema> {
        self.state.read().schemas.values().cloned().collect()
    }

    pub fn subscribe(
        &self,
        registration_id: &RegistrationId,
        url: &str,
        now: Millis,
    ) -> Result<WebhookSubscription, RegistryError> {
        validate_url(url)?;
        let mut state = self.state.write();
        if !state.registrations.contains_key(registration_id) {
            return Err(RegistryError::UnknownRegistration(registration_id.clone()));
        }
        if state
            .subscriptions
            .values()
            .any(|s| s.active && &s.registration_id == registration_id && s.url == url)
        {
            return Err(RegistryError::DuplicateSubscription {
                registration: registration_id.clone(),
                url: url.to_owned(),
            });
        }
        let subscription = WebhookSubscription {
            subscription_id: SubscriptionId::new(format!("sub-{:06}", state.next_subscription + 1)),
            registration_id: registration_id.clone(),
            url: url.to_owned(),
            active: true,
            secret: hex::encode(rand::random::<[u8; 32]>()),
            created_at: now,
        };
        self.commit(
            &mut state,
            &[Entry::Subscribed {
                subscription: subscription.clone(),
            }],
        )?;
        Ok(subscription)
    }

    pub fn unsubscribe(&self, id: &SubscriptionId) -> Result<WebhookSubscription, RegistryError> {
        let mut state = self.state.write();
        let sub = state
            .subscriptions
            .get(id)
            .ok_or_else(|| RegistryError::UnknownSubscription(id.clone()))?;
        if sub.active {
            self.commit(
                &mut state,
                &[Entry::Unsubscribed {
                    subscription_id: id.clone(),
                }],
            )?;
        }
        Ok(state.subscriptions[id].clone())
    }

    pub fn subscription(&self, id: &SubscriptionId) -> Option<WebhookSubscription> {
        self.state.read().subscriptions.get(id).cloned()
    }

    /// Every subscription ever created, ordered by id.
    pub fn subscriptions(&self) -> Vec<WebhookSubscription> {
        self.state.read().subscriptions.values().cloned().collect()
    }

    pub fn active_subscriptions(&self, registration_id: &RegistrationId) -> Vec<WebhookSubscription> {
        self.state
            .read()
            .subscriptions
            .values()
            .filter(|s| s.active && &s.registration_id == registration_id)
            .cloned()
            .collect()
    }
}

fn validate_url(raw: &str) -> Result<(), RegistryError> {
    let invalid = |reason: &str| RegistryError::InvalidUrl {
        url: raw.to_owned(),
        reason: reason.to_owned(),
    };
    let url = url::Url::parse(raw).map_err(|e| invalid(&e.to_string()))?;
    match url.scheme() {
        "http" | "https" => {
            if url.host_str().is_none_or(str::is_empty) {
                return Err(invalid("missing host"));
            }
        }
        // In-process receivers used by scenarios.
        "sim" => {
            if url.host_str().is_none_or(str::is_empty) {
                return Err(invalid("missing receiver name"));
            }
        }
        other => return Err(invalid(&format!("unsupported scheme {other}"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ValueType;

    fn schema() -> MappingSchema {
        MappingSchema::identity("transfer", &[("tokenId", ValueType::Int)])
    }

    fn new_reg(chain: &str, contract: &str, init: u64) -> NewRegistration {
        NewRegistration {
            chain_id: chain.into(),
            contract_address: contract.into(),
            event_signature: "Transfer(address,address,uint256)".into(),
            init_block_height: init,
            mapping_schema: schema(),
        }
    }

    fn eth() -> ChainParams {
        ChainParams::new("eth", 100, 5)
    }

    fn register(reg: &Registry, contract: &str, head: u64, init: u64) -> EventRegistration {
        reg.register_event(new_reg("eth", contract, init), &eth(), head, |_| Some(BlockHash::ZERO), 0)
            .unwrap()
    }

    fn update(id: &RegistrationId, latest: u64) -> CursorUpdate {
        CursorUpdate {
            registration_id: id.clone(),
            new_latest: latest,
            block_hash: BlockHash([latest as u8; 32]),
            job_id: format!("j{latest}"),
        }
    }

    #[test]
    fn genesis_registration() {
        let reg = Registry::in_memory();
        let r = register(&reg, "0xa", 0, 0);
        assert_eq!((r.synced_start_block_height, r.synced_latest_block_height), (0, 0));
        assert_eq!(r.backfill_range(), Some((0, 0)));
    }

    #[test]
    fn cursors_start_at_safe_head() {
        let reg = Registry::in_memory();
        let r = register(&reg, "0xa", 1000, 200);
        assert_eq!(r.synced_start_block_height, 995);
        assert_eq!(r.synced_latest_block_height, 995);
        assert_eq!(r.backfill_range(), Some((200, 995)));
        assert_eq!(r.synced_latest_hash, Some(BlockHash::ZERO));
    }

    #[test]
    fn young_chain_has_no_safe_hash() {
        let reg = Registry::in_memory();
        let r = reg
            .register_event(new_reg("eth", "0xa", 1), &eth(), 3, |_| Some(BlockHash::ZERO), 0)
            .unwrap();
        assert_eq!(r.synced_latest_block_height, 1);
        assert_eq!(r.synced_latest_hash, None);
    }

    #[test]
    fn registration_errors() {
        let reg = Registry::in_memory();
        register(&reg, "0xa", 10, 0);
        assert!(matches!(
            reg.register_event(new_reg("eth", "0xa", 0), &eth(), 10, |_| None, 0),
            Err(RegistryError::Duplicate(_))
        ));
        assert!(matches!(
            reg.register_event(new_reg("eth", "0xb", 11), &eth(), 10, |_| None, 0),
            Err(RegistryError::InitBeyondHead { init: 11, head: 10 })
        ));
        let mut conflicting = new_reg("eth", "0xc", 0);
        conflicting.mapping_schema = MappingSchema::identity("transfer", &[("other", ValueType::Str)]);
        assert!(matches!(
            reg.register_event(conflicting, &eth(), 10, |_| None, 0),
            Err(RegistryError::SchemaConflict(_))
        ));
    }

    #[test]
    fn advance_is_monotone() {
        let reg = Registry::in_memory();
        let r = register(&reg, "0xa", 1000, 200);
        let a = reg.advance_latest(update(&r.registration_id, 1090)).unwrap();
        assert!(a.applied);
        assert_eq!(a.registration.synced_latest_block_height, 1090);
        let b = reg.advance_latest(update(&r.registration_id, 1000)).unwrap();
        assert!(!b.applied);
        assert_eq!(b.registration.synced_latest_block_height, 1090);
        assert!(matches!(
            reg.advance_latest(update(&RegistrationId::from("nope"), 1)),
            Err(RegistryError::UnknownRegistration(_))
        ));
    }

    #[test]
    fn concurrent_advances_fold_to_max() {
        for order in [[1095u64, 1090], [1090, 1095]] {
            let reg = std::sync::Arc::new(Registry::in_memory());
            let r = register(&reg, "0xa", 1000, 200);
            std::thread::scope(|s| {
                for latest in order {
                    let reg = reg.clone();
                    let id = r.registration_id.clone();
                    s.spawn(move || reg.advance_latest(update(&id, latest)).unwrap());
                }
            });
            assert_eq!(reg.get(&r.registration_id).unwrap().synced_latest_block_height, 1095);
        }
    }

    #[test]
    fn backfill_collapse() {
        let reg = Registry::in_memory();
        let r = register(&reg, "0xa", 1000, 200);
        let id = &r.registration_id;
        let parts: Vec<(u64, u64)> = (0..8).map(|i| (200 + i * 100, (299 + i * 100).min(995))).collect();
        for (from, to) in &parts[..7] {
            reg.record_backfill_partition(id, *from, *to, "b").unwrap();
        }
        match reg.complete_backfill(id) {
            Err(RegistryError::IncompleteBackfill { missing, .. }) => assert_eq!(missing, vec![(900, 995)]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(reg.get(id).unwrap().synced_start_block_height, 995);
        reg.record_backfill_partition(id, 900, 995, "b").unwrap();
        let done = reg.complete_backfill(id).unwrap();
        assert_eq!(done.synced_start_block_height, 200);
        assert!(done.backfill_range().is_none());
        assert_eq!(reg.complete_backfill(id).unwrap(), done);
        // Late partitions cannot reopen the range.
        assert_eq!(reg.record_backfill_partition(id, 300, 399, "late").unwrap(), done);
        assert!(matches!(
            register_outside(&reg),
            Err(RegistryError::OutsideBackfill { .. })
        ));
    }

    fn register_outside(reg: &Registry) -> Result<EventRegistration, RegistryError> {
        let r = register(reg, "0xz", 1000, 500);
        reg.record_backfill_partition(&r.registration_id, 400, 600, "x")
    }

    #[test]
    fn missing_ranges_account_for_overlap_and_gaps() {
        let mut r = EventRegistration::for_test("eth".into(), "0xa", "E");
        r.init_block_height = 0;
        r.synced_start_block_height = 20;
        assert_eq!(r.backfill_missing(), vec![(0, 20)]);
        r.backfill_done.insert(5, 9);
        r.backfill_done.insert(12, 20);
        assert_eq!(r.backfill_missing(), vec![(0, 4), (10, 11)]);
        r.backfill_done.insert(0, 11);
        assert!(r.backfill_missing().is_empty());
    }

    #[test]
    fn list_filters_and_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.journal");
        let before = {
            let reg = Registry::open(&path, Durability::Flush).unwrap();
            assert!(reg.list_registrations(None).is_empty());
            register(&reg, "0xa", 50, 0);
            register(&reg, "0xb", 50, 10);
            let flow = ChainParams::new("flow", 100, 0);
            reg.register_event(new_reg("flow", "A.1.Land", 0), &flow, 50, |_| None, 0)
                .unwrap();
            let eth: Vec<_> = reg.list_registrations(Some(&"eth".into()));
            assert_eq!(eth.len(), 2);
            assert!(eth.iter().all(|r| r.chain_id.as_str() == "eth"));
            let all = reg.list_registrations(None);
            assert!(all.windows(2).all(|w| w[0].registration_id < w[1].registration_id));
            let id = all[0].registration_id.clone();
            reg.advance_latest(update(&id, 60)).unwrap();
            reg.subscribe(&id, "http://localhost:9000/hook", 1).unwrap();
            reg.halt(&all[1].registration_id, "deep reorg").unwrap();
            all.iter().map(|r| reg.get(&r.registration_id).unwrap()).collect::<Vec<_>>()
        };
        let reg = Registry::open(&path, Durability::Flush).unwrap();
        assert_eq!(reg.list_registrations(None), before);
        assert_eq!(reg.subscriptions().len(), 1);
        let next = reg
            .subscribe(&before[1].registration_id, "http://localhost:9000/hook", 2)
            .unwrap();
        assert_eq!(next.subscription_id.as_str(), "sub-000002");
    }

    #[test]
    fn subscription_state_machine() {
        let reg = Registry::in_memory();
        let r = register(&reg, "0xa", 10, 0);
        let id = &r.registration_id;
        let url = "https://example.com/hook";
        let first = reg.subscribe(id, url, 0).unwrap();
        assert!(first.active);
        assert_eq!(first.secret.len(), 64);
        assert!(matches!(
            reg.subscribe(id, url, 0),
            Err(RegistryError::DuplicateSubscription { .. })
        ));
        reg.unsubscribe(&first.subscription_id).unwrap();
        let second = reg.subscribe(id, url, 0).unwrap();
        assert_ne!(first.subscription_id, second.subscription_id);
        assert_eq!(reg.active_subscriptions(id), vec![second]);
        assert!(matches!(
            reg.subscribe(&RegistrationId::from("x"), url, 0),
            Err(RegistryError::UnknownRegistration(_))
        ));
        for bad in ["not a url", "ftp://host/x", "http://"] {
            assert!(matches!(reg.subscribe(id, bad, 0), Err(RegistryError::InvalidUrl { .. })), "{bad}");
        }
        assert!(reg.subscribe(id, "sim://fusion-renderer", 0).is_ok());
    }

    #[test]
    fn halted_registration_ignores_updates() {
        let reg = Registry::in_memory();
        let r = register(&reg, "0xa", 100, 0);
        assert!(reg.halt(&r.registration_id, "reorg").unwrap());
        assert!(!reg.halt(&r.registration_id, "reorg").unwrap());
        let a = reg.advance_latest(update(&r.registration_id, 200)).unwrap();
        assert!(!a.applied);
        assert!(matches!(a.registration.status, RegistrationStatus::Halted { .. }));
    }
}
