//! Event store: idempotent persistence of mapped records and queries with
//! filtering, sorting, pagination and grouping.
//!
//! Records live in memory under two indexes (primary on record key,
//! secondary on event type and block timestamp) and are made durable by an
//! append-only journal replayed at startup.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::ops::Bound;
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::faults::{FaultInjector, FaultStage};
use crate::journal::{Durability, Journal, JournalError};
use crate::schema::{MappedRecord, MappingSchema, BUILTIN_COLUMNS};
use crate::types::{RecordKey, RegistrationId, Value};

pub const DEFAULT_LIMIT: u64 = 100;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Journal(#[from] JournalError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PersistOutcome {
    pub inserted: u64,
    pub duplicates: u64,
    /// Records now present in the store per event type (new or already there).
    pub per_type: BTreeMap<RegistrationId, u64>,
    /// The records that are in the store after this call, in input order.
    pub accepted: Vec<MappedRecord>,
}

#[derive(Debug, Default)]
struct Inner {
    records: BTreeMap<RecordKey, MappedRecord>,
    by_type_time: BTreeSet<(RegistrationId, u64, RecordKey)>,
    columns: BTreeMap<RegistrationId, BTreeSet<String>>,
}

impl Inner {
    fn insert(&mut self, record: MappedRecord) {
        self.by_type_time.insert((
            record.event_type.clone(),
            record.block_timestamp,
            record.key.clone(),
        ));
        self.records.insert(record.key.clone(), record);
    }
}

pub struct EventStore {
    inner: RwLock<Inner>,
    journal: Mutex<Journal<MappedRecord>>,
    faults: Arc<FaultInjector>,
}

impl std::fmt::Debug for EventStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventStore")
            .field("records", &self.inner.read().records.len())
            .finish()
    }
}

impl EventStore {
    pub fn in_memory(faults: Arc<FaultInjector>) -> Self {
        Self {
            inner: RwLock::new(Inner::default()),
            journal: Mutex::new(Journal::in_memory()),
            faults,
        }
    }

    pub fn open(path: impl AsRef<Path>, durability: Durability, faults: Arc<FaultInjector>) -> Result<Self, StoreError> {
        let (journal, records) = Journal::<MappedRecord>::open(path, durability)?;
        let mut inner = Inner::default();
        for record in records {
            if !inner.records.contains_key(&record.key) {
                inner.insert(record);
            }
        }
        Ok(Self {
            inner: RwLock::new(inner),
            journal: Mutex::new(journal),
            faults,
        })
    }

    /// Declares the columns carried by records of `event_type`.
    pub fn bind_schema(&self, event_type: &RegistrationId, schema: &MappingSchema) {
        self.inner
            .write()
            .columns
            .insert(event_type.clone(), schema.columns().map(str::to_owned).collect());
    }

    /// Inserts records keyed by record key. Existing keys are counted as
    /// duplicates and left untouched. New records are durable on return.
    pub fn persist(&self, records: Vec<MappedRecord>) -> Result<PersistOutcome, StoreError> {
        let mut inner = self.inner.write();
        let mut outcome = PersistOutcome::default();
        let mut fresh: Vec<MappedRecord> = Vec::new();
        let mut fresh_keys = BTreeSet::new();
        for record in records {
            let exists = inner.records.contains_key(&record.key) || fresh_keys.contains(&record.key);
            if exists {
                outcome.duplicates += 1;
            } else {
                if self.faults.should_drop(FaultStage::Store, &record.key) {
                    continue;
                }
                outcome.inserted += 1;
                fresh_keys.insert(record.key.clone());
                fresh.push(record.clone());
            }
            *outcome.per_type.entry(record.event_type.clone()).or_default() += 1;
            outcome.accepted.push(record);
        }
        self.journal.lock().append_all(&fresh)?;
        for record in fresh {
            inner.insert(record);
        }
        Ok(outcome)
    }

    pub fn len(&self) -> usize {
        self.inner.read().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &RecordKey) -> Option<MappedRecord> {
        self.inner.read().records.get(key).cloned()
    }

    /// All records in key order.
    pub fn records(&self) -> Vec<MappedRecord> {
        self.inner.read().records.values().cloned().collect()
    }

    pub fn count_by_type(&self) -> BTreeMap<RegistrationId, u64> {
        let inner = self.inner.read();
        let mut counts = BTreeMap::new();
        for (event_type, _, _) in &inner.by_type_time {
            *counts.entry(event_type.clone()).or_default() += 1;
        }
        counts
    }

    /// Digest over record content (ingestion time excluded), in key order.
    pub fn content_digest(&self) -> String {
        content_digest(self.inner.read().records.values())
    }

    pub fn query(&self, spec: &QuerySpec) -> Result<QueryPage, QueryError> {
        let inner = self.inner.read();
        spec.validate(&inner.columns)?;
        let candidates = candidates(&inner, spec);
        let matched: Vec<&MappedRecord> = candidates
            .into_iter()
            .filter(|r| spec.filters.iter().all(|f| f.matches(r)))
            .collect();
        match &spec.group_by {
            Some(group) => group_page(&matched, group, &spec.page),
            None => record_page(matched, spec),
        }
    }
}

pub fn content_digest<'a>(records: impl IntoIterator<Item = &'a MappedRecord>) -> String {
    let mut hasher = Sha256::new();
    for record in records {
        hasher.update(serde_json::to_vec(&record.content()).expect("records serialize"));
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("malformed cursor: {0}")]
    MalformedCursor(String),
    #[error("limit must be at least 1")]
    InvalidLimit,
    #[error("page may use an offset or a cursor, not both")]
    OffsetAndCursor,
    #[error("aggregate {0:?} needs an `of` column")]
    MissingAggregateColumn(Aggregate),
    #[error("column {0} holds a non-integer value and cannot be summed")]
    NotNumeric(String),
    #[error("sum over column {0} overflows")]
    Overflow(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "=", alias = "eq")]
    Eq,
    #[serde(rename = "!=", alias = "ne", alias = "≠")]
    Ne,
    #[serde(rename = "<", alias = "lt")]
    Lt,
    #[serde(rename = "<=", alias = "le", alias = "≤")]
    Le,
    #[serde(rename = ">", alias = "gt")]
    Gt,
    #[serde(rename = ">=", alias = "ge", alias = "≥")]
    Ge,
    #[serde(rename = "contains")]
    Contains,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Filter {
    pub column: String,
    pub op: Op,
    pub value: Value,
}

impl Filter {
    pub fn new(column: impl Into<String>, op: Op, value: impl Into<Value>) -> Self {
        Self {
            column: column.into(),
            op,
            value: value.into(),
        }
    }

    /// Records lacking the column never match. Ordering operators only
    /// match values of the same type.
    pub fn matches(&self, record: &MappedRecord) -> bool {
        let Some(v) = record.column(&self.column) else {
            return false;
        };
        let same_type = v.value_type() == self.value.value_type();
        match self.op {
            Op::Eq => v == self.value,
            Op::Ne => v != self.value,
            Op::Lt => same_type && v < self.value,
            Op::Le => same_type && v <= self.value,
            Op::Gt => same_type && v > self.value,
            Op::Ge => same_type && v >= self.value,
            Op::Contains => match (&v, &self.value) {
                (Value::Str(hay), Value::Str(needle)) => hay.contains(needle.as_str()),
                (Value::Bytes(hay), Value::Bytes(needle)) => {
                    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle.as_slice())
                }
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    #[default]
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SortKey {
    pub column: String,
    #[serde(default)]
    pub order: Order,
}

impl SortKey {
    pub fn asc(column: impl Into<String>) -> Self {
        Self {
            column: column.into(),
            order: Order::Asc,
        }
    }

    pub fn desc(column: impl Into<String>) -> Self {
        Self {
            column: column.into(),
            order: Order::Desc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Page {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cursor: Option<String>,
    #[serde(default = "default_limit")]
    pub limit: u64,
}

fn default_limit() -> u64 {
    DEFAULT_LIMIT
}

impl Default for Page {
    fn default() -> Self {
        Self {
            offset: None,
            cursor: None,
            limit: DEFAULT_LIMIT,
        }
    }
}

impl Page {
    pub fn first(limit: u64) -> Self {
        Self {
            limit,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Count,
    Min,
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupBy {
    pub column: String,
    pub aggregate: Aggregate,
    /// Aggregated column; required for min, max and sum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub of: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct QuerySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_types: Option<BTreeSet<RegistrationId>>,
    #[serde(default)]
    pub filters: Vec<Filter>,
    #[serde(default)]
    pub sort: Vec<SortKey>,
    #[serde(default)]
    pub page: Page,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_by: Option<GroupBy>,
}

impl QuerySpec {
    fn validate(&self, schema_columns: &BTreeMap<RegistrationId, BTreeSet<String>>) -> Result<(), QueryError> {
        if self.page.limit == 0 {
            return Err(QueryError::InvalidLimit);
        }
        if self.page.offset.is_some() && self.page.cursor.is_some() {
            return Err(QueryError::OffsetAndCursor);
        }
        let known = |name: &str| {
            BUILTIN_COLUMNS.contains(&name)
                || schema_columns
                    .iter()
                    .filter(|(t, _)| self.event_types.as_ref().is_none_or(|set| set.contains(*t)))
                    .any(|(_, cols)| cols.contains(name))
        };
        let mut referenced: Vec<&str> = self.filters.iter().map(|f| f.column.as_str()).collect();
        referenced.extend(self.sort.iter().map(|s| s.column.as_str()));
        if let Some(group) = &self.group_by {
            referenced.push(&group.column);
            match (&group.of, group.aggregate) {
                (Some(of), _) => referenced.push(of),
                (None, Aggregate::Count) => {}
                (None, other) => return Err(QueryError::MissingAggregateColumn(other)),
            }
        }
        match referenced.into_iter().find(|c| !known(c)) {
            Some(unknown) => Err(QueryError::UnknownColumn(unknown.to_owned())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroupRow {
    /// `null` collects records lacking the grouping column.
    pub group: Option<Value>,
    pub value: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QueryPage {
    pub records: Vec<MappedRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_cursor: Option<String>,
}

fn candidates<'a>(inner: &'a Inner, spec: &QuerySpec) -> Vec<&'a MappedRecord> {
    let Some(types) = &spec.event_types else {
        return inner.records.values().collect();
    };
    // Narrow the timestamp index with any blockTimestamp bounds.
    let mut lo = 0u64;
    let mut hi = u64::MAX;
    for f in spec.filters.iter().filter(|f| f.column == "blockTimestamp") {
        let Some(v) = f.value.as_int() else { continue };
        let v = v.max(0) as u64;
        match f.op {
            Op::Eq => {
                lo = lo.max(v);
                hi = hi.min(v);
            }
            Op::Ge => lo = lo.max(v),
            Op::Gt => lo = lo.max(v.saturating_add(1)),
            Op::Le => hi = hi.min(v),
            Op::Lt => hi = hi.min(v.saturating_sub(1)),
            _ => {}
        }
    }
    let mut out = Vec::new();
    if lo > hi {
        return out;
    }
    let min_key = RecordKey {
        chain_id: Default::default(),
        block_height: 0,
        tx_index: 0,
        log_index: 0,
    };
    for event_type in types {
        let start = Bound::Included((event_type.clone(), lo, min_key.clone()));
        let end = match hi.checked_add(1) {
            Some(next) => Bound::Excluded((event_type.clone(), next, min_key.clone())),
            None => Bound::Unbounded,
        };
        for (t, _, key) in inner.by_type_time.range((start, end)) {
            if t != event_type {
                break;
            }
            out.push(&inner.records[key]);
        }
    }
    out
}

fn compare(a: &[Option<Value>], b: &[Option<Value>], sort: &[SortKey]) -> Ordering {
    for ((x, y), key) in a.iter().zip(b).zip(sort) {
        let ord = x.cmp(y);
        let ord = match key.order {
            Order::Asc => ord,
            Order::Desc => ord.reverse(),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

#[derive(Serialize, Deserialize)]
struct RecordCursor {
    v: u8,
    k: Vec<Option<Value>>,
    r: RecordKey,
}

#[derive(Serialize, Deserialize)]
struct GroupCursor {
    v: u8,
    g: Option<Value>,
}

fn encode_cursor<T: Serialize>(cursor: &T) -> String {
    URL_SAFE_NO_PAD.encode(serde_json::to_vec(cursor).expect("cursor serializes"))
}

fn decode_cursor<T: for<'de> Deserialize<'de>>(token: &str) -> Result<T, QueryError> {
    let bytes = URL_SAFE_NO_PAD
        .decode(token)
        .map_err(|e| QueryError::MalformedCursor(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| QueryError::MalformedCursor(e.to_string()))
}

fn record_page(matched: Vec<&MappedRecord>, spec: &QuerySpec) -> Result<QueryPage, QueryError> {
    let mut rows: Vec<(Vec<Option<Value>>, &MappedRecord)> = matched
        .into_iter()
        .map(|r| (spec.sort.iter().map(|s| r.column(&s.column)).collect(), r))
        .collect();
    rows.sort_by(|(ka, a), (kb, b)| compare(ka, kb, &spec.sort).then_with(|| a.key.cmp(&b.key)));

    let start = match &spec.page.cursor {
        Some(token) => {
            let cursor: RecordCursor = decode_cursor(token)?;
            if cursor.v != 1 || cursor.k.len() != spec.sort.len() {
                return Err(QueryError::MalformedCursor("cursor does not match the sort spec".into()));
            }
            rows.partition_point(|(k, r)| {
                compare(k, &cursor.k, &spec.sort).then_with(|| r.key.cmp(&cursor.r)) != Ordering::Greater
            })
        }
        None => spec.page.offset.unwrap_or(0).min(rows.len() as u64) as usize,
    };
    let end = start.saturating_add(spec.page.limit as usize).min(rows.len());
    let page = &rows[start..end];
    let next_cursor = (end < rows.len()).then(|| {
        let (k, r) = page.last().expect("non-empty page before the end");
        encode_cursor(&RecordCursor {
            v: 1,
            k: k.clone(),
            r: r.key.clone(),
        })
    });
    Ok(QueryPage {
        records: page.iter().map(|(_, r)| (*r).clone()).collect(),
        groups: None,
        next_cursor,
    })
}

fn group_page(matched: &[&MappedRecord], group: &GroupBy, page: &Page) -> Result<QueryPage, QueryError> {
    let mut acc: BTreeMap<Option<Value>, Option<Value>> = BTreeMap::new();
    for record in matched {
        let slot = acc.entry(record.column(&group.column)).or_insert(match group.aggregate {
            Aggregate::Count | Aggregate::Sum => Some(Value::Int(0)),
            Aggregate::Min | Aggregate::Max => None,
        });
        let operand = group.of.as_ref().and_then(|c| record.column(c));
        match group.aggregate {
            Aggregate::Count => {
                if group.of.is_none() || operand.is_some() {
                    let n = slot.as_ref().and_then(Value::as_int).unwrap_or(0);
                    *slot = Some(Value::Int(n + 1));
                }
            }
            Aggregate::Sum => {
                let Some(v) = operand else { continue };
                let column = group.of.clone().unwrap_or_default();
                let add = v.as_int().ok_or_else(|| QueryError::NotNumeric(column.clone()))?;
                let n = slot.as_ref().and_then(Value::as_int).unwrap_or(0);
                *slot = Some(Value::Int(n.checked_add(add).ok_or(QueryError::Overflow(column))?));
            }
            Aggregate::Min => {
                if let Some(v) = operand {
                    if slot.as_ref().is_none_or(|cur| v < *cur) {
                        *slot = Some(v);
                    }
                }
            }
            Aggregate::Max => {
                if let Some(v) = operand {
                    if slot.as_ref().is_none_or(|cur| v > *cur) {
                        *slot = Some(v);
                    }
                }
            }
        }
    }
    let rows: Vec<GroupRow> = acc.into_iter().map(|(group, value)| GroupRow { group, value }).collect();
    let start = match &page.cursor {
        Some(token) => {
            let cursor: GroupCursor = decode_cursor(token)?;
            if cursor.v != 1 {
                return Err(QueryError::MalformedCursor("unsupported cursor version".into()));
            }
            rows.partition_point(|r| r.group <= cursor.g)
        }
        None => page.offset.unwrap_or(0).min(rows.len() as u64) as usize,
    };
    let end = start.saturating_add(page.limit as usize).min(rows.len());
    let next_cursor = (end < rows.len()).then(|| {
        encode_cursor(&GroupCursor {
            v: 1,
            g: rows[end - 1].group.clone(),
        })
    });
    Ok(QueryPage {
        records: Vec::new(),
        groups: Some(rows[start..end].to_vec()),
        next_cursor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ChainId, SchemaId};

    fn record(chain: &str, height: u64, token: i64, ts: u64) -> MappedRecord {
        MappedRecord {
            key: RecordKey {
                chain_id: ChainId::from(chain),
                block_height: height,
                tx_index: 0,
                log_index: 0,
            },
            event_type: RegistrationId::from(format!("{chain}-transfer")),
            schema_id: SchemaId::from("transfer"),
            columns: BTreeMap::from([
                ("tokenId".to_owned(), Value::Int(token)),
                ("to".to_owned(), Value::from(format!("0x{:02}", height % 7))),
            ]),
            block_timestamp: ts,
            stored_at: 0,
        }
    }

    fn store_with(records: Vec<MappedRecord>) -> EventStore {
        let store = EventStore::in_memory(Arc::new(FaultInjector::new()));
        let schema = MappingSchema::identity(
            "transfer",
            &[("tokenId", crate::types::ValueType::Int), ("to", crate::types::ValueType::Str)],
        );
        for t in ["eth-transfer", "flow-transfer"] {
            store.bind_schema(&t.into(), &schema);
        }
        store.persist(records).unwrap();
        store
    }

    #[test]
    fn persist_counts_inserts_and_duplicates() {
        let store = store_with(vec![]);
        let five: Vec<_> = (0..5).map(|h| record("eth", h, 1, h)).collect();
        let first = store.persist(five.clone()).unwrap();
        assert_eq!((first.inserted, first.duplicates), (5, 0));
        let again = store.persist(five).unwrap();
        assert_eq!((again.inserted, again.duplicates), (0, 5));
        let mixed: Vec<_> = (3..8).map(|h| record("eth", h, 1, h)).collect();
        let out = store.persist(mixed).unwrap();
        assert_eq!((out.inserted, out.duplicates), (3, 2));
        assert_eq!(out.per_type[&RegistrationId::from("eth-transfer")], 5);
        assert_eq!(store.len(), 8);
    }

    #[test]
    fn duplicates_within_one_batch_collapse() {
        let store = store_with(vec![]);
        let out = store.persist(vec![record("eth", 1, 1, 1), record("eth", 1, 1, 1)]).unwrap();
        assert_eq!((out.inserted, out.duplicates), (1, 1));
    }

    #[test]
    fn store_fault_drops_one_record() {
        let faults = Arc::new(FaultInjector::new());
        let store = EventStore::in_memory(faults.clone());
        faults.arm(FaultStage::Store, Some(record("eth", 2, 0, 0).key));
        let out = store.persist((0..4).map(|h| record("eth", h, 0, h)).collect()).unwrap();
        assert_eq!(out.inserted, 3);
        assert_eq!(out.per_type.values().sum::<u64>(), 3);
        assert!(store.get(&record("eth", 2, 0, 0).key).is_none());
    }

    #[test]
    fn persisted_records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.journal");
        let faults = Arc::new(FaultInjector::new());
        let digest = {
            let store = EventStore::open(&path, Durability::Flush, faults.clone()).unwrap();
            store.persist((0..10).map(|h| record("eth", h, h as i64, h)).collect()).unwrap();
            store.content_digest()
        };
        let store = EventStore::open(&path, Durability::Flush, faults).unwrap();
        assert_eq!(store.len(), 10);
        assert_eq!(store.content_digest(), digest);
    }

    #[test]
    fn token_history_sorted_by_time() {
        let store = store_with(
            (0..20)
                .map(|h| record(if h % 2 == 0 { "eth" } else { "flow" }, h, (h % 4) as i64, 1000 - h * 10))
                .collect(),
        );
        let spec = QuerySpec {
            filters: vec![Filter::new("tokenId", Op::Eq, 2i64)],
            sort: vec![SortKey::asc("blockTimestamp")],
            ..Default::default()
        };
        let page = store.query(&spec).unwrap();
        let heights: Vec<u64> = page.records.iter().map(|r| r.key.block_height).collect();
        assert_eq!(heights, vec![18, 14, 10, 6, 2]);
        assert!(page.next_cursor.is_none());
        // Interleaves both chains under one schema.
        let chains: BTreeSet<&str> = page.records.iter().map(|r| r.key.chain_id.as_str()).collect();
        assert_eq!(chains.len(), 1);
        let all = store.query(&QuerySpec::default()).unwrap();
        let chains: BTreeSet<&str> = all.records.iter().map(|r| r.key.chain_id.as_str()).collect();
        assert_eq!(chains.len(), 2);
    }

    #[test]
    fn group_count_in_time_window() {
        let store = store_with((0..40).map(|h| record("eth", h, (h % 3) as i64, h)).collect());
        let spec = QuerySpec {
            event_types: Some(BTreeSet::from(["eth-transfer".into()])),
            filters: vec![
                Filter::new("blockTimestamp", Op::Ge, 10i64),
                Filter::new("blockTimestamp", Op::Lt, 20i64),
            ],
            group_by: Some(GroupBy {
                column: "tokenId".into(),
                aggregate: Aggregate::Count,
                of: None,
            }),
            ..Default::default()
        };
        let groups = store.query(&spec).unwrap().groups.unwrap();
        let mut oracle: BTreeMap<i64, i64> = BTreeMap::new();
        for h in 10..20 {
            *oracle.entry(h % 3).or_default() += 1;
        }
        let got: BTreeMap<i64, i64> = groups
            .iter()
            .map(|g| (g.group.as_ref().unwrap().as_int().unwrap(), g.value.as_ref().unwrap().as_int().unwrap()))
            .collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn aggregates() {
        let store = store_with((0..10).map(|h| record("eth", h, h as i64, h)).collect());
        let run = |aggregate, of: Option<&str>| {
            store
                .query(&QuerySpec {
                    group_by: Some(GroupBy {
                        column: "chainId".into(),
                        aggregate,
                        of: of.map(str::to_owned),
                    }),
                    ..Default::default()
                })
                .map(|p| p.groups.unwrap()[0].value.clone())
        };
        assert_eq!(run(Aggregate::Sum, Some("tokenId")).unwrap(), Some(Value::Int(45)));
        assert_eq!(run(Aggregate::Min, Some("tokenId")).unwrap(), Some(Value::Int(0)));
        assert_eq!(run(Aggregate::Max, Some("to")).unwrap(), Some(Value::from("0x06")));
        assert_eq!(run(Aggregate::Count, None).unwrap(), Some(Value::Int(10)));
        assert_eq!(run(Aggregate::Sum, Some("to")), Err(QueryError::NotNumeric("to".into())));
        assert_eq!(run(Aggregate::Sum, None), Err(QueryError::MissingAggregateColumn(Aggregate::Sum)));
    }

    #[test]
    fn empty_store_gives_empty_page() {
        let store = store_with(vec![]);
        let page = store
            .query(&QuerySpec {
                filters: vec![Filter::new("tokenId", Op::Eq, 1i64)],
                ..Default::default()
            })
            .unwrap();
        assert!(page.records.is_empty());
        assert!(page.next_cursor.is_none());
    }

    #[test]
    fn paging_with_limit_three() {
        let store = store_with((0..10).map(|h| record("eth", h, (h % 2) as i64, 100 - h)).collect());
        let base = QuerySpec {
            sort: vec![SortKey::desc("tokenId"), SortKey::asc("blockTimestamp")],
            ..Default::default()
        };
        let full = store.query(&base).unwrap().records;
        let mut spec = base.clone();
        spec.page = Page::first(3);
        let mut pages = Vec::new();
        loop {
            let page = store.query(&spec).unwrap();
            pages.push(page.records);
            match page.next_cursor {
                Some(c) => spec.page.cursor = Some(c),
                None => break,
            }
        }
        assert_eq!(pages.len(), 4);
        assert_eq!(pages.concat(), full);

        let by_offset: Vec<MappedRecord> = (0..4)
            .flat_map(|i| {
                let mut s = base.clone();
                s.page = Page { offset: Some(i * 3), cursor: None, limit: 3 };
                store.query(&s).unwrap().records
            })
            .collect();
        assert_eq!(by_offset, full);
    }

    #[test]
    fn query_errors() {
        let store = store_with(vec![record("eth", 1, 1, 1)]);
        let unknown = QuerySpec {
            filters: vec![Filter::new("colour", Op::Eq, "red")],
            ..Default::default()
        };
        assert_eq!(store.query(&unknown), Err(QueryError::UnknownColumn("colour".into())));
        let scoped = QuerySpec {
            event_types: Some(BTreeSet::from(["other".into()])),
            sort: vec![SortKey::asc("tokenId")],
            ..Default::default()
        };
        assert_eq!(store.query(&scoped), Err(QueryError::UnknownColumn("tokenId".into())));
        let bad_cursor = QuerySpec {
            page: Page { offset: None, cursor: Some("%%%".into()), limit: 5 },
            ..Default::default()
        };
        assert!(matches!(store.query(&bad_cursor), Err(QueryError::MalformedCursor(_))));
        let zero = QuerySpec {
            page: Page::first(0),
            ..Default::default()
        };
        assert_eq!(store.query(&zero), Err(QueryError::InvalidLimit));
    }

    #[test]
    fn filter_operators() {
        let r = record("eth", 3, 42, 7);
        let check = |op, v: Value| Filter { column: "tokenId".into(), op, value: v }.matches(&r);
        assert!(check(Op::Eq, 42.into()));
        assert!(check(Op::Ne, 41.into()));
        assert!(check(Op::Lt, 43.into()));
        assert!(check(Op::Le, 42.into()));
        assert!(check(Op::Gt, 41.into()));
        assert!(check(Op::Ge, 42.into()));
        assert!(!check(Op::Lt, "zzz".into()));
        assert!(Filter::new("to", Op::Contains, "03").matches(&r));
        assert!(!Filter::new("missing", Op::Ne, 1i64).matches(&r));
    }

    #[test]
    fn query_spec_json() {
        let json = r#"{
            "eventTypes": ["eth-transfer"],
            "filters": [{"column": "tokenId", "op": "=", "value": 42}],
            "sort": [{"column": "blockTimestamp", "order": "desc"}],
            "page": {"limit": 10},
            "groupBy": {"column": "to", "aggregate": "count"}
        }"#;
        let spec: QuerySpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.filters[0].op, Op::Eq);
        assert_eq!(spec.sort[0].order, Order::Desc);
        assert_eq!(spec.page.limit, 10);
        let alias: Filter = serde_json::from_str(r#"{"column":"a","op":"ge","value":1}"#).unwrap();
        assert_eq!(alias.op, Op::Ge);
        assert!(serde_json::from_str::<QuerySpec>(r#"{"filter": []}"#).is_err());
    }
}
