//! Deterministic simulated archive nodes.
//!
//! Two flavours are modelled: an Ethereum-like chain whose tip can be
//! replaced by an uncle branch, and a Flow-like chain whose history is split
//! into sporks, each served by its own endpoint.
//!
//! An uncle branch installed by [`ChainSim::reorg`] stays canonical until the
//! next [`ChainSim::mint_block`], at which point the original branch is
//! extended and wins again as the longer chain. Everything about a block
//! (hash, events, timestamp) is a pure function of the simulator seed and the
//! operation sequence.

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::RwLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::types::{BlockHash, ChainId, EndpointId, EventKey, Payload, RecordKey, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChainParams {
    pub chain_id: ChainId,
    /// Upper bound on blocks scanned by one job.
    pub max_batch: u64,
    /// Trailing blocks never read, so that a reorg of at most this depth
    /// cannot touch anything already synced.
    pub confirmation_depth: u64,
    pub sporked: bool,
}

impl ChainParams {
    pub fn new(chain_id: impl Into<ChainId>, max_batch: u64, confirmation_depth: u64) -> Self {
        Self {
            chain_id: chain_id.into(),
            max_batch,
            confirmation_depth,
            sporked: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SporkEntry {
    pub start: u64,
    /// Inclusive end; `None` for the live (last) spork.
    pub end: Option<u64>,
    pub endpoint: EndpointId,
}

impl SporkEntry {
    pub fn contains(&self, height: u64) -> bool {
        height >= self.start && self.end.is_none_or(|end| height <= end)
    }
}

/// Contiguous, ascending spork segments; the last one is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct SporkTable {
    entries: Vec<SporkEntry>,
}

impl<'de> Deserialize<'de> for SporkTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = Vec::<SporkEntry>::deserialize(d)?;
        SporkTable::new(entries).map_err(serde::de::Error::custom)
    }
}

impl SporkTable {
    pub fn new(entries: Vec<SporkEntry>) -> Result<Self, SimError> {
        let invalid = |msg: String| Err(SimError::InvalidSporkTable(msg));
        let Some(last) = entries.last() else {
            return invalid("spork table is empty".into());
        };
        if last.end.is_some() {
            return invalid("last spork must be open-ended".into());
        }
        let mut endpoints = BTreeSet::new();
        for (i, pair) in entries.windows(2).enumerate() {
            let Some(end) = pair[0].end else {
                return invalid(format!("spork {i} is open-ended but not last"));
            };
            if end < pair[0].start {
                return invalid(format!("spork {i} ends before it starts"));
            }
            if pair[1].start != end + 1 {
                return invalid(format!("spork {} does not start right after spork {i}", i + 1));
            }
        }
        for entry in &entries {
            if !endpoints.insert(entry.endpoint.clone()) {
                return invalid(format!("endpoint {} serves two sporks", entry.endpoint));
            }
        }
        Ok(Self { entries })
    }

    /// Builds a table from ascending `(start, endpoint)` pairs.
    pub fn from_starts<I, E>(starts: I) -> Result<Self, SimError>
    where
        I: IntoIterator<Item = (u64, E)>,
        E: Into<EndpointId>,
    {
        let starts: Vec<(u64, EndpointId)> = starts.into_iter().map(|(s, e)| (s, e.into())).collect();
        let mut entries = Vec::with_capacity(starts.len());
        for (i, (start, endpoint)) in starts.iter().enumerate() {
            let end = match starts.get(i + 1) {
                Some((next, _)) if *next == 0 || *next <= *start => {
                    return Err(SimError::InvalidSporkTable("spork starts must ascend".into()))
                }
                Some((next, _)) => Some(next - 1),
                None => None,
            };
            entries.push(SporkEntry {
                start: *start,
                end,
                endpoint: endpoint.clone(),
            });
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[SporkEntry] {
        &self.entries
    }

    pub fn entry_for(&self, endpoint: &EndpointId) -> Option<&SporkEntry> {
        self.entries.iter().find(|e| &e.endpoint == endpoint)
    }

    pub fn first_height(&self) -> u64 {
        self.entries[0].start
    }
}

/// Static description of a simulated chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChainSpec {
    pub params: ChainParams,
    /// Endpoint serving a non-sporked chain.
    pub endpoint: EndpointId,
    pub sporks: Option<SporkTable>,
    /// Timestamp of block 0, in seconds.
    pub genesis_time: u64,
    /// Seconds between consecutive blocks.
    pub block_time: u64,
}

impl ChainSpec {
    /// An Ethereum-like chain with a single archive endpoint.
    pub fn linear(params: ChainParams) -> Self {
        let endpoint = EndpointId::new(format!("{}-archive", params.chain_id));
        Self {
            params: ChainParams {
                sporked: false,
                ..params
            },
            endpoint,
            sporks: None,
            genesis_time: 1_600_000_000,
            block_time: 12,
        }
    }

    /// A Flow-like chain segmented into sporks.
    pub fn sporked(params: ChainParams, sporks: SporkTable) -> Self {
        let endpoint = sporks.entries().last().map(|e| e.endpoint.clone()).unwrap_or_default();
        Self {
            params: ChainParams {
                sporked: true,
                ..params
            },
            endpoint,
            sporks: Some(sporks),
            genesis_time: 1_600_000_000,
            block_time: 1,
        }
    }

    pub fn chain_id(&self) -> &ChainId {
        &self.params.chain_id
    }

    pub fn endpoints(&self) -> Vec<EndpointId> {
        match &self.sporks {
            Some(table) => table.entries().iter().map(|e| e.endpoint.clone()).collect(),
            None => vec![self.endpoint.clone()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BlockHeader {
    pub height: u64,
    pub block_hash: BlockHash,
    pub parent_hash: BlockHash,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChainEvent {
    pub chain_id: ChainId,
    pub block_height: u64,
    pub block_hash: BlockHash,
    pub block_timestamp: u64,
    pub tx_index: u32,
    pub log_index: u32,
    pub contract_address: String,
    pub event_signature: String,
    pub payload: Payload,
}

impl ChainEvent {
    pub fn key(&self) -> EventKey {
        EventKey::new(self.contract_address.clone(), self.event_signature.clone())
    }

    pub fn record_key(&self) -> RecordKey {
        RecordKey {
            chain_id: self.chain_id.clone(),
            block_height: self.block_height,
            tx_index: self.tx_index,
            log_index: self.log_index,
        }
    }

    pub fn matches(&self, key: &EventKey) -> bool {
        self.contract_address == key.contract_address && self.event_signature == key.event_signature
    }
}

/// Event to be emitted by a minted block. Positions default to
/// `tx_index = position in the list`, `log_index = 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EventSpec {
    pub contract_address: String,
    pub event_signature: String,
    #[serde(default)]
    pub payload: Payload,
    #[serde(default)]
    pub tx_index: Option<u32>,
    #[serde(default)]
    pub log_index: Option<u32>,
}

impl EventSpec {
    pub fn new(contract_address: impl Into<String>, event_signature: impl Into<String>, payload: Payload) -> Self {
        Self {
            contract_address: contract_address.into(),
            event_signature: event_signature.into(),
            payload,
            tx_index: None,
            log_index: None,
        }
    }

    pub fn at(mut self, tx_index: u32, log_index: u32) -> Self {
        self.tx_index = Some(tx_index);
        self.log_index = Some(log_index);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChainHead {
    pub chain_id: ChainId,
    pub latest_height: u64,
    pub block_hash: BlockHash,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("unknown chain {0}")]
    UnknownChain(ChainId),
    #[error("chain {0} already defined")]
    DuplicateChain(ChainId),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(EndpointId),
    #[error("endpoint {0} is unavailable")]
    EndpointUnavailable(EndpointId),
    #[error("chain {0} has no blocks yet")]
    EmptyChain(ChainId),
    #[error("invalid block range [{from}, {to}]")]
    InvalidRange { from: u64, to: u64 },
    #[error("height {to} is beyond head {head}")]
    BeyondHead { to: u64, head: u64 },
    #[error("reorg depth {depth} is invalid for a chain of {len} blocks")]
    InvalidDepth { depth: u64, len: u64 },
    #[error("chain {0} is sporked and cannot reorg")]
    ReorgOnSporkedChain(ChainId),
    #[error(
        "endpoint {endpoint} serves [{served_from}, {}] but [{from}, {to}] was requested",
        served_to.map(|h| h.to_string()).unwrap_or_else(|| "open".into())
    )]
    SporkRange {
        endpoint: EndpointId,
        from: u64,
        to: u64,
        served_from: u64,
        served_to: Option<u64>,
    },
    #[error("two events at position tx={tx_index} log={log_index}")]
    DuplicateEventPosition { tx_index: u32, log_index: u32 },
    #[error("invalid spork table: {0}")]
    InvalidSporkTable(String),
}

#[derive(Debug, Clone)]
struct Block {
    header: BlockHeader,
    events: Vec<ChainEvent>,
}

#[derive(Debug, Clone)]
struct Fork {
    /// First height replaced by the uncle branch.
    base: u64,
    blocks: Vec<Block>,
}

#[derive(Debug, Default)]
struct ChainState {
    main: Vec<Block>,
    fork: Option<Fork>,
    reorgs: u64,
}

impl ChainState {
    fn len(&self) -> u64 {
        match &self.fork {
            Some(f) => f.base + f.blocks.len() as u64,
            None => self.main.len() as u64,
        }
    }

    fn block(&self, height: u64) -> Option<&Block> {
        if let Some(fork) = &self.fork {
            if height >= fork.base {
                return fork.blocks.get((height - fork.base) as usize);
            }
        }
        self.main.get(height as usize)
    }

    fn head(&self) -> Option<&Block> {
        self.len().checked_sub(1).and_then(|h| self.block(h))
    }
}

#[derive(Debug)]
struct SimChain {
    spec: ChainSpec,
    state: RwLock<ChainState>,
}

/// A set of simulated chains sharing one seed.
#[derive(Debug)]
pub struct ChainSim {
    seed: u64,
    chains: BTreeMap<ChainId, SimChain>,
    down: RwLock<BTreeSet<EndpointId>>,
}

impl ChainSim {
    pub fn new(seed: u64, specs: impl IntoIterator<Item = ChainSpec>) -> Result<Self, SimError> {
        let mut chains = BTreeMap::new();
        for spec in specs {
            let id = spec.chain_id().clone();
            let chain = SimChain {
                spec,
                state: RwLock::new(ChainState::default()),
            };
            if chains.insert(id.clone(), chain).is_some() {
                return Err(SimError::DuplicateChain(id));
            }
        }
        Ok(Self {
            seed,
            chains,
            down: RwLock::new(BTreeSet::new()),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> impl Iterator<Item = &ChainSpec> {
        self.chains.values().map(|c| &c.spec)
    }

    pub fn spec(&self, chain_id: &ChainId) -> Result<&ChainSpec, SimError> {
        Ok(&self.chain(chain_id)?.spec)
    }

    fn chain(&self, chain_id: &ChainId) -> Result<&SimChain, SimError> {
        self.chains
            .get(chain_id)
            .ok_or_else(|| SimError::UnknownChain(chain_id.clone()))
    }

    /// Appends a block carrying `events` to the canonical chain.
    pub fn mint_block(&self, chain_id: &ChainId, events: Vec<EventSpec>) -> Result<BlockHeader, SimError> {
        let chain = self.chain(chain_id)?;
        let mut state = chain.state.write();
        // A pending uncle branch loses to the extended original branch.
        state.fork = None;
        let height = state.main.len() as u64;
        let parent = state.main.last().map(|b| b.header.block_hash).unwrap_or(BlockHash::ZERO);
        let block = self.build_block(&chain.spec, height, parent, events, 0)?;
        let header = block.header.clone();
        state.main.push(block);
        Ok(header)
    }

    /// Replaces the top `depth` canonical blocks with an uncle branch.
    pub fn reorg(&self, chain_id: &ChainId, depth: u64) -> Result<ChainHead, SimError> {
        let chain = self.chain(chain_id)?;
        if chain.spec.params.sporked {
            return Err(SimError::ReorgOnSporkedChain(chain_id.clone()));
        }
        let mut state = chain.state.write();
        let len = state.len();
        if depth == 0 || depth > len {
            return Err(SimError::InvalidDepth { depth, len });
        }
        state.reorgs += 1;
        let nonce = state.reorgs;
        let base = len - depth;

        let (fork_base, mut blocks) = match state.fork.take() {
            Some(old) if old.base < base => {
                let keep = (base - old.base) as usize;
                (old.base, old.blocks[..keep].to_vec())
            }
            _ => (base, Vec::new()),
        };
        let mut parent = match base.checked_sub(1) {
            Some(h) => state.block(h).map(|b| b.header.block_hash).unwrap_or(BlockHash::ZERO),
            None => BlockHash::ZERO,
        };
        for height in base..len {
            let original = state.block(height).map(|b| b.events.clone()).unwrap_or_default();
            let specs = self.uncle_events(chain_id, height, nonce, &original);
            let block = self.build_block(&chain.spec, height, parent, specs, nonce)?;
            parent = block.header.block_hash;
            blocks.push(block);
        }
        state.fork = Some(Fork { base: fork_base, blocks });
        let head = state.head().expect("reorged chain is non-empty");
        Ok(ChainHead {
            chain_id: chain_id.clone(),
            latest_height: head.header.height,
            block_hash: head.header.block_hash,
        })
    }

    pub fn latest_height(&self, chain_id: &ChainId) -> Result<ChainHead, SimError> {
        let chain = self.chain(chain_id)?;
        let state = chain.state.read();
        let head = state.head().ok_or_else(|| SimError::EmptyChain(chain_id.clone()))?;
        Ok(ChainHead {
            chain_id: chain_id.clone(),
            latest_height: head.header.height,
            block_hash: head.header.block_hash,
        })
    }

    pub fn header(&self, chain_id: &ChainId, height: u64) -> Result<BlockHeader, SimError> {
        let chain = self.chain(chain_id)?;
        let state = chain.state.read();
        let len = state.len();
        state.block(height).map(|b| b.header.clone()).ok_or(match len {
            0 => SimError::EmptyChain(chain_id.clone()),
            n => SimError::BeyondHead { to: height, head: n - 1 },
        })
    }

    /// Events in `[from, to]` served by `endpoint`, ordered by position.
    pub fn get_events(
        &self,
        endpoint: &EndpointId,
        chain_id: &ChainId,
        from: u64,
        to: u64,
        filter: Option<&BTreeSet<EventKey>>,
    ) -> Result<Vec<ChainEvent>, SimError> {
        if from > to {
            return Err(SimError::InvalidRange { from, to });
        }
        let chain = self.chain(chain_id)?;
        match &chain.spec.sporks {
            Some(table) => {
                let entry = table
                    .entry_for(endpoint)
                    .ok_or_else(|| SimError::UnknownEndpoint(endpoint.clone()))?;
                if !(entry.contains(from) && entry.contains(to)) {
                    return Err(SimError::SporkRange {
                        endpoint: endpoint.clone(),
                        from,
                        to,
                        served_from: entry.start,
                        served_to: entry.end,
                    });
                }
            }
            None if endpoint != &chain.spec.endpoint => {
                return Err(SimError::UnknownEndpoint(endpoint.clone()));
            }
            None => {}
        }
        if self.down.read().contains(endpoint) {
            return Err(SimError::EndpointUnavailable(endpoint.clone()));
        }
        self.collect(chain, from, to, filter)
    }

    /// Whole-chain read that bypasses endpoint routing. Used as an oracle
    /// for spork-split fetches and for brute-force completeness checks.
    pub fn scan_canonical(&self, chain_id: &ChainId, from: u64, to: u64) -> Result<Vec<ChainEvent>, SimError> {
        if from > to {
            return Err(SimError::InvalidRange { from, to });
        }
        self.collect(self.chain(chain_id)?, from, to, None)
    }

    fn collect(
        &self,
        chain: &SimChain,
        from: u64,
        to: u64,
        filter: Option<&BTreeSet<EventKey>>,
    ) -> Result<Vec<ChainEvent>, SimError> {
        let state = chain.state.read();
        let len = state.len();
        if len == 0 {
            return Err(SimError::EmptyChain(chain.spec.chain_id().clone()));
        }
        if to >= len {
            return Err(SimError::BeyondHead { to, head: len - 1 });
        }
        let mut out = Vec::new();
        for height in from..=to {
            let block = state.block(height).expect("height below len");
            out.extend(
                block
                    .events
                    .iter()
                    .filter(|e| filter.is_none_or(|f| f.contains(&e.key())))
                    .cloned(),
            );
        }
        Ok(out)
    }

    /// Marks an endpoint as failing (`false`) or healthy (`true`).
    pub fn set_endpoint_available(&self, endpoint: &EndpointId, available: bool) {
        let mut down = self.down.write();
        if available {
            down.remove(endpoint);
        } else {
            down.insert(endpoint.clone());
        }
    }

    fn build_block(
        &self,
        spec: &ChainSpec,
        height: u64,
        parent: BlockHash,
        specs: Vec<EventSpec>,
        nonce: u64,
    ) -> Result<Block, SimError> {
        let mut positioned: Vec<(u32, u32, EventSpec)> = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s.tx_index.unwrap_or(i as u32), s.log_index.unwrap_or(0), s))
            .collect();
        positioned.sort_by_key(|(tx, log, _)| (*tx, *log));
        for pair in positioned.windows(2) {
            if (pair[0].0, pair[0].1) == (pair[1].0, pair[1].1) {
                return Err(SimError::DuplicateEventPosition {
                    tx_index: pair[0].0,
                    log_index: pair[0].1,
                });
            }
        }

        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_be_bytes());
        hasher.update((spec.chain_id().as_str().len() as u64).to_be_bytes());
        hasher.update(spec.chain_id().as_str().as_bytes());
        hasher.update(height.to_be_bytes());
        hasher.update(parent.0);
        hasher.update(nonce.to_be_bytes());
        for (tx, log, s) in &positioned {
            hasher.update(tx.to_be_bytes());
            hasher.update(log.to_be_bytes());
            let encoded = serde_json::to_vec(&(&s.contract_address, &s.event_signature, &s.payload))
                .expect("payload encodes");
            hasher.update((encoded.len() as u64).to_be_bytes());
            hasher.update(&encoded);
        }
        let block_hash = BlockHash(hasher.finalize().into());
        let timestamp = spec.genesis_time + height * spec.block_time;
        let events = positioned
            .into_iter()
            .map(|(tx_index, log_index, s)| ChainEvent {
                chain_id: spec.chain_id().clone(),
                block_height: height,
                block_hash,
                block_timestamp: timestamp,
                tx_index,
                log_index,
                contract_address: s.contract_address,
                event_signature: s.event_signature,
                payload: s.payload,
            })
            .collect();
        Ok(Block {
            header: BlockHeader {
                height,
                block_hash,
                parent_hash: parent,
                timestamp,
            },
            events,
        })
    }

    /// Event set for an uncle block: each original event is either dropped
    /// or re-emitted with perturbed payload values, and an extra perturbed
    /// copy may appear.
    fn uncle_events(&self, chain_id: &ChainId, height: u64, nonce: u64, original: &[ChainEvent]) -> Vec<EventSpec> {
        let mut rng = seeded_rng(self.seed, &[b"uncle", chain_id.as_str().as_bytes(), &height.to_be_bytes(), &nonce.to_be_bytes()]);
        let mut out = Vec::new();
        for event in original {
            if rng.random_bool(0.5) {
                continue;
            }
            out.push(EventSpec::new(
                event.contract_address.clone(),
                event.event_signature.clone(),
                perturb(&event.payload, &mut rng),
            ));
        }
        if let Some(event) = original.first() {
            if rng.random_bool(0.3) {
                out.push(EventSpec::new(
                    event.contract_address.clone(),
                    event.event_signature.clone(),
                    perturb(&event.payload, &mut rng),
                ));
            }
        }
        out
    }
}

fn perturb(payload: &Payload, rng: &mut ChaCha8Rng) -> Payload {
    payload
        .iter()
        .map(|(name, value)| {
            let value = match value {
                Value::Int(i) => Value::Int(i.wrapping_add(rng.random_range(1..1_000_000))),
                Value::Str(s) => Value::Str(format!("{s}~uncle{}", rng.random::<u16>())),
                Value::Bool(b) => Value::Bool(!b),
                Value::Bytes(b) => {
                    let mut b = b.clone();
                    b.push(rng.random());
                    Value::Bytes(b)
                }
            };
            (name.clone(), value)
        })
        .collect()
}

/// RNG derived from a seed and a domain-separating label list.
pub fn seeded_rng(seed: u64, labels: &[&[u8]]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_be_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_be_bytes());
        hasher.update(label);
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}
