//! Chain adapters and the range fetcher.
//!
//! The fetcher splits a block range along spork boundaries, reads every
//! piece from the endpoint that serves it, merges the pieces back into one
//! ordered stream and decodes the events of interest. A failure on any
//! piece fails the whole request.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain_sim::{ChainEvent, ChainHead, ChainParams, ChainSim, ChainSpec, SimError, SporkTable};
use crate::faults::{FaultInjector, FaultStage};
use crate::registry::EventRegistration;
use crate::types::{BlockHash, ChainId, EndpointId, EventKey, Payload, RecordKey, RegistrationId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdapterError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Other(String),
}

/// Pull-only access to one chain's archive endpoints. Implementations must
/// tolerate concurrent calls.
pub trait ChainAdapter: Send + Sync {
    fn params(&self) -> &ChainParams;
    /// `None` for chains served by a single endpoint.
    fn spork_table(&self) -> Option<&SporkTable>;
    fn default_endpoint(&self) -> &EndpointId;
    fn latest_height(&self) -> Result<ChainHead, AdapterError>;
    fn block_hash(&self, height: u64) -> Result<BlockHash, AdapterError>;
    fn get_events(
        &self,
        endpoint: &EndpointId,
        from: u64,
        to: u64,
        filter: Option<&BTreeSet<EventKey>>,
    ) -> Result<Vec<ChainEvent>, AdapterError>;
}

/// Adapter over one chain of a [`ChainSim`].
#[derive(Debug, Clone)]
pub struct SimAdapter {
    sim: Arc<ChainSim>,
    spec: ChainSpec,
}

impl SimAdapter {
    pub fn new(sim: Arc<ChainSim>, chain_id: &ChainId) -> Result<Self, SimError> {
        let spec = sim.spec(chain_id)?.clone();
        Ok(Self { sim, spec })
    }

    /// One adapter per chain defined in `sim`.
    pub fn all(sim: &Arc<ChainSim>) -> Vec<Arc<dyn ChainAdapter>> {
        sim.specs()
            .map(|spec| {
                Arc::new(SimAdapter {
                    sim: sim.clone(),
                    spec: spec.clone(),
                }) as Arc<dyn ChainAdapter>
            })
            .collect()
    }
}

impl ChainAdapter for SimAdapter {
    fn params(&self) -> &ChainParams {
        &self.spec.params
    }

    fn spork_table(&self) -> Option<&SporkTable> {
        self.spec.sporks.as_ref()
    }

    fn default_endpoint(&self) -> &EndpointId {
        &self.spec.endpoint
    }

    fn latest_height(&self) -> Result<ChainHead, AdapterError> {
        Ok(self.sim.latest_height(self.spec.chain_id())?)
    }

    fn block_hash(&self, height: u64) -> Result<BlockHash, AdapterError> {
        Ok(self.sim.header(self.spec.chain_id(), height)?.block_hash)
    }

    fn get_events(
        &self,
        endpoint: &EndpointId,
        from: u64,
        to: u64,
        filter: Option<&BTreeSet<EventKey>>,
    ) -> Result<Vec<ChainEvent>, AdapterError> {
        Ok(self.sim.get_events(endpoint, self.spec.chain_id(), from, to, filter)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FetchRequest {
    pub chain_id: ChainId,
    pub from_height: u64,
    pub to_height: u64,
    /// Events of interest; everything else in the range is counted and skipped.
    pub eoi_filter: BTreeSet<EventKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecodedEvent {
    pub key: RecordKey,
    pub event_type: RegistrationId,
    pub block_timestamp: u64,
    pub fields: Payload,
}

/// A piece of a split request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subrange {
    pub from: u64,
    pub to: u64,
    pub endpoint: EndpointId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FetchOutcome {
    /// Every event in the range, registered or not.
    pub scanned: u64,
    /// Events in the range matching no event of interest.
    pub skipped: u64,
    pub events: Vec<DecodedEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FetchError {
    #[error("no adapter for chain {0}")]
    UnknownChain(ChainId),
    #[error("invalid range [{from}, {to}]")]
    InvalidRange { from: u64, to: u64 },
    #[error("range [{from}, {to}] starts before spork coverage at {first}")]
    OutsideCoverage { from: u64, to: u64, first: u64 },
    #[error("subrange [{from}, {to}] via {endpoint} failed: {source}")]
    Subrange {
        from: u64,
        to: u64,
        endpoint: EndpointId,
        #[source]
        source: AdapterError,
    },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("event {key} ({contract} {signature}) does not match registration {registration}")]
    SignatureMismatch {
        key: RecordKey,
        contract: String,
        signature: String,
        registration: RegistrationId,
    },
    #[error("event {key} has a malformed payload: {reason}")]
    Malformed { key: RecordKey, reason: String },
}

/// Intersects `[from, to]` with the spork segments, in ascending order.
/// Chains without a spork table get the whole range on `default_endpoint`.
pub fn split_by_sporks(
    from: u64,
    to: u64,
    table: Option<&SporkTable>,
    default_endpoint: &EndpointId,
) -> Result<Vec<Subrange>, FetchError> {
    if from > to {
        return Err(FetchError::InvalidRange { from, to });
    }
    let Some(table) = table else {
        return Ok(vec![Subrange {
            from,
            to,
            endpoint: default_endpoint.clone(),
        }]);
    };
    let first = table.first_height();
    if from < first {
        return Err(FetchError::OutsideCoverage { from, to, first });
    }
    Ok(table
        .entries()
        .iter()
        .filter_map(|entry| {
            let lo = from.max(entry.start);
            let hi = entry.end.map_or(to, |end| to.min(end));
            (lo <= hi).then(|| Subrange {
                from: lo,
                to: hi,
                endpoint: entry.endpoint.clone(),
            })
        })
        .collect())
}

/// Carries a raw event into its decoded form for `registration`.
pub fn decode(raw: &ChainEvent, registration: &EventRegistration) -> Result<DecodedEvent, DecodeError> {
    if raw.chain_id != registration.chain_id
        || raw.contract_address != registration.contract_address
        || raw.event_signature != registration.event_signature
    {
        return Err(DecodeError::SignatureMismatch {
            key: raw.record_key(),
            contract: raw.contract_address.clone(),
            signature: raw.event_signature.clone(),
            registration: registration.registration_id.clone(),
        });
    }
    decode_as(raw, registration.registration_id.clone())
}

fn decode_as(raw: &ChainEvent, event_type: RegistrationId) -> Result<DecodedEvent, DecodeError> {
    let mut seen = BTreeSet::new();
    for (name, _) in &raw.payload {
        if name.is_empty() {
            return Err(DecodeError::Malformed {
                key: raw.record_key(),
                reason: "empty field name".into(),
            });
        }
        if !seen.insert(name.as_str()) {
            return Err(DecodeError::Malformed {
                key: raw.record_key(),
                reason: format!("duplicate field {name}"),
            });
        }
    }
    Ok(DecodedEvent {
        key: raw.record_key(),
        event_type,
        block_timestamp: raw.block_timestamp,
        fields: raw.payload.clone(),
    })
}

#[derive(Clone)]
pub struct Fetcher {
    adapters: BTreeMap<ChainId, Arc<dyn ChainAdapter>>,
    faults: Arc<FaultInjector>,
}

impl std::fmt::Debug for Fetcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fetcher")
            .field("chains", &self.adapters.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Fetcher {
    pub fn new(adapters: impl IntoIterator<Item = Arc<dyn ChainAdapter>>, faults: Arc<FaultInjector>) -> Self {
        Self {
            adapters: adapters
                .into_iter()
                .map(|a| (a.params().chain_id.clone(), a))
                .collect(),
            faults,
        }
    }

    pub fn adapter(&self, chain_id: &ChainId) -> Result<&Arc<dyn ChainAdapter>, FetchError> {
        self.adapters
            .get(chain_id)
            .ok_or_else(|| FetchError::UnknownChain(chain_id.clone()))
    }

    pub fn chains(&self) -> impl Iterator<Item = &ChainId> {
        self.adapters.keys()
    }

    pub fn split(&self, request: &FetchRequest) -> Result<Vec<Subrange>, FetchError> {
        let adapter = self.adapter(&request.chain_id)?;
        split_by_sporks(
            request.from_height,
            request.to_height,
            adapter.spork_table(),
            adapter.default_endpoint(),
        )
    }

    /// Every raw event in the range, merged across sporks.
    pub fn fetch_raw(&self, chain_id: &ChainId, from: u64, to: u64) -> Result<Vec<ChainEvent>, FetchError> {
        let adapter = self.adapter(chain_id)?;
        let pieces = split_by_sporks(from, to, adapter.spork_table(), adapter.default_endpoint())?;
        let fetched: Vec<Vec<ChainEvent>> = pieces
            .par_iter()
            .map(|piece| {
                adapter
                    .get_events(&piece.endpoint, piece.from, piece.to, None)
                    .map_err(|source| FetchError::Subrange {
                        from: piece.from,
                        to: piece.to,
                        endpoint: piece.endpoint.clone(),
                        source,
                    })
            })
            .collect::<Result<_, _>>()?;
        let mut merged: Vec<ChainEvent> = fetched.into_iter().flatten().collect();
        merged.sort_by(|a, b| {
            (a.block_height, a.tx_index, a.log_index).cmp(&(b.block_height, b.tx_index, b.log_index))
        });
        Ok(merged)
    }

    /// Fetches, counts and decodes the events of interest in the range.
    pub fn fetch_range(&self, request: &FetchRequest) -> Result<FetchOutcome, FetchError> {
        let raw = self.fetch_raw(&request.chain_id, request.from_height, request.to_height)?;
        let scanned = raw.len() as u64;
        let mut skipped = 0;
        let mut events = Vec::new();
        for event in &raw {
            let key = event.key();
            if !request.eoi_filter.contains(&key) {
                skipped += 1;
                continue;
            }
            let decoded = decode_as(
                event,
                RegistrationId::derive(&request.chain_id, &key.contract_address, &key.event_signature),
            )?;
            if self.faults.should_drop(FaultStage::Fetch, &decoded.key) {
                continue;
            }
            events.push(decoded);
        }
        Ok(FetchOutcome {
            scanned,
            skipped,
            events,
        })
    }
}
