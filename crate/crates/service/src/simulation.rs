//! Chain definitions and the block producer that drives the simulator,
//! shared by `serve` and the scenario runner.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use syncer_core::chain_sim::{seeded_rng, ChainParams, ChainSim, ChainSpec, EventSpec, SimError, SporkTable};
use syncer_core::types::{ChainId, EndpointId, Payload, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SporkDef {
    pub start: u64,
    pub endpoint: EndpointId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ChainDef {
    pub id: ChainId,
    pub max_batch: u64,
    pub confirmation_depth: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sporks: Option<Vec<SporkDef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_time: Option<u64>,
    /// Blocks minted before the first tick.
    #[serde(default)]
    pub prefill_blocks: u64,
    #[serde(default)]
    pub blocks_per_tick: u64,
    /// When positive, every tick ends with a reorg of random depth in
    /// `1..=reorg_max_depth`.
    #[serde(default)]
    pub reorg_max_depth: u64,
}

impl ChainDef {
    pub fn params(&self) -> ChainParams {
        ChainParams::new(self.id.clone(), self.max_batch, self.confirmation_depth)
    }

    pub fn spec(&self) -> Result<ChainSpec, SimError> {
        let mut spec = match &self.sporks {
            Some(sporks) => ChainSpec::sporked(
                self.params(),
                SporkTable::from_starts(sporks.iter().map(|s| (s.start, s.endpoint.clone())))?,
            ),
            None => ChainSpec::linear(self.params()),
        };
        if let Some(t) = self.block_time {
            spec.block_time = t;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FieldGen {
    Int { min: i64, max: i64 },
    /// Increments per emitted event, starting at `start`.
    Counter { start: i64 },
    Choice { choices: Vec<String> },
    Hex { len: usize },
    Bool,
    Bytes { len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FieldDef {
    pub name: String,
    #[serde(flatten)]
    pub gen: FieldGen,
}

/// Random source of events of one kind on one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EmitterDef {
    pub chain: ChainId,
    pub contract: String,
    pub signature: String,
    /// Mean events per block; the fractional part is a probability.
    pub rate: f64,
    pub fields: Vec<FieldDef>,
}

/// Deterministic block producer: equal seeds and call sequences yield
/// equal chains, so a restarted run can rebuild the chain it crashed on.
#[derive(Debug)]
pub struct Producer {
    sim: Arc<ChainSim>,
    seed: u64,
    chains: Vec<ChainDef>,
    emitters: Vec<EmitterDef>,
    counters: Vec<i64>,
    tick: u64,
}

impl Producer {
    pub fn new(seed: u64, chains: Vec<ChainDef>, emitters: Vec<EmitterDef>) -> Result<Self, SimError> {
        let specs = chains.iter().map(ChainDef::spec).collect::<Result<Vec<_>, _>>()?;
        let sim = Arc::new(ChainSim::new(seed, specs)?);
        let counters = emitters
            .iter()
            .map(|e| {
                e.fields
                    .iter()
                    .find_map(|f| match f.gen {
                        FieldGen::Counter { start } => Some(start),
                        _ => None,
                    })
                    .unwrap_or(0)
            })
            .collect();
        Ok(Self {
            sim,
            seed,
            chains,
            emitters,
            counters,
            tick: 0,
        })
    }

    pub fn sim(&self) -> &Arc<ChainSim> {
        &self.sim
    }

    pub fn chains(&self) -> &[ChainDef] {
        &self.chains
    }

    pub fn prefill(&mut self) -> Result<(), SimError> {
        for i in 0..self.chains.len() {
            let chain = self.chains[i].id.clone();
            self.mint(&chain, self.chains[i].prefill_blocks, Vec::new())?;
        }
        Ok(())
    }

    /// Mints the per-tick blocks and applies per-tick reorgs.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.tick += 1;
        for i in 0..self.chains.len() {
            let def = self.chains[i].clone();
            self.mint(&def.id, def.blocks_per_tick, Vec::new())?;
            if def.reorg_max_depth > 0 {
                let head = self.sim.latest_height(&def.id)?.latest_height;
                let mut rng = seeded_rng(self.seed, &[b"reorg", def.id.as_str().as_bytes(), &self.tick.to_be_bytes()]);
                let depth = rng.random_range(1..=def.reorg_max_depth).min(head + 1);
                self.sim.reorg(&def.id, depth)?;
            }
        }
        Ok(())
    }

    /// Mints `blocks` blocks of random emitter events; `extra` lands in the first.
    pub fn mint(&mut self, chain: &ChainId, blocks: u64, mut extra: Vec<EventSpec>) -> Result<(), SimError> {
        for _ in 0..blocks {
            let height = self.sim.latest_height(chain).map(|h| h.latest_height + 1).unwrap_or(0);
            let mut events = std::mem::take(&mut extra);
            events.extend(self.random_events(chain, height));
            self.sim.mint_block(chain, events)?;
        }
        if !extra.is_empty() {
            self.sim.mint_block(chain, extra)?;
        }
        Ok(())
    }

    fn random_events(&mut self, chain: &ChainId, height: u64) -> Vec<EventSpec> {
        let mut out = Vec::new();
        for (i, emitter) in self.emitters.iter().enumerate() {
            if &emitter.chain != chain {
                continue;
            }
            let mut rng = seeded_rng(
                self.seed,
                &[b"emit", chain.as_str().as_bytes(), &(i as u64).to_be_bytes(), &height.to_be_bytes()],
            );
            let whole = emitter.rate.max(0.0).floor();
            let n = whole as u64 + u64::from(rng.random_bool((emitter.rate - whole).clamp(0.0, 1.0)));
            for _ in 0..n {
                let mut payload: Payload = Vec::with_capacity(emitter.fields.len());
                for f in &emitter.fields {
                    let value = match &f.gen {
                        FieldGen::Int { min, max } => Value::Int(rng.random_range(*min..=(*max).max(*min))),
                        FieldGen::Counter { .. } => {
                            let v = self.counters[i];
                            self.counters[i] += 1;
                            Value::Int(v)
                        }
                        FieldGen::Choice { choices } if !choices.is_empty() => {
                            Value::Str(choices[rng.random_range(0..choices.len())].clone())
                        }
                        FieldGen::Choice { .. } => Value::Str(String::new()),
                        FieldGen::Hex { len } => {
                            let bytes: Vec<u8> = (0..len.div_ceil(2)).map(|_| rng.random()).collect();
                            let mut s = String::from("0x");
                            s.push_str(&hex_string(&bytes)[..*len]);
                            Value::Str(s)
                        }
                        FieldGen::Bool => Value::Bool(rng.random()),
                        FieldGen::Bytes { len } => Value::Bytes((0..*len).map(|_| rng.random()).collect()),
                    };
                    payload.push((f.name.clone(), value));
                }
                out.push(EventSpec::new(emitter.contract.clone(), emitter.signature.clone(), payload));
            }
        }
        out
    }

    pub fn heads(&self) -> BTreeMap<ChainId, u64> {
        self.chains
            .iter()
            .filter_map(|c| self.sim.latest_height(&c.id).ok().map(|h| (c.id.clone(), h.latest_height)))
            .collect()
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defs() -> (Vec<ChainDef>, Vec<EmitterDef>) {
        let chain = ChainDef {
            id: "eth".into(),
            max_batch: 10,
            confirmation_depth: 2,
            sporks: None,
            block_time: None,
            prefill_blocks: 20,
            blocks_per_tick: 2,
            reorg_max_depth: 2,
        };
        let emitter = EmitterDef {
            chain: "eth".into(),
            contract: "0xa".into(),
            signature: "Transfer(address,address,uint256)".into(),
            rate: 1.5,
            fields: vec![
                FieldDef {
                    name: "tokenId".into(),
                    gen: FieldGen::Counter { start: 1 },
                },
                FieldDef {
                    name: "from".into(),
                    gen: FieldGen::Hex { len: 8 },
                },
            ],
        };
        (vec![chain], vec![emitter])
    }

    #[test]
    fn producer_is_deterministic() {
        let run = || {
            let (c, e) = defs();
            let mut p = Producer::new(9, c, e).unwrap();
            p.prefill().unwrap();
            for _ in 0..5 {
                p.step().unwrap();
            }
            let head = p.sim().latest_height(&"eth".into()).unwrap();
            let events = p.sim().scan_canonical(&"eth".into(), 0, head.latest_height).unwrap();
            (head, events)
        };
        let (h1, e1) = run();
        let (h2, e2) = run();
        assert_eq!(h1, h2);
        assert_eq!(e1, e2);
        assert_eq!(h1.latest_height, 29);
        assert!(e1.len() > 20);
        let ids: Vec<_> = e1.iter().map(|e| e.payload[0].1.clone()).collect();
        assert_eq!(ids[0], Value::Int(1));
    }

    #[test]
    fn chain_def_parses_from_toml() {
        let def: ChainDef = toml::from_str(
            r#"
            id = "flow"
            maxBatch = 50
            confirmationDepth = 0
            sporks = [{ start = 0, endpoint = "s1" }, { start = 100, endpoint = "s2" }]
            "#,
        )
        .unwrap();
        let spec = def.spec().unwrap();
        assert!(spec.params.sporked);
        assert_eq!(spec.endpoints().len(), 2);
    }
}
