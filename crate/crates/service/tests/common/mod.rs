#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::Value;

pub fn service_toml(data_dir: &Path, bind: &str) -> String {
    format!(
        r#"
dataDir = "{}"
webhookTimeoutMs = 2000

[api]
bind = "{bind}"

[scheduler]
tickIntervalMs = 40
workerCount = 2

[simulator]
seed = 5

[[chains]]
id = "eth"
maxBatch = 20
confirmationDepth = 2
prefillBlocks = 60
blocksPerTick = 1

[[chains]]
id = "flow"
maxBatch = 50
confirmationDepth = 0
prefillBlocks = 150
blocksPerTick = 1
sporks = [{{ start = 0, endpoint = "candidate-1" }}, {{ start = 50, endpoint = "candidate-2" }}, {{ start = 100, endpoint = "mainnet-1" }}]

[[emitters]]
chain = "eth"
contract = "0xriver-men"
signature = "Minted(uint256,string)"
rate = 1.0
fields = [
    {{ name = "tokenId", kind = "counter", start = 1 }},
    {{ name = "rarity", kind = "choice", choices = ["common", "rare"] }},
]

[[emitters]]
chain = "flow"
contract = "A.0x1.Lands"
signature = "Claimed(UInt64,Address)"
rate = 0.5
fields = [
    {{ name = "landId", kind = "counter", start = 1 }},
    {{ name = "owner", kind = "hex", len = 16 }},
]
"#,
        data_dir.display()
    )
}

pub fn registration_body() -> Value {
    serde_json::json!({
        "chainId": "eth",
        "contractAddress": "0xriver-men",
        "eventSignature": "Minted(uint256,string)",
        "initBlockHeight": 0,
        "mappingSchema": {
            "schemaId": "rivermen-metadata",
            "fields": [
                { "column": "tokenId", "source": "tokenId", "type": "int" },
                { "column": "rarity", "source": "rarity", "type": "str" }
            ]
        }
    })
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(10)))
        .build()
        .into()
}

pub fn get(base: &str, path: &str) -> (u16, Value) {
    let mut resp = agent().get(&format!("{base}{path}")).call().expect("request");
    let status = resp.status().as_u16();
    let body = resp.body_mut().read_to_string().expect("body");
    (status, serde_json::from_str(&body).unwrap_or(Value::String(body)))
}

pub fn post(base: &str, path: &str, body: &Value) -> (u16, Value) {
    post_raw(base, path, serde_json::to_vec(body).expect("serializes"))
}

pub fn post_raw(base: &str, path: &str, body: Vec<u8>) -> (u16, Value) {
    let mut resp = agent()
        .post(&format!("{base}{path}"))
        .header("content-type", "application/json")
        .send(body)
        .expect("request");
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().expect("body");
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

/// Polls `probe` until it returns `Some`, for at most `secs` seconds.
pub fn wait_for<T>(secs: u64, mut probe: impl FnMut() -> Option<T>) -> T {
    let deadline = Instant::now() + Duration::from_secs(secs);
    loop {
        if let Some(v) = probe() {
            return v;
        }
        assert!(Instant::now() < deadline, "condition not reached within {secs}s");
        std::thread::sleep(Duration::from_millis(25));
    }
}
