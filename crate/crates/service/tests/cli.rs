mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};

use common::{get, post, registration_body, service_toml, wait_for};

fn syncer() -> Command {
    Command::new(env!("CARGO_BIN_EXE_syncer"))
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = service_toml(dir.path(), "127.0.0.1:0").replace("workerCount = 2", "workerCount = 0");
    std::fs::write(&path, text).unwrap();
    let out = syncer().args(["serve", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("scheduler.workerCount"), "{stderr}");

    let good = dir.path().join("good.toml");
    std::fs::write(&good, service_toml(dir.path(), "127.0.0.1:0")).unwrap();
    let out = syncer()
        .args(["serve", "--worker-count", "0", "--config"])
        .arg(&good)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scheduler.workerCount"));

    std::fs::write(&path, "dataDir = 3").unwrap();
    let out = syncer().args(["serve", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bundled_scenarios_pass() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut ran = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let out = syncer().arg("scenario").arg(&path).output().unwrap();
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(out.status.success(), "{}:\n{stdout}", path.display());
        assert!(stdout.contains("PASSED"), "{stdout}");
        ran += 1;
    }
    assert!(ran >= 3);
}

#[test]
fn failing_assertion_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    std::fs::write(
        &path,
        r#"
name = "short"
seed = 1
ticks = 3

[[chains]]
id = "eth"
maxBatch = 10
confirmationDepth = 1
prefillBlocks = 10
blocksPerTick = 1

[[emitters]]
chain = "eth"
contract = "0xa"
signature = "Ping(uint256)"
rate = 1.0
fields = [{ name = "n", kind = "counter", start = 0 }]

[[script]]
action = "register"
at = 0
name = "ping"
chain = "eth"
contract = "0xa"
signature = "Ping(uint256)"
schema = { schemaId = "ping", fields = [{ column = "n", source = "n", type = "int" }] }

[[assert]]
check = "store_count"
registration = "ping"
equals = 1000000

[[assert]]
check = "store_matches_chain"
"#,
    )
    .unwrap();
    let out = syncer().arg("scenario").arg(&path).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(1), "{stdout}");
    assert!(stdout.contains("FAIL store_count"), "{stdout}");
    assert!(stdout.contains("PASS store_matches_chain"), "{stdout}");

    std::fs::write(&path, "name = 1").unwrap();
    let out = syncer().arg("scenario").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fetch_splits_across_sporks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, service_toml(dir.path(), "127.0.0.1:0")).unwrap();
    let out = syncer()
        .args(["fetch", "--chain", "flow", "--from", "30", "--to", "120", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    for piece in ["[30, 49] via candidate-1", "[50, 99] via candidate-2", "[100, 120] via mainnet-1"] {
        assert!(stderr.contains(piece), "{stderr}");
    }
    let events: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!events.is_empty());
    assert!(events.iter().all(|e| (30..=120).contains(&e["blockHeight"].as_u64().unwrap())));
}

struct Served {
    child: Child,
    base: String,
}

fn serve(config: &Path) -> Served {
    let mut child = syncer()
        .args(["serve", "--config"])
        .arg(config)
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let mut lines = BufReader::new(stderr).lines();
    let base = loop {
        let line = lines.next().expect("serve exited before listening").unwrap();
        if let Some(addr) = line.strip_prefix("listening on ") {
            break addr.trim().to_string();
        }
    };
    // Keep draining so the child never blocks on a full pipe.
    std::thread::spawn(move || for _ in lines {});
    Served { child, base }
}

#[test]
fn serve_recovers_cursors_after_kill() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, service_toml(&dir.path().join("data"), "127.0.0.1:0")).unwrap();

    let mut first = serve(&path);
    let (status, reg) = post(&first.base, "/v1/registrations", &registration_body());
    assert_eq!(status, 201, "{reg}");
    let id = reg["registrationId"].as_str().unwrap().to_string();
    let start = reg["syncedLatestBlockHeight"].as_u64().unwrap();
    let seen = wait_for(20, || {
        let (_, r) = get(&first.base, &format!("/v1/registrations/{id}"));
        let latest = r["syncedLatestBlockHeight"].as_u64().unwrap();
        (latest >= start + 5 && r["backfillComplete"] == true).then_some(latest)
    });
    let (_, health) = get(&first.base, "/health");
    let stored = health["storeRecords"].as_u64().unwrap();
    first.child.kill().unwrap();
    first.child.wait().unwrap();

    let mut second = serve(&path);
    let (status, r) = get(&second.base, &format!("/v1/registrations/{id}"));
    assert_eq!(status, 200);
    assert!(r["syncedLatestBlockHeight"].as_u64().unwrap() >= seen);
    assert_eq!(r["syncedStartBlockHeight"], 0);
    let (_, health) = get(&second.base, "/health");
    assert!(health["storeRecords"].as_u64().unwrap() >= stored);
    wait_for(20, || {
        let (_, r) = get(&second.base, &format!("/v1/registrations/{id}"));
        (r["syncedLatestBlockHeight"].as_u64().unwrap() > seen + 3).then_some(())
    });
    let (_, failed) = get(&second.base, "/v1/checksums?failed=true");
    assert_eq!(failed.as_array().unwrap().len(), 0);
    let (status, page) = post(
        &second.base,
        "/v1/query",
        &serde_json::json!({ "sort": [{ "column": "tokenId" }], "page": { "limit": 100000 } }),
    );
    assert_eq!(status, 200);
    let ids: Vec<i64> = page["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["columns"]["tokenId"].as_i64().unwrap())
        .collect();
    let expected: Vec<i64> = (1..=ids.len() as i64).collect();
    assert_eq!(ids, expected, "records are missing or duplicated after the restart");

    unsafe {
        libc::kill(second.child.id() as i32, libc::SIGTERM);
    }
    let status = second.child.wait().unwrap();
    assert!(status.success(), "graceful shutdown failed: {status}");
}
