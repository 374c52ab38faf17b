use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use blockweb::chains::{root_block, ChainHead};
use blockweb::client::{AppendOutcome, BlockOp};
use blockweb::crypto::Keypair;
use blockweb::net::{Directory, NetClient};
use blockweb::world::chain_label;
use serde_json::Value;

fn blockweb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockweb"))
        .args(args)
        .output()
        .unwrap()
}

fn json_out(args: &[&str]) -> Value {
    let out = blockweb(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn bank_state_persists_between_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("bank.json");
    let state = state.to_str().unwrap();
    let bank = |rest: &[&str]| json_out(&[&["bank", "--state", state], rest].concat());

    assert_eq!(bank(&["open", "alice", "100"])["balance"], 100);
    bank(&["open", "bob", "0"]);
    let t = bank(&["transfer", "alice", "bob", "30", "--memo", "lunch"]);
    assert_eq!(
        (t["from"]["balance"].as_u64(), t["to"]["balance"].as_u64()),
        (Some(70), Some(30))
    );
    assert_eq!(bank(&["balance", "bob"])["balance"], 30);
    let h = bank(&["history", "alice"]);
    assert_eq!(h["history"][0]["to"], "bob");
    assert_eq!(h["history"][0]["memo"], "lunch");
    assert_eq!(h["history"][0]["slot"], 1);

    let before = std::fs::read_to_string(state).unwrap();
    let over = blockweb(&["bank", "--state", state, "transfer", "bob", "alice", "31"]);
    assert!(!over.status.success());
    assert!(String::from_utf8_lossy(&over.stderr).contains("insufficient funds"));
    assert_eq!(std::fs::read_to_string(state).unwrap(), before);
    assert_eq!(bank(&["balance", "alice"])["balance"], 70);
}

#[test]
fn txgraph_analyze_reports_both_timings() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("g.jsonl");
    std::fs::write(
        &input,
        concat!(
            "{\"id\":\"a\",\"inputs\":[\"coin\"],\"outputs\":[[\"x\",4],[\"y\",6]]}\n",
            "{\"id\":\"b\",\"inputs\":[\"x\",\"y\"],\"outputs\":[[\"p\",3],[\"q\",3],[\"r\",4]]}\n",
            "{\"id\":\"c\",\"inputs\":[\"other\"],\"outputs\":[[\"z\",1]]}\n",
        ),
    )
    .unwrap();
    let args = [
        "txgraph-analyze",
        "--input",
        input.to_str().unwrap(),
        "--cost-serialized",
        "3",
        "--cost-parallel",
        "2",
    ];
    let plain = json_out(&args);
    assert_eq!(plain["original"]["txs"], 3);
    assert_eq!(plain["original"]["serialized"], 9.0);
    assert_eq!(plain["original"]["parallel"], 4.0);
    assert!(plain["two_account"].is_null());
    let refactored = json_out(&[&args[..], &["--refactor"]].concat());
    assert!(refactored["two_account"]["txs"].as_u64().unwrap() > 3);
}

#[test]
fn sim_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("race.json");
    let run = blockweb(&[
        "sim",
        "--experiment",
        "bank-race",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    for key in [
        "experiment",
        "seed",
        "config",
        "per_op",
        "throughput_per_s",
        "messages_total",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["experiment"], "bank-race");
    assert_eq!(report["seed"], 4);

    let bad = blockweb(&[
        "sim",
        "--experiment",
        "nope",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!bad.status.success());
}

#[test]
fn timestamp_demo_stamps_every_block() {
    let v = json_out(&["timestamp-demo", "--blocks", "50", "--seed", "3"]);
    assert_eq!(v["client_blocks"], 50);
    assert_eq!(v["blocks_below_threshold"], 0);
    assert!(v["timestamp_blocks"].as_u64().unwrap() >= 5);
}

struct Servers(Vec<Child>);

impl Drop for Servers {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn spawn(kind: &str, name: &str, addr: &str, directory: &Path) -> (Child, Value) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_blockweb"))
        .args([
            kind,
            "--name",
            name,
            "--listen",
            addr,
            "--directory",
            directory.to_str().unwrap(),
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let v: Value = serde_json::from_str(&line).unwrap_or_else(|e| panic!("{name}: {e}: {line:?}"));
    (child, v)
}

#[test]
fn served_processes_grow_a_chain() {
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = (0..4)
        .map(|i| format!("cli-fern{i}"))
        .chain((0..4).map(|i| format!("cli-wilbur{i}")))
        .collect();
    let mut directory = Directory::default();
    for name in &names {
        let addr = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap();
        directory.insert(name, Keypair::from_name(name).id(), addr);
    }
    let path = dir.path().join("directory.json");
    directory.save(&path).unwrap();

    let mut servers = Servers(Vec::new());
    for (i, name) in names.iter().enumerate() {
        let kind = if i < 4 { "serve-fern" } else { "serve-wilbur" };
        let addr = directory
            .addr_of(&Keypair::from_name(name).id())
            .unwrap()
            .to_string();
        let (child, v) = spawn(kind, name, &addr, &path);
        servers.0.push(child);
        assert_eq!(v["name"], name.as_str());
        assert_eq!(v["id"], Keypair::from_name(name).id().to_string());
        assert_eq!(v["listening"], addr);
    }

    let ids = |prefix: &str| {
        names
            .iter()
            .filter(|n| n.contains(prefix))
            .map(|n| Keypair::from_name(n).id())
            .collect::<Vec<_>>()
    };
    let label = chain_label(&ids("fern"), &ids("wilbur"), 3);
    let mut client = NetClient::new(Keypair::from_name("cli-client").id(), directory);
    let timeout = Duration::from_secs(20);
    let AppendOutcome::Appended { reference, .. } = client
        .run(
            BlockOp::mint_root(root_block(label, vec![b"cli".to_vec()])),
            timeout,
        )
        .unwrap()
    else {
        panic!("mint failed");
    };
    let mut head = ChainHead::from_root(reference);
    for i in 0..2u8 {
        let op = BlockOp::append(std::slice::from_ref(&head), vec![vec![i]]).unwrap();
        match client.run(op, timeout).unwrap() {
            AppendOutcome::Appended { reference, .. } => head.advance(reference),
            other => panic!("append {i} failed: {other:?}"),
        }
    }
    assert_eq!(head.slot, 2);
}
