use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blockweb::bank::{Bank, BankError};
use blockweb::crypto::Keypair;
use blockweb::fern::Fern;
use blockweb::harness::{reference_config, run_experiment, run_timestamping};
use blockweb::net::{serve, Directory};
use blockweb::service::Service;
use blockweb::timestamp::{DEFAULT_BATCH, DEFAULT_THRESHOLD};
use blockweb::wilbur::{DirStore, Wilbur};
use blockweb_txgraph::{compare, load_graph};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "blockweb",
    version,
    about = "Block DAG servers, demos and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an availability server over TCP.
    ServeWilbur {
        #[command(flatten)]
        server: ServerArgs,
        /// Persist blocks in this directory instead of memory.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run an integrity server over TCP.
    ServeFern {
        #[command(flatten)]
        server: ServerArgs,
    },
    /// Timestamp a batch of client blocks in the simulator.
    TimestampDemo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        servers: usize,
        #[arg(long, default_value_t = DEFAULT_BATCH)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        blocks: usize,
    },
    /// Accounts kept as chains, replayed in the simulator from a state file.
    Bank {
        /// Log of operations applied so far; created on first use.
        #[arg(long, default_value = "bank.json")]
        state: PathBuf,
        #[command(subcommand)]
        op: BankCommand,
    },
    /// Critical-path timing of a transaction graph.
    TxgraphAnalyze {
        /// One JSON transaction per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        cost_serialized: f64,
        #[arg(long)]
        cost_parallel: f64,
        /// Also time the graph rewritten into two-account transfers.
        #[arg(long)]
        refactor: bool,
    },
    /// Run a named experiment and write its JSON report.
    Sim {
        #[arg(long)]
        experiment: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ServerArgs {
    /// Server name; its demo key is derived from it.
    #[arg(long)]
    name: String,
    #[arg(long)]
    listen: String,
    /// JSON directory mapping server names to ids and addresses.
    #[arg(long)]
    directory: PathBuf,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
enum BankCommand {
    /// Open an account with an initial balance.
    Open { owner: String, amount: u64 },
    /// Move funds between two accounts.
    Transfer {
        from: String,
        to: String,
        amount: u64,
        #[arg(long, default_value = "")]
        #[serde(default)]
        memo: String,
    },
    /// Print an account's verified balance.
    Balance { owner: String },
    /// Print an account's transfers in slot order.
    History { owner: String },
}

#[derive(Serialize, Deserialize)]
struct BankState {
    seed: u64,
    ops: Vec<BankCommand>,
}

type CliResult = Result<(), String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ServeWilbur { server, store } => {
            let key = Keypair::from_name(&server.name);
            let wilbur = match store {
                Some(dir) => DirStore::open(&dir)
                    .map(|s| Wilbur::new(key.clone(), Box::new(s)))
                    .map_err(|e| format!("{}: {e}", dir.display())),
                None => Ok(Wilbur::in_memory(key.clone())),
            };
            wilbur.and_then(|w| run_server(w, &key, &server))
        }
        Command::ServeFern { server } => {
            let key = Keypair::from_name(&server.name);
            run_server(Fern::new(key.clone()), &key, &server)
        }
        Command::TimestampDemo {
            seed,
            servers,
            batch,
            blocks,
        } => timestamp_demo(seed, servers, batch, blocks),
        Command::Bank { state, op } => bank(&state, op),
        Command::TxgraphAnalyze {
            input,
            cost_serialized,
            cost_parallel,
            refactor,
        } => txgraph_analyze(&input, cost_serialized, cost_parallel, refactor),
        Command::Sim {
            experiment,
            seed,
            out,
        } => sim(&experiment, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn emit(v: &Value) {
    println!("{v}");
}

fn run_server<S: Service + Send + 'static>(
    service: S,
    key: &Keypair,
    args: &ServerArgs,
) -> CliResult {
    let directory = Directory::load(&args.directory)
        .map_err(|e| format!("{}: {e}", args.directory.display()))?;
    if let Some(listed) = directory.id_of(&args.name) {
        if listed != key.id() {
            return Err(format!("directory lists a different id for {}", args.name));
        }
    }
    let listener = TcpListener::bind(&args.listen).map_err(|e| format!("{}: {e}", args.listen))?;
    let handle = serve(service, key.id(), listener, directory).map_err(|e| e.to_string())?;
    emit(
        &json!({"name": args.name, "id": key.id().to_string(), "listening": handle.addr.to_string()}),
    );
    eprintln!("{} serving on {}", args.name, handle.addr);
    handle.join();
    Ok(())
}

fn timestamp_demo(seed: u64, servers: usize, batch: usize, blocks: usize) -> CliResult {
    if servers < DEFAULT_THRESHOLD || batch == 0 || blocks == 0 {
        return Err(format!(
            "need at least {DEFAULT_THRESHOLD} servers, a positive batch and some blocks"
        ));
    }
    let run = run_timestamping(reference_config(seed), servers, batch, blocks, 16);
    let stamps = run.stamps();
    let under = run.under_threshold(DEFAULT_THRESHOLD);
    let per_s = blocks as f64 * 1e6 / run.elapsed_us.max(1) as f64;
    emit(&json!({
        "seed": seed,
        "servers": servers,
        "batch": batch,
        "client_blocks": blocks,
        "timestamp_blocks": stamps.len(),
        "threshold": DEFAULT_THRESHOLD,
        "blocks_below_threshold": under,
        "elapsed_ms": run.elapsed_us as f64 / 1e3,
        "throughput_per_s": per_s,
        "messages_total": run.sim.metrics().messages_total,
    }));
    eprintln!(
        "{blocks} blocks, {} timestamps, {under} below {DEFAULT_THRESHOLD} servers, {per_s:.0} blocks/s",
        stamps.len()
    );
    Ok(())
}

fn apply(bank: &mut Bank, op: &BankCommand) -> Result<Value, BankError> {
    Ok(match op {
        BankCommand::Open { owner, amount } => {
            let id = bank.open_account(owner, *amount)?;
            json!({"owner": owner, "account": id.to_string(), "balance": amount})
        }
        BankCommand::Transfer {
            from,
            to,
            amount,
            memo,
        } => {
            let (a, b) = (bank.by_owner(from)?, bank.by_owner(to)?);
            let block = bank.transfer(a, b, *amount, memo.as_bytes())?;
            json!({
                "block": block.root().to_string(),
                "from": {"owner": from, "balance": bank.balance(&a)?},
                "to": {"owner": to, "balance": bank.balance(&b)?},
            })
        }
        BankCommand::Balance { owner } => {
            let id = bank.by_owner(owner)?;
            json!({"owner": owner, "account": id.to_string(), "balance": bank.balance(&id)?})
        }
        BankCommand::History { owner } => {
            let id = bank.by_owner(owner)?;
            let owner_of = |h| {
                bank.accounts()
                    .find(|(id, _)| **id == h)
                    .map(|(_, a)| a.owner.clone())
                    .unwrap_or_else(|| h.to_string())
            };
            let entries: Vec<Value> = bank
                .history(&id)?
                .into_iter()
                .map(|(slot, t)| {
                    json!({
                        "slot": slot,
                        "from": owner_of(t.from),
                        "to": owner_of(t.to),
                        "amount": t.amount,
                        "memo": String::from_utf8_lossy(&t.memo),
                    })
                })
                .collect();
            json!({"owner": owner, "history": entries})
        }
    })
}

fn bank(path: &Path, op: BankCommand) -> CliResult {
    let mut state = match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BankState {
            seed: 1,
            ops: Vec::new(),
        },
        Err(e) => return Err(format!("{}: {e}", path.display())),
    };
    let mut bank = Bank::new(reference_config(state.seed)).map_err(|e| e.to_string())?;
    for (i, past) in state.ops.iter().enumerate() {
        apply(&mut bank, past).map_err(|e| format!("replaying operation {i}: {e}"))?;
    }
    let out = apply(&mut bank, &op).map_err(|e| e.to_string())?;
    if matches!(op, BankCommand::Open { .. } | BankCommand::Transfer { .. }) {
        state.ops.push(op);
        let text = serde_json::to_string_pretty(&state).map_err(|e| e.to_string())?;
        fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    emit(&out);
    Ok(())
}

fn txgraph_analyze(input: &Path, serialized: f64, parallel: f64, refactor: bool) -> CliResult {
    let g = load_graph(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let report = compare(&g, serialized, parallel, refactor).map_err(|e| e.to_string())?;
    emit(&serde_json::to_value(&report).map_err(|e| e.to_string())?);
    eprintln!(
        "{} transactions, speedup {:.2}{}",
        report.original.txs,
        report.original.speedup,
        report
            .two_account
            .as_ref()
            .map(|t| format!(", {:.2} after refactoring", t.speedup))
            .unwrap_or_default()
    );
    Ok(())
}

fn sim(experiment: &str, seed: u64, out: &Path) -> CliResult {
    let report = run_experiment(experiment, seed).map_err(|e| e.to_string())?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
    fs::write(out, text + "\n").map_err(|e| format!("{}: {e}", out.display()))?;
    eprintln!(
        "{experiment} seed {seed}: {:.2}/s, {} messages, report in {}",
        report.throughput_per_s,
        report.messages_total,
        out.display()
    );
    Ok(())
}
