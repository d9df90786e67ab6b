use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use claimsnet::audit_log;
use claimsnet::claims::ClaimSet;
use claimsnet::sim::{run_scenario, scenarios, RunReport, ScenarioConfig};
use claimsnet::{KeyDirectory, SignedEnvelope};

#[derive(Parser)]
#[command(name = "claimsnet", version, about = "Run and inspect claims network simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write every artefact under --out.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the seed recorded in the scenario.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an audit log's hash chain and signatures. Exits 1 on failure.
    VerifyLog {
        file: PathBuf,
        /// Key directory; defaults to keys.json beside the log or one level up.
        #[arg(long)]
        keys: Option<PathBuf>,
    },
    /// Pretty-print a claim set and re-verify its signature.
    InspectClaim {
        file: PathBuf,
        #[arg(long)]
        keys: Option<PathBuf>,
    },
    /// Print the per-transfer compliance report of a finished run.
    Report {
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a built-in scenario document to stdout.
    GenScenario {
        #[arg(value_enum)]
        kind: Builtin,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Number of transfers in the fuzz scenario.
        #[arg(long, default_value_t = 12)]
        transfers: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Builtin {
    Baseline,
    Fuzz,
    DropReceipts,
    DelayClaims,
    DuplicateDelivery,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { scenario, seed, out } => {
            let bytes = fs::read(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let mut config = ScenarioConfig::from_json(&bytes)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let output = run_scenario(&config)?;
            output
                .write_to(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            let report = output.report();
            println!(
                "{}: seed {}, {} messages, {} transfer records {:?}, written to {}",
                report.scenario,
                report.seed,
                report.messages,
                report.transfers.len(),
                report.final_states,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyLog { file, keys } => {
            let keys = load_keys(&file, keys.as_deref())?;
            let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            if audit_log::verify_ndjson(&bytes, &keys) {
                println!("ok: {}", file.display());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAILED: {}", file.display());
                Ok(ExitCode::FAILURE)
            }
        }
        Command::InspectClaim { file, keys } => {
            let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let envelope: SignedEnvelope = serde_json::from_slice(&bytes).context("not a signed envelope")?;
            let set = ClaimSet::from_envelope(envelope).context("envelope does not carry a claim set")?;
            println!("{}", serde_json::to_string_pretty(&set.body)?);
            let keys = load_keys(&file, keys.as_deref())?;
            let valid = keys.get(set.issuer_id()).is_some_and(|k| set.verify(k));
            println!(
                "signature by {}: {}",
                set.issuer_id(),
                if valid { "valid" } else { "INVALID" }
            );
            Ok(if valid { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Report { dir, json } => {
            let path = dir.join("report.json");
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let report: RunReport = serde_json::from_slice(&bytes).context("malformed report.json")?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report.transfers)?);
            } else {
                print_report(&report);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenScenario { kind, seed, transfers } => {
            let config = match kind {
                Builtin::Baseline => scenarios::baseline(seed),
                Builtin::Fuzz => scenarios::fuzz(seed, transfers),
                Builtin::DropReceipts => fault(seed, "drop-receipts")?,
                Builtin::DelayClaims => fault(seed, "delay-claims")?,
                Builtin::DuplicateDelivery => fault(seed, "duplicate-delivery")?,
            };
            println!("{}", String::from_utf8(config.to_canonical())?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn fault(seed: u64, name: &str) -> Result<ScenarioConfig> {
    match scenarios::fault_suite(seed).into_iter().find(|c| c.name == name) {
        Some(c) => Ok(c),
        None => bail!("no built-in scenario {name}"),
    }
}

/// Uses the explicit path, else `keys.json` next to `file` or in its parent.
fn load_keys(file: &Path, explicit: Option<&Path>) -> Result<KeyDirectory> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = file.parent().unwrap_or(Path::new("."));
            [dir.join("keys.json"), dir.join("../keys.json")]
                .into_iter()
                .find(|p| p.exists())
                .context("no keys.json found; pass --keys")?
        }
    };
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("malformed key directory {}", path.display()))
}

fn print_report(report: &RunReport) {
    println!("scenario {} (seed {})", report.scenario, report.seed);
    for t in &report.transfers {
        let reason = t.reason.as_ref().map(|r| format!(" ({})", r.code())).unwrap_or_default();
        println!(
            "{} @ {} [{:?}] {}{} amount={} sent={} received={} receipts={}",
            t.transfer_id,
            t.vasp_id,
            t.role,
            t.state,
            reason,
            t.amount,
            t.sent_field_groups.join(","),
            t.received_field_groups.join(","),
            t.receipt_hashes.len()
        );
    }
    println!(
        "ledger total: opening {} closing {}",
        report.opening_total, report.closing_total
    );
}
