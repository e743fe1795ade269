//! Command line driver: generate populations, run experiments, sweep
//! node counts, train the centralized baseline, and audit ledgers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use affectfed::aggregate::AggregationRule;
use affectfed::chain::{parse_ledger, replay_ledger, verify_ledger, ArchivedPayload};
use affectfed::dataset::{
    generate_synthetic, write_csv, DeviceAssignment, GeneratorConfig, LabelSkew, StreamId,
};
use affectfed::forest::{read_forest, render_forest, write_forest};
use affectfed::harness::{
    node_sweep, run_baseline, run_experiment, ExperimentConfig, SweepReport,
};
use affectfed::hashing::digest64;
use affectfed::nn::{params_bytes, read_params_bytes};
use affectfed::streams::{build_cohorts, StreamSubset};

#[derive(Parser)]
#[command(
    name = "affectfed",
    version,
    about = "Simulator for federated affect prediction over wearable streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic patient population as CSV files.
    Generate(GenerateArgs),
    /// Write a default experiment config to edit.
    InitConfig {
        /// Output path for the TOML config.
        #[arg(long, default_value = "experiment.toml")]
        out: PathBuf,
    },
    /// Run a full federation experiment.
    Run(RunArgs),
    /// Compare federated against isolated training over node counts.
    Sweep(SweepArgs),
    /// Train one centralized model on pooled data.
    Baseline {
        /// Experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify or replay an exported ledger.
    #[command(subcommand)]
    Ledger(LedgerCmd),
    /// Pretty-print a saved forest model.
    InspectForest {
        /// Path to a .forest file.
        model: PathBuf,
        /// How many trees to render.
        #[arg(long, default_value_t = 3)]
        trees: usize,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 142)]
    patients: usize,
    /// Samples per patient.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Label noise sigma, in stream units.
    #[arg(long, default_value_t = 0.35)]
    noise: f64,
    /// Comma-separated stream names; omit for the built-in six.
    #[arg(long, value_delimiter = ',')]
    universe: Vec<String>,
    /// Assign universe prefixes instead of random subsets.
    #[arg(long)]
    nested: bool,
    /// Cycle device counts instead of sampling them.
    #[arg(long)]
    round_robin: bool,
    /// Output directory for one CSV per patient.
    #[arg(long, default_value = "population")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics, ledger, payloads, and forests.
    #[arg(long, default_value = "run-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Node counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    nodes: Vec<usize>,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LedgerCmd {
    /// Check structural invariants of a ledger file.
    Verify {
        ledger: PathBuf,
    },
    /// Re-derive every aggregate from archived payloads.
    Replay {
        ledger: PathBuf,
        /// Directory of .params payload files written by `run`.
        #[arg(long, default_value = "run-out/payloads")]
        payloads: PathBuf,
        /// Average without sample-count weights.
        #[arg(long)]
        unweighted: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(args) => generate(args),
        Command::InitConfig { out } => init_config(&out),
        Command::Run(args) => run(args),
        Command::Sweep(args) => sweep(args),
        Command::Baseline { config } => baseline(config.as_deref()),
        Command::Ledger(cmd) => ledger(cmd),
        Command::InspectForest { model, trees } => inspect_forest(&model, trees),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let universe: Vec<StreamId> = if args.universe.is_empty() {
        affectfed::dataset::default_universe()
    } else {
        args.universe
            .iter()
            .map(|n| StreamId::new(n).map_err(anyhow::Error::from))
            .collect::<Result<_>>()?
    };
    let n_streams = universe.len();
    let cfg = GeneratorConfig {
        universe,
        device_count_weights: vec![1.0 / n_streams as f64; n_streams],
        nested: args.nested,
        assignment: if args.round_robin {
            DeviceAssignment::RoundRobin
        } else {
            DeviceAssignment::Sampled
        },
        samples_per_patient: args.samples,
        skew: LabelSkew::uniform(),
        noise_sigma: args.noise,
    };
    let synthetic = generate_synthetic(args.seed, args.patients, &cfg)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for p in &synthetic.patients {
        write_csv(p, &args.out.join(format!("{}.csv", p.patient_id)))?;
    }
    for w in &synthetic.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "wrote {} patients ({} samples each) to {}",
        synthetic.patients.len(),
        args.samples,
        args.out.display()
    );
    let mut device_sets: BTreeMap<String, usize> = BTreeMap::new();
    for p in &synthetic.patients {
        *device_sets.entry(p.streams.key()).or_default() += 1;
    }
    let cohort_count = build_cohorts(&synthetic.patients).entries.len();
    println!("device sets ({cohort_count} training cohorts):");
    for (key, n) in &device_sets {
        println!("  {key:<30} {n:>4} patients");
    }
    Ok(())
}

fn init_config(out: &Path) -> Result<()> {
    if out.exists() {
        bail!("{} already exists; refusing to overwrite", out.display());
    }
    fs::write(out, ExperimentConfig::default().to_toml_string())
        .with_context(|| format!("writing {}", out.display()))?;
    println!("wrote default config to {}", out.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let out_dir = &args.out;
    fs::create_dir_all(out_dir.join("payloads"))?;
    fs::create_dir_all(out_dir.join("forests"))?;

    let output = run_experiment(&cfg)?;
    let report = &output.report;

    fs::write(out_dir.join("metrics.json"), report.to_json())?;
    let ledger_text: String =
        output.ledger.iter().map(|e| e.to_line() + "\n").collect();
    fs::write(out_dir.join("ledger.tsv"), ledger_text)?;
    for (digest, payload) in &output.archive {
        let path = out_dir.join("payloads").join(format!("{digest:016x}.params"));
        fs::write(&path, payload_bytes(payload))?;
    }
    for client in &output.clients {
        if let Some(forest) = client.forest() {
            let path = out_dir.join("forests").join(format!("{}.forest", client.address()));
            write_forest(&path, forest)?;
        }
    }

    println!("experiment finished in {} ticks over {} rounds", report.ticks, report.rounds);
    println!(
        "ledger: {} entries, {} replayed aggregates, privacy probes {}/{} clean",
        report.ledger_entries,
        report.replayed_aggregates,
        report.privacy_probes - report.privacy_hits,
        report.privacy_probes
    );
    if !report.dropped_clients.is_empty() {
        println!("dropped clients: {}", report.dropped_clients.join(", "));
    }
    println!(
        "mean forest accuracy {:.3}, mean best single model {:.3}",
        report.mean_forest_accuracy, report.mean_best_model_accuracy
    );
    println!("subset test accuracy:");
    for (key, acc) in &report.subset_test_accuracy {
        println!(
            "  {key:<30} {acc:>6.3}  (cohort {})",
            report.cohort_sizes.get(key).copied().unwrap_or(0)
        );
    }
    println!("full report in {}", out_dir.join("metrics.json").display());
    Ok(())
}

/// Payload file: `payload <n_samples>\n` then the parameter encoding
/// whose digest the ledger references.
fn payload_bytes(payload: &ArchivedPayload) -> Vec<u8> {
    let mut bytes = format!("payload {}\n", payload.n_samples).into_bytes();
    bytes.extend(params_bytes(&payload.subset.key(), &payload.params));
    bytes
}

fn read_payload(bytes: &[u8]) -> Result<(u64, ArchivedPayload)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .context("payload file has no header line")?;
    let header = std::str::from_utf8(&bytes[..newline]).context("payload header not UTF-8")?;
    let n_samples: u64 = match header.split(' ').collect::<Vec<_>>()[..] {
        ["payload", n] => n.parse().context("bad sample count in payload header")?,
        _ => bail!("malformed payload header {header:?}"),
    };
    let body = &bytes[newline + 1..];
    let (key, params) = read_params_bytes(body)?;
    let subset = StreamSubset::parse_key(&key)?;
    Ok((digest64(body), ArchivedPayload { subset, params, n_samples }))
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let report: SweepReport = node_sweep(&cfg, &args.nodes)?;
    println!("{:>6}  {:>10}  {:>12}  {:>10}", "nodes", "federated", "median solo", "test rows");
    for p in &report.points {
        println!(
            "{:>6}  {:>10.3}  {:>12.3}  {:>10}",
            p.nodes, p.federated_accuracy, p.median_solo_accuracy, p.test_rows
        );
    }
    if let Some(out) = args.out {
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        fs::write(&out, json)?;
        println!("wrote report to {}", out.display());
    }
    Ok(())
}

fn baseline(config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let report = run_baseline(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn ledger(cmd: LedgerCmd) -> Result<()> {
    match cmd {
        LedgerCmd::Verify { ledger } => {
            let text = fs::read_to_string(&ledger)
                .with_context(|| format!("reading {}", ledger.display()))?;
            let entries = parse_ledger(&text)?;
            let stats = verify_ledger(&entries)?;
            println!("ledger OK: {} entries over {} rounds", stats.entries, stats.rounds);
            for (kind, count) in &stats.counts {
                println!("  {kind:<20} {count:>6}");
            }
        }
        LedgerCmd::Replay { ledger, payloads, unweighted } => {
            let text = fs::read_to_string(&ledger)
                .with_context(|| format!("reading {}", ledger.display()))?;
            let entries = parse_ledger(&text)?;
            let mut archive: BTreeMap<u64, ArchivedPayload> = BTreeMap::new();
            let mut paths: Vec<PathBuf> = fs::read_dir(&payloads)
                .with_context(|| format!("reading {}", payloads.display()))?
                .map(|e| Ok(e?.path()))
                .collect::<Result<_>>()?;
            paths.sort();
            for path in paths {
                if path.extension().is_none_or(|e| e != "params") {
                    continue;
                }
                let (digest, payload) = read_payload(&fs::read(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?;
                archive.insert(digest, payload);
            }
            let rule = if unweighted {
                AggregationRule::Unweighted
            } else {
                AggregationRule::SampleWeighted
            };
            let outcome = replay_ledger(&entries, &archive, rule)?;
            println!(
                "replay OK: {} aggregates re-derived from {} payloads match the ledger",
                outcome.aggregates_checked,
                archive.len()
            );
        }
    }
    Ok(())
}

fn inspect_forest(model: &Path, trees: usize) -> Result<()> {
    let forest =
        read_forest(model).with_context(|| format!("reading {}", model.display()))?;
    print!("{}", render_forest(&forest, trees));
    Ok(())
}
