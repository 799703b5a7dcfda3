//! `hps`: generate data, train, verify against the reference trainer, hash
//! features, and inspect parameter stores.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hps::config::RunConfig;
use hps::dataset::{generate, Dataset, GenSpec, KeyDistribution};
use hps::osrp::OsrpPlan;
use hps::ssd::{fsck, FsckReport};

const STORE_ENV: &str = "HPS_STORE_DIR";

#[derive(Parser)]
#[command(name = "hps", version, about = "Hierarchical parameter server benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic click log.
    Gen(GenArgs),
    /// Train on a dataset and export the model.
    Train(TrainArgs),
    /// Train distributed and with the reference trainer, then compare.
    Verify(VerifyArgs),
    /// Re-hash a dataset into a smaller feature space.
    Hash(HashArgs),
    /// Check every store file's checksum and rebuild the key map.
    Fsck(StoreArgs),
    /// Print per-node store occupancy.
    Stats(StoreArgs),
    /// Print the reference configuration with every default.
    Config(RunArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    dims: u64,
    #[arg(long, default_value_t = 100_000)]
    examples: usize,
    #[arg(long, default_value_t = 10)]
    features: usize,
    /// `uniform`, `zipf` or `zipf:<s>`.
    #[arg(long, default_value = "uniform")]
    distribution: KeyDistribution,
    #[arg(long, default_value_t = 3.0)]
    signal: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Configuration sources, lowest precedence first: defaults, `--config`,
/// `HPS_STORE_DIR`, the named flags, then `--set`.
#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    nodes: Option<u32>,
    #[arg(long)]
    devices: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    minibatches: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    store_dir: Option<PathBuf>,
    /// Entries, or `auto`.
    #[arg(long)]
    lru_capacity: Option<String>,
    /// Entries, or `auto`.
    #[arg(long)]
    lfu_capacity: Option<String>,
    #[arg(long)]
    file_capacity: Option<usize>,
    #[arg(long)]
    usage_threshold: Option<f64>,
    #[arg(long)]
    queue_depths: Option<String>,
    #[arg(long)]
    stage_delays_ms: Option<String>,
    #[arg(long)]
    latency_us: Option<u64>,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(short, long)]
    data: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Per-batch metrics; defaults to `<store_dir>/metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Run summary; defaults to `<store_dir>/summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(short, long)]
    data: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Fault injection: drop one replica's dense update at this
    /// synchronization.
    #[arg(long)]
    skip_sync_at: Option<u64>,
}

#[derive(Args)]
struct HashArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Number of bins; the output space has twice as many keys.
    #[arg(short, long)]
    bins: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct StoreArgs {
    /// A node directory, or a store root holding `node<N>` directories.
    /// Defaults to `HPS_STORE_DIR`, then `hps-store`.
    dir: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
                RunConfig::from_kv(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(dir) = std::env::var(STORE_ENV) {
            cfg.store_dir = dir.into();
        }
        let mut flags: Vec<String> = Vec::new();
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.push(format!("{k}={v}"));
            }
        };
        flag("nodes", self.nodes.map(|v| v.to_string()));
        flag("devices", self.devices.map(|v| v.to_string()));
        flag("batch_size", self.batch_size.map(|v| v.to_string()));
        flag("minibatches", self.minibatches.map(|v| v.to_string()));
        flag("lr", self.lr.map(|v| v.to_string()));
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("store_dir", self.store_dir.as_ref().map(|v| v.display().to_string()));
        flag("lru_capacity", self.lru_capacity.clone());
        flag("lfu_capacity", self.lfu_capacity.clone());
        flag("file_capacity", self.file_capacity.map(|v| v.to_string()));
        flag("usage_threshold", self.usage_threshold.map(|v| v.to_string()));
        flag("queue_depths", self.queue_depths.clone());
        flag("stage_delays_ms", self.stage_delays_ms.clone());
        flag("latency_us", self.latency_us.map(|v| v.to_string()));
        flag("holdout", self.holdout.map(|v| v.to_string()));
        if self.deterministic {
            flag("deterministic", Some("true".into()));
        }
        cfg.apply_overrides(flags.iter().chain(&self.overrides).map(String::as_str))
            .map_err(|e| Failure::Validation(e.to_string()))?;
        cfg.validate().map_err(|e| Failure::Validation(e.to_string()))?;
        Ok(cfg)
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        match e {
            hps::dataset::DatasetError::Io(_) => Failure::Runtime(msg),
            _ => Failure::Validation(msg),
        }
    })
}

fn write_file(path: &Path, body: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, body).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_gen(a: GenArgs) -> Outcome {
    let spec = GenSpec {
        dims: a.dims,
        examples: a.examples,
        features_per_example: a.features,
        distribution: a.distribution,
        signal: a.signal,
        seed: a.seed,
    };
    let (ds, _) = generate(&spec).map_err(|e| Failure::Validation(e.to_string()))?;
    ds.save(&a.out).map_err(Failure::runtime)?;
    eprintln!("wrote {} examples over {} keys to {}", ds.len(), ds.dims, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let cfg = a.run.resolve()?;
    let (train, holdout) = load_dataset(&a.data)?.split_holdout(cfg.holdout);
    let batches = train.batches(cfg.batch_size);
    let mut run = hps::pipeline::run_training(&cfg, &batches).map_err(Failure::runtime)?;
    let has_both = holdout.examples.iter().any(|e| e.label == 1) && holdout.examples.iter().any(|e| e.label == 0);
    if has_both {
        run.metrics.summary.final_auc = Some(run.model.auc(&holdout.examples).map_err(Failure::runtime)?);
    }
    let csv = a.metrics.unwrap_or_else(|| cfg.store_dir.join("metrics.csv"));
    let json = a.summary.unwrap_or_else(|| cfg.store_dir.join("summary.json"));
    write_file(&csv, &run.metrics.to_csv())?;
    let summary = run.metrics.summary_json();
    write_file(&json, &summary)?;
    println!("{summary}");
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Outcome {
    let mut cfg = a.run.resolve()?;
    if a.skip_sync_at.is_some() {
        cfg.skip_sync_at = a.skip_sync_at;
    }
    let (train, holdout) = load_dataset(&a.data)?.split_holdout(cfg.holdout);
    let report = hps::verify::verify(&cfg, &train.batches(cfg.batch_size), &holdout.examples)
        .map_err(Failure::runtime)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(Failure::runtime)?);
    if report.passed {
        eprintln!("PASS");
        Ok(())
    } else {
        let mut msg = report.failures.join("; ");
        for d in &report.params.worst {
            msg.push_str(&format!(
                "\n  {}: distributed {} reference {} (rel {:e})",
                d.param, d.distributed, d.reference, d.rel
            ));
        }
        Err(Failure::Validation(msg))
    }
}

fn cmd_hash(a: HashArgs) -> Outcome {
    let ds = load_dataset(&a.input)?;
    let plan = OsrpPlan::new(ds.dims, a.bins, a.seed).map_err(|e| Failure::Validation(e.to_string()))?;
    let examples = ds
        .examples
        .iter()
        .map(|ex| {
            Ok(hps::model::Example { label: ex.label, features: plan.hash_example(&ex.features)? })
        })
        .collect::<Result<Vec<_>, hps::osrp::OsrpError>>()
        .map_err(|e| Failure::Validation(e.to_string()))?;
    let out = Dataset { dims: plan.output_dim(), examples };
    out.save(&a.out).map_err(Failure::runtime)?;
    eprintln!("hashed {} examples from {} to {} keys", out.len(), ds.dims, out.dims);
    Ok(())
}

/// Node directories under `dir`, or `dir` itself when it has none.
fn node_dirs(dir: Option<PathBuf>) -> Result<Vec<PathBuf>, Failure> {
    let dir = dir
        .or_else(|| std::env::var_os(STORE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| RunConfig::default().store_dir);
    let entries = std::fs::read_dir(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let mut nodes: Vec<(u32, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let n = e.file_name().to_str()?.strip_prefix("node")?.parse().ok()?;
            e.path().is_dir().then(|| (n, e.path()))
        })
        .collect();
    nodes.sort();
    Ok(if nodes.is_empty() { vec![dir] } else { nodes.into_iter().map(|(_, p)| p).collect() })
}

fn scan(dir: Option<PathBuf>) -> Result<Vec<(PathBuf, FsckReport)>, Failure> {
    node_dirs(dir)?
        .into_iter()
        .map(|d| {
            let r = fsck(&d).map_err(Failure::runtime)?;
            Ok((d, r))
        })
        .collect()
}

fn cmd_fsck(a: StoreArgs) -> Outcome {
    let reports = scan(a.dir)?;
    let mut bad = Vec::new();
    for (dir, r) in &reports {
        let status = if r.is_consistent() { "ok" } else { "CORRUPT" };
        println!("{}: {status} ({} files, {} live keys, {} stale records)", dir.display(), r.files, r.live_keys, r.stale_records);
        for c in &r.corrupt {
            println!("  {c}");
            bad.push(format!("{}: {c}", dir.display()));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("{} corrupt file(s)", bad.len())))
    }
}

fn cmd_stats(a: StoreArgs) -> Outcome {
    let reports = scan(a.dir)?;
    let rows: Vec<serde_json::Value> = reports
        .iter()
        .map(|(dir, r)| {
            let amplification = if r.live_bytes == 0 { None } else { Some(r.disk_bytes as f64 / r.live_bytes as f64) };
            serde_json::json!({
                "dir": dir.display().to_string(),
                "files": r.files,
                "live_keys": r.live_keys,
                "records": r.records,
                "stale_records": r.stale_records,
                "disk_bytes": r.disk_bytes,
                "live_bytes": r.live_bytes,
                "space_amplification": amplification,
                "embedding_width": r.width,
                "corrupt_files": r.corrupt.len(),
            })
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&rows).map_err(Failure::runtime)?);
    Ok(())
}

fn main() -> ExitCode {
    let outcome = match Cli::parse().cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Hash(a) => cmd_hash(a),
        Command::Fsck(a) => cmd_fsck(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Config(a) => a.resolve().map(|cfg| {
            if a.config.is_none() && a.overrides.is_empty() {
                print!("{}", RunConfig::reference());
            } else {
                print!("{}", cfg.to_kv());
            }
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("validation failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
