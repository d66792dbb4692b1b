//! Command-line entry points: `train`, `stream`, `ablate`, `bench`.
//!
//! Every command honors `--seed`, reads the flat dotted-key config format,
//! and accepts `METER_*` environment overrides. Outputs land under the
//! command's output directory; a run manifest is written before any model
//! output so a run can be reproduced.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use meter::config::{config_hash, MeterConfig};
use meter::data::{
    generate_drift_stream, load_csv, shingle, split_history, standardize, DriftScript, Instance,
    Transform,
};
use meter::engine::{run_stream, train, StreamRun, UpdateMode};
use meter::error::{MeterError, Result};
use meter::eval::{compute_report, measure_throughput, peak_rss_bytes, write_trace, RunMetrics};
use meter::updater::Snapshot;

#[derive(Parser)]
#[command(name = "meter", version, about = "Streaming anomaly detection with concept-drift adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file in the flat dotted-key format (ous.delta_l=64, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, repeatable: --set iec.mu_p=0.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed override (equivalent to --set seed=N).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<MeterConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| MeterError::Config(format!("{}: {e}", path.display())))?;
                let mut cfg = MeterConfig::default();
                cfg.apply_text(&text)?;
                cfg
            }
            None => MeterConfig::default(),
        };
        cfg.apply_env()?;
        for kv in &self.sets {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                MeterError::Config(format!("--set expects key=value, got {kv:?}"))
            })?;
            cfg.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct InputArgs {
    /// CSV stream (header mandatory, optional `label` column).
    #[arg(long, conflicts_with = "script")]
    data: Option<PathBuf>,
    /// Drift-script file describing a synthetic stream.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Shingle a single-column series into windows of this width.
    #[arg(long)]
    shingle: Option<usize>,
}

impl InputArgs {
    fn load(&self, cfg: &MeterConfig) -> Result<(Vec<Instance>, String)> {
        match (&self.data, &self.script) {
            (Some(path), None) => {
                let mut instances = load_csv(path)?;
                if let Some(width) = self.shingle {
                    instances = shingle_labeled(&instances, width)?;
                }
                Ok((instances, format!("data:{}", path.display())))
            }
            (None, Some(path)) => {
                let script = DriftScript::from_file(path)?;
                let instances = generate_drift_stream(&script, cfg.seed)?;
                Ok((
                    instances,
                    format!("script:{}#seed={}", path.display(), cfg.seed),
                ))
            }
            _ => Err(MeterError::Config(
                "exactly one of --data or --script is required".into(),
            )),
        }
    }
}

/// Shingles a single-feature labeled stream; each window takes the label of
/// its most recent element.
fn shingle_labeled(instances: &[Instance], width: usize) -> Result<Vec<Instance>> {
    if instances.iter().any(|i| i.dim() != 1) {
        return Err(MeterError::Data(
            "--shingle requires exactly one feature column".into(),
        ));
    }
    let series: Vec<f64> = instances.iter().map(|i| i.features()[0]).collect();
    let windows = shingle(&series, width)?;
    Ok(windows
        .into_iter()
        .enumerate()
        .map(|(t, w)| Instance::new(w.features().to_vec(), instances[t + width - 1].label(), t))
        .collect())
}

#[derive(Subcommand)]
enum Command {
    /// Train on the historical split and write the snapshot bundle.
    Train {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for manifest, snapshot, and transform.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a stream against a trained snapshot.
    Stream {
        /// Train output directory (or a snapshot.json path).
        #[arg(long)]
        snapshot: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// JSONL trace output path.
        #[arg(long)]
        trace_out: PathBuf,
        /// Metrics JSON path (default: metrics.json next to the trace).
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Run offline updates inline at the trigger step (default).
        #[arg(long, conflicts_with = "run_async")]
        sync: bool,
        /// Run offline updates on a background thread.
        #[arg(long = "async")]
        run_async: bool,
        /// Drop the leading h_r fraction (the training split) before scoring.
        #[arg(long)]
        skip_history: bool,
    },
    /// Run the ablation lattice (or a μ_p × μ_e grid) over several seeds.
    Ablate {
        /// Drift-script file for the evaluation stream.
        #[arg(long)]
        script: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per variant.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Sweep the μ_p (0.05..0.5) × μ_e grid instead of the variant lattice.
        #[arg(long)]
        grid: bool,
    },
    /// Measure training and inference throughput across stream sizes.
    Bench {
        /// Optional drift script; default is a built-in 33-feature stream.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Comma-separated stream sizes.
        #[arg(long, default_value = "2000,10000,50000")]
        sizes: String,
        /// Optional JSON output path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    config_hash: String,
    seed: u64,
    dataset: String,
    code_version: String,
    outputs: Vec<String>,
    config: String,
}

fn write_manifest(dir: &Path, cfg: &MeterConfig, dataset: &str, outputs: &[&str]) -> Result<()> {
    let manifest = RunManifest {
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        dataset: dataset.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config: cfg.to_canonical_string(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(dir.join("manifest.json"), bytes)?;
    Ok(())
}

fn cmd_train(input: &InputArgs, config: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = config.load()?;
    let (instances, dataset) = input.load(&cfg)?;
    if instances.is_empty() {
        return Err(MeterError::Data("input stream is empty".into()));
    }
    std::fs::create_dir_all(out)?;
    // the manifest precedes every model artifact
    write_manifest(out, &cfg, &dataset, &["snapshot.json", "transform.json"])?;

    let (history, _) = split_history(&instances, cfg.h_r)?;
    let (history_std, _, transform) = standardize(history, &[])?;
    let snapshot = train(&history_std, &cfg)?;

    snapshot.save(&out.join("snapshot.json"))?;
    let mut bytes = serde_json::to_vec_pretty(&transform)?;
    bytes.push(b'\n');
    std::fs::write(out.join("transform.json"), bytes)?;
    eprintln!(
        "trained on {} instances (latent dim {}), snapshot v{} -> {}",
        history.len(),
        snapshot.detector.latent_dim(),
        snapshot.version,
        out.display()
    );
    Ok(())
}

fn load_snapshot_bundle(path: &Path) -> Result<(Snapshot, Transform)> {
    let (snap_path, transform_path) = if path.is_dir() {
        (path.join("snapshot.json"), path.join("transform.json"))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join("transform.json"))
    };
    let snapshot = Snapshot::load(&snap_path)?;
    let text = std::fs::read_to_string(&transform_path)
        .map_err(|e| MeterError::Data(format!("{}: {e}", transform_path.display())))?;
    let transform: Transform = serde_json::from_str(&text)?;
    Ok((snapshot, transform))
}

#[allow(clippy::too_many_arguments)]
fn cmd_stream(
    snapshot_path: &Path,
    input: &InputArgs,
    config: &ConfigArgs,
    trace_out: &Path,
    metrics_out: Option<&Path>,
    mode: UpdateMode,
    skip_history: bool,
) -> Result<()> {
    let cfg = config.load()?;
    let (snapshot, transform) = load_snapshot_bundle(snapshot_path)?;
    let (instances, _) = input.load(&cfg)?;
    let stream: Vec<Instance> = if skip_history {
        let (_, rest) = split_history(&instances, cfg.h_r)?;
        rest.to_vec()
    } else {
        instances
    };
    if let Some(first) = stream.first() {
        if first.dim() != snapshot.detector.feature_dim() {
            return Err(MeterError::shape(
                "stream feature dim",
                snapshot.detector.feature_dim(),
                first.dim(),
            ));
        }
    }
    let stream_std: Vec<Instance> = stream.iter().map(|i| transform.apply_instance(i)).collect();

    let count = stream_std.len();
    let started = std::time::Instant::now();
    let run = run_stream(snapshot, &stream_std, &cfg, mode)?;
    let wall = started.elapsed().as_secs_f64();

    if let Some(dir) = trace_out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_trace(trace_out, &run.trace)?;

    let labels: Vec<Option<u8>> = stream.iter().map(|i| i.label()).collect();
    let report = compute_report(&run.trace, &labels)?;
    let metrics = RunMetrics {
        report,
        throughput: Some(count as f64 / wall.max(1e-12)),
        wall_time_s: Some(wall),
        peak_rss_bytes: peak_rss_bytes(),
    };
    let metrics_path = match metrics_out {
        Some(p) => p.to_path_buf(),
        None => trace_out
            .parent()
            .unwrap_or(Path::new("."))
            .join("metrics.json"),
    };
    let mut bytes = serde_json::to_vec_pretty(&metrics)?;
    bytes.push(b'\n');
    std::fs::write(&metrics_path, bytes)?;
    if let Some(err) = &metrics.report.metric_error {
        eprintln!("metrics warning: {err}");
    }
    eprintln!(
        "scored {count} instances ({} updates, final snapshot v{}) -> {}",
        run.updates.len(),
        run.final_snapshot.version,
        trace_out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct VariantResult {
    variant: String,
    seeds: Vec<u64>,
    aucroc: Vec<Option<f64>>,
    aucpr: Vec<Option<f64>>,
    mean_aucroc: Option<f64>,
    updates: Vec<usize>,
}

fn ablation_flags(variant: &str) -> (bool, bool, bool) {
    match variant {
        "meter-s" => (false, false, false),
        "meter-s+d" => (false, true, false),
        "meter-wo-iec" => (false, true, true),
        "meter-wo-ous" => (true, true, false),
        "meter" => (true, true, true),
        _ => unreachable!(),
    }
}

fn run_one(
    script: &DriftScript,
    cfg: &MeterConfig,
    snapshot: Snapshot,
    stream_std: &[Instance],
    labels: &[Option<u8>],
) -> Result<(Option<f64>, Option<f64>, usize)> {
    let _ = script;
    let run: StreamRun = run_stream(snapshot, stream_std, cfg, UpdateMode::Synchronous)?;
    let report = compute_report(&run.trace, labels)?;
    Ok((report.aucroc, report.aucpr, report.updates))
}

fn cmd_ablate(
    script_path: &Path,
    config: &ConfigArgs,
    out: &Path,
    seeds: u64,
    grid: bool,
) -> Result<()> {
    let base_cfg = config.load()?;
    let script = DriftScript::from_file(script_path)?;
    std::fs::create_dir_all(out)?;
    write_manifest(
        out,
        &base_cfg,
        &format!("script:{}", script_path.display()),
        &[if grid { "grid.json" } else { "ablation.json" }],
    )?;

    // per-seed prepared data and per-(seed, training profile) snapshots
    let mut prepared: Vec<(Vec<Instance>, Vec<Instance>, Vec<Option<u8>>)> = Vec::new();
    for s in 0..seeds {
        let seed = base_cfg.seed + s;
        let instances = generate_drift_stream(&script, seed)?;
        let (history, rest) = split_history(&instances, base_cfg.h_r)?;
        let (history_std, stream_std, _) = standardize(history, rest)?;
        let labels: Vec<Option<u8>> = rest.iter().map(|i| i.label()).collect();
        prepared.push((history_std, stream_std, labels));
    }

    if grid {
        let mu_ps: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
        let mu_es = [0.001, 0.005, 0.01, 0.1, 0.2, 0.4];
        #[derive(Serialize)]
        struct GridRow {
            mu_p: f64,
            mu_e: f64,
            mean_aucroc: Option<f64>,
        }
        let mut rows = Vec::new();
        for &mu_p in &mu_ps {
            // training depends on μ_p only; reuse it across the μ_e column
            let mut snapshots = Vec::new();
            for (s, (history_std, _, _)) in prepared.iter().enumerate() {
                let mut cfg = base_cfg.clone();
                cfg.seed = base_cfg.seed + s as u64;
                cfg.mu_p = mu_p;
                snapshots.push(train(history_std, &cfg)?);
            }
            for &mu_e in &mu_es {
                let mut aucs = Vec::new();
                for (s, (_, stream_std, labels)) in prepared.iter().enumerate() {
                    let mut cfg = base_cfg.clone();
                    cfg.seed = base_cfg.seed + s as u64;
                    cfg.mu_p = mu_p;
                    cfg.mu_e = meter::config::MuEPolicy::Fixed(mu_e);
                    let mut snapshot = snapshots[s].clone();
                    snapshot.mu_e = mu_e;
                    let (auc, _, _) = run_one(&script, &cfg, snapshot, stream_std, labels)?;
                    if let Some(a) = auc {
                        aucs.push(a);
                    }
                }
                let mean = (!aucs.is_empty())
                    .then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
                rows.push(GridRow {
                    mu_p,
                    mu_e,
                    mean_aucroc: mean,
                });
                eprintln!(
                    "grid mu_p={mu_p:.2} mu_e={mu_e}: mean AUCROC {:?}",
                    rows.last().unwrap().mean_aucroc
                );
            }
        }
        rows.sort_by(|a, b| {
            b.mean_aucroc
                .unwrap_or(f64::NEG_INFINITY)
                .partial_cmp(&a.mean_aucroc.unwrap_or(f64::NEG_INFINITY))
                .unwrap()
        });
        let mut bytes = serde_json::to_vec_pretty(&rows)?;
        bytes.push(b'\n');
        std::fs::write(out.join("grid.json"), bytes)?;
        return Ok(());
    }

    let variants = ["meter-s", "meter-s+d", "meter-wo-iec", "meter-wo-ous", "meter"];
    // training profiles keyed by (use_iec, use_dsd)
    let mut results = Vec::new();
    let mut snapshot_cache: std::collections::HashMap<(bool, bool, u64), Snapshot> =
        std::collections::HashMap::new();
    for variant in variants {
        let (use_iec, use_dsd, use_ous) = ablation_flags(variant);
        let mut row = VariantResult {
            variant: variant.to_string(),
            seeds: Vec::new(),
            aucroc: Vec::new(),
            aucpr: Vec::new(),
            mean_aucroc: None,
            updates: Vec::new(),
        };
        for (s, (history_std, stream_std, labels)) in prepared.iter().enumerate() {
            let seed = base_cfg.seed + s as u64;
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            cfg.use_iec = use_iec;
            cfg.use_dsd = use_dsd;
            cfg.use_ous = use_ous;
            let key = (use_iec, use_dsd, seed);
            let snapshot = match snapshot_cache.get(&key) {
                Some(snap) => snap.clone(),
                None => {
                    let snap = train(history_std, &cfg)?;
                    snapshot_cache.insert(key, snap.clone());
                    snap
                }
            };
            let (auc, pr, updates) = run_one(&script, &cfg, snapshot, stream_std, labels)?;
            row.seeds.push(seed);
            row.aucroc.push(auc);
            row.aucpr.push(pr);
            row.updates.push(updates);
        }
        let defined: Vec<f64> = row.aucroc.iter().flatten().copied().collect();
        row.mean_aucroc =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        eprintln!("{variant}: mean AUCROC {:?}", row.mean_aucroc);
        results.push(row);
    }
    let mut bytes = serde_json::to_vec_pretty(&results)?;
    bytes.push(b'\n');
    std::fs::write(out.join("ablation.json"), bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    size: usize,
    train_seconds: f64,
    train_throughput: f64,
    inference_throughput: f64,
    peak_rss_bytes: Option<u64>,
}

fn cmd_bench(script_path: Option<&Path>, sizes: &str, out: Option<&Path>) -> Result<()> {
    let mut sizes: Vec<usize> = sizes
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| MeterError::Config(format!("bad size: {s:?}")))
        })
        .collect::<Result<_>>()?;
    sizes.sort_unstable();

    let base_script = match script_path {
        Some(p) => DriftScript::from_file(p)?,
        None => DriftScript::parse(
            "dim=33\ncomponent_spread=2.0\nnoise=0.5\nsegment.0.generator=0\nsegment.0.len=1000\nsegment.0.drift=abrupt\nsegment.0.rate=0.02\n",
        )?,
    };

    let mut rows = Vec::new();
    for &size in &sizes {
        let mut script = base_script.clone();
        // scale segment lengths to reach the requested size
        let total = script.total_len().max(1);
        for seg in &mut script.segments {
            seg.len = (seg.len * size / total).max(1);
        }
        let instances = generate_drift_stream(&script, 1)?;
        let mut cfg = MeterConfig::default();
        cfg.seed = 1;
        cfg.train.epochs = 60;
        cfg.use_ous = false; // measure the pure inference service
        let (history, rest) = split_history(&instances, cfg.h_r)?;
        let (history_std, stream_std, _) = standardize(history, rest)?;

        let t0 = std::time::Instant::now();
        let snapshot = train(&history_std, &cfg)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        // samples processed per second across all training epochs
        let train_throughput =
            (history_std.len() * cfg.train.epochs) as f64 / train_seconds.max(1e-12);

        let snapshot_for_run = snapshot.clone();
        let cfg_run = cfg.clone();
        let (rate, _) = measure_throughput(stream_std.len(), move || {
            run_stream(snapshot_for_run, &stream_std, &cfg_run, UpdateMode::Synchronous).unwrap();
        });
        rows.push(BenchRow {
            size,
            train_seconds,
            train_throughput,
            inference_throughput: rate,
            peak_rss_bytes: peak_rss_bytes(),
        });
        eprintln!(
            "size {size}: train {train_seconds:.2}s ({train_throughput:.0}/s), inference {rate:.0}/s"
        );
    }
    let mut bytes = serde_json::to_vec_pretty(&rows)?;
    bytes.push(b'\n');
    println!("{}", String::from_utf8_lossy(&bytes).trim_end());
    if let Some(path) = out {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

fn exit_code_for(err: &MeterError) -> u8 {
    match err {
        MeterError::Config(_) => 2,
        MeterError::Data(_) | MeterError::Parse { .. } | MeterError::Io(_) => 3,
        MeterError::Shape { .. } => 4,
        MeterError::Stream { source, .. } => exit_code_for(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { input, config, out } => cmd_train(input, config, out),
        Command::Stream {
            snapshot,
            input,
            config,
            trace_out,
            metrics_out,
            sync: _,
            run_async,
            skip_history,
        } => cmd_stream(
            snapshot,
            input,
            config,
            trace_out,
            metrics_out.as_deref(),
            if *run_async {
                UpdateMode::Asynchronous
            } else {
                UpdateMode::Synchronous
            },
            *skip_history,
        ),
        Command::Ablate {
            script,
            config,
            out,
            seeds,
            grid,
        } => cmd_ablate(script, config, out, *seeds, *grid),
        Command::Bench { script, sizes, out } => {
            cmd_bench(script.as_deref(), sizes, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
