//! Experiment harness for test-time adaptation of open-vocabulary
//! segmentation: config-driven runs, corruption materialization, plots, and
//! the toy fixture generator.
//!
//! Exit codes: 0 success, 2 user/config error, 3 environment or model error,
//! 4 numerical failure during adaptation (some batch was aborted).

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::ConfigFile;
use mlmp_core::adapt::AdaptConfig;
use mlmp_core::corrupt::{build_corrupted_dataset, CorruptionKind, ALL_KINDS};
use mlmp_core::data::make_toy_dataset;
use mlmp_core::eval::{layer_weight_stats, read_report_json, read_run_log};
use mlmp_core::plot::{layer_weight_plot, miou_bar_plot};
use mlmp_core::runner::{self, BankKind, ExperimentConfig, Method};

#[derive(Parser)]
#[command(name = "mlmp", about = "Test-time adaptation harness for open-vocabulary segmentation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid and write report.json / report.csv / runlog.ndjson.
    Run(Box<RunArgs>),
    /// Materialize corrupted copies of a dataset, one subtree per kind.
    Corrupt(CorruptArgs),
    /// Render PNG plots from run logs and reports.
    Plot(PlotArgs),
    /// Generate the seeded three-class toy dataset.
    ToyData(ToyDataArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key-value config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset root containing images/ and labels/.
    #[arg(long)]
    root: Option<PathBuf>,
    /// none | tent | mlmp
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Pipe-separated prompt templates with a {class} slot.
    #[arg(long)]
    templates: Option<String>,
    /// Inclusive 1-indexed block range, e.g. 7-24; "auto" = last 75%.
    #[arg(long)]
    layer_range: Option<String>,
    #[arg(long)]
    beta_eval: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports and logs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Drop the background class from the mIoU mean (v21/p60-style spaces).
    #[arg(long)]
    exclude_background: bool,
    /// "toy" or a path to a serialized toy-format checkpoint.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    backbone_seed: Option<u64>,
    /// Comma-separated: original, corruption kinds, or "all".
    #[arg(long)]
    corruptions: Option<String>,
    /// Class-embedding source: text | prototype.
    #[arg(long)]
    bank: Option<String>,
    /// Write one prediction overlay PNG per scenario.
    #[arg(long)]
    emit_overlays: bool,
}

#[derive(Args)]
struct CorruptArgs {
    /// Source dataset root (images/ + labels/).
    #[arg(long)]
    src: PathBuf,
    /// Destination root; one subtree per corruption kind.
    #[arg(long)]
    dst: PathBuf,
    /// Comma-separated kinds; default all 15.
    #[arg(long)]
    kinds: Option<String>,
    #[arg(long, default_value_t = 5)]
    severity: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Run logs (newline-delimited JSON).
    #[arg(long)]
    log: Vec<PathBuf>,
    /// layer_weights | miou_bars
    #[arg(long)]
    what: String,
    /// report.json (required for miou_bars).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Output directory for PNGs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ToyDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => cmd_run(*args),
        Command::Corrupt(args) => wrap_user(cmd_corrupt(args)),
        Command::Plot(args) => wrap_user(cmd_plot(args)),
        Command::ToyData(args) => wrap_user(cmd_toy_data(args)),
    };
    match code {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn wrap_user(r: Result<()>) -> Result<ExitCode> {
    r.map(|_| ExitCode::SUCCESS)
}

fn parse_layer_range(raw: &str) -> Result<Option<(usize, usize)>> {
    if raw == "auto" {
        return Ok(None);
    }
    let (lo, hi) = raw
        .split_once('-')
        .ok_or_else(|| anyhow!("layer range must look like 7-24 or auto"))?;
    Ok(Some((lo.trim().parse()?, hi.trim().parse()?)))
}

fn parse_corruptions(raw: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part == "all" {
            out.push("original".to_string());
            out.extend(ALL_KINDS.iter().map(|k| k.name().to_string()));
        } else {
            if part != "original" {
                CorruptionKind::from_name(part)?;
            }
            out.push(part.to_string());
        }
    }
    if out.is_empty() {
        out.push("original".to_string());
    }
    Ok(out)
}

fn build_experiment_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let file = match &args.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let mut cfg = ExperimentConfig::default();
    let mut adapt = AdaptConfig::default();

    // file values first, then flag overrides
    if let Some(v) = file.get("backbone") {
        cfg.backbone = v.to_string();
    }
    if let Some(v) = file.get_parsed("backbone-seed")? {
        cfg.backbone_seed = v;
    }
    if let Some(v) = file.get("dataset") {
        cfg.dataset = v.to_string();
    }
    if let Some(v) = file.get("root") {
        cfg.root = PathBuf::from(v);
    }
    if let Some(v) = file.get("corruptions") {
        cfg.corruptions = parse_corruptions(v)?;
    }
    if let Some(v) = file.get("method") {
        cfg.method = Method::from_name(v)?;
    }
    if let Some(v) = file.get_parsed("repeats")? {
        cfg.repeats = v;
    }
    if let Some(v) = file.get("out") {
        cfg.out_dir = PathBuf::from(v);
    }
    if let Some(v) = file.get_parsed("seed")? {
        cfg.seed = v;
    }
    if let Some(v) = file.get_parsed("exclude-background")? {
        cfg.exclude_background = v;
    }
    if let Some(v) = file.get("bank") {
        cfg.bank = BankKind::from_name(v)?;
    }
    if let Some(v) = file.get_parsed("emit-overlays")? {
        cfg.emit_overlays = v;
    }
    if let Some(v) = file.get_parsed("steps")? {
        adapt.steps = v;
    }
    if let Some(v) = file.get_parsed("lr")? {
        adapt.learning_rate = v;
    }
    if let Some(v) = file.get_parsed("batch-size")? {
        adapt.batch_size = v;
    }
    if let Some(v) = file.get("templates") {
        adapt.templates = v.split('|').map(|s| s.trim().to_string()).collect();
    }
    if let Some(v) = file.get("layer-range") {
        adapt.layer_range = parse_layer_range(v)?;
    }
    if let Some(v) = file.get_parsed("tau")? {
        adapt.tau = v;
    }
    if let Some(v) = file.get_parsed("beta-adapt")? {
        adapt.beta_adapt = v;
    }
    if let Some(v) = file.get_parsed("beta-eval")? {
        adapt.beta_eval = v;
    }
    if let Some(v) = file.get_parsed("reset-per-batch")? {
        adapt.reset_per_batch = v;
    }

    if let Some(v) = &args.backbone {
        cfg.backbone = v.clone();
    }
    if let Some(v) = args.backbone_seed {
        cfg.backbone_seed = v;
    }
    if let Some(v) = &args.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &args.root {
        cfg.root = v.clone();
    }
    if let Some(v) = &args.corruptions {
        cfg.corruptions = parse_corruptions(v)?;
    }
    if let Some(v) = &args.method {
        cfg.method = Method::from_name(v)?;
    }
    if let Some(v) = args.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = &args.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.exclude_background {
        cfg.exclude_background = true;
    }
    if let Some(v) = &args.bank {
        cfg.bank = BankKind::from_name(v)?;
    }
    if args.emit_overlays {
        cfg.emit_overlays = true;
    }
    if let Some(v) = args.steps {
        adapt.steps = v;
    }
    if let Some(v) = args.lr {
        adapt.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        adapt.batch_size = v;
    }
    if let Some(v) = &args.templates {
        adapt.templates = v.split('|').map(|s| s.trim().to_string()).collect();
    }
    if let Some(v) = &args.layer_range {
        adapt.layer_range = parse_layer_range(v)?;
    }
    if let Some(v) = args.beta_eval {
        adapt.beta_eval = v;
    }
    cfg.adapt = adapt;
    cfg.cache_dir = std::env::var_os("MLMP_CACHE_DIR").map(PathBuf::from);
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let cfg = build_experiment_config(&args)?;
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return Ok(ExitCode::from(2));
    }
    if let Err(e) = runner::validate_dataset(&cfg) {
        eprintln!("error: {e}");
        return Ok(ExitCode::from(2));
    }
    if let Err(e) = runner::build_backbone(&cfg) {
        eprintln!("error: backbone load failed: {e}");
        return Ok(ExitCode::from(3));
    }
    let summary = runner::run(&cfg).map_err(|e| anyhow!("{e}"))?;
    for row in summary.report.scenarios.iter().chain(&summary.report.c_average) {
        let mean = row
            .miou_mean
            .map_or("null".to_string(), |v| format!("{v:.4}"));
        let std = row
            .miou_std
            .map_or(String::new(), |v| format!(" +- {v:.4}"));
        println!(
            "{:<12} {:<20} {:<6} miou {mean}{std}",
            row.dataset, row.corruption, row.method
        );
    }
    println!(
        "report written to {} (fingerprint {})",
        cfg.out_dir.display(),
        summary.report.config_fingerprint
    );
    if summary.any_aborted {
        eprintln!("warning: at least one batch aborted on a non-finite loss");
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_corrupt(args: CorruptArgs) -> Result<()> {
    let kinds: Vec<CorruptionKind> = match &args.kinds {
        None => ALL_KINDS.to_vec(),
        Some(raw) => raw
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(CorruptionKind::from_name)
            .collect::<mlmp_core::Result<_>>()?,
    };
    if !(1..=5).contains(&args.severity) {
        return Err(anyhow!("severity {} outside 1..=5", args.severity));
    }
    let manifest = build_corrupted_dataset(&args.src, &args.dst, &kinds, args.severity, args.seed)?;
    for km in &manifest.kinds {
        println!("{:<20} {} files  checksum {}", km.kind, km.files, km.checksum);
    }
    if !manifest.skipped.is_empty() {
        for s in &manifest.skipped {
            eprintln!("skipped: {s}");
        }
        return Err(anyhow!("{} files skipped", manifest.skipped.len()));
    }
    println!("manifest written to {}", args.dst.join("manifest.json").display());
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    match args.what.as_str() {
        "layer_weights" => {
            if args.log.is_empty() {
                return Err(anyhow!("layer_weights needs at least one --log"));
            }
            let mut records = Vec::new();
            for path in &args.log {
                records.extend(read_run_log(path)?);
            }
            let stats = layer_weight_stats(&records)?;
            let first_layer = records.first().map_or(1, |r| r.first_layer);
            let datasets: std::collections::BTreeSet<String> =
                stats.iter().map(|s| s.dataset.clone()).collect();
            for dataset in datasets {
                let path = args.out.join(format!("layer_weights_{dataset}.png"));
                layer_weight_plot(&stats, &dataset, first_layer, &path)?;
                println!("wrote {}", path.display());
            }
        }
        "miou_bars" => {
            let report_path = args
                .report
                .as_ref()
                .ok_or_else(|| anyhow!("miou_bars needs --report report.json"))?;
            let report = read_report_json(report_path)?;
            let pairs: std::collections::BTreeSet<(String, String)> = report
                .scenarios
                .iter()
                .map(|s| (s.dataset.clone(), s.method.clone()))
                .collect();
            for (dataset, method) in pairs {
                let path = args.out.join(format!("miou_{dataset}_{method}.png"));
                miou_bar_plot(&report, &dataset, &method, &path)?;
                println!("wrote {}", path.display());
            }
        }
        other => {
            return Err(anyhow!(
                "unknown plot kind {other:?}; use layer_weights or miou_bars"
            ))
        }
    }
    Ok(())
}

fn cmd_toy_data(args: ToyDataArgs) -> Result<()> {
    let manifest = make_toy_dataset(&args.out, args.count, args.seed)?;
    println!(
        "wrote {} toy samples to {} (checksum {})",
        manifest.count,
        args.out.display(),
        manifest.checksum
    );
    Ok(())
}
