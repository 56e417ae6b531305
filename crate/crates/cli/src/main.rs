mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use circuitlab::encoding::Vocab;
use circuitlab::experiments::{
    cmd_finetune, cmd_gen_data, cmd_gen_finetune, cmd_probe, cmd_report, cmd_train, write_invocation, write_json,
    DirLock, ProbeRequest, Thresholds, DESK_FINETUNE_NEW, DESK_FINETUNE_RETAIN,
};
use circuitlab::kg::io::{read_manifest, BundleKind};
use circuitlab::kg::{GraphSpec, Regime};
use circuitlab::model::{ModelConfig, Precision};
use circuitlab::trainer::TrainConfig;

/// Synthetic two-hop reasoning experiments with a weight-shared transformer.
#[derive(Debug, Parser)]
#[command(name = "circuitlab", version, args_override_self = true)]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, default_value = "info", global = true)]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset bundle (pretraining regime or finetune set).
    GenData(GenDataArgs),
    /// Pretrain a model on a bundle.
    Train(TrainArgs),
    /// Trace a query set through a checkpoint with the logit lens.
    Probe(ProbeArgs),
    /// Continue training a checkpoint on a finetune bundle.
    Finetune(FinetuneArgs),
    /// Summarize metrics files and emit plot series as JSON.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Preset sizes; individual flags override them.
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    #[arg(long)]
    num_entities: Option<usize>,
    #[arg(long)]
    num_relations: Option<usize>,
    #[arg(long)]
    out_degree: Option<usize>,
    #[arg(long)]
    ood_fraction: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// natural, hop1_full, hop2_full or both_full.
    #[arg(long, default_value = "natural")]
    regime: String,
    /// Compositions injected per OOD hop fact.
    #[arg(long, default_value_t = 1)]
    per_fact_count: usize,
    /// Write a finetune bundle instead of a pretraining bundle.
    #[arg(long)]
    finetune: bool,
    #[arg(long, default_value_t = DESK_FINETUNE_NEW)]
    new_facts: usize,
    #[arg(long, default_value_t = DESK_FINETUNE_RETAIN)]
    retained_facts: usize,
    #[arg(long, default_value_t = 0)]
    finetune_seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct OptimArgs {
    #[arg(long, default_value_t = 150_000)]
    steps: u64,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 2_000)]
    warmup_steps: u64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, default_value_t = 1_000)]
    eval_interval: u64,
    #[arg(long, default_value_t = 1_000)]
    eval_sample_size: usize,
    #[arg(long, default_value_t = 200)]
    probe_sample_size: usize,
    #[arg(long, default_value_t = 10_000)]
    checkpoint_interval: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gradient shards per batch (affects numerics).
    #[arg(long, default_value_t = 1)]
    grad_shards: usize,
    /// Threads for gradient shards (does not affect numerics).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

impl OptimArgs {
    fn train_config(&self, regime: Regime) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            eval_interval: self.eval_interval,
            eval_sample_size: self.eval_sample_size,
            probe_sample_size: self.probe_sample_size,
            checkpoint_interval: self.checkpoint_interval,
            seed: self.seed,
            regime,
            grad_shards: self.grad_shards,
            workers: self.workers,
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Must match the bundle's regime; defaults to it.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long, default_value_t = 256)]
    model_dim: usize,
    #[arg(long, default_value_t = 4)]
    num_heads: usize,
    #[arg(long, default_value_t = 1_024)]
    mlp_dim: usize,
    #[arg(long, default_value_t = 6)]
    num_iterations: usize,
    /// Seed for parameter initialization.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Query set name, e.g. eval_ood or eval_new_hop1.
    #[arg(long, default_value = "eval_ood")]
    set: String,
    #[arg(long, default_value_t = 200)]
    sample_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Comma-separated 1-based input positions to decode.
    #[arg(long, default_value = "3", value_delimiter = ',')]
    positions: Vec<usize>,
    /// Iterations to unroll; defaults to the checkpoint's depth.
    #[arg(long)]
    iterations: Option<usize>,
    /// Count queries whose bridge equals their head or tail.
    #[arg(long)]
    include_degenerate: bool,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct ReportArgs {
    /// Metrics CSV files.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    saturation: f64,
    #[arg(long, default_value_t = 0.9)]
    generalization: f64,
}

/// A failure attributable to how the command was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn require_path(flag: &str, path: &Path) -> Result<()> {
    if !path.exists() {
        anyhow::bail!("--{flag}: {} does not exist", path.display());
    }
    Ok(())
}

fn parse_regime(s: &str) -> Result<Regime> {
    s.parse::<Regime>().map_err(|e| Usage(format!("--regime: {e}")).into())
}

fn settings<T: Serialize>(args: &T) -> BTreeMap<String, String> {
    let value = serde_json::to_value(args).expect("arguments serialize");
    value
        .as_object()
        .into_iter()
        .flatten()
        .map(|(k, v)| {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            (k.clone(), s)
        })
        .collect()
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let base = match a.scale {
        Scale::Desk => GraphSpec::desk_scale(a.seed),
        Scale::Paper => GraphSpec::paper_scale(a.seed),
    };
    let spec = GraphSpec {
        num_entities: a.num_entities.unwrap_or(base.num_entities),
        num_relations: a.num_relations.unwrap_or(base.num_relations),
        out_degree: a.out_degree.unwrap_or(base.out_degree),
        ood_fraction: a.ood_fraction.unwrap_or(base.ood_fraction),
        phi: a.phi.unwrap_or(base.phi),
        seed: a.seed,
    };
    let regime = parse_regime(&a.regime)?;
    let _lock = DirLock::acquire(&a.out_dir)?;
    let manifest = if a.finetune {
        cmd_gen_finetune(&spec, a.new_facts, a.retained_facts, a.finetune_seed, &a.out_dir)?
    } else {
        cmd_gen_data(&spec, regime, a.per_fact_count, &a.out_dir)?
    };
    write_invocation(&a.out_dir, "gen-data", settings(a), &[])?;
    log::info!("wrote {} facts and {:?} to {}", manifest.facts, manifest.queries, a.out_dir.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    require_path("bundle", &a.bundle)?;
    let manifest = read_manifest(&a.bundle)?;
    let BundleKind::Pretrain { regime: bundle_regime, .. } = manifest.kind else {
        return Err(Usage("--bundle: expected a pretraining bundle, found a finetune bundle".into()).into());
    };
    let regime = match &a.regime {
        Some(r) => parse_regime(r)?,
        None => bundle_regime,
    };
    let model = ModelConfig {
        vocab_size: Vocab::from_spec(&manifest.spec).size(),
        model_dim: a.model_dim,
        num_heads: a.num_heads,
        mlp_dim: a.mlp_dim,
        num_iterations: a.num_iterations,
        seed: a.model_seed,
        precision: Precision::F32,
    };
    let cfg = a.optim.train_config(regime);
    let _lock = DirLock::acquire(&a.out_dir)?;
    write_invocation(&a.out_dir, "train", settings(a), &[("bundle", &a.bundle)])?;
    let out = cmd_train(&a.bundle, &model, &cfg, &a.out_dir, a.optim.resume)?;
    log::info!("final checkpoint {}", out.final_checkpoint.display());
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    require_path("checkpoint", &a.checkpoint)?;
    require_path("bundle", &a.bundle)?;
    let cfg = a.optim.train_config(Regime::Natural);
    let _lock = DirLock::acquire(&a.out_dir)?;
    write_invocation(
        &a.out_dir,
        "finetune",
        settings(a),
        &[("checkpoint", &a.checkpoint), ("bundle", &a.bundle)],
    )?;
    let out = cmd_finetune(&a.checkpoint, &a.bundle, &cfg, &a.out_dir, a.optim.resume)?;
    log::info!("final checkpoint {}", out.final_checkpoint.display());
    Ok(())
}

fn probe(a: &ProbeArgs) -> Result<()> {
    require_path("checkpoint", &a.checkpoint)?;
    require_path("bundle", &a.bundle)?;
    let req = ProbeRequest {
        set: a.set.clone(),
        sample_size: a.sample_size,
        seed: a.seed,
        top_k: a.top_k,
        positions: a.positions.clone(),
        iterations: a.iterations,
        include_degenerate: a.include_degenerate,
    };
    let _lock = DirLock::acquire(&a.out_dir)?;
    write_invocation(
        &a.out_dir,
        "probe",
        settings(a),
        &[("checkpoint", &a.checkpoint), ("bundle", &a.bundle)],
    )?;
    let stats = cmd_probe(&a.checkpoint, &a.bundle, &req, &a.out_dir)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    for p in &a.metrics {
        require_path("metrics", p)?;
    }
    let paths: Vec<&Path> = a.metrics.iter().map(PathBuf::as_path).collect();
    let thresholds = Thresholds {
        saturation: a.saturation,
        generalization: a.generalization,
    };
    let runs = cmd_report(&paths, thresholds)?;
    let doc = serde_json::json!({ "runs": runs });
    match &a.out {
        Some(path) => write_json(path, &doc)?,
        None => println!("{}", serde_json::to_string_pretty(&doc)?),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|c| {
        c.downcast_ref::<Usage>().is_some()
            || matches!(c.downcast_ref::<circuitlab::Error>(), Some(circuitlab::Error::Config(_)))
    });
    if usage {
        1
    } else {
        2
    }
}

fn run(args: Vec<OsString>) -> Result<(), (u8, String)> {
    let args = config::expand(args).map_err(|e| (1, format!("error: {e:#}")))?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            return Err((code, e.render().to_string()));
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_secs()
        .try_init();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Probe(a) => probe(a),
        Command::Finetune(a) => finetune(a),
        Command::Report(a) => report(a),
    };
    result
        .context("command failed")
        .map_err(|e| (exit_code(&e), format!("error: {:#}", e)))
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((0, msg)) => {
            print!("{msg}");
            ExitCode::SUCCESS
        }
        Err((code, msg)) => {
            eprintln!("{}", msg.trim_end());
            ExitCode::from(code)
        }
    }
}
