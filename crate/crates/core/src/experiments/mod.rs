//! Regime presets, command implementations behind the CLI, and reporting.

pub mod report;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::encoding::Vocab;
use crate::error::{Error, Result};
use crate::kg::io::{load_bundle, load_finetune_bundle, read_manifest, write_bundle, write_finetune_bundle, BundleKind, BundleManifest};
use crate::kg::{build_base_bundle, build_finetune_bundle, build_regime, CompositionQuery, GraphSpec, Regime};
use crate::model::checkpoint::load_checkpoint;
use crate::model::ModelConfig;
use crate::probe::{circuit_stats, read_trace_shard, trace_queries, write_trace_shard, CircuitStats, ProbeConfig};
use crate::rng::streams;
use crate::trainer::{finetune_run, sample_indices, train_run, RunOutcome, TrainConfig};

pub use report::{cmd_report, first_crossing, series, summarize, Metric, ReportSummary, RunReport, Thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegimePreset {
    pub name: &'static str,
    pub regime: Regime,
    pub description: &'static str,
}

pub const PRESETS: [RegimePreset; 4] = [
    RegimePreset {
        name: "natural",
        regime: Regime::Natural,
        description: "compositional supervision from ID facts only; the grokking baseline",
    },
    RegimePreset {
        name: "hop1_full",
        regime: Regime::Hop1Full,
        description: "every OOD first-hop fact of the test set appears in training compositions paired with ID second hops",
    },
    RegimePreset {
        name: "hop2_full",
        regime: Regime::Hop2Full,
        description: "every OOD second-hop fact of the test set appears in training compositions; accuracy can rise without bridge recovery",
    },
    RegimePreset {
        name: "both_full",
        regime: Regime::BothFull,
        description: "union of the first- and second-hop injections; the setting where the bridge circuit forms",
    },
];

pub fn preset(name: &str) -> Result<RegimePreset> {
    PRESETS
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown regime preset {name:?}")))
}

/// New facts in the desk-scale finetune bundle.
pub const DESK_FINETUNE_NEW: usize = 250;
/// Retained ID facts in the desk-scale finetune bundle.
pub const DESK_FINETUNE_RETAIN: usize = 1_000;

/// Builds the base graph, derives `regime`, and writes the bundle.
pub fn cmd_gen_data(spec: &GraphSpec, regime: Regime, per_fact_count: usize, out_dir: &Path) -> Result<BundleManifest> {
    let base = build_base_bundle(spec)?;
    let bundle = build_regime(&base, regime, per_fact_count, spec.seed);
    write_bundle(&bundle, out_dir)
}

/// Builds a finetune bundle over the graph of `spec` and writes it.
pub fn cmd_gen_finetune(
    spec: &GraphSpec,
    n_new: usize,
    n_retain: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<BundleManifest> {
    let base = build_base_bundle(spec)?;
    let fb = build_finetune_bundle(&base, n_new, n_retain, seed)?;
    write_finetune_bundle(&fb, out_dir)
}

pub fn cmd_train(
    bundle_dir: &Path,
    model: &ModelConfig,
    train: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<RunOutcome> {
    let bundle = load_bundle(bundle_dir)?;
    train_run(&bundle, model, train, out_dir, resume)
}

pub fn cmd_finetune(
    checkpoint: &Path,
    bundle_dir: &Path,
    train: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<RunOutcome> {
    let bundle = load_finetune_bundle(bundle_dir)?;
    finetune_run(checkpoint, &bundle, train, out_dir, resume)
}

/// A named query set from either kind of bundle, with the graph spec that
/// fixes its vocabulary.
pub fn load_query_set(bundle_dir: &Path, set: &str) -> Result<(GraphSpec, Vec<CompositionQuery>)> {
    let manifest = read_manifest(bundle_dir)?;
    match manifest.kind {
        BundleKind::Pretrain { .. } => {
            let b = load_bundle(bundle_dir)?;
            let qs = match set {
                "eval_ood" => b.eval_ood,
                "eval_ood_hop1" => b.eval_ood_hop1,
                "eval_ood_hop2" => b.eval_ood_hop2,
                "eval_id_held" => b.eval_id_held,
                "train_inferred" => b.train_inferred,
                "augmentation" => b.augmentation,
                _ => return Err(unknown_set(set, "eval_ood, eval_ood_hop1, eval_ood_hop2, eval_id_held, train_inferred, augmentation")),
            };
            Ok((b.spec, qs))
        }
        BundleKind::Finetune { .. } => {
            let b = load_finetune_bundle(bundle_dir)?;
            let qs = match set {
                "eval_new_hop1" => b.eval_new_hop1,
                "eval_new_hop2" => b.eval_new_hop2,
                "eval_new_both" => b.eval_new_both,
                "train_compositional" => b.train_compositional,
                _ => return Err(unknown_set(set, "eval_new_hop1, eval_new_hop2, eval_new_both, train_compositional")),
            };
            Ok((b.spec, qs))
        }
    }
}

fn unknown_set(set: &str, known: &str) -> Error {
    Error::Config(format!("unknown query set {set:?} for this bundle (expected one of {known})"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRequest {
    pub set: String,
    pub sample_size: usize,
    pub seed: u64,
    pub top_k: usize,
    pub positions: Vec<usize>,
    /// Iterations to unroll; the checkpoint's own depth when `None`.
    pub iterations: Option<usize>,
    pub include_degenerate: bool,
}

impl Default for ProbeRequest {
    fn default() -> Self {
        Self {
            set: "eval_ood".into(),
            sample_size: 200,
            seed: 0,
            top_k: 5,
            positions: crate::probe::DEFAULT_POSITIONS.to_vec(),
            iterations: None,
            include_degenerate: false,
        }
    }
}

/// Traces a sample of a query set; writes `traces.tsv` and `stats.json`.
pub fn cmd_probe(checkpoint: &Path, bundle_dir: &Path, req: &ProbeRequest, out_dir: &Path) -> Result<CircuitStats> {
    let ck = load_checkpoint(checkpoint)?;
    let (spec, queries) = load_query_set(bundle_dir, &req.set)?;
    let vocab = Vocab::from_spec(&spec);
    if vocab.size() != ck.config.vocab_size {
        return Err(Error::Config(format!(
            "bundle vocabulary has {} tokens but the checkpoint expects {}",
            vocab.size(),
            ck.config.vocab_size
        )));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput(format!("query set {} is empty", req.set)));
    }
    let picked: Vec<CompositionQuery> = sample_indices(queries.len(), req.sample_size, req.seed, streams::PROBE)
        .into_iter()
        .map(|i| queries[i])
        .collect();
    let probe = ProbeConfig {
        iterations: req.iterations.unwrap_or(ck.config.num_iterations),
        top_k: req.top_k,
        positions: req.positions.clone(),
    };
    let records = trace_queries(&ck.params, &ck.config, &picked, &vocab, &probe, 512)?;
    let stats = crate::probe::circuit_stats_with(&records, req.include_degenerate)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let traces = out_dir.join("traces.tsv");
    let f = fs::File::create(&traces).map_err(|e| Error::io(&traces, e))?;
    write_trace_shard(BufWriter::new(f), &records).map_err(|e| Error::io(&traces, e))?;
    write_json(&out_dir.join("stats.json"), &stats)?;
    Ok(stats)
}

/// Recomputes statistics from saved trace shards.
pub fn stats_from_shards(paths: &[&Path]) -> Result<CircuitStats> {
    let mut records = Vec::new();
    for p in paths {
        let f = fs::File::open(p).map_err(|e| Error::io(*p, e))?;
        records.extend(
            read_trace_shard(BufReader::new(f), &p.display().to_string())?
                .into_iter()
                .map(|l| l.into_record()),
        );
    }
    circuit_stats(&records)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".circuitlab.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// SHA-256 of a file, or the recorded content checksum of a bundle
/// directory.
pub fn digest_input(path: &Path) -> Result<InputDigest> {
    let sha256 = if path.is_dir() {
        read_manifest(path)?.checksum
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        hex::encode(Sha256::digest(&bytes))
    };
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Invocation {
    pub command: String,
    pub version: &'static str,
    /// Every effective setting after merging config file and flags.
    pub settings: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, InputDigest>,
}

/// Records how a command was run in `out_dir/invocation.json`.
pub fn write_invocation(
    out_dir: &Path,
    command: &str,
    settings: BTreeMap<String, String>,
    inputs: &[(&str, &Path)],
) -> Result<Invocation> {
    let inv = Invocation {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        settings,
        inputs: inputs
            .iter()
            .map(|(k, p)| Ok((k.to_string(), digest_input(p)?)))
            .collect::<Result<_>>()?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("invocation.json"), &inv)?;
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_map_one_to_one_onto_regimes() {
        for r in Regime::ALL {
            let matching: Vec<_> = PRESETS.iter().filter(|p| p.regime == r).collect();
            assert_eq!(matching.len(), 1);
            assert_eq!(matching[0].name, r.name());
            assert_eq!(preset(r.name()).unwrap().regime, r);
        }
        assert!(preset("hop3_full").is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::Config(_))));
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
