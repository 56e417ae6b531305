//! Training and finetuning loops.
//!
//! A run owns its parameters and optimizer state; each step draws the batch
//! for `(seed, step)`, computes gradients (optionally across worker threads
//! over fixed shards, reduced in shard order), and applies one optimizer
//! update. Evaluation rows go to `metrics.csv`, checkpoints to
//! `checkpoints/`, and a `run.json` sidecar records the configuration.

pub mod metrics;
pub mod optim;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodedExample, Vocab, SEQ_LEN};
use crate::error::{Error, Result};
use crate::kg::{CompositionQuery, DatasetBundle, FinetuneBundle, Regime};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{
    argmax_entity, batch_loss, forward_batch, ModelConfig, ModelParams, Precision, PARAM_NAMES,
};
use crate::probe::{circuit_stats, trace_queries, CircuitStats, ProbeConfig};
use crate::rng::{stream_rng, streams};
use crate::tensor::Tape;

pub use metrics::{read_metrics, MetricsRow, MetricsWriter};
pub use optim::{optimizer_step, AdamState, OptimConfig};

/// Sequences per forward pass during evaluation and probing.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_interval: u64,
    pub eval_sample_size: usize,
    pub probe_sample_size: usize,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub regime: Regime,
    /// Fixed number of gradient shards per batch; part of the numerics.
    pub grad_shards: usize,
    /// Threads used to evaluate shards; never changes results.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 150_000,
            batch_size: 512,
            learning_rate: 1e-3,
            weight_decay: 0.1,
            warmup_steps: 2_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_interval: 1_000,
            eval_sample_size: 1_000,
            probe_sample_size: 200,
            checkpoint_interval: 10_000,
            seed: 0,
            regime: Regime::BothFull,
            grad_shards: 1,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning_rate and adam_eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return bad("eval_interval and checkpoint_interval must be >= 1");
        }
        if self.steps > 0 && self.eval_interval > self.steps {
            return Err(Error::Config(format!(
                "eval_interval {} exceeds steps {}",
                self.eval_interval, self.steps
            )));
        }
        if self.eval_sample_size == 0 || self.probe_sample_size == 0 {
            return bad("eval_sample_size and probe_sample_size must be >= 1");
        }
        if self.grad_shards == 0 || self.grad_shards > self.batch_size {
            return bad("grad_shards must lie in 1..=batch_size");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutcome {
    /// Position in the evaluated set.
    pub index: usize,
    pub predicted: u32,
    pub target: u32,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean final-position cross-entropy over the sample.
    pub loss: f64,
    pub outcomes: Vec<QueryOutcome>,
}

/// `sample_size` distinct indices of `0..n` (all of them when
/// `sample_size >= n`), ascending.
pub fn sample_indices(n: usize, sample_size: usize, seed: u64, stream: u64) -> Vec<usize> {
    if sample_size >= n {
        return (0..n).collect();
    }
    let mut v = index::sample(&mut stream_rng(seed, stream), n, sample_size).into_vec();
    v.sort_unstable();
    v
}

/// Accuracy of entity-masked argmax predictions on a uniform sample of
/// `examples`, drawn without replacement.
pub fn evaluate(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    examples: &[EncodedExample],
    num_entities: usize,
    sample_size: usize,
    seed: u64,
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluate over an empty query set".into()));
    }
    let picked = sample_indices(examples.len(), sample_size, seed, streams::EVAL);
    let mut outcomes = Vec::with_capacity(picked.len());
    let mut loss_sum = 0.0f64;
    for part in picked.chunks(EVAL_CHUNK) {
        let inputs: Vec<u32> = part.iter().flat_map(|&i| examples[i].input).collect();
        let out = forward_batch(params, config, &inputs, config.num_iterations)?;
        for (row, &i) in part.iter().enumerate() {
            let logits = out.logits_of(row);
            let target = examples[i].target;
            loss_sum += cross_entropy_f64(logits, target);
            let predicted = argmax_entity(logits, num_entities);
            outcomes.push(QueryOutcome {
                index: i,
                predicted,
                target,
                correct: predicted == target,
            });
        }
    }
    let n = outcomes.len() as f64;
    let correct = outcomes.iter().filter(|o| o.correct).count() as f64;
    Ok(EvalResult {
        accuracy: correct / n,
        loss: loss_sum / n,
        outcomes,
    })
}

fn cross_entropy_f64(logits: &[f32], target: u32) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = max + logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize] as f64
}

/// Mean loss and per-parameter gradients for one batch.
///
/// The batch is cut into `shards` contiguous pieces whose gradients are
/// weighted by piece size and summed in piece order, so the result depends
/// on `shards` but not on `workers`.
pub fn compute_gradients(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    inputs: &[u32],
    targets: &[u32],
    shards: usize,
    workers: usize,
) -> Result<(f32, Vec<Vec<f32>>)> {
    let n = targets.len();
    let per = n.div_ceil(shards.max(1));
    let pieces: Vec<(usize, usize)> = (0..n).step_by(per).map(|s| (s, (s + per).min(n))).collect();
    let run = |&(s, e): &(usize, usize)| -> Result<(f32, Vec<Vec<f32>>)> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let (loss, _) = batch_loss(&mut tape, &vars, config, &inputs[s * SEQ_LEN..e * SEQ_LEN], &targets[s..e])?;
        let l = tape.value(loss).item();
        tape.backward(loss);
        Ok((l, params.grads_from(&mut tape, &vars)))
    };
    if pieces.len() == 1 {
        return run(&pieces[0]);
    }
    let workers = workers.clamp(1, pieces.len());
    let mut results: Vec<Option<Result<(f32, Vec<Vec<f32>>)>>> = (0..pieces.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, p) in results.iter_mut().zip(&pieces) {
            *slot = Some(run(p));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let pieces = &pieces;
                    let run = &run;
                    scope.spawn(move || {
                        (w..pieces.len())
                            .step_by(workers)
                            .map(|i| (i, run(&pieces[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("gradient worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let mut loss = 0.0f32;
    let mut total: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for ((s, e), r) in pieces.iter().zip(results) {
        let (l, g) = r.expect("every shard computed")?;
        let w = (e - s) as f32 / n as f32;
        loss += w * l;
        for (acc, gi) in total.iter_mut().zip(g) {
            for (a, x) in acc.iter_mut().zip(gi) {
                *a += w * x;
            }
        }
    }
    Ok((loss, total))
}

/// Where a run left its artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    /// Every row now in the metrics file.
    pub rows: Vec<MetricsRow>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:09}.ckpt"))
}

pub fn optimizer_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:09}.adam"))
}

/// Latest checkpoint step in `out_dir` not beyond `max_step`.
pub fn latest_checkpoint(out_dir: &Path, max_step: u64) -> Result<Option<u64>> {
    let dir = out_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let name = entry.map_err(|e| Error::io(&dir, e))?.file_name();
        let name = name.to_string_lossy();
        let step = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(s) = step.filter(|&s| s <= max_step) {
            if optimizer_path(out_dir, s).exists() {
                best = best.max(Some(s));
            }
        }
    }
    Ok(best)
}

#[derive(Serialize)]
struct RunManifest<'a, D: Serialize> {
    kind: &'static str,
    version: &'static str,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    pool_size: usize,
    data: D,
}

struct RunState {
    params: ModelParams<f32>,
    adam: AdamState<f32>,
    start_step: u64,
    clock_offset: f64,
}

/// Loads the resume point if asked and available, else uses `fresh`.
fn prepare_run(
    out_dir: &Path,
    model: &ModelConfig,
    train: &TrainConfig,
    resume: bool,
    fresh: impl FnOnce() -> Result<ModelParams<f32>>,
) -> Result<RunState> {
    let metrics_path = out_dir.join("metrics.csv");
    fs::create_dir_all(out_dir.join("checkpoints")).map_err(|e| Error::io(out_dir, e))?;
    if resume {
        if let Some(step) = latest_checkpoint(out_dir, train.steps)? {
            let ck = load_checkpoint(&checkpoint_path(out_dir, step))?;
            if ck.config != *model {
                return Err(Error::Config(format!(
                    "checkpoint at step {step} was written with a different model config"
                )));
            }
            let (adam, opt_step) = optim::load_optimizer(&optimizer_path(out_dir, step), &PARAM_NAMES)?;
            if opt_step != step {
                return Err(Error::Corrupt {
                    path: optimizer_path(out_dir, step),
                    msg: format!("optimizer state is for step {opt_step}, checkpoint for {step}"),
                });
            }
            let rows = if metrics_path.exists() {
                metrics::truncate_metrics(&metrics_path, step)?
            } else {
                Vec::new()
            };
            log::info!("resuming from step {step}");
            return Ok(RunState {
                params: ck.params,
                adam,
                start_step: step,
                clock_offset: rows.last().map_or(0.0, |r| r.wall_clock_seconds),
            });
        }
    }
    if metrics_path.exists() {
        if !resume {
            return Err(Error::Config(format!(
                "{} already holds a run; resume it or choose another out_dir",
                out_dir.display()
            )));
        }
        fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let params = fresh()?;
    let adam = AdamState::zeros(params.tensors().iter().map(|t| t.len()));
    Ok(RunState {
        params,
        adam,
        start_step: 0,
        clock_offset: 0.0,
    })
}

fn write_manifest<D: Serialize>(out_dir: &Path, manifest: &RunManifest<'_, D>) -> Result<()> {
    let path = out_dir.join("run.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn run_loop<E>(
    out_dir: &Path,
    model: &ModelConfig,
    train: &TrainConfig,
    pool: &[EncodedExample],
    forbidden: &HashSet<[u32; SEQ_LEN]>,
    mut state: RunState,
    mut eval: E,
) -> Result<RunOutcome>
where
    E: FnMut(&ModelParams<f32>) -> Result<MetricsRow>,
{
    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::open(&metrics_path)?;
    let clock = Instant::now();
    let elapsed = |offset: f64| offset + clock.elapsed().as_secs_f64();
    let mut emit = |params: &ModelParams<f32>, step: u64, writer: &mut MetricsWriter| -> Result<()> {
        let mut row = eval(params)?;
        row.step = step;
        row.wall_clock_seconds = elapsed(state.clock_offset);
        log::info!(
            "step {step}: loss {:.4} train {:.3} ood {:?} bridge|correct {:?}",
            row.train_loss,
            row.train_accuracy,
            row.ood_accuracy,
            row.bridge_rate_among_correct
        );
        writer.append(&row)
    };
    if state.start_step == 0 {
        emit(&state.params, 0, &mut writer)?;
    }
    let batcher = crate::encoding::Batcher::new(pool, train.batch_size, train.seed)?;
    let optim = train.optim();
    let save = |params: &ModelParams<f32>, adam: &AdamState<f32>, step: u64| -> Result<()> {
        save_checkpoint(&checkpoint_path(out_dir, step), model, params, step)?;
        optim::save_optimizer(&optimizer_path(out_dir, step), &PARAM_NAMES, adam, step)
    };
    for step in state.start_step..train.steps {
        let batch = batcher.batch(step);
        debug_assert!(
            batch
                .inputs
                .chunks(SEQ_LEN)
                .all(|c| !forbidden.contains(&[c[0], c[1], c[2]])),
            "held-out evaluation query sampled into batch {step}"
        );
        let (loss, grads) = compute_gradients(
            &state.params,
            model,
            &batch.inputs,
            &batch.targets,
            train.grad_shards,
            train.workers,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                name: "loss".into(),
            });
        }
        let mut tensors = state.params.tensors_mut();
        optimizer_step(&mut tensors, &PARAM_NAMES, &grads, &mut state.adam, &optim, step)?;
        let done = step + 1;
        if done % train.eval_interval == 0 || done == train.steps {
            emit(&state.params, done, &mut writer)?;
        }
        if done % train.checkpoint_interval == 0 || done == train.steps {
            save(&state.params, &state.adam, done)?;
        }
    }
    let final_checkpoint = checkpoint_path(out_dir, train.steps);
    if !final_checkpoint.exists() {
        save(&state.params, &state.adam, train.steps)?;
    }
    Ok(RunOutcome {
        final_checkpoint,
        rows: read_metrics(&metrics_path)?,
        metrics_path,
    })
}

fn encode_set(vocab: &Vocab, qs: &[CompositionQuery]) -> Result<Vec<EncodedExample>> {
    vocab.encode_compositions(qs)
}

fn inputs_of(examples: &[EncodedExample]) -> HashSet<[u32; SEQ_LEN]> {
    examples.iter().map(|e| e.input).collect()
}

fn check_training_precision(model: &ModelConfig) -> Result<()> {
    if model.precision != Precision::F32 {
        return Err(Error::Config("training runs in f32; precision must be f32".into()));
    }
    model.validate()
}

/// Accuracy on an optional set, `None` when the set is empty.
fn maybe_accuracy(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    set: &[EncodedExample],
    num_entities: usize,
    sample: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(params, model, set, num_entities, sample, seed)?.accuracy))
}

fn probe_stats(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    vocab: &Vocab,
    queries: &[CompositionQuery],
) -> Result<Option<CircuitStats>> {
    if queries.is_empty() {
        return Ok(None);
    }
    let records = trace_queries(params, model, queries, vocab, &ProbeConfig::for_model(model), EVAL_CHUNK)?;
    circuit_stats(&records).map(Some)
}

fn probe_subset(queries: &[CompositionQuery], size: usize, seed: u64) -> Vec<CompositionQuery> {
    sample_indices(queries.len(), size, seed, streams::PROBE)
        .into_iter()
        .map(|i| queries[i])
        .collect()
}

/// Pretraining on a dataset bundle.
///
/// The pool is every atomic fact plus the bundle's training compositions.
/// With `resume`, continues from the latest checkpoint in `out_dir`.
pub fn train_run(
    bundle: &DatasetBundle,
    model: &ModelConfig,
    train: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<RunOutcome> {
    train.validate()?;
    check_training_precision(model)?;
    if bundle.regime != train.regime {
        return Err(Error::Config(format!(
            "bundle regime {} does not match configured regime {}",
            bundle.regime.name(),
            train.regime.name()
        )));
    }
    let vocab = Vocab::from_spec(&bundle.spec);
    if vocab.size() != model.vocab_size {
        return Err(Error::Config(format!(
            "bundle vocabulary has {} tokens, model expects {}",
            vocab.size(),
            model.vocab_size
        )));
    }
    let mut pool = vocab.encode_atomics(bundle.facts.facts())?;
    let comps: Vec<CompositionQuery> = bundle.training_queries().copied().collect();
    pool.extend(encode_set(&vocab, &comps)?);

    let eval_ood = encode_set(&vocab, &bundle.eval_ood)?;
    let forbidden = inputs_of(&eval_ood);
    if pool.iter().any(|e| forbidden.contains(&e.input)) {
        return Err(Error::Config("training pool contains eval_ood queries".into()));
    }
    let id_held = encode_set(&vocab, &bundle.eval_id_held)?;
    let hop1 = encode_set(&vocab, &bundle.eval_ood_hop1)?;
    let hop2 = encode_set(&vocab, &bundle.eval_ood_hop2)?;
    let probe_set = probe_subset(&bundle.eval_ood, train.probe_sample_size, train.seed);

    write_manifest(
        out_dir_ready(out_dir)?,
        &RunManifest {
            kind: "pretrain",
            version: env!("CARGO_PKG_VERSION"),
            model,
            train,
            pool_size: pool.len(),
            data: serde_json::json!({
                "spec": bundle.spec,
                "regime": bundle.regime,
                "per_fact_count": bundle.per_fact_count,
                "eval_ood": bundle.eval_ood.len(),
                "eval_id_held": bundle.eval_id_held.len(),
            }),
        },
    )?;

    let state = prepare_run(out_dir, model, train, resume, || ModelParams::init(model))?;
    let ne = vocab.num_entities();
    let (s, n) = (train.seed, train.eval_sample_size);
    let eval = |p: &ModelParams<f32>| -> Result<MetricsRow> {
        let tr = evaluate(p, model, &pool, ne, n, s)?;
        let stats = probe_stats(p, model, &vocab, &probe_set)?;
        Ok(MetricsRow {
            train_loss: tr.loss,
            train_accuracy: tr.accuracy,
            id_test_accuracy: maybe_accuracy(p, model, &id_held, ne, n, s.wrapping_add(1))?,
            ood_accuracy: maybe_accuracy(p, model, &eval_ood, ne, n, s.wrapping_add(2))?,
            bridge_rate_among_correct: stats.map(|c| c.bridge_rate_among_correct),
            bridge_rate_overall: stats.map(|c| c.bridge_rate_overall),
            ood_hop1_accuracy: maybe_accuracy(p, model, &hop1, ne, n, s.wrapping_add(3))?,
            ood_hop2_accuracy: maybe_accuracy(p, model, &hop2, ne, n, s.wrapping_add(4))?,
            eval_sample_size: n,
            probe_sample_size: probe_set.len(),
            ..Default::default()
        })
    };
    run_loop(out_dir, model, train, &pool, &forbidden, state, eval)
}

fn out_dir_ready(out_dir: &Path) -> Result<&Path> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(out_dir)
}

/// Continues training a checkpoint on a finetune bundle.
///
/// The pool is retained and new atomic facts plus the bundle's training
/// compositions; the new-fact composition sets are evaluated and probed.
pub fn finetune_run(
    checkpoint: &Path,
    bundle: &FinetuneBundle,
    train: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<RunOutcome> {
    train.validate()?;
    let base = load_checkpoint(checkpoint)?;
    let model = base.config;
    check_training_precision(&model)?;
    let vocab = Vocab::from_spec(&bundle.spec);
    if vocab.size() != model.vocab_size {
        return Err(Error::Config(format!(
            "finetune vocabulary has {} tokens but the checkpoint was trained with {}",
            vocab.size(),
            model.vocab_size
        )));
    }
    let retained = vocab.encode_atomics(&bundle.retained_atomic)?;
    let mut pool = retained.clone();
    pool.extend(vocab.encode_atomics(&bundle.new_atomic)?);
    pool.extend(encode_set(&vocab, &bundle.train_compositional)?);
    let new_sets = [
        encode_set(&vocab, &bundle.eval_new_hop1)?,
        encode_set(&vocab, &bundle.eval_new_hop2)?,
        encode_set(&vocab, &bundle.eval_new_both)?,
    ];
    let forbidden: HashSet<[u32; SEQ_LEN]> = new_sets.iter().flat_map(|s| inputs_of(s)).collect();
    if pool.iter().any(|e| forbidden.contains(&e.input)) {
        return Err(Error::Config("finetune pool contains held-out new-fact compositions".into()));
    }
    let probe_sets = [
        probe_subset(&bundle.eval_new_hop1, train.probe_sample_size, train.seed),
        probe_subset(&bundle.eval_new_hop2, train.probe_sample_size, train.seed.wrapping_add(1)),
        probe_subset(&bundle.eval_new_both, train.probe_sample_size, train.seed.wrapping_add(2)),
    ];

    write_manifest(
        out_dir_ready(out_dir)?,
        &RunManifest {
            kind: "finetune",
            version: env!("CARGO_PKG_VERSION"),
            model: &model,
            train,
            pool_size: pool.len(),
            data: serde_json::json!({
                "base_checkpoint": checkpoint.display().to_string(),
                "base_step": base.step,
                "spec": bundle.spec,
                "finetune_seed": bundle.seed,
                "retained_atomic": bundle.retained_atomic.len(),
                "new_atomic": bundle.new_atomic.len(),
            }),
        },
    )?;

    let state = prepare_run(out_dir, &model, train, resume, || Ok(base.params))?;
    let ne = vocab.num_entities();
    let (s, n) = (train.seed, train.eval_sample_size);
    let eval = |p: &ModelParams<f32>| -> Result<MetricsRow> {
        let tr = evaluate(p, &model, &pool, ne, n, s)?;
        let acc = |i: usize| maybe_accuracy(p, &model, &new_sets[i], ne, n, s.wrapping_add(10 + i as u64));
        let rate = |i: usize| -> Result<Option<f64>> {
            Ok(probe_stats(p, &model, &vocab, &probe_sets[i])?.map(|c| c.bridge_rate_among_correct))
        };
        Ok(MetricsRow {
            train_loss: tr.loss,
            train_accuracy: tr.accuracy,
            new_hop1_accuracy: acc(0)?,
            new_hop2_accuracy: acc(1)?,
            new_both_accuracy: acc(2)?,
            new_hop1_bridge_rate: rate(0)?,
            new_hop2_bridge_rate: rate(1)?,
            new_both_bridge_rate: rate(2)?,
            retained_accuracy: maybe_accuracy(p, &model, &retained, ne, n, s.wrapping_add(13))?,
            eval_sample_size: n,
            probe_sample_size: train.probe_sample_size,
            ..Default::default()
        })
    };
    run_loop(out_dir, &model, train, &pool, &forbidden, state, eval)
}
