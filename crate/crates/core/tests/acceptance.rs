//! Acceptance criteria. Prints one `ACCEPTANCE <n> PASS|FAIL|NOT RUN` line
//! per criterion and exits non-zero if any criterion fails.
//!
//! Criteria 6 to 9 train desk-scale models for 150k to 500k steps per seed
//! and report NOT RUN unless `CIRCUITLAB_ACCEPTANCE_FULL` is set:
//! `CIRCUITLAB_ACCEPTANCE_FULL=1 cargo test --release --test acceptance`.
//! Their runs are kept under `CIRCUITLAB_ACCEPTANCE_DIR` (default: the
//! cargo target tmp dir) and resumed when present.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::panic;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::Rng;

use circuitlab::encoding::Vocab;
use circuitlab::error::Hop;
use circuitlab::experiments::{first_crossing, Metric, DESK_FINETUNE_NEW, DESK_FINETUNE_RETAIN};
use circuitlab::kg::{
    build_base_bundle, build_finetune_bundle, build_regime, enumerate_compositions, oracle_answer, AtomicFact,
    DatasetBundle, EntityId, GraphSpec, Regime, RelationId, SplitLabel,
};
use circuitlab::model::ModelConfig;
use circuitlab::rng::stream_rng;
use circuitlab::trainer::{finetune_run, train_run, MetricsRow, RunOutcome, TrainConfig};
use circuitlab::Error;

// Pinned thresholds.
const PAPER_FACTS: usize = 40_000;
const PAPER_OOD: usize = 2_000;
const PAPER_ID: usize = 38_000;
const PAPER_TRAIN_INFERRED: usize = 684_000;
const C1_BUDGET: Duration = Duration::from_secs(5 * 60);
const C2_SEEDS: u64 = 5;
const C2_BUDGET: Duration = Duration::from_secs(60);
const C3_COMPOSITIONS: usize = 1_000;
const C3_BROKEN: usize = 100;
const C3_BUDGET: Duration = Duration::from_secs(60);
const C4_SOFTMAX_TOL: f64 = 1e-12;
const C4_BUDGET: Duration = Duration::from_secs(2 * 60);
const C5_STEPS: u64 = 1_000;
const C5_BUDGET: Duration = Duration::from_secs(10 * 60);
const C6_STEPS: u64 = 150_000;
const C6_OOD: f64 = 0.9;
const C6_BRIDGE: f64 = 0.9;
const C7_STEPS: u64 = 500_000;
const C7_SATURATION: f64 = 0.99;
const C7_OOD: f64 = 0.5;
const C7_GAP: f64 = 2.0;
const C8_OOD: f64 = 0.7;
const C8_MARGIN: f64 = 0.3;
const C9_STEPS: u64 = 20_000;
const C9_HOP1: f64 = 0.7;
const C9_ASYMMETRY: f64 = 0.2;
const C9_FAKE_GAP: f64 = 0.2;
const C9_RETAIN: f64 = 0.95;
const SEEDS: [u64; 3] = [0, 1, 2];
const SEEDS_REQUIRED: usize = 2;

static FAILED: AtomicBool = AtomicBool::new(false);

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!("ACCEPTANCE {n} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    if !pass {
        FAILED.store(true, Ordering::SeqCst);
    }
}

fn criterion_1_paper_scale_counts() {
    let t = Instant::now();
    let b = build_base_bundle(&GraphSpec::paper_scale(0)).unwrap();
    let elapsed = t.elapsed();
    let got = (b.facts.len(), b.ood_fact_count(), b.id_fact_count(), b.train_inferred.len());
    let pass = got == (PAPER_FACTS, PAPER_OOD, PAPER_ID, PAPER_TRAIN_INFERRED) && elapsed < C1_BUDGET;
    verdict(
        1,
        "dataset fidelity",
        pass,
        &format!(
            "facts/ood/id/train_inferred = {got:?}, expected ({PAPER_FACTS}, {PAPER_OOD}, {PAPER_ID}, {PAPER_TRAIN_INFERRED}); {elapsed:.1?}"
        ),
    );
}

/// OOD facts used at `hop` by the test set, found by a direct scan.
fn test_hop_facts(b: &DatasetBundle, hop: Hop) -> BTreeSet<AtomicFact> {
    b.eval_ood
        .iter()
        .map(|q| match hop {
            Hop::First => AtomicFact::new(q.head.0, q.r1.0, q.bridge.0),
            Hop::Second => AtomicFact::new(q.bridge.0, q.r2.0, q.tail.0),
        })
        .collect()
}

fn has_id_partner(b: &DatasetBundle, f: &AtomicFact, hop: Hop) -> bool {
    b.facts.facts().iter().any(|g| {
        let linked = match hop {
            Hop::First => g.head == f.tail,
            Hop::Second => g.tail == f.head,
        };
        linked && b.label_of(g) == Some(SplitLabel::Id)
    })
}

fn criterion_2_augmentation_properties() {
    let t = Instant::now();
    let mut problems = Vec::new();
    let mut checked = 0;
    for seed in 0..C2_SEEDS {
        let base = build_base_bundle(&GraphSpec::desk_scale(seed)).unwrap();
        for regime in Regime::ALL {
            let b = build_regime(&base, regime, 1, seed);
            checked += 1;
            let eval: HashSet<_> = b.eval_ood.iter().map(|q| q.key()).collect();
            for q in b.training_queries() {
                let ood = [q.hop1(), q.hop2()]
                    .iter()
                    .filter(|f| b.label_of(f) == Some(SplitLabel::Ood))
                    .count();
                if ood > 1 {
                    problems.push(format!("seed {seed} {regime}: {q:?} has {ood} OOD hops"));
                }
                if eval.contains(&q.key()) {
                    problems.push(format!("seed {seed} {regime}: {q:?} is also in eval_ood"));
                }
            }
            let (hop1_covered, hop2_covered): (HashSet<_>, HashSet<_>) = (
                b.augmentation.iter().map(|q| q.hop1()).collect(),
                b.augmentation.iter().map(|q| q.hop2()).collect(),
            );
            let wanted = [
                (Hop::First, matches!(regime, Regime::Hop1Full | Regime::BothFull), &hop1_covered),
                (Hop::Second, matches!(regime, Regime::Hop2Full | Regime::BothFull), &hop2_covered),
            ];
            for (hop, injected, covered) in wanted {
                if !injected {
                    continue;
                }
                for f in test_hop_facts(&b, hop) {
                    if has_id_partner(&b, &f, hop) && !covered.contains(&f) {
                        problems.push(format!("seed {seed} {regime}: {hop} fact {f:?} not injected"));
                    }
                }
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = problems.is_empty() && elapsed < C2_BUDGET;
    verdict(
        2,
        "augmentation properties",
        pass,
        &format!(
            "{checked} bundles, {} problems{}; {elapsed:.1?}",
            problems.len(),
            problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    );
}

fn criterion_3_oracle_equivalence() {
    let t = Instant::now();
    let mut mismatches = 0;
    let mut wrong_errors = 0;
    let mut checked = (0, 0);
    for seed in 0..C2_SEEDS {
        let spec = GraphSpec::desk_scale(seed);
        let base = build_base_bundle(&spec).unwrap();
        let comps = enumerate_compositions(&base.facts, &base.labels);
        let mut rng = stream_rng(seed, 999);
        for _ in 0..C3_COMPOSITIONS {
            let q = comps[rng.random_range(0..comps.len())];
            checked.0 += 1;
            if oracle_answer(q.head, q.r1, q.r2, &base.facts).ok() != Some((q.bridge, q.tail)) {
                mismatches += 1;
            }
        }
        let missing = |e: EntityId, rng: &mut rand_chacha::ChaCha8Rng| loop {
            let r = RelationId(rng.random_range(0..spec.num_relations as u32));
            if base.facts.tail_of(e, r).is_none() {
                return r;
            }
        };
        for i in 0..C3_BROKEN {
            checked.1 += 1;
            let head = EntityId(rng.random_range(0..spec.num_entities as u32));
            let (r1, r2, hop) = if i % 2 == 0 {
                (missing(head, &mut rng), RelationId(0), Hop::First)
            } else {
                let f = base.facts.get(base.facts.outgoing(head)[0]);
                (f.relation, missing(f.tail, &mut rng), Hop::Second)
            };
            match oracle_answer(head, r1, r2, &base.facts) {
                Err(Error::NoPath { hop: h, .. }) if h == hop => {}
                _ => wrong_errors += 1,
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = mismatches == 0 && wrong_errors == 0 && elapsed < C3_BUDGET;
    verdict(
        3,
        "oracle equivalence",
        pass,
        &format!(
            "{} compositions ({mismatches} mismatches), {} broken queries ({wrong_errors} wrong errors); {elapsed:.1?}",
            checked.0, checked.1
        ),
    );
}

fn criterion_4_numeric_correctness() {
    use circuitlab::tensor::Tape;
    let t = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut all = common::primitive_checks();
    all.push(("tiny model loss", common::tiny_model_check()));
    for (name, r) in &all {
        if r.max_rel_error > worst.1 {
            worst = (name, r.max_rel_error);
        }
    }

    let mut softmax_dev = 0.0f64;
    let mut mask_violations = 0;
    for seed in 0..10 {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(common::randn(&[8, 50], 5.0, seed));
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(50) {
            softmax_dev = softmax_dev.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let q = tape.leaf(common::randn(&[12, 8], 3.0, seed + 50));
        let k = tape.leaf(common::randn(&[12, 8], 3.0, seed + 60));
        let v = tape.leaf(common::randn(&[12, 8], 3.0, seed + 70));
        let a = tape.attention_mix(q, k, v, 3, 2).unwrap();
        for block in tape.attention_probs(a).unwrap().chunks(9) {
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                if block[i * 3 + j] != 0.0 {
                    mask_violations += 1;
                }
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = worst.1 < common::FD_MAX_REL && softmax_dev < C4_SOFTMAX_TOL && mask_violations == 0 && elapsed < C4_BUDGET;
    verdict(
        4,
        "numeric correctness",
        pass,
        &format!(
            "{} gradient checks, worst rel. err {:.2e} ({}); softmax row-sum deviation {softmax_dev:.1e}; {mask_violations} mask violations; {elapsed:.1?}",
            all.len(),
            worst.1,
            worst.0
        ),
    );
}

fn tiny_setup() -> (DatasetBundle, ModelConfig, TrainConfig) {
    let spec = GraphSpec {
        num_entities: 40,
        num_relations: 8,
        out_degree: 4,
        ood_fraction: 0.1,
        phi: 2.0,
        seed: 11,
    };
    let bundle = build_regime(&build_base_bundle(&spec).unwrap(), Regime::BothFull, 1, 11);
    let model = ModelConfig {
        model_dim: 16,
        num_heads: 2,
        mlp_dim: 32,
        num_iterations: 3,
        ..ModelConfig::desk_default(Vocab::from_spec(&spec).size(), 4)
    };
    let train = TrainConfig {
        steps: C5_STEPS,
        batch_size: 32,
        warmup_steps: 50,
        eval_interval: 100,
        eval_sample_size: 100,
        probe_sample_size: 30,
        checkpoint_interval: 250,
        seed: 4,
        regime: Regime::BothFull,
        ..Default::default()
    };
    (bundle, model, train)
}

fn clockless(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter().map(MetricsRow::without_clock).collect()
}

fn criterion_5_determinism_and_resume() {
    let t = Instant::now();
    let (bundle, model, train) = tiny_setup();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = train_run(&bundle, &model, &train, dirs[0].path(), false).unwrap();
    let b = train_run(&bundle, &model, &train, dirs[1].path(), false).unwrap();
    let replay = clockless(&a.rows) == clockless(&b.rows);

    let half = TrainConfig {
        steps: C5_STEPS / 2,
        ..train.clone()
    };
    train_run(&bundle, &model, &half, dirs[2].path(), false).unwrap();
    let resumed = train_run(&bundle, &model, &train, dirs[2].path(), true).unwrap();
    let same_final = a.rows.last().map(MetricsRow::without_clock) == resumed.rows.last().map(MetricsRow::without_clock);
    let elapsed = t.elapsed();
    let pass = replay && same_final && a.rows.len() == 11 && elapsed < C5_BUDGET;
    verdict(
        5,
        "determinism and resume",
        pass,
        &format!(
            "{} rows over {C5_STEPS} steps replay {}; resume at {} gives {} final row; {elapsed:.1?}",
            a.rows.len(),
            if replay { "bit-identically" } else { "DIFFERENTLY" },
            C5_STEPS / 2,
            if same_final { "an identical" } else { "a DIFFERENT" }
        ),
    );
}

// Desk-scale runs shared by criteria 6 to 9.

fn run_root() -> PathBuf {
    std::env::var_os("CIRCUITLAB_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn desk_bundle(spec: &GraphSpec, regime: Regime) -> DatasetBundle {
    build_regime(&build_base_bundle(spec).unwrap(), regime, 1, spec.seed)
}

fn desk_run(spec: &GraphSpec, regime: Regime, seed: u64, steps: u64) -> RunOutcome {
    let bundle = desk_bundle(spec, regime);
    let model = ModelConfig::desk_default(Vocab::from_spec(spec).size(), seed);
    let train = TrainConfig {
        steps,
        seed,
        regime,
        ..Default::default()
    };
    let dir = run_root().join(format!(
        "{}-d{}-phi{}-s{seed}-{steps}",
        regime.name(),
        spec.out_degree,
        spec.phi
    ));
    train_run(&bundle, &model, &train, &dir, true).unwrap()
}

/// First row where OOD accuracy and bridge rate both clear their bars.
fn circuit_row(rows: &[MetricsRow]) -> Option<&MetricsRow> {
    rows.iter().find(|r| {
        r.ood_accuracy.is_some_and(|a| a >= C6_OOD) && r.bridge_rate_among_correct.is_some_and(|b| b >= C6_BRIDGE)
    })
}

fn criterion_6_desk_circuit_formation() {
    let spec = GraphSpec::desk_scale(0);
    let mut passing = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let out = desk_run(&spec, Regime::BothFull, seed, C6_STEPS);
        match circuit_row(&out.rows) {
            Some(r) => {
                passing += 1;
                notes.push(format!("seed {seed}: step {}", r.step));
            }
            None => {
                let last = out.rows.last().unwrap();
                notes.push(format!(
                    "seed {seed}: not reached (final ood {:?}, bridge {:?})",
                    last.ood_accuracy, last.bridge_rate_among_correct
                ));
            }
        }
    }
    verdict(
        6,
        "desk circuit formation",
        passing >= SEEDS_REQUIRED,
        &format!("{passing}/{} seeds; {}", SEEDS.len(), notes.join("; ")),
    );
}

/// Saturation step, first step with OOD >= 0.5, and their ratio.
fn grokking_gap(rows: &[MetricsRow]) -> (Option<u64>, Option<u64>, Option<f64>) {
    let sat = first_crossing(rows, Metric::TrainAccuracy, C7_SATURATION).map(|r| r.step);
    let ood = first_crossing(rows, Metric::OodAccuracy, C7_OOD).map(|r| r.step);
    let ratio = match (sat, ood) {
        (Some(s), Some(o)) if s > 0 => Some(o as f64 / s as f64),
        _ => None,
    };
    (sat, ood, ratio)
}

fn criterion_7_desk_grokking_gap() {
    let evaluate = |spec: &GraphSpec| {
        let mut grokked = 0;
        let mut crossed = 0;
        let mut notes = Vec::new();
        for seed in SEEDS {
            let out = desk_run(spec, Regime::Natural, seed, C7_STEPS);
            let (sat, ood, ratio) = grokking_gap(&out.rows);
            if ood.is_some() {
                crossed += 1;
            }
            if ratio.is_some_and(|r| r >= C7_GAP) {
                grokked += 1;
            }
            notes.push(format!("seed {seed}: saturation {sat:?}, ood>=0.5 {ood:?}, ratio {ratio:?}"));
        }
        (grokked, crossed, notes)
    };
    let spec = GraphSpec::desk_scale(0);
    let (grokked, crossed, notes) = evaluate(&spec);
    if crossed > 0 {
        verdict(
            7,
            "desk grokking gap",
            grokked >= SEEDS_REQUIRED,
            &format!("phi {}: {grokked}/{} seeds grokked; {}", spec.phi, SEEDS.len(), notes.join("; ")),
        );
        return;
    }
    // No seed crossed; phi 9 nearly exhausts the desk composition pool, so
    // the higher-phi rerun doubles the out-degree to make room.
    println!("criterion 7: non-grokked at phi {} ({}); re-evaluating at higher phi", spec.phi, notes.join("; "));
    let higher = GraphSpec {
        out_degree: 20,
        phi: 18.0,
        ..spec
    };
    let (grokked, _, notes) = evaluate(&higher);
    verdict(
        7,
        "desk grokking gap",
        grokked >= SEEDS_REQUIRED,
        &format!(
            "non-grokked at phi {}; at phi {} (out-degree {}): {grokked}/{} seeds grokked; {}",
            spec.phi,
            higher.phi,
            higher.out_degree,
            SEEDS.len(),
            notes.join("; ")
        ),
    );
}

fn criterion_8_fake_grokking_dissociation() {
    let spec = GraphSpec::desk_scale(0);
    let mut passing = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let fake = desk_run(&spec, Regime::Hop2Full, seed, C6_STEPS);
        let real = desk_run(&spec, Regime::BothFull, seed, C6_STEPS);
        let f = first_crossing(&fake.rows, Metric::OodAccuracy, C8_OOD);
        let r = first_crossing(&real.rows, Metric::OodAccuracy, C8_OOD);
        match (f.and_then(|x| x.bridge_rate_among_correct), r.and_then(|x| x.bridge_rate_among_correct)) {
            (Some(fb), Some(rb)) => {
                if rb - fb >= C8_MARGIN {
                    passing += 1;
                }
                notes.push(format!("seed {seed}: hop2_full {fb:.3} vs both_full {rb:.3} at ood>={C8_OOD}"));
            }
            _ => notes.push(format!(
                "seed {seed}: ood>={C8_OOD} not reached (hop2_full at {:?}, both_full at {:?})",
                f.map(|x| x.step),
                r.map(|x| x.step)
            )),
        }
    }
    verdict(
        8,
        "fake-grokking dissociation",
        passing >= SEEDS_REQUIRED,
        &format!("{passing}/{} seeds; {}", SEEDS.len(), notes.join("; ")),
    );
}

fn criterion_9_transfer_asymmetry() {
    let spec = GraphSpec::desk_scale(0);
    let seed = SEEDS[0];
    let real = desk_run(&spec, Regime::BothFull, seed, C6_STEPS);
    let fake = desk_run(&spec, Regime::Hop2Full, seed, C6_STEPS);
    let fb = build_finetune_bundle(&build_base_bundle(&spec).unwrap(), DESK_FINETUNE_NEW, DESK_FINETUNE_RETAIN, seed)
        .unwrap();
    let train = TrainConfig {
        steps: C9_STEPS,
        eval_interval: 500,
        checkpoint_interval: 5_000,
        seed,
        ..Default::default()
    };
    let finetune = |base: &RunOutcome, tag: &str| {
        let dir = run_root().join(format!("finetune-{tag}-s{seed}-{C9_STEPS}"));
        finetune_run(&base.final_checkpoint, &fb, &train, &dir, true).unwrap()
    };
    let circuit = finetune(&real, "both_full");
    let faked = finetune(&fake, "hop2_full");

    let retained_ok = |rows: &[MetricsRow]| {
        let start = rows[0].retained_accuracy.unwrap_or(0.0);
        rows.iter().all(|r| r.retained_accuracy.unwrap_or(0.0) >= C9_RETAIN * start)
    };
    let Some(at) = first_crossing(&circuit.rows, Metric::NewHop1Accuracy, C9_HOP1) else {
        verdict(
            9,
            "transfer asymmetry",
            false,
            &format!(
                "eval_new_hop1 never reached {C9_HOP1} (final {:?})",
                circuit.rows.last().and_then(|r| r.new_hop1_accuracy)
            ),
        );
        return;
    };
    let hop1 = at.new_hop1_accuracy.unwrap();
    let hop2 = at.new_hop2_accuracy.unwrap_or(0.0);
    let fake_hop1 = faked
        .rows
        .iter()
        .find(|r| r.step == at.step)
        .and_then(|r| r.new_hop1_accuracy)
        .unwrap_or(0.0);
    let pass = hop1 - hop2 >= C9_ASYMMETRY
        && hop1 - fake_hop1 >= C9_FAKE_GAP
        && retained_ok(&circuit.rows)
        && retained_ok(&faked.rows);
    verdict(
        9,
        "transfer asymmetry",
        pass,
        &format!(
            "at step {}: new hop1 {hop1:.3}, new hop2 {hop2:.3}, fake-grokked hop1 {fake_hop1:.3}; retained guard {} / {}",
            at.step,
            retained_ok(&circuit.rows),
            retained_ok(&faked.rows)
        ),
    );
}

type Criterion = (u32, &'static str, fn(), Option<&'static str>);

const CRITERIA: [Criterion; 9] = [
    (1, "dataset fidelity", criterion_1_paper_scale_counts, None),
    (2, "augmentation properties", criterion_2_augmentation_properties, None),
    (3, "oracle equivalence", criterion_3_oracle_equivalence, None),
    (4, "numeric correctness", criterion_4_numeric_correctness, None),
    (5, "determinism and resume", criterion_5_determinism_and_resume, None),
    (6, "desk circuit formation", criterion_6_desk_circuit_formation, Some("3 seeds x 150k steps")),
    (7, "desk grokking gap", criterion_7_desk_grokking_gap, Some("3 seeds x 500k steps, possibly repeated at higher phi")),
    (8, "fake-grokking dissociation", criterion_8_fake_grokking_dissociation, Some("2 regimes x 3 seeds x 150k steps")),
    (9, "transfer asymmetry", criterion_9_transfer_asymmetry, Some("two 150k-step pretraining runs plus two finetunes")),
];

fn main() {
    let full = std::env::var_os("CIRCUITLAB_ACCEPTANCE_FULL").is_some();
    for (n, name, run, cost) in CRITERIA {
        if let (Some(cost), false) = (cost, full) {
            println!("ACCEPTANCE {n} NOT RUN {name}: needs desk-scale training ({cost}); set CIRCUITLAB_ACCEPTANCE_FULL=1");
            continue;
        }
        if let Err(e) = panic::catch_unwind(run) {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(n, name, false, &format!("panicked: {msg}"));
        }
    }
    if FAILED.load(Ordering::SeqCst) {
        std::process::exit(1);
    }
}
