use std::collections::BTreeSet;

use rand::seq::index;

use super::{AtomicFact, CompositionQuery, EntityId, FactTable, RelationId, SplitLabel};
use crate::error::{Error, Hop, Result};
use crate::rng::{round_half_up, stream_rng, streams};

/// Every chain `(h, r1, b) ∧ (b, r2, t)` in the table, in fact order.
///
/// `labels` is indexed by fact position.
pub fn enumerate_compositions(facts: &FactTable, labels: &[SplitLabel]) -> Vec<CompositionQuery> {
    assert_eq!(labels.len(), facts.len(), "one label per fact");
    let mut out = Vec::new();
    for (i, first) in facts.facts().iter().enumerate() {
        for &j in facts.outgoing(first.tail) {
            let second = facts.get(j);
            out.push(CompositionQuery {
                head: first.head,
                r1: first.relation,
                r2: second.relation,
                bridge: first.tail,
                tail: second.tail,
                hop1_label: labels[i],
                hop2_label: labels[j],
            });
        }
    }
    out
}

/// Result of phi-sampling the ID-only composition pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiSample {
    pub train_inferred: Vec<CompositionQuery>,
    pub held_out: Vec<CompositionQuery>,
}

/// Draws `round(phi * atomic_id_count)` ID-only compositions uniformly
/// without replacement; the rest of the ID-only pool is held out.
pub fn sample_train_inferred(
    compositions: &[CompositionQuery],
    phi: f64,
    atomic_id_count: usize,
    seed: u64,
) -> Result<PhiSample> {
    let pool: Vec<CompositionQuery> = compositions
        .iter()
        .filter(|q| q.ood_hops() == 0)
        .copied()
        .collect();
    let requested = round_half_up(phi * atomic_id_count as f64);
    if requested > pool.len() {
        return Err(Error::Sizing {
            what: format!(
                "ID-only composition pool for phi={phi} x {atomic_id_count} ID facts"
            ),
            requested,
            available: pool.len(),
        });
    }
    let mut rng = stream_rng(seed, streams::PHI_SAMPLE);
    let mut chosen = vec![false; pool.len()];
    for i in index::sample(&mut rng, pool.len(), requested) {
        chosen[i] = true;
    }
    let (train, held): (Vec<_>, Vec<_>) = pool.into_iter().zip(chosen).partition(|(_, c)| *c);
    Ok(PhiSample {
        train_inferred: train.into_iter().map(|(q, _)| q).collect(),
        held_out: held.into_iter().map(|(q, _)| q).collect(),
    })
}

/// OOD evaluation sets: the canonical both-hops-OOD set plus the two
/// single-OOD-hop diagnostic sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOodSets {
    pub both: Vec<CompositionQuery>,
    pub hop1_only: Vec<CompositionQuery>,
    pub hop2_only: Vec<CompositionQuery>,
}

pub fn build_eval_ood(compositions: &[CompositionQuery]) -> EvalOodSets {
    let mut sets = EvalOodSets::default();
    for q in compositions {
        match (q.hop1_label, q.hop2_label) {
            (SplitLabel::Ood, SplitLabel::Ood) => sets.both.push(*q),
            (SplitLabel::Ood, SplitLabel::Id) => sets.hop1_only.push(*q),
            (SplitLabel::Id, SplitLabel::Ood) => sets.hop2_only.push(*q),
            (SplitLabel::Id, SplitLabel::Id) => {}
        }
    }
    sets
}

/// The OOD facts that occur at hop 1 and at hop 2 of the evaluation queries.
pub fn extract_ood_hop_facts(
    eval_ood: &[CompositionQuery],
    facts: &FactTable,
) -> (BTreeSet<AtomicFact>, BTreeSet<AtomicFact>) {
    let mut first = BTreeSet::new();
    let mut second = BTreeSet::new();
    for q in eval_ood {
        let (h1, h2) = (q.hop1(), q.hop2());
        debug_assert!(facts.find(&h1).is_some() && facts.find(&h2).is_some());
        if q.hop1_label == SplitLabel::Ood {
            first.insert(h1);
        }
        if q.hop2_label == SplitLabel::Ood {
            second.insert(h2);
        }
    }
    (first, second)
}

/// Answers `(head, r1, r2)` by two table lookups, returning `(bridge, tail)`.
pub fn oracle_answer(
    head: EntityId,
    r1: RelationId,
    r2: RelationId,
    facts: &FactTable,
) -> Result<(EntityId, EntityId)> {
    let bridge = facts.tail_of(head, r1).ok_or(Error::NoPath {
        hop: Hop::First,
        entity: head.0,
        relation: r1.0,
    })?;
    let tail = facts.tail_of(bridge, r2).ok_or(Error::NoPath {
        hop: Hop::Second,
        entity: bridge.0,
        relation: r2.0,
    })?;
    Ok((bridge, tail))
}
