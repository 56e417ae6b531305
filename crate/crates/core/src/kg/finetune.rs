//! Finetuning data: new facts on previously unused `(entity, relation)` pairs
//! plus a retained slice of the original ID facts.
//!
//! Within a finetune bundle, retained facts are labelled ID and new facts OOD:
//! new facts never appear in compositional finetuning supervision, which is
//! exactly what the OOD label means for the pretraining split.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::compose::enumerate_compositions;
use super::{AtomicFact, CompositionQuery, DatasetBundle, EntityId, FactTable, GraphSpec, RelationId, SplitLabel};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneBundle {
    /// Spec of the pretraining bundle; fixes the vocabulary.
    pub spec: GraphSpec,
    pub seed: u64,
    pub retained_atomic: Vec<AtomicFact>,
    pub new_atomic: Vec<AtomicFact>,
    /// Compositions whose two hops are both retained facts.
    pub train_compositional: Vec<CompositionQuery>,
    /// New fact at hop 1, retained fact at hop 2.
    pub eval_new_hop1: Vec<CompositionQuery>,
    /// Retained fact at hop 1, new fact at hop 2.
    pub eval_new_hop2: Vec<CompositionQuery>,
    /// New facts at both hops.
    pub eval_new_both: Vec<CompositionQuery>,
}

impl FinetuneBundle {
    /// Table of retained and new facts, with ID/OOD labels for retained/new.
    pub fn table(&self) -> Result<(FactTable, Vec<SplitLabel>)> {
        let facts: Vec<AtomicFact> = self
            .retained_atomic
            .iter()
            .chain(&self.new_atomic)
            .copied()
            .collect();
        let labels = std::iter::repeat_n(SplitLabel::Id, self.retained_atomic.len())
            .chain(std::iter::repeat_n(SplitLabel::Ood, self.new_atomic.len()))
            .collect();
        Ok((FactTable::new(self.spec.num_entities, facts)?, labels))
    }
}

pub fn build_finetune_bundle(
    bundle: &DatasetBundle,
    n_new: usize,
    n_retain: usize,
    seed: u64,
) -> Result<FinetuneBundle> {
    let spec = bundle.spec;
    if n_new > 0 && spec.out_degree >= spec.num_relations {
        return Err(Error::Sizing {
            what: "unused (entity, relation) pairs: every entity uses every relation".into(),
            requested: n_new,
            available: 0,
        });
    }
    let available = spec.num_entities * (spec.num_relations - spec.out_degree);
    if n_new > available {
        return Err(Error::Sizing {
            what: "unused (entity, relation) pairs".into(),
            requested: n_new,
            available,
        });
    }
    let id_facts: Vec<usize> = (0..bundle.facts.len())
        .filter(|&i| bundle.labels[i] == SplitLabel::Id)
        .collect();
    if n_retain > id_facts.len() {
        return Err(Error::Sizing {
            what: "original ID facts to retain".into(),
            requested: n_retain,
            available: id_facts.len(),
        });
    }

    let mut rng = stream_rng(seed, streams::FINETUNE);
    let new_atomic = sample_new_facts(&bundle.facts, &spec, n_new, &mut rng);
    let mut retained_idx: Vec<usize> = index::sample(&mut rng, id_facts.len(), n_retain)
        .into_iter()
        .map(|k| id_facts[k])
        .collect();
    retained_idx.sort_unstable();
    let retained_atomic: Vec<AtomicFact> =
        retained_idx.into_iter().map(|i| bundle.facts.get(i)).collect();

    let mut fb = FinetuneBundle {
        spec,
        seed,
        retained_atomic,
        new_atomic,
        train_compositional: Vec::new(),
        eval_new_hop1: Vec::new(),
        eval_new_hop2: Vec::new(),
        eval_new_both: Vec::new(),
    };
    let (table, labels) = fb.table()?;
    for q in enumerate_compositions(&table, &labels) {
        match (q.hop1_label, q.hop2_label) {
            (SplitLabel::Id, SplitLabel::Id) => fb.train_compositional.push(q),
            (SplitLabel::Ood, SplitLabel::Id) => fb.eval_new_hop1.push(q),
            (SplitLabel::Id, SplitLabel::Ood) => fb.eval_new_hop2.push(q),
            (SplitLabel::Ood, SplitLabel::Ood) => fb.eval_new_both.push(q),
        }
    }
    Ok(fb)
}

/// Visits entities in a shuffled round-robin, giving each visited entity one
/// fresh relation per round, so new facts spread evenly across entities.
fn sample_new_facts<R: Rng>(
    facts: &FactTable,
    spec: &GraphSpec,
    n_new: usize,
    rng: &mut R,
) -> Vec<AtomicFact> {
    let mut unused: Vec<Vec<u32>> = (0..spec.num_entities)
        .map(|e| {
            let used: HashSet<RelationId> = facts.relations_of(EntityId(e as u32)).collect();
            (0..spec.num_relations as u32)
                .filter(|r| !used.contains(&RelationId(*r)))
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..spec.num_entities).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(n_new);
    while out.len() < n_new {
        for &e in &order {
            if out.len() == n_new {
                break;
            }
            let pool = &mut unused[e];
            if pool.is_empty() {
                continue;
            }
            let r = pool.swap_remove(rng.random_range(0..pool.len()));
            let tail = rng.random_range(0..spec.num_entities) as u32;
            out.push(AtomicFact::new(e as u32, r, tail));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::build_base_bundle;

    #[test]
    fn new_facts_use_unseen_pairs_and_spread_across_entities() {
        let base = build_base_bundle(&GraphSpec::desk_scale(1)).unwrap();
        let fb = build_finetune_bundle(&base, 250, 1_000, 9).unwrap();
        assert_eq!(fb.new_atomic.len(), 250);
        assert_eq!(fb.retained_atomic.len(), 1_000);
        for f in &fb.new_atomic {
            assert!(base.facts.index_of(f.head, f.relation).is_none());
        }
        let heads: HashSet<_> = fb.new_atomic.iter().map(|f| f.head).collect();
        assert_eq!(heads.len(), 250);
        for f in &fb.retained_atomic {
            assert_eq!(base.label_of(f), Some(SplitLabel::Id));
        }
        let retained: HashSet<_> = fb.retained_atomic.iter().collect();
        for q in &fb.train_compositional {
            assert!(retained.contains(&q.hop1()) && retained.contains(&q.hop2()));
        }
        let new: HashSet<_> = fb.new_atomic.iter().collect();
        for q in &fb.eval_new_hop1 {
            assert!(new.contains(&q.hop1()) && retained.contains(&q.hop2()));
        }
        for q in &fb.eval_new_hop2 {
            assert!(retained.contains(&q.hop1()) && new.contains(&q.hop2()));
        }
        for q in &fb.eval_new_both {
            assert!(new.contains(&q.hop1()) && new.contains(&q.hop2()));
        }
    }

    #[test]
    fn zero_new_facts_gives_empty_eval_sets() {
        let base = build_base_bundle(&GraphSpec::desk_scale(2)).unwrap();
        let fb = build_finetune_bundle(&base, 0, 500, 1).unwrap();
        assert!(fb.new_atomic.is_empty());
        assert!(fb.eval_new_hop1.is_empty());
        assert!(fb.eval_new_hop2.is_empty());
        assert!(fb.eval_new_both.is_empty());
    }

    #[test]
    fn sizing_errors() {
        let base = build_base_bundle(&GraphSpec::desk_scale(3)).unwrap();
        // 500 entities x 40 unused relations
        assert!(matches!(
            build_finetune_bundle(&base, 20_001, 10, 1),
            Err(Error::Sizing { available: 20_000, .. })
        ));
        assert!(matches!(
            build_finetune_bundle(&base, 10, 5_000, 1),
            Err(Error::Sizing { available: 4_750, .. })
        ));
        // exhaustive: every unused pair consumed exactly once
        let all = build_finetune_bundle(&base, 20_000, 0, 1).unwrap();
        let pairs: HashSet<_> = all.new_atomic.iter().map(|f| (f.head, f.relation)).collect();
        assert_eq!(pairs.len(), 20_000);
    }

    #[test]
    fn full_relation_usage_has_no_room() {
        let spec = GraphSpec {
            num_entities: 4,
            num_relations: 2,
            out_degree: 2,
            ood_fraction: 0.0,
            phi: 0.0,
            seed: 0,
        };
        let base = build_base_bundle(&spec).unwrap();
        assert!(matches!(
            build_finetune_bundle(&base, 1, 0, 0),
            Err(Error::Sizing { .. })
        ));
    }
}
