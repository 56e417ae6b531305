use rand::seq::index;
use rand::Rng;

use super::{AtomicFact, EntityId, FactTable, GraphSpec, RelationId, SplitLabel};
use crate::error::{Error, Result};
use crate::rng::{round_half_up, stream_rng, streams};

/// Builds a uniform random functional graph: every entity is the subject of
/// `out_degree` distinct relations, each pointing at a uniformly drawn tail
/// (self-loops allowed).
pub fn generate_graph(spec: &GraphSpec) -> Result<FactTable> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, streams::GRAPH);
    let mut facts = Vec::with_capacity(spec.num_entities * spec.out_degree);
    for head in 0..spec.num_entities {
        let mut rels = index::sample(&mut rng, spec.num_relations, spec.out_degree).into_vec();
        rels.sort_unstable();
        for r in rels {
            let tail = rng.random_range(0..spec.num_entities);
            facts.push(AtomicFact {
                head: EntityId(head as u32),
                relation: RelationId(r as u32),
                tail: EntityId(tail as u32),
            });
        }
    }
    FactTable::new(spec.num_entities, facts)
}

/// Labels exactly `round(ood_fraction * |facts|)` facts OOD, chosen uniformly.
/// The result is indexed by fact position in `facts`.
pub fn split_facts(facts: &FactTable, ood_fraction: f64, seed: u64) -> Result<Vec<SplitLabel>> {
    if !(0.0..1.0).contains(&ood_fraction) {
        return Err(Error::Config(format!(
            "ood_fraction {ood_fraction} outside [0, 1)"
        )));
    }
    let n = facts.len();
    let n_ood = round_half_up(ood_fraction * n as f64).min(n);
    let mut labels = vec![SplitLabel::Id; n];
    let mut rng = stream_rng(seed, streams::SPLIT);
    for i in index::sample(&mut rng, n, n_ood) {
        labels[i] = SplitLabel::Ood;
    }
    Ok(labels)
}
