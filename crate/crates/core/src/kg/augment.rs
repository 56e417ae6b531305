//! OOD-fact injection into compositional training queries.
//!
//! Each emitted query pairs one OOD fact with one ID fact sharing its bridge,
//! so it carries exactly one OOD hop.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;

use super::{AtomicFact, CompositionQuery, FactTable, SplitLabel};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Augmentation {
    pub queries: Vec<CompositionQuery>,
    /// OOD facts whose bridge had no ID partner; they produced no queries.
    pub starved: Vec<AtomicFact>,
}

/// For each OOD hop-1 fact `(h, r1, b)`, sample up to `per_fact_count` ID
/// facts `(b, rx, tx)` and emit `(h, r1, rx) -> tx`.
pub fn augment_hop1<R: Rng>(
    ood_hop1: &BTreeSet<AtomicFact>,
    facts: &FactTable,
    labels: &[SplitLabel],
    per_fact_count: usize,
    rng: &mut R,
) -> Augmentation {
    let mut out = Augmentation::default();
    if per_fact_count == 0 {
        return out;
    }
    for first in ood_hop1 {
        let partners: Vec<usize> = facts
            .outgoing(first.tail)
            .iter()
            .copied()
            .filter(|&j| labels[j] == SplitLabel::Id)
            .collect();
        if partners.is_empty() {
            out.starved.push(*first);
            continue;
        }
        let take = per_fact_count.min(partners.len());
        for k in index::sample(rng, partners.len(), take) {
            let second = facts.get(partners[k]);
            out.queries.push(CompositionQuery {
                head: first.head,
                r1: first.relation,
                r2: second.relation,
                bridge: first.tail,
                tail: second.tail,
                hop1_label: SplitLabel::Ood,
                hop2_label: SplitLabel::Id,
            });
        }
    }
    out
}

/// For each OOD hop-2 fact `(b, r2, t)`, sample up to `per_fact_count` ID
/// facts `(hy, ry, b)` and emit `(hy, ry, r2) -> t`.
pub fn augment_hop2<R: Rng>(
    ood_hop2: &BTreeSet<AtomicFact>,
    facts: &FactTable,
    labels: &[SplitLabel],
    per_fact_count: usize,
    rng: &mut R,
) -> Augmentation {
    let mut out = Augmentation::default();
    if per_fact_count == 0 {
        return out;
    }
    for second in ood_hop2 {
        let partners: Vec<usize> = facts
            .incoming(second.head)
            .iter()
            .copied()
            .filter(|&j| labels[j] == SplitLabel::Id)
            .collect();
        if partners.is_empty() {
            out.starved.push(*second);
            continue;
        }
        let take = per_fact_count.min(partners.len());
        for k in index::sample(rng, partners.len(), take) {
            let first = facts.get(partners[k]);
            out.queries.push(CompositionQuery {
                head: first.head,
                r1: first.relation,
                r2: second.relation,
                bridge: second.head,
                tail: second.tail,
                hop1_label: SplitLabel::Id,
                hop2_label: SplitLabel::Ood,
            });
        }
    }
    out
}
