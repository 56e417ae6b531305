use std::collections::HashMap;

use super::{AtomicFact, EntityId, RelationId};
use crate::error::{Error, Result};

/// An ordered collection of functional facts with lookup indices.
///
/// Fact indices (positions in [`FactTable::facts`]) are stable and are what
/// the edge indices and split labels refer to.
#[derive(Debug, Clone)]
pub struct FactTable {
    num_entities: usize,
    facts: Vec<AtomicFact>,
    by_subject: HashMap<(EntityId, RelationId), usize>,
    /// entity -> indices of facts whose tail is that entity
    in_edges: Vec<Vec<usize>>,
    /// entity -> indices of facts whose head is that entity
    out_edges: Vec<Vec<usize>>,
}

impl PartialEq for FactTable {
    fn eq(&self, other: &Self) -> bool {
        self.num_entities == other.num_entities && self.facts == other.facts
    }
}

impl FactTable {
    pub fn new(num_entities: usize, facts: Vec<AtomicFact>) -> Result<Self> {
        let mut by_subject = HashMap::with_capacity(facts.len());
        let mut in_edges = vec![Vec::new(); num_entities];
        let mut out_edges = vec![Vec::new(); num_entities];
        for (i, f) in facts.iter().enumerate() {
            let (h, t) = (f.head.0 as usize, f.tail.0 as usize);
            if h >= num_entities || t >= num_entities {
                return Err(Error::Config(format!(
                    "fact {i} ({}, {}, {}) references an entity outside 0..{num_entities}",
                    f.head, f.relation, f.tail
                )));
            }
            if by_subject.insert((f.head, f.relation), i).is_some() {
                return Err(Error::Config(format!(
                    "duplicate subject pair ({}, {}) at fact {i}",
                    f.head, f.relation
                )));
            }
            out_edges[h].push(i);
            in_edges[t].push(i);
        }
        Ok(Self {
            num_entities,
            facts,
            by_subject,
            in_edges,
            out_edges,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn facts(&self) -> &[AtomicFact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn get(&self, index: usize) -> AtomicFact {
        self.facts[index]
    }

    pub fn tail_of(&self, head: EntityId, relation: RelationId) -> Option<EntityId> {
        self.index_of(head, relation).map(|i| self.facts[i].tail)
    }

    pub fn index_of(&self, head: EntityId, relation: RelationId) -> Option<usize> {
        self.by_subject.get(&(head, relation)).copied()
    }

    /// Index of `fact` if the table holds exactly that triple.
    pub fn find(&self, fact: &AtomicFact) -> Option<usize> {
        self.index_of(fact.head, fact.relation)
            .filter(|&i| self.facts[i].tail == fact.tail)
    }

    /// Facts whose tail is `entity`.
    pub fn incoming(&self, entity: EntityId) -> &[usize] {
        self.in_edges
            .get(entity.0 as usize)
            .map_or(&[], Vec::as_slice)
    }

    /// Facts whose head is `entity`.
    pub fn outgoing(&self, entity: EntityId) -> &[usize] {
        self.out_edges
            .get(entity.0 as usize)
            .map_or(&[], Vec::as_slice)
    }

    /// Relations used by `entity` as a subject.
    pub fn relations_of(&self, entity: EntityId) -> impl Iterator<Item = RelationId> + '_ {
        self.outgoing(entity).iter().map(|&i| self.facts[i].relation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_match_fact_collection() {
        let facts = vec![
            AtomicFact::new(0, 0, 1),
            AtomicFact::new(1, 1, 2),
            AtomicFact::new(1, 0, 1),
        ];
        let t = FactTable::new(3, facts).unwrap();
        assert_eq!(t.tail_of(EntityId(0), RelationId(0)), Some(EntityId(1)));
        assert_eq!(t.tail_of(EntityId(2), RelationId(0)), None);
        assert_eq!(t.outgoing(EntityId(1)), &[1, 2]);
        assert_eq!(t.incoming(EntityId(1)), &[0, 2]);
        assert!(t.incoming(EntityId(0)).is_empty());
        assert_eq!(t.find(&AtomicFact::new(1, 1, 2)), Some(1));
        assert_eq!(t.find(&AtomicFact::new(1, 1, 0)), None);
    }

    #[test]
    fn rejects_non_functional_and_out_of_range() {
        let dup = vec![AtomicFact::new(0, 0, 1), AtomicFact::new(0, 0, 2)];
        assert!(FactTable::new(3, dup).is_err());
        let oob = vec![AtomicFact::new(0, 0, 3)];
        assert!(FactTable::new(3, oob).is_err());
    }
}
