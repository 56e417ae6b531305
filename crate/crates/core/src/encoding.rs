//! Token layout and fixed-length example encoding.
//!
//! Vocabulary: entity tokens `0..E`, relation tokens `E..E+R`, pad `E+R`.
//! Every example is three tokens predicting one entity token at the final
//! position: compositions are `[h, r1, r2]`, atomic facts `[pad, h, r]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{AtomicFact, CompositionQuery, EntityId, GraphSpec, RelationId};
use crate::rng::{stream_rng, streams};

pub const SEQ_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    num_entities: usize,
    num_relations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    Entity(EntityId),
    Relation(RelationId),
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExampleKind {
    Atomic,
    Composition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedExample {
    pub input: [u32; SEQ_LEN],
    pub target: u32,
    pub kind: ExampleKind,
}

impl Vocab {
    pub fn new(num_entities: usize, num_relations: usize) -> Self {
        Self {
            num_entities,
            num_relations,
        }
    }

    pub fn from_spec(spec: &GraphSpec) -> Self {
        Self::new(spec.num_entities, spec.num_relations)
    }

    pub fn size(&self) -> usize {
        self.num_entities + self.num_relations + 1
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn pad(&self) -> u32 {
        (self.num_entities + self.num_relations) as u32
    }

    pub fn entity(&self, e: EntityId) -> Result<u32> {
        if (e.0 as usize) < self.num_entities {
            Ok(e.0)
        } else {
            Err(Error::Encoding(format!(
                "entity {} outside 0..{}",
                e.0, self.num_entities
            )))
        }
    }

    pub fn relation(&self, r: RelationId) -> Result<u32> {
        if (r.0 as usize) < self.num_relations {
            Ok((self.num_entities + r.0 as usize) as u32)
        } else {
            Err(Error::Encoding(format!(
                "relation {} outside 0..{}",
                r.0, self.num_relations
            )))
        }
    }

    pub fn is_entity_token(&self, token: u32) -> bool {
        (token as usize) < self.num_entities
    }

    pub fn decode(&self, token: u32) -> Result<Symbol> {
        let t = token as usize;
        if t < self.num_entities {
            Ok(Symbol::Entity(EntityId(token)))
        } else if t < self.num_entities + self.num_relations {
            Ok(Symbol::Relation(RelationId((t - self.num_entities) as u32)))
        } else if t == self.num_entities + self.num_relations {
            Ok(Symbol::Pad)
        } else {
            Err(Error::Encoding(format!(
                "token {token} outside vocabulary of size {}",
                self.size()
            )))
        }
    }

    pub fn encode_atomic(&self, fact: &AtomicFact) -> Result<EncodedExample> {
        Ok(EncodedExample {
            input: [self.pad(), self.entity(fact.head)?, self.relation(fact.relation)?],
            target: self.entity(fact.tail)?,
            kind: ExampleKind::Atomic,
        })
    }

    pub fn encode_composition(&self, q: &CompositionQuery) -> Result<EncodedExample> {
        Ok(EncodedExample {
            input: [self.entity(q.head)?, self.relation(q.r1)?, self.relation(q.r2)?],
            target: self.entity(q.tail)?,
            kind: ExampleKind::Composition,
        })
    }

    pub fn encode_compositions(&self, qs: &[CompositionQuery]) -> Result<Vec<EncodedExample>> {
        qs.iter().map(|q| self.encode_composition(q)).collect()
    }

    pub fn encode_atomics(&self, facts: &[AtomicFact]) -> Result<Vec<EncodedExample>> {
        facts.iter().map(|f| self.encode_atomic(f)).collect()
    }
}

impl EncodedExample {
    /// Pad in position 0 marks an atomic example.
    pub fn kind_from_input(input: &[u32; SEQ_LEN], vocab: &Vocab) -> ExampleKind {
        if input[0] == vocab.pad() {
            ExampleKind::Atomic
        } else {
            ExampleKind::Composition
        }
    }
}

/// One training batch: `inputs` is row-major `batch × SEQ_LEN`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn from_examples(examples: &[EncodedExample]) -> Self {
        Self {
            inputs: examples.iter().flat_map(|e| e.input).collect(),
            targets: examples.iter().map(|e| e.target).collect(),
        }
    }
}

/// Draws batches uniformly with replacement from a fixed pool. Batch `step`
/// depends only on `(seed, step)`, so any step can be regenerated directly.
#[derive(Debug, Clone)]
pub struct Batcher<'a> {
    pool: &'a [EncodedExample],
    batch_size: usize,
    seed: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(pool: &'a [EncodedExample], batch_size: usize, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Config("cannot batch an empty example pool".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(Self {
            pool,
            batch_size,
            seed,
        })
    }

    pub fn indices(&self, step: u64) -> Vec<usize> {
        let mut rng = stream_rng(self.seed, streams::BATCH_BASE + step);
        (0..self.batch_size)
            .map(|_| rng.random_range(0..self.pool.len()))
            .collect()
    }

    pub fn batch(&self, step: u64) -> Batch {
        let mut inputs = Vec::with_capacity(self.batch_size * SEQ_LEN);
        let mut targets = Vec::with_capacity(self.batch_size);
        for i in self.indices(step) {
            let e = &self.pool[i];
            inputs.extend_from_slice(&e.input);
            targets.push(e.target);
        }
        Batch { inputs, targets }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_base_bundle, SplitLabel};

    #[test]
    fn vocab_sizes() {
        let v = Vocab::from_spec(&GraphSpec::paper_scale(0));
        assert_eq!(v.size(), 2_201);
        assert_eq!(Vocab::new(1, 1).size(), 3);
    }

    #[test]
    fn class_boundaries() {
        let v = Vocab::new(4, 2);
        assert_eq!(v.decode(3).unwrap(), Symbol::Entity(EntityId(3)));
        assert_eq!(v.decode(4).unwrap(), Symbol::Relation(RelationId(0)));
        assert_eq!(v.decode(5).unwrap(), Symbol::Relation(RelationId(1)));
        assert_eq!(v.decode(6).unwrap(), Symbol::Pad);
        assert!(v.decode(7).is_err());
    }

    #[test]
    fn full_vocab_round_trip() {
        let v = Vocab::new(37, 11);
        for t in 0..v.size() as u32 {
            let back = match v.decode(t).unwrap() {
                Symbol::Entity(e) => v.entity(e).unwrap(),
                Symbol::Relation(r) => v.relation(r).unwrap(),
                Symbol::Pad => v.pad(),
            };
            assert_eq!(back, t);
        }
    }

    #[test]
    fn atomic_and_composition_layouts() {
        let v = Vocab::new(10, 5);
        let e = v.encode_atomic(&AtomicFact::new(5, 3, 9)).unwrap();
        assert_eq!(e.input, [v.pad(), 5, 10 + 3]);
        assert_eq!(e.target, 9);
        assert_eq!(EncodedExample::kind_from_input(&e.input, &v), ExampleKind::Atomic);

        let q = CompositionQuery {
            head: EntityId(0),
            r1: RelationId(0),
            r2: RelationId(1),
            bridge: EntityId(1),
            tail: EntityId(2),
            hop1_label: SplitLabel::Id,
            hop2_label: SplitLabel::Id,
        };
        let c = v.encode_composition(&q).unwrap();
        assert_eq!(c.input, [0, 10, 11]);
        assert_eq!(c.target, 2);
        assert_eq!(EncodedExample::kind_from_input(&c.input, &v), ExampleKind::Composition);

        assert!(v.encode_atomic(&AtomicFact::new(10, 0, 0)).is_err());
        assert!(v.encode_atomic(&AtomicFact::new(0, 5, 0)).is_err());
    }

    #[test]
    fn desk_targets_decode_to_entities() {
        let b = build_base_bundle(&GraphSpec::desk_scale(1)).unwrap();
        let v = Vocab::from_spec(&b.spec);
        for e in v.encode_compositions(&b.train_inferred).unwrap() {
            assert!(matches!(v.decode(e.target).unwrap(), Symbol::Entity(_)));
        }
    }

    #[test]
    fn batching() {
        let v = Vocab::new(10, 5);
        let one = vec![v.encode_atomic(&AtomicFact::new(1, 2, 3)).unwrap()];
        let b = Batcher::new(&one, 8, 0).unwrap().batch(0);
        assert!(b.inputs.chunks(3).all(|r| r == one[0].input));

        let pool: Vec<_> = (0..10)
            .map(|i| v.encode_atomic(&AtomicFact::new(i, 0, 0)).unwrap())
            .collect();
        let a = Batcher::new(&pool, 16, 42).unwrap();
        let b = Batcher::new(&pool, 16, 42).unwrap();
        for s in 0..10 {
            assert_eq!(a.batch(s), b.batch(s));
            assert_eq!(a.batch(s).inputs.len(), 16 * SEQ_LEN);
        }
        assert_ne!(a.batch(0), a.batch(1));
        assert!(Batcher::new(&[], 4, 0).is_err());
    }
}
