//! Synthetic knowledge graphs and two-hop composition datasets.
//!
//! A graph is a set of functional atomic facts `(head, relation, tail)`.
//! Facts are split into in-distribution (ID) and out-of-distribution (OOD)
//! subsets; compositional training queries are drawn only from chains whose
//! hops are both ID, while the canonical test set chains two OOD facts.
//! Augmentation regimes inject OOD facts into training compositions, always
//! paired with exactly one ID fact.

mod augment;
mod bundle;
mod compose;
mod finetune;
mod generate;
pub mod io;
mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment_hop1, augment_hop2, Augmentation};
pub use bundle::{build_base_bundle, build_regime, DatasetBundle, Regime};
pub use compose::{
    build_eval_ood, enumerate_compositions, extract_ood_hop_facts, oracle_answer,
    sample_train_inferred, EvalOodSets, PhiSample,
};
pub use finetune::{build_finetune_bundle, FinetuneBundle};
pub use generate::{generate_graph, split_facts};
pub use table::FactTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// One `(head, relation, tail)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AtomicFact {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl AtomicFact {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Self {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitLabel {
    Id,
    Ood,
}

impl SplitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Id => "ID",
            SplitLabel::Ood => "OOD",
        }
    }
}

impl FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ID" => Ok(SplitLabel::Id),
            "OOD" => Ok(SplitLabel::Ood),
            other => Err(Error::Config(format!("unknown split label {other:?}"))),
        }
    }
}

/// A two-hop query `(head, r1, r2) -> tail` through `bridge`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompositionQuery {
    pub head: EntityId,
    pub r1: RelationId,
    pub r2: RelationId,
    pub bridge: EntityId,
    pub tail: EntityId,
    pub hop1_label: SplitLabel,
    pub hop2_label: SplitLabel,
}

impl CompositionQuery {
    pub fn hop1(&self) -> AtomicFact {
        AtomicFact {
            head: self.head,
            relation: self.r1,
            tail: self.bridge,
        }
    }

    pub fn hop2(&self) -> AtomicFact {
        AtomicFact {
            head: self.bridge,
            relation: self.r2,
            tail: self.tail,
        }
    }

    /// Number of OOD hops (0, 1 or 2).
    pub fn ood_hops(&self) -> usize {
        usize::from(self.hop1_label == SplitLabel::Ood)
            + usize::from(self.hop2_label == SplitLabel::Ood)
    }

    /// Identity of the question, independent of its answer.
    pub fn key(&self) -> (EntityId, RelationId, RelationId) {
        (self.head, self.r1, self.r2)
    }

    /// Bridge detection is vacuous when the bridge is also the head or tail.
    pub fn is_degenerate(&self) -> bool {
        self.bridge == self.head || self.bridge == self.tail
    }
}

/// Sizes and seed of a synthetic graph plus the dataset ratios built on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub num_entities: usize,
    pub num_relations: usize,
    pub out_degree: usize,
    pub ood_fraction: f64,
    pub phi: f64,
    pub seed: u64,
}

impl GraphSpec {
    /// 2,000 entities, 200 relations, 20 relations per subject, 5% OOD, phi 18.
    pub fn paper_scale(seed: u64) -> Self {
        Self {
            num_entities: 2_000,
            num_relations: 200,
            out_degree: 20,
            ood_fraction: 0.05,
            phi: 18.0,
            seed,
        }
    }

    /// 500 entities, 50 relations, out-degree 10, 5% OOD, phi 9.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            num_entities: 500,
            num_relations: 50,
            out_degree: 10,
            ood_fraction: 0.05,
            phi: 9.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_entities < 1 {
            return Err(Error::Config("num_entities must be >= 1".into()));
        }
        if self.num_relations < 1 {
            return Err(Error::Config("num_relations must be >= 1".into()));
        }
        if self.out_degree < 1 {
            return Err(Error::Config("out_degree must be >= 1".into()));
        }
        if self.out_degree > self.num_relations {
            return Err(Error::Config(format!(
                "out_degree {} exceeds num_relations {}",
                self.out_degree, self.num_relations
            )));
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return Err(Error::Config(format!(
                "ood_fraction {} outside [0, 1)",
                self.ood_fraction
            )));
        }
        if !(self.phi >= 0.0) || !self.phi.is_finite() {
            return Err(Error::Config(format!("phi {} must be >= 0", self.phi)));
        }
        if self.num_entities > u32::MAX as usize || self.num_relations > u32::MAX as usize {
            return Err(Error::Config("entity/relation counts exceed u32 range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation_names_the_bound() {
        let mut s = GraphSpec::desk_scale(0);
        s.out_degree = 51;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("out_degree"), "{err}");

        let mut s = GraphSpec::desk_scale(0);
        s.ood_fraction = 1.0;
        assert!(s.validate().unwrap_err().to_string().contains("ood_fraction"));

        let mut s = GraphSpec::desk_scale(0);
        s.phi = -1.0;
        assert!(s.validate().unwrap_err().to_string().contains("phi"));

        let mut s = GraphSpec::desk_scale(0);
        s.num_entities = 0;
        assert!(s.validate().unwrap_err().to_string().contains("num_entities"));
    }

    #[test]
    fn degenerate_queries() {
        let q = CompositionQuery {
            head: EntityId(1),
            r1: RelationId(0),
            r2: RelationId(1),
            bridge: EntityId(1),
            tail: EntityId(3),
            hop1_label: SplitLabel::Id,
            hop2_label: SplitLabel::Ood,
        };
        assert!(q.is_degenerate());
        assert_eq!(q.ood_hops(), 1);
        assert_eq!(q.hop1(), AtomicFact::new(1, 0, 1));
        assert_eq!(q.hop2(), AtomicFact::new(1, 1, 3));
    }
}
