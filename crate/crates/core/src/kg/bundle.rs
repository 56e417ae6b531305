use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::augment::{augment_hop1, augment_hop2};
use super::compose::{
    build_eval_ood, enumerate_compositions, extract_ood_hop_facts, sample_train_inferred,
};
use super::generate::{generate_graph, split_facts};
use super::{AtomicFact, CompositionQuery, FactTable, GraphSpec, SplitLabel};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Which OOD facts are injected into compositional training queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// No injection: compositional supervision is ID-only.
    Natural,
    /// Every OOD hop-1 fact of the test set, paired with ID hop-2 facts.
    Hop1Full,
    /// Every OOD hop-2 fact of the test set, paired with ID hop-1 facts.
    Hop2Full,
    /// Union of the two.
    BothFull,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Natural,
        Regime::Hop1Full,
        Regime::Hop2Full,
        Regime::BothFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Natural => "natural",
            Regime::Hop1Full => "hop1_full",
            Regime::Hop2Full => "hop2_full",
            Regime::BothFull => "both_full",
        }
    }

    fn injects_hop1(self) -> bool {
        matches!(self, Regime::Hop1Full | Regime::BothFull)
    }

    fn injects_hop2(self) -> bool {
        matches!(self, Regime::Hop2Full | Regime::BothFull)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown regime {s:?} (expected natural, hop1_full, hop2_full or both_full)"
                ))
            })
    }
}

/// Everything needed to train and evaluate one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub spec: GraphSpec,
    pub regime: Regime,
    pub per_fact_count: usize,
    pub facts: FactTable,
    /// Split label per fact position.
    pub labels: Vec<SplitLabel>,
    pub train_inferred: Vec<CompositionQuery>,
    pub augmentation: Vec<CompositionQuery>,
    /// Both hops OOD: the canonical generalization test set.
    pub eval_ood: Vec<CompositionQuery>,
    /// OOD hop 1, ID hop 2 (diagnostic).
    pub eval_ood_hop1: Vec<CompositionQuery>,
    /// ID hop 1, OOD hop 2 (diagnostic).
    pub eval_ood_hop2: Vec<CompositionQuery>,
    /// ID-only compositions left out of training by phi-sampling.
    pub eval_id_held: Vec<CompositionQuery>,
    /// OOD hop facts that could not be injected for lack of an ID partner.
    pub starved: Vec<AtomicFact>,
}

impl DatasetBundle {
    pub fn label_of(&self, fact: &AtomicFact) -> Option<SplitLabel> {
        self.facts.find(fact).map(|i| self.labels[i])
    }

    pub fn id_fact_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == SplitLabel::Id).count()
    }

    pub fn ood_fact_count(&self) -> usize {
        self.labels.len() - self.id_fact_count()
    }

    pub fn training_queries(&self) -> impl Iterator<Item = &CompositionQuery> {
        self.train_inferred.iter().chain(&self.augmentation)
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.labels.len() != self.facts.len() {
            return bad(format!(
                "{} labels for {} facts",
                self.labels.len(),
                self.facts.len()
            ));
        }
        let sets: [(&str, &[CompositionQuery]); 6] = [
            ("train_inferred", &self.train_inferred),
            ("augmentation", &self.augmentation),
            ("eval_ood", &self.eval_ood),
            ("eval_ood_hop1", &self.eval_ood_hop1),
            ("eval_ood_hop2", &self.eval_ood_hop2),
            ("eval_id_held", &self.eval_id_held),
        ];
        for (name, set) in sets {
            for q in set {
                let (Some(l1), Some(l2)) = (self.label_of(&q.hop1()), self.label_of(&q.hop2()))
                else {
                    return bad(format!("{name}: query {:?} does not chain in the table", q.key()));
                };
                if (l1, l2) != (q.hop1_label, q.hop2_label) {
                    return bad(format!("{name}: query {:?} carries stale labels", q.key()));
                }
            }
        }
        if let Some(q) = self.train_inferred.iter().find(|q| q.ood_hops() != 0) {
            return bad(format!("train_inferred query {:?} has an OOD hop", q.key()));
        }
        if let Some(q) = self.augmentation.iter().find(|q| q.ood_hops() != 1) {
            return bad(format!(
                "augmentation query {:?} does not have exactly one OOD hop",
                q.key()
            ));
        }
        if self.regime == Regime::Natural && !self.augmentation.is_empty() {
            return bad("natural regime carries augmentation".into());
        }
        if let Some(q) = self.eval_ood.iter().find(|q| q.ood_hops() != 2) {
            return bad(format!("eval_ood query {:?} is not both-hops-OOD", q.key()));
        }
        let train: HashSet<_> = self.training_queries().map(|q| q.key()).collect();
        if let Some(q) = self.eval_ood.iter().find(|q| train.contains(&q.key())) {
            return bad(format!("eval_ood query {:?} leaks into training", q.key()));
        }
        Ok(())
    }
}

/// Generates the graph, split, phi-sample and evaluation sets with no
/// augmentation (the natural regime).
pub fn build_base_bundle(spec: &GraphSpec) -> Result<DatasetBundle> {
    let facts = generate_graph(spec)?;
    let labels = split_facts(&facts, spec.ood_fraction, spec.seed)?;
    let compositions = enumerate_compositions(&facts, &labels);
    let id_count = labels.iter().filter(|&&l| l == SplitLabel::Id).count();
    let phi = sample_train_inferred(&compositions, spec.phi, id_count, spec.seed)?;
    let ood = build_eval_ood(&compositions);
    Ok(DatasetBundle {
        spec: *spec,
        regime: Regime::Natural,
        per_fact_count: 0,
        facts,
        labels,
        train_inferred: phi.train_inferred,
        augmentation: Vec::new(),
        eval_ood: ood.both,
        eval_ood_hop1: ood.hop1_only,
        eval_ood_hop2: ood.hop2_only,
        eval_id_held: phi.held_out,
        starved: Vec::new(),
    })
}

/// Derives the bundle for `regime` from a base bundle. Evaluation sets are
/// carried over untouched.
pub fn build_regime(
    base: &DatasetBundle,
    regime: Regime,
    per_fact_count: usize,
    seed: u64,
) -> DatasetBundle {
    let (f1, f2) = extract_ood_hop_facts(&base.eval_ood, &base.facts);
    let mut augmentation = Vec::new();
    let mut starved = Vec::new();
    if regime.injects_hop1() {
        let mut rng = stream_rng(seed, streams::AUGMENT_HOP1);
        let a = augment_hop1(&f1, &base.facts, &base.labels, per_fact_count, &mut rng);
        augmentation.extend(a.queries);
        starved.extend(a.starved);
    }
    if regime.injects_hop2() {
        let mut rng = stream_rng(seed, streams::AUGMENT_HOP2);
        let a = augment_hop2(&f2, &base.facts, &base.labels, per_fact_count, &mut rng);
        augmentation.extend(a.queries);
        starved.extend(a.starved);
    }
    if !starved.is_empty() {
        log::warn!(
            "{regime}: {} OOD hop facts have no ID partner and were not injected",
            starved.len()
        );
    }
    DatasetBundle {
        regime,
        per_fact_count: if regime == Regime::Natural { 0 } else { per_fact_count },
        augmentation,
        starved,
        ..base.clone()
    }
}
