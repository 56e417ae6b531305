//! On-disk bundle format.
//!
//! A bundle is a directory with three files:
//!
//! * `facts.tsv`: `head  relation  tail  label`, one fact per line, in table order.
//! * `queries.tsv`: `head  r1  r2  bridge  tail  hop1_label  hop2_label  set`.
//! * `manifest.json`: graph spec, regime, record counts and a SHA-256 over
//!   the bytes of `facts.tsv` followed by `queries.tsv`.
//!
//! Record files are UTF-8, tab-separated, LF-terminated, decimal integers.
//! Lines starting with `#` are headers/comments. Labels are `ID` or `OOD`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    AtomicFact, CompositionQuery, DatasetBundle, EntityId, FactTable, FinetuneBundle, GraphSpec,
    Regime, RelationId, SplitLabel,
};
use crate::error::{Error, Result};

pub const FACTS_FILE: &str = "facts.tsv";
pub const QUERIES_FILE: &str = "queries.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

const FACTS_HEADER: &str = "#head\trelation\ttail\tlabel\n";
const QUERIES_HEADER: &str = "#head\tr1\tr2\tbridge\ttail\thop1_label\thop2_label\tset\n";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Pretrain {
        regime: Regime,
        per_fact_count: usize,
        starved: Vec<[u32; 3]>,
    },
    Finetune {
        seed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BundleManifest {
    pub format: String,
    pub spec: GraphSpec,
    pub kind: BundleKind,
    pub facts: usize,
    /// Record count per query set tag.
    pub queries: BTreeMap<String, usize>,
    pub checksum: String,
}

const FORMAT: &str = "circuitlab-bundle/1";

fn encode_facts(facts: &[AtomicFact], labels: &[SplitLabel]) -> String {
    let mut s = String::with_capacity(FACTS_HEADER.len() + facts.len() * 16);
    s.push_str(FACTS_HEADER);
    for (f, l) in facts.iter().zip(labels) {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            f.head.0,
            f.relation.0,
            f.tail.0,
            l.as_str()
        ));
    }
    s
}

fn encode_queries(sets: &[(&str, &[CompositionQuery])]) -> String {
    let mut s = String::from(QUERIES_HEADER);
    for (tag, qs) in sets {
        for q in *qs {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                q.head.0,
                q.r1.0,
                q.r2.0,
                q.bridge.0,
                q.tail.0,
                q.hop1_label.as_str(),
                q.hop2_label.as_str(),
                tag
            ));
        }
    }
    s
}

fn checksum(facts: &str, queries: &str) -> String {
    let mut h = Sha256::new();
    h.update(facts.as_bytes());
    h.update(queries.as_bytes());
    hex::encode(h.finalize())
}

fn write_dir(dir: &Path, facts: &str, queries: &str, manifest: &BundleManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, body: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    put(FACTS_FILE, facts.as_bytes())?;
    put(QUERIES_FILE, queries.as_bytes())?;
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    put(MANIFEST_FILE, json.as_bytes())
}

fn counts(sets: &[(&str, &[CompositionQuery])]) -> BTreeMap<String, usize> {
    sets.iter().map(|(t, q)| (t.to_string(), q.len())).collect()
}

fn pretrain_sets(b: &DatasetBundle) -> [(&'static str, &[CompositionQuery]); 6] {
    [
        ("train_inferred", &b.train_inferred),
        ("augmentation", &b.augmentation),
        ("eval_ood", &b.eval_ood),
        ("eval_ood_hop1", &b.eval_ood_hop1),
        ("eval_ood_hop2", &b.eval_ood_hop2),
        ("eval_id_held", &b.eval_id_held),
    ]
}

fn finetune_sets(b: &FinetuneBundle) -> [(&'static str, &[CompositionQuery]); 4] {
    [
        ("train_compositional", &b.train_compositional),
        ("eval_new_hop1", &b.eval_new_hop1),
        ("eval_new_hop2", &b.eval_new_hop2),
        ("eval_new_both", &b.eval_new_both),
    ]
}

/// Writes `bundle` into `dir`; returns the manifest written.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<BundleManifest> {
    let sets = pretrain_sets(bundle);
    let facts = encode_facts(bundle.facts.facts(), &bundle.labels);
    let queries = encode_queries(&sets);
    let manifest = BundleManifest {
        format: FORMAT.into(),
        spec: bundle.spec,
        kind: BundleKind::Pretrain {
            regime: bundle.regime,
            per_fact_count: bundle.per_fact_count,
            starved: bundle
                .starved
                .iter()
                .map(|f| [f.head.0, f.relation.0, f.tail.0])
                .collect(),
        },
        facts: bundle.facts.len(),
        queries: counts(&sets),
        checksum: checksum(&facts, &queries),
    };
    write_dir(dir, &facts, &queries, &manifest)?;
    Ok(manifest)
}

pub fn write_finetune_bundle(bundle: &FinetuneBundle, dir: &Path) -> Result<BundleManifest> {
    let sets = finetune_sets(bundle);
    let (table, labels) = bundle.table()?;
    let facts = encode_facts(table.facts(), &labels);
    let queries = encode_queries(&sets);
    let manifest = BundleManifest {
        format: FORMAT.into(),
        spec: bundle.spec,
        kind: BundleKind::Finetune { seed: bundle.seed },
        facts: table.len(),
        queries: counts(&sets),
        checksum: checksum(&facts, &queries),
    };
    write_dir(dir, &facts, &queries, &manifest)?;
    Ok(manifest)
}

struct Loaded {
    manifest: BundleManifest,
    facts: Vec<AtomicFact>,
    labels: Vec<SplitLabel>,
    queries: BTreeMap<String, Vec<CompositionQuery>>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn fields<'a, const N: usize>(line: &'a str, file: &str, lineno: usize) -> Result<[&'a str; N]> {
    let parts: Vec<&str> = line.split('\t').collect();
    parts.try_into().map_err(|p: Vec<&str>| {
        Error::parse(file, lineno, format!("expected {N} fields, found {}", p.len()))
    })
}

fn int(s: &str, file: &str, lineno: usize) -> Result<u32> {
    s.parse()
        .map_err(|_| Error::parse(file, lineno, format!("not a decimal integer: {s:?}")))
}

fn label(s: &str, file: &str, lineno: usize) -> Result<SplitLabel> {
    s.parse()
        .map_err(|_| Error::parse(file, lineno, format!("bad label {s:?}")))
}

/// Non-comment lines with their 1-based line numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.starts_with('#'))
}

fn load_dir(dir: &Path) -> Result<Loaded> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: BundleManifest = serde_json::from_str(&read(&manifest_path)?).map_err(|e| {
        Error::parse(MANIFEST_FILE, e.line(), e.to_string())
    })?;
    if manifest.format != FORMAT {
        return Err(Error::parse(
            MANIFEST_FILE,
            1,
            format!("unsupported format {:?}", manifest.format),
        ));
    }
    let facts_text = read(&dir.join(FACTS_FILE))?;
    let queries_text = read(&dir.join(QUERIES_FILE))?;

    let mut facts = Vec::with_capacity(manifest.facts);
    let mut labels = Vec::with_capacity(manifest.facts);
    let mut last_line = 0;
    for (n, line) in records(&facts_text) {
        let [h, r, t, l] = fields::<4>(line, FACTS_FILE, n)?;
        facts.push(AtomicFact {
            head: EntityId(int(h, FACTS_FILE, n)?),
            relation: RelationId(int(r, FACTS_FILE, n)?),
            tail: EntityId(int(t, FACTS_FILE, n)?),
        });
        labels.push(label(l, FACTS_FILE, n)?);
        last_line = n;
    }
    if facts.len() != manifest.facts {
        return Err(Error::parse(
            FACTS_FILE,
            last_line + 1,
            format!("expected {} facts, found {}", manifest.facts, facts.len()),
        ));
    }

    let mut queries: BTreeMap<String, Vec<CompositionQuery>> = manifest
        .queries
        .keys()
        .map(|k| (k.clone(), Vec::new()))
        .collect();
    let mut last_line = 0;
    for (n, line) in records(&queries_text) {
        let [h, r1, r2, b, t, l1, l2, tag] = fields::<8>(line, QUERIES_FILE, n)?;
        let q = CompositionQuery {
            head: EntityId(int(h, QUERIES_FILE, n)?),
            r1: RelationId(int(r1, QUERIES_FILE, n)?),
            r2: RelationId(int(r2, QUERIES_FILE, n)?),
            bridge: EntityId(int(b, QUERIES_FILE, n)?),
            tail: EntityId(int(t, QUERIES_FILE, n)?),
            hop1_label: label(l1, QUERIES_FILE, n)?,
            hop2_label: label(l2, QUERIES_FILE, n)?,
        };
        queries
            .get_mut(tag)
            .ok_or_else(|| Error::parse(QUERIES_FILE, n, format!("unknown set tag {tag:?}")))?
            .push(q);
        last_line = n;
    }
    for (tag, expected) in &manifest.queries {
        let found = queries[tag].len();
        if found != *expected {
            return Err(Error::parse(
                QUERIES_FILE,
                last_line + 1,
                format!("expected {expected} {tag} queries, found {found}"),
            ));
        }
    }

    let actual = checksum(&facts_text, &queries_text);
    if actual != manifest.checksum {
        return Err(Error::Corrupt {
            path: dir.to_path_buf(),
            msg: format!("checksum {actual} does not match manifest {}", manifest.checksum),
        });
    }
    Ok(Loaded {
        manifest,
        facts,
        labels,
        queries,
    })
}

/// Loads and validates a pretraining bundle. Nothing is returned unless
/// every file parses, counts match and the checksum agrees.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let Loaded {
        manifest,
        facts,
        labels,
        mut queries,
    } = load_dir(dir)?;
    let BundleKind::Pretrain {
        regime,
        per_fact_count,
        starved,
    } = manifest.kind
    else {
        return Err(Error::Config(format!(
            "{} holds a finetune bundle, not a pretraining bundle",
            dir.display()
        )));
    };
    let mut take = |t: &str| queries.remove(t).unwrap_or_default();
    let bundle = DatasetBundle {
        spec: manifest.spec,
        regime,
        per_fact_count,
        facts: FactTable::new(manifest.spec.num_entities, facts)?,
        labels,
        train_inferred: take("train_inferred"),
        augmentation: take("augmentation"),
        eval_ood: take("eval_ood"),
        eval_ood_hop1: take("eval_ood_hop1"),
        eval_ood_hop2: take("eval_ood_hop2"),
        eval_id_held: take("eval_id_held"),
        starved: starved
            .into_iter()
            .map(|[h, r, t]| AtomicFact::new(h, r, t))
            .collect(),
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn load_finetune_bundle(dir: &Path) -> Result<FinetuneBundle> {
    let Loaded {
        manifest,
        facts,
        labels,
        mut queries,
    } = load_dir(dir)?;
    let BundleKind::Finetune { seed } = manifest.kind else {
        return Err(Error::Config(format!(
            "{} holds a pretraining bundle, not a finetune bundle",
            dir.display()
        )));
    };
    let (mut retained_atomic, mut new_atomic) = (Vec::new(), Vec::new());
    for (f, l) in facts.into_iter().zip(labels) {
        match l {
            SplitLabel::Id => retained_atomic.push(f),
            SplitLabel::Ood => new_atomic.push(f),
        }
    }
    let mut take = |t: &str| queries.remove(t).unwrap_or_default();
    Ok(FinetuneBundle {
        spec: manifest.spec,
        seed,
        retained_atomic,
        new_atomic,
        train_compositional: take("train_compositional"),
        eval_new_hop1: take("eval_new_hop1"),
        eval_new_hop2: take("eval_new_hop2"),
        eval_new_both: take("eval_new_both"),
    })
}

/// Reads just the manifest of a bundle directory.
pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let p = dir.join(MANIFEST_FILE);
    serde_json::from_str(&read(&p)?).map_err(|e| Error::parse(MANIFEST_FILE, e.line(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_base_bundle, build_finetune_bundle, build_regime};

    #[test]
    fn desk_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let base = build_base_bundle(&GraphSpec::desk_scale(5)).unwrap();
        let b = build_regime(&base, Regime::BothFull, 1, 5);
        write_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn serialization_is_bit_identical_for_identical_specs() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = build_base_bundle(&GraphSpec::desk_scale(8)).unwrap();
        let b = build_base_bundle(&GraphSpec::desk_scale(8)).unwrap();
        write_bundle(&a, d1.path()).unwrap();
        write_bundle(&b, d2.path()).unwrap();
        for f in [FACTS_FILE, QUERIES_FILE, MANIFEST_FILE] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let b = build_base_bundle(&GraphSpec::desk_scale(6)).unwrap();
        write_bundle(&b, dir.path()).unwrap();
        let qp = dir.path().join(QUERIES_FILE);
        let text = fs::read_to_string(&qp).unwrap();
        // cut mid-record
        fs::write(&qp, &text[..text.len() / 2]).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, QUERIES_FILE);
                assert!(line > 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tampered_record_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let b = build_base_bundle(&GraphSpec::desk_scale(6)).unwrap();
        write_bundle(&b, dir.path()).unwrap();
        let fp = dir.path().join(FACTS_FILE);
        let text = fs::read_to_string(&fp).unwrap();
        let tampered = text.replacen("\tID\n", "\tOOD\n", 1);
        fs::write(&fp, tampered).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn finetune_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let base = build_base_bundle(&GraphSpec::desk_scale(2)).unwrap();
        let fb = build_finetune_bundle(&base, 100, 400, 3).unwrap();
        write_finetune_bundle(&fb, dir.path()).unwrap();
        assert_eq!(load_finetune_bundle(dir.path()).unwrap(), fb);
        assert!(matches!(load_bundle(dir.path()), Err(Error::Config(_))));
    }
}
