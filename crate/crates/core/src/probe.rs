//! Logit-lens probing of the residual stream.
//!
//! Every intermediate state is pushed through the final norm and the
//! unembedding; a query counts as "bridge found" when the top-1 decoded token
//! at some probed site equals the bridge entity. Only iterations `1..L-1` are
//! searched, so the final state (which carries the answer) never contributes.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoding::{Vocab, SEQ_LEN};
use crate::error::{Error, Result};
use crate::kg::{CompositionQuery, EntityId, RelationId, SplitLabel};
use crate::model::{argmax_entity, forward_batch, ModelConfig, ModelParams};
use crate::tensor::Real;

/// Default probed positions (1-based): the final input position.
pub const DEFAULT_POSITIONS: [usize; 1] = [3];

/// Top-`k` tokens for `state` under the logit lens, best first; equal scores
/// are ordered by lower token id.
pub fn lens_decode<T: Real>(state: &[T], params: &ModelParams<T>, k: usize) -> Result<Vec<(u32, T)>> {
    let scores = params.decode_state(state)?;
    Ok(top_k(&scores, k))
}

pub fn top_k<T: Real>(scores: &[T], k: usize) -> Vec<(u32, T)> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        let (sa, sb) = (scores[*a as usize], scores[*b as usize]);
        sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then(a.cmp(b))
    };
    let k = k.min(scores.len());
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order.truncate(k);
    order.into_iter().map(|t| (t, scores[t as usize])).collect()
}

/// Decoded tokens at one (iteration, position) site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDecode {
    pub iteration: usize,
    /// 1-based input position.
    pub position: usize,
    pub top: Vec<(u32, f32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub iteration: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub query: CompositionQuery,
    /// Decodes for every iteration `0..=L` at each probed position.
    pub sites: Vec<SiteDecode>,
    pub bridge_found: bool,
    pub found_at: Option<Site>,
    pub predicted: u32,
    pub prediction_correct: bool,
    /// Bridge equals head or tail, which makes detection vacuous.
    pub degenerate: bool,
}

/// Probe settings shared by a batch of traces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub top_k: usize,
    /// 1-based positions in `1..=3`.
    pub positions: Vec<usize>,
}

impl ProbeConfig {
    pub fn for_model(config: &ModelConfig) -> Self {
        Self {
            iterations: config.num_iterations,
            top_k: 5,
            positions: DEFAULT_POSITIONS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 2 {
            return Err(Error::Config("probing needs at least 2 iterations".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if self.positions.is_empty() || self.positions.iter().any(|&p| p == 0 || p > SEQ_LEN) {
            return Err(Error::Config(format!(
                "positions {:?} must be a non-empty subset of 1..={SEQ_LEN}",
                self.positions
            )));
        }
        Ok(())
    }
}

pub fn trace_query<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    query: &CompositionQuery,
    vocab: &Vocab,
    probe: &ProbeConfig,
) -> Result<TraceRecord> {
    let mut out = trace_queries(params, config, std::slice::from_ref(query), vocab, probe, 1)?;
    Ok(out.pop().expect("one record"))
}

/// Traces `queries` in forward chunks of `chunk` sequences.
pub fn trace_queries<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    queries: &[CompositionQuery],
    vocab: &Vocab,
    probe: &ProbeConfig,
    chunk: usize,
) -> Result<Vec<TraceRecord>> {
    probe.validate()?;
    let mut positions = probe.positions.clone();
    positions.sort_unstable();
    positions.dedup();
    let mut records = Vec::with_capacity(queries.len());
    for part in queries.chunks(chunk.max(1)) {
        let encoded = vocab.encode_compositions(part)?;
        let inputs: Vec<u32> = encoded.iter().flat_map(|e| e.input).collect();
        let out = forward_batch(params, config, &inputs, probe.iterations)?;
        for (i, (q, ex)) in part.iter().zip(&encoded).enumerate() {
            let bridge = vocab.entity(q.bridge)?;
            let trace = &out.traces[i];
            let mut sites = Vec::new();
            let mut found_at = None;
            for iteration in 0..=probe.iterations {
                for &position in &positions {
                    let top = lens_decode(trace.state(iteration, position - 1), params, probe.top_k)?;
                    let searched = (1..probe.iterations).contains(&iteration);
                    if searched && found_at.is_none() && top[0].0 == bridge {
                        found_at = Some(Site { iteration, position });
                    }
                    sites.push(SiteDecode {
                        iteration,
                        position,
                        top: top
                            .into_iter()
                            .map(|(t, s)| (t, s.to_f32().unwrap_or(f32::NAN)))
                            .collect(),
                    });
                }
            }
            let predicted = argmax_entity(out.logits_of(i), vocab.num_entities());
            records.push(TraceRecord {
                query: *q,
                sites,
                bridge_found: found_at.is_some(),
                found_at,
                predicted,
                prediction_correct: predicted == ex.target,
                degenerate: q.is_degenerate(),
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CircuitStats {
    pub n_queries: usize,
    pub n_correct: usize,
    pub n_correct_with_bridge: usize,
    pub n_bridge_found: usize,
    /// Degenerate records left out of the counts above.
    pub n_excluded: usize,
    pub bridge_rate_overall: f64,
    pub bridge_rate_among_correct: f64,
}

impl CircuitStats {
    fn from_counts(n_queries: usize, n_correct: usize, n_cwb: usize, n_bridge: usize, n_excluded: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            n_queries,
            n_correct,
            n_correct_with_bridge: n_cwb,
            n_bridge_found: n_bridge,
            n_excluded,
            bridge_rate_overall: ratio(n_cwb, n_queries),
            bridge_rate_among_correct: ratio(n_cwb, n_correct),
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.n_queries == 0 {
            0.0
        } else {
            self.n_correct as f64 / self.n_queries as f64
        }
    }

    /// Statistics of the union of the two record sets.
    pub fn merge(&self, other: &Self) -> Self {
        Self::from_counts(
            self.n_queries + other.n_queries,
            self.n_correct + other.n_correct,
            self.n_correct_with_bridge + other.n_correct_with_bridge,
            self.n_bridge_found + other.n_bridge_found,
            self.n_excluded + other.n_excluded,
        )
    }
}

/// Statistics with degenerate records excluded.
pub fn circuit_stats(records: &[TraceRecord]) -> Result<CircuitStats> {
    circuit_stats_with(records, false)
}

pub fn circuit_stats_with(records: &[TraceRecord], include_degenerate: bool) -> Result<CircuitStats> {
    if records.is_empty() {
        return Err(Error::EmptyInput("circuit_stats over no trace records".into()));
    }
    let (mut n, mut correct, mut cwb, mut bridge, mut excluded) = (0, 0, 0, 0, 0);
    for r in records {
        if r.degenerate && !include_degenerate {
            excluded += 1;
            continue;
        }
        n += 1;
        correct += usize::from(r.prediction_correct);
        bridge += usize::from(r.bridge_found);
        cwb += usize::from(r.prediction_correct && r.bridge_found);
    }
    Ok(CircuitStats::from_counts(n, correct, cwb, bridge, excluded))
}

/// Column order of trace shards.
pub const TRACE_COLUMNS: [&str; 13] = [
    "head",
    "r1",
    "r2",
    "bridge",
    "tail",
    "hop1_label",
    "hop2_label",
    "degenerate",
    "bridge_found",
    "found_at",
    "predicted",
    "prediction_correct",
    "top1",
];

/// Writes records as tab-separated lines after a `#`-prefixed header.
///
/// `found_at` is `iteration:position` or `-`; `top1` lists
/// `iteration:position=token` for every decoded site, comma-separated.
pub fn write_trace_shard<W: Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(w, "#{}", TRACE_COLUMNS.join("\t"))?;
    for r in records {
        let q = &r.query;
        let found = r
            .found_at
            .map_or_else(|| "-".to_string(), |s| format!("{}:{}", s.iteration, s.position));
        let mut top1 = String::new();
        for (i, s) in r.sites.iter().enumerate() {
            if i > 0 {
                top1.push(',');
            }
            let _ = write!(top1, "{}:{}={}", s.iteration, s.position, s.top[0].0);
        }
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{found}\t{}\t{}\t{top1}",
            q.head.0,
            q.r1.0,
            q.r2.0,
            q.bridge.0,
            q.tail.0,
            q.hop1_label.as_str(),
            q.hop2_label.as_str(),
            u8::from(r.degenerate),
            u8::from(r.bridge_found),
            r.predicted,
            u8::from(r.prediction_correct),
        )?;
    }
    Ok(())
}

/// Summary fields of one shard line; decoded scores are not persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLine {
    pub query: CompositionQuery,
    pub degenerate: bool,
    pub bridge_found: bool,
    pub found_at: Option<Site>,
    pub predicted: u32,
    pub prediction_correct: bool,
    pub top1: Vec<(Site, u32)>,
}

impl TraceLine {
    /// A record carrying only top-1 decodes, sufficient for [`circuit_stats`].
    pub fn into_record(self) -> TraceRecord {
        TraceRecord {
            query: self.query,
            sites: self
                .top1
                .into_iter()
                .map(|(s, t)| SiteDecode {
                    iteration: s.iteration,
                    position: s.position,
                    top: vec![(t, f32::NAN)],
                })
                .collect(),
            bridge_found: self.bridge_found,
            found_at: self.found_at,
            predicted: self.predicted,
            prediction_correct: self.prediction_correct,
            degenerate: self.degenerate,
        }
    }
}

pub fn read_trace_shard<R: BufRead>(r: R, file: &str) -> Result<Vec<TraceLine>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(file, lineno, e.to_string()))?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != TRACE_COLUMNS.len() {
            return Err(Error::parse(
                file,
                lineno,
                format!("{} fields, expected {}", f.len(), TRACE_COLUMNS.len()),
            ));
        }
        let num = |s: &str| -> Result<u32> {
            s.parse().map_err(|_| Error::parse(file, lineno, format!("bad number `{s}`")))
        };
        let flag = |s: &str| -> Result<bool> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(Error::parse(file, lineno, format!("bad flag `{s}`"))),
            }
        };
        let label = |s: &str| -> Result<SplitLabel> {
            SplitLabel::from_str(s).map_err(|_| Error::parse(file, lineno, format!("bad label `{s}`")))
        };
        let site = |s: &str| -> Result<Site> {
            let (a, b) = s
                .split_once(':')
                .ok_or_else(|| Error::parse(file, lineno, format!("bad site `{s}`")))?;
            Ok(Site {
                iteration: num(a)? as usize,
                position: num(b)? as usize,
            })
        };
        let found_at = if f[9] == "-" { None } else { Some(site(f[9])?) };
        let mut top1 = Vec::new();
        for item in f[12].split(',').filter(|s| !s.is_empty()) {
            let (s, t) = item
                .split_once('=')
                .ok_or_else(|| Error::parse(file, lineno, format!("bad decode `{item}`")))?;
            top1.push((site(s)?, num(t)?));
        }
        out.push(TraceLine {
            query: CompositionQuery {
                head: EntityId(num(f[0])?),
                r1: RelationId(num(f[1])?),
                r2: RelationId(num(f[2])?),
                bridge: EntityId(num(f[3])?),
                tail: EntityId(num(f[4])?),
                hop1_label: label(f[5])?,
                hop2_label: label(f[6])?,
            },
            degenerate: flag(f[7])?,
            bridge_found: flag(f[8])?,
            found_at,
            predicted: num(f[10])?,
            prediction_correct: flag(f[11])?,
            top1,
        });
    }
    Ok(out)
}
