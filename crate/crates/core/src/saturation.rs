//! Structural rule quality from exhaustive walk enumeration.
//!
//! For a head relation `q` and each of its triples `(h, q, t)`, every
//! relation-labelled walk from `h` to `t` is enumerated with the triple's own
//! edge removed. A pattern's macro saturation `γ` is the fraction of triples
//! it connects at all; its micro saturation `δ` is the mean share of walks it
//! accounts for; `η = γ·δ`.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::kgdata::{EntityId, RelationId, Triple, Vocabulary};
use crate::report::sig6;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SaturationError {
    #[error("relation {0} has no triples in the reasoning graph")]
    EmptyRelation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaturationOptions {
    /// Longest pattern considered.
    pub max_len: usize,
    /// Count single-relation patterns in the walk universe.
    pub include_unary: bool,
}

impl Default for SaturationOptions {
    fn default() -> Self {
        Self {
            max_len: 2,
            include_unary: false,
        }
    }
}

impl SaturationOptions {
    pub fn min_len(&self) -> usize {
        if self.include_unary {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaturationRecord {
    pub head: RelationId,
    pub pattern: Vec<RelationId>,
    pub gamma: f64,
    pub delta: f64,
    pub eta: f64,
}

/// Outgoing base-relation edges per entity.
#[derive(Debug, Clone)]
pub struct Adjacency {
    out: Vec<Vec<(RelationId, EntityId)>>,
}

impl Adjacency {
    pub fn new(g: &[Triple], num_entities: usize) -> Self {
        let mut out = vec![Vec::new(); num_entities];
        for t in g {
            out[t.head.index()].push((t.rel, t.tail));
        }
        for row in &mut out {
            row.sort_unstable();
            row.dedup();
        }
        Self { out }
    }
}

/// Walks from `skip.head` to `skip.tail` that avoid the edge `skip`, counted
/// per pattern for every length in `min_len..=max_len`.
pub fn walks_by_pattern(
    adj: &Adjacency,
    skip: &Triple,
    min_len: usize,
    max_len: usize,
) -> BTreeMap<Vec<RelationId>, u64> {
    let mut out = BTreeMap::new();
    let mut path = Vec::with_capacity(max_len);
    dfs(adj, skip, skip.head, min_len, max_len, &mut path, &mut out);
    out
}

fn dfs(
    adj: &Adjacency,
    skip: &Triple,
    node: EntityId,
    min_len: usize,
    max_len: usize,
    path: &mut Vec<RelationId>,
    out: &mut BTreeMap<Vec<RelationId>, u64>,
) {
    if path.len() >= min_len && node == skip.tail && !path.is_empty() {
        *out.entry(path.clone()).or_insert(0) += 1;
    }
    if path.len() == max_len {
        return;
    }
    for &(r, v) in &adj.out[node.index()] {
        if node == skip.head && r == skip.rel && v == skip.tail {
            continue;
        }
        path.push(r);
        dfs(adj, skip, v, min_len, max_len, path, out);
        path.pop();
    }
}

/// Walks following exactly `pattern` from `skip.head` to `skip.tail`.
pub fn pattern_walks(adj: &Adjacency, skip: &Triple, pattern: &[RelationId]) -> u64 {
    fn go(adj: &Adjacency, skip: &Triple, node: EntityId, pattern: &[RelationId]) -> u64 {
        let Some((&r, rest)) = pattern.split_first() else {
            return u64::from(node == skip.tail);
        };
        adj.out[node.index()]
            .iter()
            .filter(|&&(er, v)| er == r && !(node == skip.head && er == skip.rel && v == skip.tail))
            .map(|&(_, v)| go(adj, skip, v, rest))
            .sum()
    }
    go(adj, skip, skip.head, pattern)
}

fn head_triples(g: &[Triple], q: RelationId) -> Vec<Triple> {
    let mut ts: Vec<Triple> = g.iter().filter(|t| t.rel == q).copied().collect();
    ts.sort_unstable();
    ts.dedup();
    ts
}

fn non_empty(ts: &[Triple], q: RelationId, vocab: &Vocabulary) -> Result<(), SaturationError> {
    if ts.is_empty() {
        Err(SaturationError::EmptyRelation(vocab.relation_name(q)))
    } else {
        Ok(())
    }
}

/// Fraction of `q`'s triples joined by at least one walk of `pattern`.
pub fn macro_saturation(
    pattern: &[RelationId],
    q: RelationId,
    g: &[Triple],
    vocab: &Vocabulary,
) -> Result<f64, SaturationError> {
    let ts = head_triples(g, q);
    non_empty(&ts, q, vocab)?;
    let adj = Adjacency::new(g, vocab.num_entities());
    let hits = ts
        .par_iter()
        .filter(|t| pattern_walks(&adj, t, pattern) > 0)
        .count();
    Ok(hits as f64 / ts.len() as f64)
}

/// Mean over `q`'s triples of the share of walks that follow `pattern`.
pub fn micro_saturation(
    pattern: &[RelationId],
    q: RelationId,
    g: &[Triple],
    vocab: &Vocabulary,
    opts: SaturationOptions,
) -> Result<f64, SaturationError> {
    assert!(
        (opts.min_len()..=opts.max_len).contains(&pattern.len()),
        "pattern length outside the walk universe"
    );
    let ts = head_triples(g, q);
    non_empty(&ts, q, vocab)?;
    let adj = Adjacency::new(g, vocab.num_entities());
    let ratios: Vec<f64> = ts
        .par_iter()
        .map(|t| {
            let total: u64 = walks_by_pattern(&adj, t, opts.min_len(), opts.max_len)
                .values()
                .sum();
            if total == 0 {
                0.0
            } else {
                pattern_walks(&adj, t, pattern) as f64 / total as f64
            }
        })
        .collect();
    Ok(ratios.iter().sum::<f64>() / ts.len() as f64)
}

/// Every pattern with `γ > 0` for each head, ordered by head then `η`
/// descending (pattern order breaks ties). Heads without triples are skipped.
pub fn saturation_report(
    g: &[Triple],
    vocab: &Vocabulary,
    heads: &[RelationId],
    opts: SaturationOptions,
    top_n: Option<usize>,
) -> Vec<SaturationRecord> {
    let adj = Adjacency::new(g, vocab.num_entities());
    let mut out = Vec::new();
    for &q in heads {
        let ts = head_triples(g, q);
        if ts.is_empty() {
            continue;
        }
        let per_triple: Vec<BTreeMap<Vec<RelationId>, u64>> = ts
            .par_iter()
            .map(|t| walks_by_pattern(&adj, t, opts.min_len(), opts.max_len))
            .collect();
        let mut acc: BTreeMap<Vec<RelationId>, (usize, f64)> = BTreeMap::new();
        for walks in &per_triple {
            let total: u64 = walks.values().sum();
            for (p, &c) in walks {
                let e = acc.entry(p.clone()).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += c as f64 / total as f64;
            }
        }
        let n = ts.len() as f64;
        let mut recs: Vec<SaturationRecord> = acc
            .into_iter()
            .map(|(pattern, (hits, ratio))| {
                let gamma = hits as f64 / n;
                let delta = ratio / n;
                SaturationRecord {
                    head: q,
                    pattern,
                    gamma,
                    delta,
                    eta: gamma * delta,
                }
            })
            .collect();
        recs.sort_by(|a, b| b.eta.total_cmp(&a.eta).then_with(|| a.pattern.cmp(&b.pattern)));
        if let Some(k) = top_n {
            recs.truncate(k);
        }
        out.extend(recs);
    }
    out
}

pub fn format_pattern(pattern: &[RelationId], vocab: &Vocabulary) -> String {
    let names: Vec<String> = pattern.iter().map(|&r| vocab.relation_name(r)).collect();
    format!("[{}]", names.join(", "))
}

/// `head  pattern  gamma  delta  eta`, with a header line.
pub fn write_saturation_tsv<W: Write>(
    w: &mut W,
    records: &[SaturationRecord],
    vocab: &Vocabulary,
) -> io::Result<()> {
    writeln!(w, "head\tpattern\tgamma\tdelta\teta")?;
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            vocab.relation_name(r.head),
            format_pattern(&r.pattern, vocab),
            sig6(r.gamma),
            sig6(r.delta),
            sig6(r.eta)
        )?;
    }
    Ok(())
}
