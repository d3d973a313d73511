//! Filtered ranking metrics (MRR, Hit@k) with tie-averaged ranks.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::degreembed::{augment_queries, score_query, DegreEmbed};
use crate::kgdata::{EntityId, RelationId, SplitDataset, Triple, Vocabulary};
use crate::sparseops::{EdgeExclusion, OperatorSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankResult {
    pub query: Triple,
    pub rank: f64,
    pub score_gold: f64,
}

/// `1 + #{better} + #{tied}/2` over candidates that are neither the gold
/// answer nor listed in `known`. `known` may contain `gold`.
pub fn filtered_rank(s: &[f64], gold: EntityId, known: &[EntityId]) -> f64 {
    let g = gold.index();
    assert!(g < s.len(), "gold entity {g} out of range {}", s.len());
    let sg = s[g];
    let (mut greater, mut equal) = (0usize, 0usize);
    for (i, &x) in s.iter().enumerate() {
        if i == g {
            continue;
        }
        if x > sg {
            greater += 1;
        } else if x == sg {
            equal += 1;
        }
    }
    let mut seen = HashSet::with_capacity(known.len());
    for k in known {
        if k.index() == g || !seen.insert(*k) {
            continue;
        }
        let x = s[k.index()];
        if x > sg {
            greater -= 1;
        } else if x == sg {
            equal -= 1;
        }
    }
    1.0 + greater as f64 + equal as f64 / 2.0
}

/// Every true answer of every `(head, relation)` query over all splits,
/// including inverse-direction queries when the vocabulary has inverses.
#[derive(Debug, Clone, Default)]
pub struct KnownAnswers {
    map: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl KnownAnswers {
    pub fn new(data: &SplitDataset) -> Self {
        let mut sets: HashMap<(EntityId, RelationId), HashSet<EntityId>> = HashMap::new();
        for t in data.all_triples() {
            sets.entry((t.head, t.rel)).or_default().insert(t.tail);
            if data.vocab.inverse_enabled() {
                let inv = data.vocab.inverse_of(t.rel);
                sets.entry((t.tail, inv)).or_default().insert(t.head);
            }
        }
        let map = sets
            .into_iter()
            .map(|(k, v)| {
                let mut v: Vec<EntityId> = v.into_iter().collect();
                v.sort_unstable();
                (k, v)
            })
            .collect();
        Self { map }
    }

    pub fn get(&self, head: EntityId, rel: RelationId) -> &[EntityId] {
        self.map.get(&(head, rel)).map_or(&[], Vec::as_slice)
    }
}

pub fn metrics_from_ranks(ranks: &[f64]) -> Metrics {
    let n = ranks.len();
    if n == 0 {
        return Metrics {
            mrr: 0.0,
            hit1: 0.0,
            hit3: 0.0,
            hit10: 0.0,
            n_queries: 0,
        };
    }
    let frac = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    Metrics {
        mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n as f64,
        hit1: frac(1.0),
        hit3: frac(3.0),
        hit10: frac(10.0),
        n_queries: n,
    }
}

/// Ranks each query with the model, gold edge removed from the operators.
pub fn rank_queries(
    model: &DegreEmbed,
    ops: &OperatorSet,
    vocab: &Vocabulary,
    queries: &[Triple],
    known: &KnownAnswers,
) -> Vec<RankResult> {
    let scoring = model.scoring_operators(ops);
    let mut rels: Vec<RelationId> = queries.iter().map(|q| q.rel).collect();
    rels.sort_unstable();
    rels.dedup();
    let attn = model.attention_for(&rels);
    let norm = model.hp.norm();
    queries
        .par_iter()
        .map(|q| {
            let a = &attn[rels.binary_search(&q.rel).expect("relation listed")];
            let excl = EdgeExclusion::for_query(vocab, q.head, q.rel, q.tail);
            let s = score_query(q.head, a, &scoring, &excl, norm);
            RankResult {
                query: *q,
                rank: filtered_rank(&s, q.tail, known.get(q.head, q.rel)),
                score_gold: s[q.tail.index()],
            }
        })
        .collect()
}

/// Metrics over `triples`, augmented with inverse queries like training.
pub fn evaluate(
    model: &DegreEmbed,
    data: &SplitDataset,
    ops: &OperatorSet,
    known: &KnownAnswers,
    triples: &[Triple],
) -> Metrics {
    let queries = augment_queries(triples, &data.vocab);
    let ranks: Vec<f64> = rank_queries(model, ops, &data.vocab, &queries, known)
        .iter()
        .map(|r| r.rank)
        .collect();
    metrics_from_ranks(&ranks)
}
