//! Horn rules read off a trained attention tensor.
//!
//! Expanding the rank-T product gives one confidence per operator sequence:
//! `α(k_1..k_L) = Σ_j Π_l a[j][l][k_l]`. Identity hops carry no relation, so
//! sequences that differ only in where their identity hops sit describe the
//! same rule and are merged by summing.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{self, Write};

use crate::degreembed::AttentionTensor;
use crate::kgdata::{RelationId, Vocabulary};
use crate::report::sig6;
use crate::sparseops::OperatorSet;

/// Default cut-off on normalized confidence for reported rules.
pub const MIN_NORMALIZED: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RulePattern {
    pub head: RelationId,
    pub body: Vec<RelationId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRule {
    pub pattern: RulePattern,
    pub confidence: f64,
    pub normalized: f64,
}

/// Confidence of every identity-elided body, the empty body included.
pub fn merged_confidences(attn: &AttentionTensor) -> BTreeMap<Vec<RelationId>, f64> {
    let mut merged = BTreeMap::new();
    let mut body = Vec::with_capacity(attn.hops);
    let prefix = vec![1.0; attn.rank];
    enumerate(attn, 0, &prefix, &mut body, &mut merged);
    merged
}

fn enumerate(
    attn: &AttentionTensor,
    hop: usize,
    prefix: &[f64],
    body: &mut Vec<RelationId>,
    out: &mut BTreeMap<Vec<RelationId>, f64>,
) {
    if hop == attn.hops {
        *out.entry(body.clone()).or_insert(0.0) += prefix.iter().sum::<f64>();
        return;
    }
    for k in 0..attn.operators {
        let next: Vec<f64> = prefix
            .iter()
            .enumerate()
            .map(|(j, p)| p * attn.get(j, hop, k))
            .collect();
        match OperatorSet::slot_relation(k) {
            None => enumerate(attn, hop + 1, &next, body, out),
            Some(r) => {
                body.push(r);
                enumerate(attn, hop + 1, &next, body, out);
                body.pop();
            }
        }
    }
}

/// Top `top_n` rules for `head`, dropping those whose normalized confidence
/// is below `min_normalized`. Ordered by confidence, then body.
pub fn extract_rules(
    head: RelationId,
    attn: &AttentionTensor,
    top_n: usize,
    min_normalized: f64,
) -> Vec<ScoredRule> {
    assert!(top_n > 0, "top_n must be positive");
    let merged = merged_confidences(attn);
    let max = merged
        .iter()
        .filter(|(b, _)| !b.is_empty())
        .map(|(_, &a)| a)
        .fold(0.0, f64::max);
    let mut rules: Vec<ScoredRule> = merged
        .into_iter()
        .filter(|(b, _)| !b.is_empty())
        .map(|(body, confidence)| ScoredRule {
            pattern: RulePattern { head, body },
            confidence,
            normalized: if max > 0.0 { confidence / max } else { 0.0 },
        })
        .filter(|r| r.confidence > 0.0 && r.normalized >= min_normalized)
        .collect();
    rules.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.pattern.body.cmp(&b.pattern.body))
    });
    rules.truncate(top_n);
    rules
}

pub fn format_body(body: &[RelationId], vocab: &Vocabulary) -> String {
    body.iter()
        .map(|&r| vocab.relation_name(r))
        .collect::<Vec<_>>()
        .join(" ∧ ")
}

/// `head  body  confidence  normalized`, with a header line.
pub fn write_rules_tsv<W: Write>(w: &mut W, rules: &[ScoredRule], vocab: &Vocabulary) -> io::Result<()> {
    writeln!(w, "head\tbody\tconfidence\tnormalized")?;
    for r in rules {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            vocab.relation_name(r.pattern.head),
            format_body(&r.pattern.body, vocab),
            sig6(r.confidence),
            sig6(r.normalized)
        )?;
    }
    Ok(())
}
