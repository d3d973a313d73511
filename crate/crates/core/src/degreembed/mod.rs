//! DegreEmbed: degree-attended relation operators with a rank-T attention
//! chain on top.
//!
//! Each entity's sorted set of incident `(direction, relation)` slots is fed
//! through a BiLSTM; a softmax head turns the summary into `ρ_e`, a weight
//! per relation operator. Every stored entry in row `e` of operator `r` is
//! replaced by `ρ_e[r]`. Rule attention comes from `T` BiLSTMs that read the
//! query relation embedding `L` times, one softmax over operators per hop.

mod checkpoint;
mod train;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{bce, AutodiffError, Tape, Tensor, Var};
use crate::kgdata::{degree_features, DataError, EntityId, RelationId, Triple, Vocabulary};
use crate::neuralnets::{uniform, AttentionHead, BiLstm, ParamId, ParamStore};
use crate::sparseops::{one_hot, EdgeExclusion, OperatorSet};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use train::{augment_queries, train, EarlyStopping, StopDecision, TrainLogRecord, TrainOutcome};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint does not match dataset: {0}")]
    VocabMismatch(String),
    #[error("training diverged in epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: AutodiffError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Maximum rule length.
    #[serde(rename = "L")]
    pub rule_len: usize,
    /// Rank of the attention approximation.
    #[serde(rename = "T")]
    pub rank: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub inverse: bool,
    pub eps: f64,
    /// Weight operator rows by `ρ_e`; off gives plain TensorLog operators.
    pub degree: bool,
    /// Divide the state by `max(norm_floor, ‖u‖₁)` after every hop.
    pub normalize: bool,
    pub norm_floor: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            rule_len: 2,
            rank: 3,
            emb_dim: 128,
            hidden: 128,
            lr: 1e-3,
            batch: 128,
            max_epochs: 30,
            patience: 3,
            seed: 1234,
            inverse: true,
            eps: 1e-7,
            degree: true,
            normalize: true,
            norm_floor: 1.0,
        }
    }
}

impl HyperParams {
    /// Per-hop normalization floor, or `None` when normalization is off.
    pub fn norm(&self) -> Option<f64> {
        self.normalize.then_some(self.norm_floor)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidHyperParams(m.to_string()));
        if self.rule_len == 0 {
            return bad("L must be at least 1");
        }
        if self.rank == 0 {
            return bad("T must be at least 1");
        }
        if self.emb_dim == 0 || self.hidden == 0 {
            return bad("embedding and hidden sizes must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be a positive number");
        }
        if !(self.norm_floor > 0.0 && self.norm_floor.is_finite()) {
            return bad("norm_floor must be a positive number");
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad("eps must lie in (0, 0.5)");
        }
        Ok(())
    }
}

/// `a[j][l][k]`: rank `j`, hop `l`, operator `k` (0 is the identity).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub rank: usize,
    pub hops: usize,
    pub operators: usize,
    data: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(rank: usize, hops: usize, operators: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rank * hops * operators, "attention shape mismatch");
        Self {
            rank,
            hops,
            operators,
            data,
        }
    }

    /// Attention where every hop of every rank puts all mass on one slot.
    pub fn one_hot(rank: usize, operators: usize, path: &[usize]) -> Self {
        let mut data = vec![0.0; rank * path.len() * operators];
        for j in 0..rank {
            for (l, &k) in path.iter().enumerate() {
                data[(j * path.len() + l) * operators + k] = 1.0;
            }
        }
        Self::new(rank, path.len(), operators, data)
    }

    #[inline]
    pub fn get(&self, j: usize, l: usize, k: usize) -> f64 {
        self.data[(j * self.hops + l) * self.operators + k]
    }

    pub fn row(&self, j: usize, l: usize) -> &[f64] {
        let o = (j * self.hops + l) * self.operators;
        &self.data[o..o + self.operators]
    }
}

/// `B_r`: the pattern of `M_r` with row `e` of relation `r` set to `ρ_e[r]`.
pub fn build_degre_operators(ops: &OperatorSet, rho: &Tensor) -> OperatorSet {
    assert_eq!(
        rho.shape(),
        (ops.num_entities(), ops.num_relations()),
        "degree attention shape mismatch"
    );
    ops.map_relations(|op| {
        let r = op.rel.index();
        op.with_row_weights(|i| rho.get(i, r))
    })
}

/// Rank-T chained score of every candidate tail for query `(h, q, ?)`.
pub fn score_query(
    h: EntityId,
    attn: &AttentionTensor,
    ops: &OperatorSet,
    exclude: &EdgeExclusion,
    norm: Option<f64>,
) -> Vec<f64> {
    let n = ops.num_entities();
    assert_eq!(attn.operators, ops.num_operators(), "attention width mismatch");
    let mut s = vec![0.0; n];
    for j in 0..attn.rank {
        let mut u = one_hot(n, h.index());
        for l in 0..attn.hops {
            let mut next = vec![0.0; n];
            for (k, &a) in attn.row(j, l).iter().enumerate() {
                if a != 0.0 {
                    ops.apply_slot_acc(k, &u, exclude, a, &mut next);
                }
            }
            if let Some(floor) = norm {
                let d = next.iter().map(|x| x.abs()).sum::<f64>().max(floor);
                next.iter_mut().for_each(|x| *x /= d);
            }
            u = next;
        }
        for (a, b) in s.iter_mut().zip(&u) {
            *a += b;
        }
    }
    s
}

/// Cross-entropy against the one-hot target after clamping to `[ε, 1−ε]`.
pub fn loss(s: &[f64], t: EntityId, eps: f64) -> f64 {
    let clamped: Vec<f64> = s.iter().map(|x| x.clamp(eps, 1.0 - eps)).collect();
    bce(&clamped, t.index())
}

/// Tape version of [`score_query`] followed by [`loss`].
///
/// `attn[j][l]` is a `1 × K` row; `rho` is `E × (K-1)` or `None` for
/// unweighted operators.
#[allow(clippy::too_many_arguments)]
pub fn query_loss_on_tape(
    tape: &mut Tape,
    rho: Option<Var>,
    attn: &[Vec<Var>],
    ops: &Arc<OperatorSet>,
    query: &Triple,
    exclude: &EdgeExclusion,
    norm: Option<f64>,
    eps: f64,
) -> Var {
    let n = ops.num_entities();
    let start = tape.constant(Tensor::row_vector(one_hot(n, query.head.index())));
    let mut total: Option<Var> = None;
    for hops in attn {
        let mut u = start;
        for &a in hops {
            u = tape.sparse_chain(u, a, rho, ops, exclude);
            if let Some(floor) = norm {
                u = tape.normalize_l1(u, floor);
            }
        }
        total = Some(match total {
            None => u,
            Some(t) => tape.add(t, u),
        });
    }
    let s = total.expect("rank must be positive");
    let s = tape.clamp(s, eps, 1.0 - eps);
    tape.binary_cross_entropy(s, query.tail.index())
}

/// Degree-feature inputs, deduplicated by signature and bucketed by length.
#[derive(Debug, Clone)]
struct DegreeInputs {
    /// `(length, signature rows)` buckets in ascending length.
    groups: Vec<(usize, Vec<Vec<usize>>)>,
    /// Row of each entity's signature in the bucket-concatenated order.
    entity_rows: Vec<usize>,
    signatures: Vec<String>,
}

impl DegreeInputs {
    fn new(graph: &[Triple], vocab: &Vocabulary) -> Self {
        let nb = vocab.num_base_relations();
        let feats = degree_features(graph, vocab);
        let mut by_len: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
        let mut seen: BTreeMap<Vec<usize>, ()> = BTreeMap::new();
        let rows: Vec<Vec<usize>> = feats
            .iter()
            .map(|f| f.slots.iter().map(|s| s.embedding_row(nb)).collect())
            .collect();
        for r in &rows {
            if seen.insert(r.clone(), ()).is_none() {
                by_len.entry(r.len()).or_default().push(r.clone());
            }
        }
        let mut order: BTreeMap<&[usize], usize> = BTreeMap::new();
        let mut pos = 0;
        for sigs in by_len.values() {
            for s in sigs {
                order.insert(s, pos);
                pos += 1;
            }
        }
        let entity_rows = rows.iter().map(|r| order[r.as_slice()]).collect();
        let signatures = feats.iter().map(|f| f.signature(vocab)).collect();
        Self {
            groups: by_len.into_iter().collect(),
            entity_rows,
            signatures,
        }
    }
}

/// Trainable model bound to one vocabulary and reasoning graph.
#[derive(Debug, Clone)]
pub struct DegreEmbed {
    pub hp: HyperParams,
    pub store: ParamStore,
    num_entities: usize,
    num_ops: usize,
    degree_table: ParamId,
    degree_encoder: BiLstm,
    degree_head: AttentionHead,
    query_table: ParamId,
    rank_encoders: Vec<BiLstm>,
    rank_heads: Vec<AttentionHead>,
    inputs: DegreeInputs,
}

impl DegreEmbed {
    /// Fresh model with parameters drawn from `hp.seed`.
    ///
    /// The vocabulary's inverse flag must match `hp.inverse`.
    pub fn new(hp: HyperParams, vocab: &Vocabulary, graph: &[Triple]) -> Result<Self, ModelError> {
        hp.validate()?;
        if vocab.inverse_enabled() != hp.inverse {
            return Err(ModelError::InvalidHyperParams(
                "vocabulary inverse flag differs from hyperparameters".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut store = ParamStore::new();
        let nb = vocab.num_base_relations();
        let num_ops = vocab.num_relations();
        let (m, h) = (hp.emb_dim, hp.hidden);

        let degree_table = store.add("degree.emb", uniform(&mut rng, 2 * nb + 1, m, -0.1, 0.1));
        let degree_encoder = BiLstm::new(&mut store, "degree.lstm", m, h, &mut rng);
        let degree_head = AttentionHead::new(&mut store, "degree.head", 2 * h, num_ops, &mut rng);
        let query_table = store.add("query.emb", uniform(&mut rng, num_ops, m, -0.1, 0.1));
        let mut rank_encoders = Vec::new();
        let mut rank_heads = Vec::new();
        for j in 0..hp.rank {
            rank_encoders.push(BiLstm::new(&mut store, &format!("rank{j}.lstm"), m, h, &mut rng));
            rank_heads.push(AttentionHead::new(
                &mut store,
                &format!("rank{j}.head"),
                2 * h,
                num_ops + 1,
                &mut rng,
            ));
        }
        Ok(Self {
            hp,
            store,
            num_entities: vocab.num_entities(),
            num_ops,
            degree_table,
            degree_encoder,
            degree_head,
            query_table,
            rank_encoders,
            rank_heads,
            inputs: DegreeInputs::new(graph, vocab),
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Relation operators, identity excluded.
    pub fn num_relation_ops(&self) -> usize {
        self.num_ops
    }

    /// BiLSTM summaries `H`, one row per distinct degree signature.
    fn signature_encodings(&self, tape: &mut Tape, p: &[Var]) -> Var {
        let mut parts = Vec::with_capacity(self.inputs.groups.len());
        for (len, sigs) in &self.inputs.groups {
            let steps: Vec<Var> = (0..*len)
                .map(|i| {
                    let ids: Vec<usize> = sigs.iter().map(|s| s[i]).collect();
                    tape.embedding_lookup(p[self.degree_table.0], &ids)
                })
                .collect();
            parts.push(self.degree_encoder.encode(tape, p, &steps).summary);
        }
        tape.concat_rows(&parts)
    }

    /// `ρ`, `E × |operators|`, or `None` when degree weighting is off.
    pub fn degree_attention(&self, tape: &mut Tape, p: &[Var]) -> Option<Var> {
        if !self.hp.degree {
            return None;
        }
        let h = self.signature_encodings(tape, p);
        let rho_sig = self.degree_head.forward(tape, p, h);
        Some(tape.embedding_lookup(rho_sig, &self.inputs.entity_rows))
    }

    /// `out[j][l]` is `Q × K` attention for the given query relations.
    pub fn rule_attention(&self, tape: &mut Tape, p: &[Var], queries: &[RelationId]) -> Vec<Vec<Var>> {
        let ids: Vec<usize> = queries.iter().map(|q| q.index()).collect();
        let x = tape.embedding_lookup(p[self.query_table.0], &ids);
        let inputs = vec![x; self.hp.rule_len];
        self.rank_encoders
            .iter()
            .zip(&self.rank_heads)
            .map(|(enc, head)| {
                let out = enc.encode(tape, p, &inputs);
                out.steps.iter().map(|&s| head.forward(tape, p, s)).collect()
            })
            .collect()
    }

    /// Mean loss over `queries` on a single tape; used by gradient checks.
    pub fn batch_loss_on_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        ops: &Arc<OperatorSet>,
        vocab: &Vocabulary,
        queries: &[Triple],
    ) -> Var {
        let rels: Vec<RelationId> = queries.iter().map(|q| q.rel).collect();
        let rho = self.degree_attention(tape, p);
        let att = self.rule_attention(tape, p, &rels);
        let mut total = None;
        for (i, q) in queries.iter().enumerate() {
            let rows: Vec<Vec<Var>> = att
                .iter()
                .map(|hops| hops.iter().map(|&a| tape.slice_rows(a, i, 1)).collect())
                .collect();
            let excl = EdgeExclusion::for_query(vocab, q.head, q.rel, q.tail);
            let l = query_loss_on_tape(
                tape,
                rho,
                &rows,
                ops,
                q,
                &excl,
                self.hp.norm(),
                self.hp.eps,
            );
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l),
            });
        }
        let total = total.expect("empty query batch");
        tape.scale(total, 1.0 / queries.len() as f64)
    }

    /// Current `ρ` values, if degree weighting is on.
    pub fn degree_attention_values(&self) -> Option<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.leaves(&mut tape);
        self.degree_attention(&mut tape, &p)
            .map(|v| tape.value(v).clone())
    }

    /// Current attention tensors for each requested query relation.
    pub fn attention_for(&self, queries: &[RelationId]) -> Vec<AttentionTensor> {
        if queries.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let p = self.store.leaves(&mut tape);
        let att = self.rule_attention(&mut tape, &p, queries);
        let (t, l, k) = (self.hp.rank, self.hp.rule_len, self.num_ops + 1);
        (0..queries.len())
            .map(|qi| {
                let mut data = Vec::with_capacity(t * l * k);
                for hops in &att {
                    for &a in hops {
                        data.extend_from_slice(tape.value(a).row(qi));
                    }
                }
                AttentionTensor::new(t, l, k, data)
            })
            .collect()
    }

    /// Operators used for scoring: `B_r` when degree weighting is on.
    pub fn scoring_operators(&self, ops: &OperatorSet) -> OperatorSet {
        match self.degree_attention_values() {
            Some(rho) => build_degre_operators(ops, &rho),
            None => ops.clone(),
        }
    }

    /// Entity representations `H = concat(h_d, h'_1)`, `E × 2·hidden`.
    pub fn entity_embeddings(&self) -> Tensor {
        let mut tape = Tape::new();
        let p = self.store.leaves(&mut tape);
        let h = self.signature_encodings(&mut tape, &p);
        let e = tape.embedding_lookup(h, &self.inputs.entity_rows);
        tape.value(e).clone()
    }

    /// Degree-feature signature string of every entity.
    pub fn entity_signatures(&self) -> &[String] {
        &self.inputs.signatures
    }

    pub(crate) fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.store.len()).map(ParamId)
    }
}
