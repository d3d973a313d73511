//! TensorLog adjacency operators and left vector–operator products.
//!
//! Operators are stored row-major (one adjacency list per head entity) since
//! every product in the model chains from a row vector `v_h^T`.

use crate::kgdata::{EntityId, RelationId, Triple, Vocabulary};

/// Row-indexed weighted adjacency matrix of one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub rel: RelationId,
    num_entities: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseOperator {
    /// 0/1 operator from `(row, col)` pairs. Duplicates collapse.
    pub fn from_pairs(rel: RelationId, num_entities: usize, mut pairs: Vec<(u32, u32)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0usize; num_entities + 1];
        for &(r, c) in &pairs {
            assert!(
                (r as usize) < num_entities && (c as usize) < num_entities,
                "entity id out of range"
            );
            row_ptr[r as usize + 1] += 1;
        }
        for i in 0..num_entities {
            row_ptr[i + 1] += row_ptr[i];
        }
        let cols: Vec<u32> = pairs.iter().map(|&(_, c)| c).collect();
        let weights = vec![1.0; cols.len()];
        Self {
            rel,
            num_entities,
            row_ptr,
            cols,
            weights,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.weights[a..b])
    }

    #[inline]
    pub fn row_cols(&self, i: usize) -> &[u32] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, w) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(p) => w[p],
            Err(_) => 0.0,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.num_entities).flat_map(move |i| {
            let (cols, w) = self.row(i);
            cols.iter().zip(w).map(move |(&c, &x)| (i, c as usize, x))
        })
    }

    /// Same sparsity pattern, every entry of row `i` set to `row_weight(i)`.
    pub fn with_row_weights(&self, row_weight: impl Fn(usize) -> f64) -> Self {
        let mut weights = Vec::with_capacity(self.weights.len());
        for i in 0..self.num_entities {
            let w = row_weight(i);
            assert!(w >= 0.0, "operator weights must be non-negative");
            weights.extend(std::iter::repeat(w).take(self.row_ptr[i + 1] - self.row_ptr[i]));
        }
        Self {
            weights,
            ..self.clone()
        }
    }

    pub fn same_pattern(&self, other: &SparseOperator) -> bool {
        self.row_ptr == other.row_ptr && self.cols == other.cols
    }

    pub fn transpose(&self, rel: RelationId) -> Self {
        let pairs = self
            .entries()
            .map(|(i, j, _)| (j as u32, i as u32))
            .collect();
        Self::from_pairs(rel, self.num_entities, pairs)
    }
}

/// Edges removed from specific operators for one query.
///
/// Holds `(relation, head, tail)` entries; a product with the operator of
/// `relation` skips the `(head, tail)` cell.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeExclusion {
    edges: Vec<(RelationId, u32, u32)>,
}

impl EdgeExclusion {
    pub fn none() -> Self {
        Self::default()
    }

    /// Removes the answering edge of query `(h, q, t)`: `(h, t)` from `q`
    /// and, when inverses exist, `(t, h)` from `inv_q`. Works for a query
    /// posed on either a base or an inverse relation.
    pub fn for_query(vocab: &Vocabulary, h: EntityId, q: RelationId, t: EntityId) -> Self {
        let mut edges = vec![(q, h.0, t.0)];
        if vocab.inverse_enabled() {
            edges.push((vocab.inverse_of(q), t.0, h.0));
        }
        Self { edges }
    }

    pub fn push(&mut self, rel: RelationId, head: EntityId, tail: EntityId) {
        self.edges.push((rel, head.0, tail.0));
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// `(head, tail)` pairs excluded from the operator of `rel`.
    pub fn pairs_for(&self, rel: RelationId) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges
            .iter()
            .filter(move |(r, _, _)| *r == rel)
            .map(|&(_, h, t)| (h, t))
    }

    /// `(relation, tail)` of every excluded edge leaving `head`.
    pub fn rows_matching(&self, head: u32) -> Vec<(u32, u32)> {
        self.edges
            .iter()
            .filter(|e| e.1 == head)
            .map(|&(r, _, t)| (r.0, t))
            .collect()
    }

    #[inline]
    pub fn contains(&self, rel: RelationId, head: u32, tail: u32) -> bool {
        self.edges
            .iter()
            .any(|&(r, h, t)| r == rel && h == head && t == tail)
    }
}

/// All relation operators of a graph. Operator index 0 is the identity;
/// index `k + 1` is relation `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSet {
    num_entities: usize,
    relations: Vec<SparseOperator>,
}

impl OperatorSet {
    pub fn new(num_entities: usize, relations: Vec<SparseOperator>) -> Self {
        for (k, op) in relations.iter().enumerate() {
            assert_eq!(op.rel.index(), k, "operators must be indexed by relation id");
            assert_eq!(op.num_entities, num_entities);
        }
        Self {
            num_entities,
            relations,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Number of relation operators (identity excluded).
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Number of operators including the identity slot.
    pub fn num_operators(&self) -> usize {
        self.relations.len() + 1
    }

    pub fn relation(&self, rel: RelationId) -> &SparseOperator {
        &self.relations[rel.index()]
    }

    pub fn relations(&self) -> &[SparseOperator] {
        &self.relations
    }

    /// Relation behind operator slot `k`, `None` for the identity.
    pub fn slot_relation(k: usize) -> Option<RelationId> {
        k.checked_sub(1).map(|r| RelationId(r as u32))
    }

    pub fn map_relations(&self, f: impl Fn(&SparseOperator) -> SparseOperator) -> Self {
        Self::new(self.num_entities, self.relations.iter().map(f).collect())
    }

    /// `out += scale · (v^T op_k)`, where slot 0 is the identity.
    pub fn apply_slot_acc(
        &self,
        k: usize,
        v: &[f64],
        exclude: &EdgeExclusion,
        scale: f64,
        out: &mut [f64],
    ) {
        match Self::slot_relation(k) {
            None => {
                assert_eq!(v.len(), self.num_entities, "state vector length mismatch");
                for (o, x) in out.iter_mut().zip(v) {
                    *o += scale * x;
                }
            }
            Some(rel) => vec_matmul_acc(v, self.relation(rel), exclude, scale, out),
        }
    }
}

/// TensorLog operators over the reasoning graph `g` (base relations only).
/// Inverse operators are transposes, present when the vocabulary enables them.
pub fn build_operators(g: &[Triple], vocab: &Vocabulary) -> OperatorSet {
    let n = vocab.num_entities();
    let r = vocab.num_base_relations();
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); vocab.num_relations()];
    for t in g {
        assert!(t.rel.index() < r, "reasoning graph holds base relations only");
        pairs[t.rel.index()].push((t.head.0, t.tail.0));
        if vocab.inverse_enabled() {
            pairs[t.rel.index() + r].push((t.tail.0, t.head.0));
        }
    }
    let ops = pairs
        .into_iter()
        .enumerate()
        .map(|(k, p)| SparseOperator::from_pairs(RelationId(k as u32), n, p))
        .collect();
    OperatorSet::new(n, ops)
}

/// `out[j] = Σ_i v[i]·op[i][j]` over entries not listed in `exclude`.
pub fn vec_matmul(v: &[f64], op: &SparseOperator, exclude: &EdgeExclusion) -> Vec<f64> {
    let mut out = vec![0.0; op.num_entities];
    vec_matmul_acc(v, op, exclude, 1.0, &mut out);
    out
}

/// `out += scale · (v^T op)` with exclusions.
pub fn vec_matmul_acc(
    v: &[f64],
    op: &SparseOperator,
    exclude: &EdgeExclusion,
    scale: f64,
    out: &mut [f64],
) {
    assert_eq!(v.len(), op.num_entities, "state vector length mismatch");
    assert_eq!(out.len(), op.num_entities, "output length mismatch");
    let excluded: Vec<(u32, u32)> = exclude.pairs_for(op.rel).collect();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let (cols, w) = op.row(i);
        for (&c, &x) in cols.iter().zip(w) {
            if !excluded.is_empty() && excluded.contains(&(i as u32, c)) {
                continue;
            }
            out[c as usize] += scale * vi * x;
        }
    }
}

/// Exact walk counts `v_h^T M_{r1}···M_{rl}` as integers, ignoring weights.
pub fn path_counts(
    h: EntityId,
    pattern: &[RelationId],
    ops: &OperatorSet,
    exclude: &EdgeExclusion,
) -> Vec<u64> {
    let n = ops.num_entities();
    let mut cur = vec![0u64; n];
    cur[h.index()] = 1;
    for &rel in pattern {
        let op = ops.relation(rel);
        let excluded: Vec<(u32, u32)> = exclude.pairs_for(rel).collect();
        let mut next = vec![0u64; n];
        for (i, &ci) in cur.iter().enumerate() {
            if ci == 0 {
                continue;
            }
            for &c in op.row_cols(i) {
                if excluded.contains(&(i as u32, c)) {
                    continue;
                }
                next[c as usize] += ci;
            }
        }
        cur = next;
    }
    cur
}

/// Number of walks from `h` to `t` whose relation labels follow `pattern`.
pub fn count_paths(
    h: EntityId,
    t: EntityId,
    pattern: &[RelationId],
    ops: &OperatorSet,
    exclude: &EdgeExclusion,
) -> u64 {
    assert!(!pattern.is_empty(), "pattern must be non-empty");
    path_counts(h, pattern, ops, exclude)[t.index()]
}

pub fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}
