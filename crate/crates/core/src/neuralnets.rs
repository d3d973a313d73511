//! Parameter storage, LSTM/BiLSTM encoders, softmax heads and Adam.
//!
//! Layers do not own tensors. They hold [`ParamId`]s into a [`ParamStore`]
//! and are applied to the leaf variables returned by
//! [`ParamStore::leaves`], so one store can be put on many tapes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf, indexed by `ParamId`.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Glorot/Xavier uniform with the given fan sizes.
pub fn xavier_uniform(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, rows, cols, -limit, limit)
}

/// Standard LSTM cell. The four gates are packed column-wise in the order
/// input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = hidden_dim;
        let w = xavier_uniform(rng, input_dim, 4 * h, input_dim, h);
        let u = xavier_uniform(rng, h, 4 * h, h, h);
        let mut b = Tensor::zeros(1, 4 * h);
        b.data_mut()[h..2 * h].fill(1.0);
        Self {
            input_dim,
            hidden_dim,
            w: store.add(format!("{prefix}.w"), w),
            u: store.add(format!("{prefix}.u"), u),
            b: store.add(format!("{prefix}.b"), b),
        }
    }

    /// One step over a batch: `x` is `B × input_dim`, `h`/`c` are `B × hidden`.
    pub fn step(&self, tape: &mut Tape, p: &[Var], x: Var, h: Var, c: Var) -> (Var, Var) {
        let n = self.hidden_dim;
        let xw = tape.matmul(x, p[self.w.0]);
        let hu = tape.matmul(h, p[self.u.0]);
        let z = tape.add(xw, hu);
        let z = tape.add_row(z, p[self.b.0]);
        let zi = tape.slice_cols(z, 0, n);
        let zf = tape.slice_cols(z, n, n);
        let zo = tape.slice_cols(z, 2 * n, n);
        let zg = tape.slice_cols(z, 3 * n, n);
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let o = tape.sigmoid(zo);
        let g = tape.tanh(zg);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_next = tape.add(fc, ig);
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc);
        (h_next, c_next)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Debug, Clone)]
pub struct BiLstmOutput {
    /// Per position `i`: `concat(h_i, h'_i)`, each `B × 2·hidden`.
    pub steps: Vec<Var>,
    /// `concat(h_d, h'_1)`, `B × 2·hidden`.
    pub summary: Var,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{prefix}.fwd"), input_dim, hidden_dim, rng),
            backward: LstmCell::new(store, &format!("{prefix}.bwd"), input_dim, hidden_dim, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim
    }

    /// Encodes a batch of equal-length sequences; `inputs[i]` is `B × m`.
    pub fn encode(&self, tape: &mut Tape, p: &[Var], inputs: &[Var]) -> BiLstmOutput {
        assert!(!inputs.is_empty(), "BiLSTM input sequence is empty");
        let batch = tape.value(inputs[0]).rows();
        let n = self.hidden_dim();
        let zero = tape.constant(Tensor::zeros(batch, n));

        let (mut h, mut c) = (zero, zero);
        let mut fwd = Vec::with_capacity(inputs.len());
        for &x in inputs {
            (h, c) = self.forward.step(tape, p, x, h, c);
            fwd.push(h);
        }
        let (mut h, mut c) = (zero, zero);
        let mut bwd = vec![zero; inputs.len()];
        for (i, &x) in inputs.iter().enumerate().rev() {
            (h, c) = self.backward.step(tape, p, x, h, c);
            bwd[i] = h;
        }
        let steps = fwd
            .iter()
            .zip(&bwd)
            .map(|(&a, &b)| tape.concat_cols(&[a, b]))
            .collect();
        let summary = tape.concat_cols(&[fwd[inputs.len() - 1], bwd[0]]);
        BiLstmOutput { steps, summary }
    }
}

/// `softmax(xW + b)` row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub in_dim: usize,
    pub out_dim: usize,
    w: ParamId,
    b: ParamId,
}

impl AttentionHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            in_dim,
            out_dim,
            w: store.add(
                format!("{prefix}.w"),
                xavier_uniform(rng, in_dim, out_dim, in_dim, out_dim),
            ),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(1, out_dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let z = tape.matmul(x, p[self.w.0]);
        let z = tape.add_row(z, p[self.b.0]);
        tape.softmax(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; parameters and moments were left untouched.
    Skipped,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub skipped: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            skipped: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `grads[i]` belongs to parameter `i`; `None` counts as zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> StepOutcome {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        let finite = grads
            .iter()
            .flatten()
            .all(|g| g.data().iter().all(|x| x.is_finite()));
        if !finite {
            self.skipped += 1;
            return StepOutcome::Skipped;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            match &grads[i] {
                Some(g) => {
                    assert_eq!(g.shape(), p.shape(), "gradient shape mismatch");
                    for (((x, mi), vi), gi) in
                        p.data_mut().iter_mut().zip(m).zip(v).zip(g.data())
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        *x -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                    }
                }
                None => {
                    for ((x, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                        *mi *= self.beta1;
                        *vi *= self.beta2;
                        if *mi != 0.0 {
                            *x -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                        }
                    }
                }
            }
        }
        StepOutcome::Applied
    }
}
