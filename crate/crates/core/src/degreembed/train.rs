//! Mini-batch training with early stopping on filtered validation MRR.
//!
//! One batch runs in two stages. The shared encoders (degree attention and
//! rule attention for the batch's query relations) are recorded on a batch
//! tape. Each example then gets its own small tape holding copies of those
//! outputs as leaves, so examples run in parallel. Their gradients are summed
//! in batch order and pushed back through the batch tape as seeds.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{query_loss_on_tape, DegreEmbed, ModelError};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::evalrank::{evaluate, KnownAnswers};
use crate::kgdata::{RelationId, SplitDataset, Triple, Vocabulary};
use crate::neuralnets::{Adam, StepOutcome};
use crate::sparseops::{build_operators, EdgeExclusion, OperatorSet};

/// `(h, q, t)` plus `(t, inv_q, h)` when the vocabulary has inverses.
pub fn augment_queries(triples: &[Triple], vocab: &Vocabulary) -> Vec<Triple> {
    let mut out = Vec::with_capacity(triples.len() * 2);
    for t in triples {
        out.push(*t);
        if vocab.inverse_enabled() {
            out.push(Triple::new(t.tail, vocab.inverse_of(t.rel), t.head));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to beat the best value.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    stale: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> StopDecision {
        self.epoch += 1;
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.best_epoch = self.epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::NoImprovement
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mrr: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_valid_mrr: f64,
    pub epochs_run: usize,
    pub log: Vec<TrainLogRecord>,
    pub skipped_batches: u64,
    /// Optimizer state at the best epoch.
    pub adam: Adam,
}

struct ExampleGrad {
    loss: f64,
    rho: Option<Tensor>,
    attn: Vec<Tensor>,
}

/// Trains in place; on return the model holds the best-validation weights.
pub fn train(
    model: &mut DegreEmbed,
    data: &SplitDataset,
    mut on_epoch: impl FnMut(&TrainLogRecord),
) -> Result<TrainOutcome, ModelError> {
    let hp = model.hp.clone();
    let vocab = &data.vocab;
    if vocab.inverse_enabled() != hp.inverse {
        return Err(ModelError::InvalidHyperParams(
            "vocabulary inverse flag differs from hyperparameters".into(),
        ));
    }
    let ops = Arc::new(build_operators(&data.graph(), vocab));
    let queries = augment_queries(&data.train, vocab);
    let known = KnownAnswers::new(data);

    let mut adam = Adam::new(&model.store, hp.lr);
    let mut stopper = EarlyStopping::new(hp.patience);
    let mut best = (model.store.clone(), adam.clone());
    let mut log = Vec::new();
    let started = Instant::now();

    for epoch in 1..=hp.max_epochs {
        let mut order = queries.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut counted) = (0.0, 0usize);
        let mut last_fault = None;
        for batch in order.chunks(hp.batch) {
            match batch_step(model, &mut adam, &ops, vocab, batch) {
                Ok(loss) => {
                    loss_sum += loss * batch.len() as f64;
                    counted += batch.len();
                }
                Err(e) => last_fault = Some(e),
            }
        }
        if counted == 0 {
            if let Some(source) = last_fault {
                return Err(ModelError::Diverged { epoch, source });
            }
        }
        let train_loss = if counted > 0 {
            loss_sum / counted as f64
        } else {
            0.0
        };
        let valid_mrr = evaluate(model, data, &ops, &known, &data.valid).mrr;
        let record = TrainLogRecord {
            epoch,
            train_loss,
            valid_mrr,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
        match stopper.observe(valid_mrr) {
            StopDecision::Improved => best = (model.store.clone(), adam.clone()),
            StopDecision::NoImprovement => {}
            StopDecision::Stop => break,
        }
    }
    let skipped_batches = adam.skipped;
    model.store = best.0;
    let mut best_adam = best.1;
    best_adam.skipped = skipped_batches;
    Ok(TrainOutcome {
        best_epoch: stopper.best_epoch,
        best_valid_mrr: stopper.best.unwrap_or(0.0),
        epochs_run: log.len(),
        log,
        skipped_batches,
        adam: best_adam,
    })
}

/// One optimizer step on `batch`; returns the mean batch loss.
///
/// A non-finite value anywhere skips the update and counts it on `adam`.
pub(crate) fn batch_step(
    model: &mut DegreEmbed,
    adam: &mut Adam,
    ops: &Arc<OperatorSet>,
    vocab: &Vocabulary,
    batch: &[Triple],
) -> Result<f64, AutodiffError> {
    let result = batch_gradients(model, ops, vocab, batch);
    let (loss, grads) = match result {
        Ok(v) => v,
        Err(e) => {
            adam.skipped += 1;
            return Err(e);
        }
    };
    match adam.update(&mut model.store, &grads) {
        StepOutcome::Applied => Ok(loss),
        StepOutcome::Skipped => Err(AutodiffError::NonFinite { op: "adam" }),
    }
}

/// Mean loss and per-parameter gradients of `batch`.
pub(crate) fn batch_gradients(
    model: &DegreEmbed,
    ops: &Arc<OperatorSet>,
    vocab: &Vocabulary,
    batch: &[Triple],
) -> Result<(f64, Vec<Option<Tensor>>), AutodiffError> {
    let hp = &model.hp;
    let mut tape = Tape::new();
    let p = model.store.leaves(&mut tape);
    let rho = model.degree_attention(&mut tape, &p);
    let mut rels: Vec<RelationId> = batch.iter().map(|q| q.rel).collect();
    rels.sort_unstable();
    rels.dedup();
    let att = model.rule_attention(&mut tape, &p, &rels);
    if let Some(e) = tape.fault() {
        return Err(e.clone());
    }
    let att_flat: Vec<Var> = att.iter().flatten().copied().collect();
    let hops = hp.rule_len;

    let examples: Vec<Result<ExampleGrad, AutodiffError>> = {
        let rho_val = rho.map(|r| tape.value(r));
        let att_val: Vec<&Tensor> = att_flat.iter().map(|&a| tape.value(a)).collect();
        batch
            .par_iter()
            .map(|q| {
                let qi = rels.binary_search(&q.rel).expect("relation listed");
                let mut t = Tape::new();
                let rv = rho_val.map(|r| t.param(r.clone()));
                let av: Vec<Var> = att_val
                    .iter()
                    .map(|a| t.param(Tensor::row_vector(a.row(qi).to_vec())))
                    .collect();
                let chains: Vec<Vec<Var>> = av.chunks(hops).map(<[Var]>::to_vec).collect();
                let excl = EdgeExclusion::for_query(vocab, q.head, q.rel, q.tail);
                let l = query_loss_on_tape(&mut t, rv, &chains, ops, q, &excl, hp.norm(), hp.eps);
                let mut g = t.backward(l)?;
                Ok(ExampleGrad {
                    loss: t.value(l).item(),
                    rho: rv.and_then(|v| g.take(v)),
                    attn: av
                        .iter()
                        .map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(1, att_val[0].cols())))
                        .collect(),
                })
            })
            .collect()
    };

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut g_rho = rho.map(|r| {
        let (a, b) = tape.value(r).shape();
        Tensor::zeros(a, b)
    });
    let mut g_att: Vec<Tensor> = att_flat
        .iter()
        .map(|&a| {
            let (r, c) = tape.value(a).shape();
            Tensor::zeros(r, c)
        })
        .collect();
    for (q, ex) in batch.iter().zip(examples) {
        let ex = ex?;
        loss += ex.loss;
        if let (Some(acc), Some(g)) = (g_rho.as_mut(), ex.rho.as_ref()) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
        let qi = rels.binary_search(&q.rel).expect("relation listed");
        for (acc, g) in g_att.iter_mut().zip(&ex.attn) {
            let k = acc.cols();
            for (a, b) in acc.data_mut()[qi * k..(qi + 1) * k].iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    let mut seeds: Vec<(Var, Tensor)> = att_flat.into_iter().zip(g_att).collect();
    if let (Some(r), Some(g)) = (rho, g_rho) {
        seeds.push((r, g));
    }
    let mut grads = tape.backward_seeds(seeds)?;
    let per_param = p.iter().map(|&v| grads.take(v)).collect();
    Ok((loss * scale, per_param))
}
