//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, JSON header,
//! then little-endian `f64` data for every parameter followed by the Adam
//! first and second moments in the same order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DegreEmbed, HyperParams, ModelError};
use crate::autodiff::Tensor;
use crate::kgdata::{SplitDataset, Vocabulary};
use crate::neuralnets::Adam;

const MAGIC: &[u8; 8] = b"KGRCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamHeader {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub skipped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub hyperparams: HyperParams,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    /// Epochs completed; with `hyperparams.seed` this fixes the shuffle
    /// stream of the next epoch.
    pub epochs: usize,
    pub best_valid_mrr: f64,
    pub params: Vec<ParamShape>,
    pub adam: AdamHeader,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(
        model: &DegreEmbed,
        vocab: &Vocabulary,
        adam: &Adam,
        epochs: usize,
        best_valid_mrr: f64,
    ) -> Self {
        let params: Vec<ParamShape> = model
            .param_ids()
            .map(|id| {
                let t = model.store.get(id);
                ParamShape {
                    name: model.store.name(id).to_owned(),
                    rows: t.rows(),
                    cols: t.cols(),
                }
            })
            .collect();
        Self {
            header: CheckpointHeader {
                hyperparams: model.hp.clone(),
                entities: vocab.entity_names().map(str::to_owned).collect(),
                relations: vocab.base_relation_names().map(str::to_owned).collect(),
                epochs,
                best_valid_mrr,
                params,
                adam: AdamHeader {
                    lr: adam.lr,
                    beta1: adam.beta1,
                    beta2: adam.beta2,
                    eps: adam.eps,
                    step: adam.step,
                    skipped: adam.skipped,
                },
            },
            params: model.store.tensors().to_vec(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    /// Rebuilds the model for `data`, which must carry the same vocabulary.
    pub fn restore(&self, data: &SplitDataset) -> Result<(DegreEmbed, Adam), ModelError> {
        let h = &self.header;
        let mut vocab = data.vocab.clone();
        vocab.set_inverse_enabled(h.hyperparams.inverse);
        let entities: Vec<&str> = vocab.entity_names().collect();
        if entities.len() != h.entities.len() || entities.iter().zip(&h.entities).any(|(a, b)| a != b) {
            return Err(ModelError::VocabMismatch(format!(
                "checkpoint has {} entities, dataset has {} (or names differ)",
                h.entities.len(),
                entities.len()
            )));
        }
        let relations: Vec<&str> = vocab.base_relation_names().collect();
        if relations.len() != h.relations.len() || relations.iter().zip(&h.relations).any(|(a, b)| a != b) {
            return Err(ModelError::VocabMismatch(format!(
                "checkpoint has {} relations, dataset has {} (or names differ)",
                h.relations.len(),
                relations.len()
            )));
        }
        let mut model = DegreEmbed::new(h.hyperparams.clone(), &vocab, &data.graph())?;
        if model.store.len() != self.params.len() {
            return Err(ModelError::BadCheckpoint("parameter count differs".into()));
        }
        for (id, t) in model.param_ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            let slot = model.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(ModelError::BadCheckpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    h.params[id.0].name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        let mut adam = Adam::new(&model.store, h.adam.lr);
        adam.beta1 = h.adam.beta1;
        adam.beta2 = h.adam.beta2;
        adam.eps = h.adam.eps;
        adam.step = h.adam.step;
        adam.skipped = h.adam.skipped;
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        Ok((model, adam))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let io = |source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    };
    let header = serde_json::to_vec(&ckpt.header)
        .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for t in ckpt.params.iter().chain(&ckpt.adam_m).chain(&ckpt.adam_v) {
        for x in t.data() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;

    let mut pos = 20 + hlen;
    let read_set = |pos: &mut usize| -> Result<Vec<Tensor>, ModelError> {
        header
            .params
            .iter()
            .map(|s| {
                let n = s.rows * s.cols;
                let end = *pos + 8 * n;
                let raw = bytes.get(*pos..end).ok_or_else(|| bad("truncated tensor data"))?;
                *pos = end;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(Tensor::new(s.rows, s.cols, data))
            })
            .collect()
    };
    let params = read_set(&mut pos)?;
    let adam_m = read_set(&mut pos)?;
    let adam_v = read_set(&mut pos)?;
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        header,
        params,
        adam_m,
        adam_v,
    })
}
