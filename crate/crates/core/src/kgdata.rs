//! Triple ingestion, interning and per-entity degree features.
//!
//! A dataset directory holds four TSV files (`facts.txt`, `train.txt`,
//! `valid.txt`, `test.txt`), one `head<TAB>relation<TAB>tail` triple per line.
//! Entities and relations are interned to dense ids in first-seen order over
//! facts, train, valid, test.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prefix used to name synthesized inverse relations.
pub const INVERSE_PREFIX: &str = "inv_";

/// File stems of a dataset directory, in interning order.
pub const SPLIT_FILES: [&str; 4] = ["facts", "train", "valid", "test"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

impl EntityId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl RelationId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Self { head, rel, tail }
    }
}

/// Bidirectional name/id interning for entities and relations.
///
/// With `inverse_enabled`, the relation id space is `0..2R`: ids `R..2R` are
/// the synthesized inverses, named `inv_<base>`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entities: IndexSet<String>,
    relations: IndexSet<String>,
    inverse_enabled: bool,
}

impl Vocabulary {
    pub fn new(inverse_enabled: bool) -> Self {
        Self {
            entities: IndexSet::new(),
            relations: IndexSet::new(),
            inverse_enabled,
        }
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(i) = self.entities.get_index_of(name) {
            return EntityId(i as u32);
        }
        let (i, _) = self.entities.insert_full(name.to_owned());
        EntityId(i as u32)
    }

    /// Interns a base relation. Inverse ids are derived, never interned.
    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(i) = self.relations.get_index_of(name) {
            return RelationId(i as u32);
        }
        let (i, _) = self.relations.insert_full(name.to_owned());
        RelationId(i as u32)
    }

    pub fn inverse_enabled(&self) -> bool {
        self.inverse_enabled
    }

    pub fn set_inverse_enabled(&mut self, on: bool) {
        self.inverse_enabled = on;
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.relations.len()
    }

    /// Size of the relation id space (`2R` when inverses are enabled).
    pub fn num_relations(&self) -> usize {
        if self.inverse_enabled {
            2 * self.relations.len()
        } else {
            self.relations.len()
        }
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get_index_of(name).map(|i| EntityId(i as u32))
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.index()]
    }

    pub fn entity_names(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(String::as_str)
    }

    pub fn base_relation_names(&self) -> impl Iterator<Item = &str> {
        self.relations.iter().map(String::as_str)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        if let Some(i) = self.relations.get_index_of(name) {
            return Some(RelationId(i as u32));
        }
        if self.inverse_enabled {
            let base = name.strip_prefix(INVERSE_PREFIX)?;
            let i = self.relations.get_index_of(base)?;
            return Some(RelationId((i + self.relations.len()) as u32));
        }
        None
    }

    pub fn relation_name(&self, id: RelationId) -> String {
        let r = self.relations.len();
        let k = id.index();
        if k < r {
            self.relations[k].clone()
        } else {
            format!("{INVERSE_PREFIX}{}", self.relations[k - r])
        }
    }

    pub fn is_inverse(&self, id: RelationId) -> bool {
        id.index() >= self.relations.len()
    }

    /// `k <-> k + R`. Panics when inverses are disabled.
    pub fn inverse_of(&self, id: RelationId) -> RelationId {
        assert!(self.inverse_enabled, "inverse relations are disabled");
        let r = self.relations.len() as u32;
        if id.0 < r {
            RelationId(id.0 + r)
        } else {
            RelationId(id.0 - r)
        }
    }

    /// Base relation of `id` (identity for base ids).
    pub fn base_of(&self, id: RelationId) -> RelationId {
        let r = self.relations.len() as u32;
        if id.0 < r {
            id
        } else {
            RelationId(id.0 - r)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub facts: Vec<Triple>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub vocab: Vocabulary,
}

impl SplitDataset {
    /// Reasoning graph: facts ∪ train, deduplicated, in file order.
    pub fn graph(&self) -> Vec<Triple> {
        let mut seen = HashSet::with_capacity(self.facts.len() + self.train.len());
        self.facts
            .iter()
            .chain(&self.train)
            .filter(|t| seen.insert(**t))
            .copied()
            .collect()
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.facts
            .iter()
            .chain(&self.train)
            .chain(&self.valid)
            .chain(&self.test)
    }

    pub fn split(&self, name: &str) -> Option<&[Triple]> {
        match name {
            "facts" => Some(&self.facts),
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes the four split files back as TSV.
    pub fn write_tsv(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_owned(),
            source,
        })?;
        for (stem, triples) in SPLIT_FILES
            .iter()
            .zip([&self.facts, &self.train, &self.valid, &self.test])
        {
            let path = dir.join(format!("{stem}.txt"));
            let io_err = |source| DataError::Io {
                path: path.clone(),
                source,
            };
            let file = fs::File::create(&path).map_err(io_err)?;
            let mut w = BufWriter::new(file);
            for t in triples {
                writeln!(
                    w,
                    "{}\t{}\t{}",
                    self.vocab.entity_name(t.head),
                    self.vocab.relation_name(t.rel),
                    self.vocab.entity_name(t.tail)
                )
                .map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        Ok(())
    }
}

/// Parses one split file, interning into `vocab`. Duplicate lines are dropped.
pub fn parse_triples(
    text: &str,
    path: &Path,
    vocab: &mut Vocabulary,
) -> Result<Vec<Triple>, DataError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let head = vocab.intern_entity(fields[0]);
        let rel = vocab.intern_relation(fields[1]);
        let tail = vocab.intern_entity(fields[2]);
        let t = Triple::new(head, rel, tail);
        if seen.insert(t) {
            out.push(t);
        }
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path, inverse: bool) -> Result<SplitDataset, DataError> {
    let mut vocab = Vocabulary::new(false);
    let mut splits = Vec::with_capacity(4);
    for stem in SPLIT_FILES {
        let path = dir.join(format!("{stem}.txt"));
        let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        splits.push(parse_triples(&text, &path, &mut vocab)?);
    }
    vocab.set_inverse_enabled(inverse);
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let facts = splits.pop().unwrap();
    Ok(SplitDataset {
        facts,
        train,
        valid,
        test,
        vocab,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

/// One element of a degree feature: a relation type incident to the entity
/// in a given direction, or the padding slot for isolated entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DegreeSlot {
    // Field order gives the canonical sort: In before Out, then relation id.
    Edge { dir: Direction, rel: RelationId },
    Pad,
}

impl DegreeSlot {
    /// Row of the degree-embedding table: In slots `0..R`, Out slots
    /// `R..2R`, PAD `2R`.
    pub fn embedding_row(self, num_base_relations: usize) -> usize {
        match self {
            DegreeSlot::Edge {
                rel,
                dir: Direction::In,
            } => rel.index(),
            DegreeSlot::Edge {
                rel,
                dir: Direction::Out,
            } => num_base_relations + rel.index(),
            DegreeSlot::Pad => 2 * num_base_relations,
        }
    }

    pub fn label(self, vocab: &Vocabulary) -> String {
        match self {
            DegreeSlot::Edge { rel, dir } => {
                let sign = match dir {
                    Direction::In => '+',
                    Direction::Out => '-',
                };
                format!("{}({sign})", vocab.relation_name(rel))
            }
            DegreeSlot::Pad => "PAD".to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeFeature {
    pub entity: EntityId,
    pub slots: Vec<DegreeSlot>,
}

impl DegreeFeature {
    pub fn d(&self) -> usize {
        self.slots.len()
    }

    /// Human-readable signature, e.g. `brotherOf(+),uncleOf(-)`.
    pub fn signature(&self, vocab: &Vocabulary) -> String {
        self.slots
            .iter()
            .map(|s| s.label(vocab))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Unique incident (relation, direction) types per entity over `g`.
///
/// `g` must only contain base relations. Slots are ordered In before Out,
/// ascending by relation id; entities with no incident edge get `[Pad]`.
pub fn degree_features(g: &[Triple], vocab: &Vocabulary) -> Vec<DegreeFeature> {
    let n = vocab.num_entities();
    let r = vocab.num_base_relations();
    let mut incoming: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let mut outgoing: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for t in g {
        assert!(t.rel.index() < r, "degree features take base relations only");
        incoming[t.tail.index()].insert(t.rel.0);
        outgoing[t.head.index()].insert(t.rel.0);
    }
    (0..n)
        .map(|e| {
            let mut slots: Vec<DegreeSlot> = incoming[e]
                .iter()
                .map(|&k| DegreeSlot::Edge {
                    rel: RelationId(k),
                    dir: Direction::In,
                })
                .chain(outgoing[e].iter().map(|&k| DegreeSlot::Edge {
                    rel: RelationId(k),
                    dir: Direction::Out,
                }))
                .collect();
            if slots.is_empty() {
                slots.push(DegreeSlot::Pad);
            }
            DegreeFeature {
                entity: EntityId(e as u32),
                slots,
            }
        })
        .collect()
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head.0, self.rel.0, self.tail.0)
    }
}
