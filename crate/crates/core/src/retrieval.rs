//! BM25 retrieval over the train split and memory assignment.
//!
//! The index covers the SOURCE side of each pair; what gets handed to the
//! generator as memory is the TARGET side of the retrieved neighbor. On the
//! train split a pair must never retrieve itself, otherwise the memory equals
//! the reference and training degenerates into copying; `retrieve` therefore
//! takes an id to exclude and `assign_memory` always passes the pair's own.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Datastore;
use crate::rng;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Okapi BM25 inverted index.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    k1: f64,
    b: f64,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_doc_len: f64,
    /// term -> (doc index, term frequency), doc indices ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl InvertedIndex {
    pub fn build(train: &Datastore) -> Self {
        Self::build_with_params(train, DEFAULT_K1, DEFAULT_B)
    }

    pub fn build_with_params(train: &Datastore, k1: f64, b: f64) -> Self {
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(train.pairs.len());
        let mut doc_lens = Vec::with_capacity(train.pairs.len());
        for (i, pair) in train.pairs.iter().enumerate() {
            doc_ids.push(pair.id.clone());
            doc_lens.push(pair.source.len() as u32);
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for tok in &pair.source {
                *tf.entry(tok.as_str()).or_insert(0) += 1;
            }
            for (tok, n) in tf {
                postings.entry(tok.to_string()).or_default().push((i as u32, n));
            }
        }
        let avg_doc_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().map(|&l| l as f64).sum::<f64>() / doc_lens.len() as f64
        };
        InvertedIndex { k1, b, doc_ids, doc_lens, avg_doc_len, postings }
    }

    /// Reassemble an index from its persisted parts.
    pub fn from_parts(
        k1: f64,
        b: f64,
        doc_ids: Vec<String>,
        doc_lens: Vec<u32>,
        postings: BTreeMap<String, Vec<(u32, u32)>>,
    ) -> Self {
        let avg_doc_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().map(|&l| l as f64).sum::<f64>() / doc_lens.len() as f64
        };
        InvertedIndex { k1, b, doc_ids, doc_lens, avg_doc_len, postings }
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_lens(&self) -> &[u32] {
        &self.doc_lens
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map(Vec::len).unwrap_or(0)
    }

    pub fn postings(&self) -> &BTreeMap<String, Vec<(u32, u32)>> {
        &self.postings
    }

    fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq(term) as f64;
        let n = self.n_docs() as f64;
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    /// Top-`k` documents for the query, scored with Okapi BM25, sorted by
    /// score descending with ties broken by ascending doc id. `exclude_id`
    /// never appears in the result.
    pub fn retrieve(
        &self,
        query: &[String],
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<Vec<(String, f64)>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let mut scores = vec![0.0f64; self.n_docs()];
        for term in query {
            let Some(list) = self.postings.get(term.as_str()) else {
                continue;
            };
            let idf = self.idf(term);
            for &(doc, tf) in list {
                let tf = tf as f64;
                let len_norm = 1.0 - self.b + self.b * self.doc_lens[doc as usize] as f64 / self.avg_doc_len;
                scores[doc as usize] += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm);
            }
        }
        let mut hits: Vec<(usize, f64)> = scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s > 0.0 && exclude_id != Some(self.doc_ids[i].as_str()))
            .map(|(i, &s)| (i, s))
            .collect();
        hits.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        });
        hits.truncate(k);
        Ok(hits.into_iter().map(|(i, s)| (self.doc_ids[i].clone(), s)).collect())
    }
}

/// How memory should be assigned to each pair of a datastore.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MemoryMode {
    /// Target side of the BM25 top hit (self-retrieval excluded).
    Retrieved,
    /// The pair's own target.
    Reference,
    /// Target of a uniformly sampled other pair.
    Random { seed: u64 },
    /// No memory.
    None,
}

/// Where a memory came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Retrieved { source_id: String },
    #[serde(rename = "self")]
    SelfMem { iteration: usize, candidate_rank: usize },
    Reference,
    Random { source_id: String },
    None,
}

/// Memory text attached to one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryAssignment {
    pub pair_id: String,
    pub memory: Vec<String>,
    pub provenance: Provenance,
}

/// Assign memory to every pair of `ds`. Memory texts are drawn from `bank`,
/// the datastore the index was built over (the train split).
pub fn assign_memory(
    ds: &Datastore,
    index: &InvertedIndex,
    bank: &Datastore,
    mode: MemoryMode,
) -> Result<Vec<MemoryAssignment>, RetrievalError> {
    match mode {
        MemoryMode::Retrieved if index.n_docs() == 0 => Err(RetrievalError::EmptyIndex),
        MemoryMode::Retrieved => ds
            .pairs
            .iter()
            .map(|pair| {
                let hits = index.retrieve(&pair.source, 1, Some(&pair.id))?;
                Ok(match hits.first() {
                    Some((hit_id, _)) => {
                        let hit = bank.get(hit_id).ok_or_else(|| RetrievalError::UnknownDoc {
                            id: hit_id.clone(),
                        })?;
                        MemoryAssignment {
                            pair_id: pair.id.clone(),
                            memory: hit.target.clone(),
                            provenance: Provenance::Retrieved { source_id: hit_id.clone() },
                        }
                    }
                    None => {
                        log::warn!("no retrieval hit for {}; assigning empty memory", pair.id);
                        MemoryAssignment {
                            pair_id: pair.id.clone(),
                            memory: Vec::new(),
                            provenance: Provenance::None,
                        }
                    }
                })
            })
            .collect(),
        MemoryMode::Reference => Ok(ds
            .pairs
            .iter()
            .map(|pair| MemoryAssignment {
                pair_id: pair.id.clone(),
                memory: pair.target.clone(),
                provenance: Provenance::Reference,
            })
            .collect()),
        MemoryMode::Random { seed } => {
            if bank.is_empty() {
                return Err(RetrievalError::EmptyIndex);
            }
            let mut r = rng::stream(seed, "random-memory");
            Ok(ds
                .pairs
                .iter()
                .map(|pair| {
                    let other = loop {
                        let i = r.gen_range(0..bank.len());
                        if bank.pairs[i].id != pair.id || bank.len() == 1 {
                            break &bank.pairs[i];
                        }
                    };
                    MemoryAssignment {
                        pair_id: pair.id.clone(),
                        memory: other.target.clone(),
                        provenance: Provenance::Random { source_id: other.id.clone() },
                    }
                })
                .collect())
        }
        MemoryMode::None => Ok(ds
            .pairs
            .iter()
            .map(|pair| MemoryAssignment {
                pair_id: pair.id.clone(),
                memory: Vec::new(),
                provenance: Provenance::None,
            })
            .collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RetrievalError {
    InvalidK,
    EmptyIndex,
    UnknownDoc { id: String },
}

impl fmt::Display for RetrievalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetrievalError::InvalidK => write!(f, "retrieval k must be positive"),
            RetrievalError::EmptyIndex => write!(f, "cannot retrieve from an empty index"),
            RetrievalError::UnknownDoc { id } => write!(f, "retrieved id {id} is not in the memory bank"),
        }
    }
}

impl core::error::Error for RetrievalError {}
