use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{tokenize, Hit, Ranking, RetrievalError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Inverted index with Okapi BM25 scoring.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LexicalIndex {
    /// Term to postings, each list sorted by document id.
    pub vocabulary: BTreeMap<String, Vec<Posting>>,
    pub doc_lengths: Vec<u32>,
    pub avgdl: f64,
    pub params: Bm25Params,
}

impl LexicalIndex {
    pub fn build<'a, I>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocabulary: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::new();
        for (doc, text) in docs.into_iter().enumerate() {
            let tokens = tokenize(text);
            doc_lengths.push(tokens.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                vocabulary.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avgdl = if total == 0 {
            1.0
        } else {
            total as f64 / doc_lengths.len() as f64
        };
        Self {
            vocabulary,
            doc_lengths,
            avgdl,
            params,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_lengths.len()
    }

    /// `ln(1 + (N - n + 0.5) / (n + 0.5))`, which stays positive for common terms.
    pub fn idf(&self, doc_freq: usize) -> f64 {
        let n = self.num_docs() as f64;
        let df = doc_freq as f64;
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    /// Top-`k` documents sharing at least one term with `query`. Repeated
    /// query terms count once.
    pub fn topk(&self, query: &str, k: usize) -> Result<Ranking, RetrievalError> {
        if self.num_docs() == 0 {
            return Err(RetrievalError::EmptyIndex);
        }
        let Bm25Params { k1, b } = self.params;
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in &terms {
            let Some(postings) = self.vocabulary.get(term) else {
                continue;
            };
            let idf = self.idf(postings.len());
            for p in postings {
                let tf = f64::from(p.tf);
                let dl = f64::from(self.doc_lengths[p.doc as usize]);
                let norm = k1 * (1.0 - b + b * dl / self.avgdl);
                *scores.entry(p.doc).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        let hits = scores
            .into_iter()
            .map(|(id, score)| Hit { id, score })
            .collect();
        Ok(Ranking::from_hits(query, hits, k))
    }
}
