//! Hybrid search over alphabetical-index terms: Okapi BM25, an HNSW graph
//! over unit-norm embeddings, and reciprocal-rank fusion of the two.

mod bm25;
mod embed;
mod fusion;
mod hnsw;
mod tokenize;

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::CodeId;
use crate::taxonomy::IndexEntry;

pub use bm25::{Bm25Params, LexicalIndex, Posting};
pub use embed::{normalize, Embedder, HashEmbedder, UNIT_NORM_TOLERANCE};
pub use fusion::{rrf_fuse, DEFAULT_K_RRF};
pub use hnsw::{cosine, DenseIndex, HnswParams};
pub use tokenize::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("vector dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("entry and vector counts differ ({entries} entries, {vectors} vectors)")]
    CountMismatch { entries: usize, vectors: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u32,
    pub score: f64,
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// An ordered result list: scores never increase, ids never repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query: String,
    pub hits: Vec<Hit>,
}

impl Ranking {
    /// Sorts `hits` into rank order and keeps the first `k`. Callers must not
    /// pass duplicate ids.
    pub fn from_hits(query: &str, mut hits: Vec<Hit>, k: usize) -> Self {
        hits.sort_by(rank_order);
        hits.truncate(k);
        Self {
            query: query.into(),
            hits,
        }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.hits.iter().map(|h| h.id)
    }

    pub fn truncated(&self, k: usize) -> Ranking {
        Ranking {
            query: self.query.clone(),
            hits: self.hits.iter().copied().take(k).collect(),
        }
    }

    /// Checks the ordering and uniqueness invariants.
    pub fn is_well_formed(&self) -> bool {
        let ordered = self
            .hits
            .windows(2)
            .all(|w| rank_order(&w[0], &w[1]) == Ordering::Less);
        let unique = self.ids().collect::<BTreeSet<_>>().len() == self.hits.len();
        ordered && unique
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Lexical,
    Dense,
    #[default]
    Hybrid,
}

impl core::str::FromStr for SearchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lexical" | "bm25" => Ok(Self::Lexical),
            "dense" => Ok(Self::Dense),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(alloc::format!("unknown search mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Terms returned per query.
    pub k: usize,
    pub mode: SearchMode,
    pub k_rrf: f64,
    /// How many hits of each sub-ranking enter fusion.
    pub fusion_depth: usize,
    pub bm25: Bm25Params,
    pub hnsw: HnswParams,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            mode: SearchMode::Hybrid,
            k_rrf: DEFAULT_K_RRF,
            fusion_depth: 100,
            bm25: Bm25Params::default(),
            hnsw: HnswParams::default(),
        }
    }
}

/// A retrieved index entry with its score under the requested mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved<'a> {
    pub entry: &'a IndexEntry,
    pub score: f64,
}

/// Lexical plus dense index over the display strings of index entries.
/// Entry ids must equal their position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermIndex {
    pub entries: Vec<IndexEntry>,
    pub lexical: LexicalIndex,
    pub dense: DenseIndex,
    pub config: RetrievalConfig,
}

impl TermIndex {
    pub fn build(
        entries: Vec<IndexEntry>,
        embedder: &dyn Embedder,
        config: RetrievalConfig,
    ) -> Result<Self, RetrievalError> {
        let vectors = entries
            .iter()
            .map(|e| embedder.embed(&e.display))
            .collect::<Result<Vec<_>, _>>()?;
        Self::build_with_vectors(entries, vectors, embedder.dim(), config)
    }

    /// Builds from precomputed embeddings (one per entry, in entry order).
    pub fn build_with_vectors(
        entries: Vec<IndexEntry>,
        vectors: Vec<Vec<f32>>,
        dim: usize,
        config: RetrievalConfig,
    ) -> Result<Self, RetrievalError> {
        if entries.len() != vectors.len() {
            return Err(RetrievalError::CountMismatch {
                entries: entries.len(),
                vectors: vectors.len(),
            });
        }
        debug_assert!(entries.iter().enumerate().all(|(i, e)| e.id as usize == i));
        let lexical = LexicalIndex::build(entries.iter().map(|e| e.display.as_str()), config.bm25);
        let dense = DenseIndex::build(dim, vectors, config.hnsw)?;
        Ok(Self {
            entries,
            lexical,
            dense,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u32) -> Option<&IndexEntry> {
        self.entries.get(id as usize)
    }

    pub fn bm25_topk(&self, query: &str, k: usize) -> Result<Ranking, RetrievalError> {
        self.lexical.topk(query, k)
    }

    pub fn dense_topk(
        &self,
        embedder: &dyn Embedder,
        query: &str,
        k: usize,
    ) -> Result<Ranking, RetrievalError> {
        let vector = embedder.embed(query)?;
        let mut ranking = self.dense.topk(&vector, k, self.config.hnsw.ef_search)?;
        ranking.query = query.into();
        Ok(ranking)
    }

    /// Ranks entries for `query` under `mode`. Hybrid fuses the top
    /// `fusion_depth` of each sub-ranking and keeps `k`.
    pub fn ranking(
        &self,
        embedder: &dyn Embedder,
        query: &str,
        k: usize,
        mode: SearchMode,
    ) -> Result<Ranking, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        match mode {
            SearchMode::Lexical => self.bm25_topk(query, k),
            SearchMode::Dense => self.dense_topk(embedder, query, k),
            SearchMode::Hybrid => {
                let depth = self.config.fusion_depth.max(k);
                let lexical = self.bm25_topk(query, depth)?;
                let dense = self.dense_topk(embedder, query, depth)?;
                Ok(rrf_fuse(&[lexical, dense], self.config.k_rrf).truncated(k))
            }
        }
    }

    pub fn retrieve_terms(
        &self,
        embedder: &dyn Embedder,
        query: &str,
        k: usize,
        mode: SearchMode,
    ) -> Result<Vec<Retrieved<'_>>, RetrievalError> {
        let ranking = self.ranking(embedder, query, k, mode)?;
        Ok(ranking
            .hits
            .iter()
            .map(|h| Retrieved {
                entry: &self.entries[h.id as usize],
                score: h.score,
            })
            .collect())
    }

    /// Codes of the top-`k` entries for `query`, deduplicated.
    pub fn retrieved_codes(
        &self,
        embedder: &dyn Embedder,
        query: &str,
        k: usize,
        mode: SearchMode,
    ) -> Result<BTreeSet<CodeId>, RetrievalError> {
        Ok(self
            .retrieve_terms(embedder, query, k, mode)?
            .into_iter()
            .map(|r| r.entry.code.clone())
            .collect())
    }

    /// Per-query and mean recall of gold codes among the codes of the top-`k`
    /// entries. Queries with an empty gold set are skipped.
    pub fn recall_at_k(
        &self,
        embedder: &dyn Embedder,
        queries: &[(String, BTreeSet<CodeId>)],
        k: usize,
        mode: SearchMode,
    ) -> Result<RecallReport, RetrievalError> {
        let mut per_query = Vec::with_capacity(queries.len());
        for (query, gold) in queries {
            if gold.is_empty() {
                per_query.push(None);
                continue;
            }
            let found = self.retrieved_codes(embedder, query, k, mode)?;
            let covered = gold.iter().filter(|g| found.contains(*g)).count();
            per_query.push(Some(covered as f64 / gold.len() as f64));
        }
        Ok(RecallReport::from_per_query(per_query))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// `None` for skipped queries.
    pub per_query: Vec<Option<f64>>,
    /// Mean over evaluated queries; 0 when none were evaluated.
    pub mean: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

impl RecallReport {
    pub fn from_per_query(per_query: Vec<Option<f64>>) -> Self {
        let scored: Vec<f64> = per_query.iter().flatten().copied().collect();
        let evaluated = scored.len();
        let mean = if evaluated == 0 {
            0.0
        } else {
            scored.iter().sum::<f64>() / evaluated as f64
        };
        Self {
            skipped: per_query.len() - evaluated,
            per_query,
            mean,
            evaluated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn entries(displays: &[(&str, &str)]) -> Vec<IndexEntry> {
        displays
            .iter()
            .enumerate()
            .map(|(i, (d, c))| {
                IndexEntry::new(
                    i as u32,
                    d.split(", ").map(|s| s.to_string()).collect(),
                    CodeId::parse(c).unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    fn sepsis_index() -> (TermIndex, HashEmbedder) {
        let emb = HashEmbedder::default();
        let idx = TermIndex::build(
            entries(&[
                ("Sepsis, anthrax", "A22.7"),
                ("Sepsis, postprocedural", "T81.44"),
                ("Pneumonia, bacterial", "J15.9"),
                ("Anthrax, cutaneous", "A22.0"),
                ("Hypertension", "I10"),
            ]),
            &emb,
            RetrievalConfig::default(),
        )
        .unwrap();
        (idx, emb)
    }

    #[test]
    fn exact_display_ranks_first_in_every_mode() {
        let (idx, emb) = sepsis_index();
        for mode in [SearchMode::Lexical, SearchMode::Dense, SearchMode::Hybrid] {
            let r = idx
                .ranking(&emb, "Sepsis, postprocedural", 10, mode)
                .unwrap();
            assert_eq!(r.hits[0].id, 1, "{mode:?}");
            assert!(r.is_well_formed());
        }
    }

    #[test]
    fn default_k_is_ten() {
        assert_eq!(RetrievalConfig::default().k, 10);
        assert_eq!(RetrievalConfig::default().hnsw.m, 32);
        assert_eq!(RetrievalConfig::default().hnsw.ef_construct, 256);
    }

    #[test]
    fn recall_examples() {
        let (idx, emb) = sepsis_index();
        let gold = |c: &str| BTreeSet::from([CodeId::parse(c).unwrap()]);
        let report = idx
            .recall_at_k(
                &emb,
                &[
                    ("Sepsis, anthrax".to_string(), gold("A22.7")),
                    ("Hypertension".to_string(), gold("Z99.89")),
                    ("ignored".to_string(), BTreeSet::new()),
                ],
                1,
                SearchMode::Hybrid,
            )
            .unwrap();
        assert_eq!(report.per_query, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.mean, 0.5);

        let r = RecallReport::from_per_query(vec![Some(1.0), Some(0.0), Some(0.5)]);
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn empty_index_and_zero_k() {
        let emb = HashEmbedder::default();
        let idx = TermIndex::build(vec![], &emb, RetrievalConfig::default()).unwrap();
        assert_eq!(
            idx.ranking(&emb, "x", 5, SearchMode::Hybrid),
            Err(RetrievalError::EmptyIndex)
        );
        let (idx, emb) = sepsis_index();
        assert_eq!(
            idx.ranking(&emb, "x", 0, SearchMode::Hybrid),
            Err(RetrievalError::InvalidK)
        );
    }
}
