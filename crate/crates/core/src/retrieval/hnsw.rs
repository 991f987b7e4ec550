//! Hierarchical navigable small-world graph over unit-norm vectors.
//!
//! Similarity is the dot product, which equals cosine similarity because
//! every stored vector is normalized on insertion. Construction is
//! deterministic: node levels derive from a seeded hash of the node id and
//! nodes are inserted in id order.

use alloc::collections::{BinaryHeap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use serde::{Deserialize, Serialize};

use super::embed::{normalize, splitmix64};
use super::{Hit, Ranking, RetrievalError};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 allows twice as many.
    pub m: usize,
    pub ef_construct: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 32,
            ef_construct: 256,
            ef_search: 128,
            seed: 0x484e_5357,
        }
    }
}

/// Cosine similarity of two unit-norm vectors, accumulated in order in `f32`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    f64::from(dot(a, b))
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Search candidate. `Greater` means closer to the query; equal similarity
/// favours the lower id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    sim: f32,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then(other.id.cmp(&self.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseIndex {
    pub dim: usize,
    pub params: HnswParams,
    vectors: Vec<f32>,
    /// node -> layer -> neighbour ids
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
}

impl DenseIndex {
    pub fn new(dim: usize, params: HnswParams) -> Self {
        Self {
            dim,
            params,
            vectors: Vec::new(),
            links: Vec::new(),
            entry: None,
            max_level: 0,
        }
    }

    pub fn build(
        dim: usize,
        vectors: Vec<Vec<f32>>,
        params: HnswParams,
    ) -> Result<Self, RetrievalError> {
        let mut index = Self::new(dim, params);
        for v in vectors {
            index.insert(v)?;
        }
        index.repair_connectivity();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        let start = id as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    fn sim(&self, query: &[f32], id: u32) -> Cand {
        Cand {
            sim: dot(query, self.vector(id)),
            id,
        }
    }

    fn level_for(&self, id: u32) -> usize {
        let h = splitmix64(self.params.seed ^ u64::from(id).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        let ml = 1.0 / libm::log(self.params.m.max(2) as f64);
        let level = libm::floor(-libm::log(1.0 - u) * ml);
        (level as usize).min(MAX_LEVEL)
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn check_dim(&self, v: &[f32]) -> Result<(), RetrievalError> {
        if v.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Best-first beam search on one layer. Returns the beam, closest first.
    fn search_layer(
        &self,
        query: &[f32],
        entry_points: &[Cand],
        ef: usize,
        level: usize,
    ) -> Vec<Cand> {
        let mut visited = vec![false; self.len()];
        let mut candidates: BinaryHeap<Cand> = BinaryHeap::new();
        let mut beam: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &ep in entry_points {
            if !core::mem::replace(&mut visited[ep.id as usize], true) {
                candidates.push(ep);
                beam.push(Reverse(ep));
            }
        }
        while beam.len() > ef {
            beam.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = beam.peek().map(|r| r.0);
            if beam.len() >= ef && worst.is_some_and(|w| c < w) {
                break;
            }
            for &n in &self.links[c.id as usize][level] {
                if core::mem::replace(&mut visited[n as usize], true) {
                    continue;
                }
                let cand = self.sim(query, n);
                let admit = beam.len() < ef || beam.peek().is_some_and(|w| cand > w.0);
                if admit {
                    candidates.push(cand);
                    beam.push(Reverse(cand));
                    if beam.len() > ef {
                        beam.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = beam.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the
    /// base than to every neighbour already kept, then top up with the
    /// pruned ones. `sorted` must be closest first.
    fn select_neighbors(&self, sorted: &[Cand], m: usize) -> Vec<u32> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for &c in sorted {
            if kept.len() >= m {
                break;
            }
            let diverse = kept
                .iter()
                .all(|k| dot(self.vector(c.id), self.vector(k.id)) < c.sim);
            if diverse {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|c| c.id).collect()
    }

    /// Normalizes and inserts `vector`; its id is the current length.
    pub fn insert(&mut self, mut vector: Vec<f32>) -> Result<u32, RetrievalError> {
        self.check_dim(&vector)?;
        normalize(&mut vector)?;
        let id = self.len() as u32;
        let level = self.level_for(id);
        self.vectors.extend_from_slice(&vector);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return Ok(id);
        };

        let mut ep = self.sim(&vector, entry);
        for l in (level + 1..=self.max_level).rev() {
            ep = self.search_layer(&vector, &[ep], 1, l)[0];
        }
        let mut eps = vec![ep];
        for l in (0..=level.min(self.max_level)).rev() {
            let beam = self.search_layer(&vector, &eps, self.params.ef_construct, l);
            let neighbors = self.select_neighbors(&beam, self.params.m);
            for &n in &neighbors {
                self.links[n as usize][l].push(id);
                if self.links[n as usize][l].len() > self.max_links(l) {
                    self.shrink(n, l);
                }
            }
            self.links[id as usize][l] = neighbors;
            eps = beam;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(id);
        }
        Ok(id)
    }

    fn shrink(&mut self, node: u32, level: usize) {
        let base: Vec<f32> = self.vector(node).to_vec();
        let mut cands: Vec<Cand> = self.links[node as usize][level]
            .iter()
            .map(|&n| self.sim(&base, n))
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let keep = self.select_neighbors(&cands, self.max_links(level));
        self.links[node as usize][level] = keep;
    }

    /// Links every layer-0 node that is unreachable from the entry point to
    /// its most similar reachable node, so a wide enough beam visits all.
    fn repair_connectivity(&mut self) {
        let Some(entry) = self.entry else { return };
        let n = self.len();
        let mut reached = vec![false; n];
        self.flood(entry, &mut reached);
        for id in 0..n as u32 {
            if reached[id as usize] {
                continue;
            }
            let base = self.vector(id).to_vec();
            let best = (0..n as u32)
                .filter(|&o| reached[o as usize])
                .map(|o| self.sim(&base, o))
                .max()
                .expect("entry point is reached");
            self.links[id as usize][0].push(best.id);
            self.links[best.id as usize][0].push(id);
            self.flood(id, &mut reached);
        }
    }

    fn flood(&self, start: u32, reached: &mut [bool]) {
        let mut queue = VecDeque::from([start]);
        reached[start as usize] = true;
        while let Some(node) = queue.pop_front() {
            for &nb in &self.links[node as usize][0] {
                if !core::mem::replace(&mut reached[nb as usize], true) {
                    queue.push_back(nb);
                }
            }
        }
    }

    /// Approximate top-`k` by cosine similarity with a layer-0 beam of
    /// `max(ef_search, k)`. A beam at least as large as the index visits every
    /// node and returns the exact top-`k`.
    pub fn topk(
        &self,
        query: &[f32],
        k: usize,
        ef_search: usize,
    ) -> Result<Ranking, RetrievalError> {
        self.check_dim(query)?;
        let Some(entry) = self.entry else {
            return Err(RetrievalError::EmptyIndex);
        };
        let ef = ef_search.max(k);
        let mut ep = self.sim(query, entry);
        for l in (1..=self.max_level).rev() {
            ep = self.search_layer(query, &[ep], 1, l)[0];
        }
        let beam = self.search_layer(query, &[ep], ef, 0);
        let hits = beam
            .into_iter()
            .take(k)
            .map(|c| Hit {
                id: c.id,
                score: f64::from(c.sim),
            })
            .collect();
        Ok(Ranking::from_hits("", hits, k))
    }

    /// Linear scan over every stored vector.
    pub fn exhaustive_topk(&self, query: &[f32], k: usize) -> Result<Ranking, RetrievalError> {
        self.check_dim(query)?;
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let hits = (0..self.len() as u32)
            .map(|id| Hit {
                id,
                score: f64::from(dot(query, self.vector(id))),
            })
            .collect();
        Ok(Ranking::from_hits("", hits, k))
    }

    /// Out-degree statistics on layer 0, for diagnostics.
    pub fn max_degree(&self) -> usize {
        self.links.iter().map(|l| l[0].len()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{Embedder, HashEmbedder};
    use alloc::format;
    use alloc::vec::Vec;

    fn corpus(n: usize) -> (HashEmbedder, Vec<Vec<f32>>) {
        let e = HashEmbedder::default();
        let words = [
            "sepsis",
            "anthrax",
            "fracture",
            "femur",
            "pneumonia",
            "acute",
            "chronic",
            "renal",
            "failure",
            "diabetes",
        ];
        let vecs = (0..n)
            .map(|i| {
                let text = format!(
                    "{} {} {} {i}",
                    words[i % 10],
                    words[(i / 10) % 10],
                    words[(i * 7 + 3) % 10]
                );
                e.embed(&text).unwrap()
            })
            .collect();
        (e, vecs)
    }

    /// Exhaustive oracle written independently of the index.
    fn brute_force(vectors: &[Vec<f32>], q: &[f32], k: usize) -> Vec<(u32, f64)> {
        let mut all: Vec<(u32, f64)> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut s = 0.0f32;
                for j in 0..v.len() {
                    s += v[j] * q[j];
                }
                (i as u32, f64::from(s))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn single_vector() {
        let (e, vecs) = corpus(1);
        let idx = DenseIndex::build(64, vecs.clone(), HnswParams::default()).unwrap();
        let q = e.embed("something else").unwrap();
        let r = idx.topk(&q, 5, 128).unwrap();
        assert_eq!(r.hits.len(), 1);
        assert_eq!(r.hits[0].score, cosine(&q, &vecs[0]));
    }

    #[test]
    fn stored_vector_ranks_first() {
        let (_, vecs) = corpus(50);
        let idx = DenseIndex::build(64, vecs.clone(), HnswParams::default()).unwrap();
        let r = idx.topk(&vecs[17], 3, 128).unwrap();
        assert_eq!(r.hits[0].id, 17);
        assert!((r.hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stored_vectors_are_unit_norm() {
        let (_, vecs) = corpus(20);
        let idx = DenseIndex::build(64, vecs, HnswParams::default()).unwrap();
        for id in 0..20 {
            let v = idx.vector(id);
            let n = libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>());
            assert!((n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn wide_beam_is_exact() {
        let (e, vecs) = corpus(200);
        let params = HnswParams {
            m: 4,
            ef_construct: 16,
            ..HnswParams::default()
        };
        let idx = DenseIndex::build(64, vecs.clone(), params).unwrap();
        for qi in 0..20 {
            let q = e.embed(&format!("query {qi} sepsis renal")).unwrap();
            let got: Vec<(u32, f64)> = idx
                .topk(&q, 10, 200)
                .unwrap()
                .hits
                .iter()
                .map(|h| (h.id, h.score))
                .collect();
            assert_eq!(got, brute_force(&vecs, &q, 10));
        }
    }

    #[test]
    fn default_beam_overlap() {
        let (e, vecs) = corpus(200);
        let idx = DenseIndex::build(64, vecs.clone(), HnswParams::default()).unwrap();
        let mut overlap = 0usize;
        for qi in 0..50 {
            let q = e.embed(&format!("{qi} acute femur failure")).unwrap();
            let got: Vec<u32> = idx.topk(&q, 10, 128).unwrap().ids().collect();
            let want = brute_force(&vecs, &q, 10);
            overlap += want.iter().filter(|w| got.contains(&w.0)).count();
        }
        assert!(overlap as f64 / 500.0 >= 0.99);
    }

    #[test]
    fn degree_bounded_and_connected() {
        let (_, vecs) = corpus(300);
        let params = HnswParams {
            m: 4,
            ef_construct: 32,
            ..HnswParams::default()
        };
        let idx = DenseIndex::build(64, vecs, params).unwrap();
        let mut reached = vec![false; idx.len()];
        idx.flood(idx.entry.unwrap(), &mut reached);
        assert!(reached.iter().all(|&r| r));
        // Repair links may add one edge beyond the cap per repaired node.
        assert!(idx.max_degree() <= 2 * 4 + 2);
    }

    #[test]
    fn errors() {
        let idx = DenseIndex::new(4, HnswParams::default());
        assert_eq!(
            idx.topk(&[1.0, 0.0, 0.0, 0.0], 1, 10),
            Err(RetrievalError::EmptyIndex)
        );
        assert_eq!(
            idx.topk(&[1.0, 0.0], 1, 10),
            Err(RetrievalError::DimensionMismatch {
                expected: 4,
                got: 2
            })
        );
        let mut idx = DenseIndex::new(2, HnswParams::default());
        assert_eq!(idx.insert(vec![0.0, 0.0]), Err(RetrievalError::ZeroVector));
    }
}
