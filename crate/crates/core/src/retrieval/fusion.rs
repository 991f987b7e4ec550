use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::{Hit, Ranking};

pub const DEFAULT_K_RRF: f64 = 60.0;

/// Reciprocal rank fusion: each entry scores `sum 1 / (k_rrf + rank)` over
/// the rankings that contain it, ranks starting at 1. Ties go to the lower
/// id. The fused query string is taken from the first ranking.
pub fn rrf_fuse(rankings: &[Ranking], k_rrf: f64) -> Ranking {
    // Per-entry contributions are collected and summed in ascending rank
    // order so the result does not depend on the order of `rankings`.
    let mut ranks: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for ranking in rankings {
        for (pos, hit) in ranking.hits.iter().enumerate() {
            ranks.entry(hit.id).or_default().push(pos + 1);
        }
    }
    let hits: Vec<Hit> = ranks
        .into_iter()
        .map(|(id, mut rs)| {
            rs.sort_unstable();
            let score = rs.iter().map(|&r| 1.0 / (k_rrf + r as f64)).sum();
            Hit { id, score }
        })
        .collect();
    let query = rankings.first().map(|r| r.query.as_str()).unwrap_or("");
    let len = hits.len();
    Ranking::from_hits(query, hits, len)
}
