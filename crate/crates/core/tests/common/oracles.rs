//! Reference computations written without the library's code paths.

use dfml_core::evaluator::Item;

pub struct OracleMetrics {
    pub hits: Vec<(usize, usize)>,
    pub ap_sum: f64,
    pub scored: usize,
    pub skipped: usize,
    pub map: f64,
}

impl OracleMetrics {
    pub fn rank_at(&self, k: usize) -> f64 {
        let h = self.hits.iter().find(|(kk, _)| *kk == k).map_or(0, |(_, h)| *h);
        h as f64 / self.scored as f64
    }
}

/// Ranks by pairwise counting: the position of gallery item `g` is one plus
/// the number of valid items that beat it (higher score, or equal score
/// and smaller sample id). No sorting is involved. Returns `None` when no
/// query can be scored.
pub fn brute_force_metrics(scores: &[Vec<f64>], query: &[Item], gallery: &[Item]) -> Option<OracleMetrics> {
    let cutoffs = [1, 5, 10, 20];
    let mut hits = vec![0usize; 4];
    let (mut ap_sum, mut scored, mut skipped) = (0.0, 0, 0);
    for (q, row) in query.iter().zip(scores) {
        let valid: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(gallery[g].person == q.person && gallery[g].camera == q.camera))
            .collect();
        let position = |g: usize| {
            1 + valid
                .iter()
                .filter(|&&h| row[h] > row[g] || (row[h] == row[g] && gallery[h].sample_id < gallery[g].sample_id))
                .count()
        };
        let correct: Vec<usize> = valid.iter().copied().filter(|&g| gallery[g].person == q.person).collect();
        if correct.is_empty() {
            skipped += 1;
            continue;
        }
        scored += 1;
        let positions: Vec<usize> = correct.iter().map(|&g| position(g)).collect();
        let best = *positions.iter().min().unwrap();
        for (h, &k) in hits.iter_mut().zip(&cutoffs) {
            if best <= k {
                *h += 1;
            }
        }
        let mut ap = 0.0;
        for &pos in &positions {
            let at_or_above = positions.iter().filter(|&&o| o <= pos).count();
            ap += at_or_above as f64 / pos as f64;
        }
        ap_sum += ap / positions.len() as f64;
    }
    if scored == 0 {
        return None;
    }
    Some(OracleMetrics {
        hits: cutoffs.iter().copied().zip(hits).collect(),
        ap_sum,
        scored,
        skipped,
        map: ap_sum / scored as f64,
    })
}
