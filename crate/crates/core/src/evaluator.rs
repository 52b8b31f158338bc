//! Test-time similarity and single-query retrieval metrics.

use std::cmp::Ordering;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::Sample;
use crate::diffcore::Tensor;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::network::DfmlModel;

/// Cut-offs reported on the rank curve.
pub const RANK_CUTOFFS: [usize; 4] = [1, 5, 10, 20];

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err!("cosine of lengths {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(contract_err!("cosine of a zero-norm feature"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean over extractors of the cosine between their eval-mode features.
pub fn similarity(model: &DfmlModel, x_i: &[f64], x_j: &[f64]) -> Result<f64> {
    let x = Tensor::from_rows(&[x_i.to_vec(), x_j.to_vec()])?;
    let e = model.num_extractors();
    let mut s = 0.0;
    for theta in 0..e {
        let f = model.extract_features(theta, &x)?;
        s += cosine(f.row(0), f.row(1))?;
    }
    Ok(s / e as f64)
}

/// Unit-normalised features of every extractor for `samples`.
fn normalised_features(model: &DfmlModel, samples: &[Sample]) -> Result<Vec<Tensor>> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    if rows.iter().any(|r| r.is_empty()) {
        return Err(contract_err!("evaluation needs feature vectors attached to every sample"));
    }
    let x = Tensor::from_rows(&rows)?;
    (0..model.num_extractors())
        .map(|theta| {
            let mut f = model.extract_features(theta, &x)?;
            let d = f.cols();
            for row in f.data_mut().chunks_mut(d) {
                let n = norm(row);
                if n == 0.0 {
                    return Err(contract_err!("zero-norm feature from extractor {theta}"));
                }
                row.iter_mut().for_each(|v| *v /= n);
            }
            Ok(f)
        })
        .collect()
}

/// `scores[q][g]`: similarity of query `q` and gallery item `g`.
pub fn similarity_matrix(model: &DfmlModel, query: &[Sample], gallery: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let fq = normalised_features(model, query)?;
    let fg = normalised_features(model, gallery)?;
    let e = fq.len() as f64;
    let mut scores = vec![vec![0.0; gallery.len()]; query.len()];
    for (a, b) in fq.iter().zip(&fg) {
        for (q, row) in scores.iter_mut().enumerate() {
            let fqr = a.row(q);
            for (g, s) in row.iter_mut().enumerate() {
                *s += fqr.iter().zip(b.row(g)).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    for row in scores.iter_mut() {
        row.iter_mut().for_each(|s| *s /= e);
    }
    Ok(scores)
}

/// Identity and provenance of one retrieval item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item {
    pub person: u64,
    pub camera: usize,
    pub sample_id: u64,
}

impl From<&Sample> for Item {
    fn from(s: &Sample) -> Self {
        Self {
            person: s.raw_person_id,
            camera: s.camera_id,
            sample_id: s.sample_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `(k, fraction of queries with a correct match in the top k)`.
    pub rank_curve: Vec<(usize, f64)>,
    pub map: f64,
    /// Queries that were scored.
    pub num_queries: usize,
    /// Queries without any valid correct match.
    pub skipped: usize,
    pub per_query_ap: Vec<f64>,
}

impl EvalResult {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.rank_curve.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.rank_curve {
            writeln!(s, "rank{k},{v}").expect("string write");
        }
        writeln!(s, "map,{}", self.map).expect("string write");
        writeln!(s, "num_queries,{}", self.num_queries).expect("string write");
        writeln!(s, "skipped,{}", self.skipped).expect("string write");
        s
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        for (k, v) in &self.rank_curve {
            writeln!(f, "{:<10} {:>7.2}%", format!("Rank-{k}"), 100.0 * v)?;
        }
        writeln!(f, "{:<10} {:>7.2}%", "mAP", 100.0 * self.map)?;
        write!(f, "{} queries scored, {} skipped", self.num_queries, self.skipped)
    }
}

/// Ranks every gallery item per query and scores the ranking. Gallery
/// items sharing person and camera with the query are excluded; ties fall
/// back to gallery `sample_id` ascending.
pub fn evaluate_scores(scores: &[Vec<f64>], query: &[Item], gallery: &[Item]) -> Result<EvalResult> {
    if scores.len() != query.len() {
        return Err(dim_err!("{} score rows for {} queries", scores.len(), query.len()));
    }
    let mut hits = vec![0usize; RANK_CUTOFFS.len()];
    let mut aps = Vec::with_capacity(query.len());
    let mut skipped = 0;
    let mut any_candidates = false;
    for (q, row) in query.iter().zip(scores) {
        if row.len() != gallery.len() {
            return Err(dim_err!("{} scores for {} gallery items", row.len(), gallery.len()));
        }
        if row.iter().any(|s| !s.is_finite()) {
            return Err(contract_err!("non-finite similarity score"));
        }
        let mut order: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(gallery[g].person == q.person && gallery[g].camera == q.camera))
            .collect();
        any_candidates |= !order.is_empty();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(Ordering::Equal)
                .then(gallery[a].sample_id.cmp(&gallery[b].sample_id))
        });
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &g) in order.iter().enumerate() {
            if gallery[g].person == q.person {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first.get_or_insert(pos + 1);
            }
        }
        let Some(first) = first else {
            skipped += 1;
            continue;
        };
        for (h, &k) in hits.iter_mut().zip(&RANK_CUTOFFS) {
            if first <= k {
                *h += 1;
            }
        }
        aps.push(precision_sum / found as f64);
    }
    if !any_candidates {
        return Err(Error::Evaluation("gallery is empty after exclusion for every query".into()));
    }
    if aps.is_empty() {
        return Err(Error::Evaluation("no query has a valid correct match".into()));
    }
    let n = aps.len() as f64;
    Ok(EvalResult {
        rank_curve: RANK_CUTOFFS.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / n)).collect(),
        map: aps.iter().sum::<f64>() / n,
        num_queries: aps.len(),
        skipped,
        per_query_ap: aps,
    })
}

pub fn evaluate(model: &DfmlModel, query: &[Sample], gallery: &[Sample]) -> Result<EvalResult> {
    if gallery.is_empty() {
        return Err(Error::Evaluation("empty gallery".into()));
    }
    let scores = similarity_matrix(model, query, gallery)?;
    let qi: Vec<Item> = query.iter().map(Item::from).collect();
    let gi: Vec<Item> = gallery.iter().map(Item::from).collect();
    evaluate_scores(&scores, &qi, &gi)
}
