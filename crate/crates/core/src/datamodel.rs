//! Samples, manifests, weakly supervised tracklet (WST) construction and
//! camera co-occurrence estimation.
//!
//! A WST is the union of all raw tracklets of one person inside one camera.
//! Labels are dense per camera. The raw person id survives on each
//! [`Sample`] for evaluation ground truth and co-occurrence estimation only;
//! nothing in the training objective reads it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Tensor, TensorArchive};
use crate::error::{contract_err, Error, Result};

/// One person image record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub raw_person_id: u64,
    pub camera_id: usize,
    pub raw_tracklet_id: u64,
    pub timestamp: f64,
    pub tensor_key: String,
    /// Input vector; empty when only the manifest was loaded.
    pub features: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    sample_id: u64,
    raw_person_id: u64,
    camera_id: usize,
    raw_tracklet_id: u64,
    timestamp_seconds: f64,
    tensor_key: String,
}

pub const MANIFEST_HEADER: [&str; 6] = [
    "sample_id",
    "raw_person_id",
    "camera_id",
    "raw_tracklet_id",
    "timestamp_seconds",
    "tensor_key",
];

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn read_manifest<R: Read>(r: R) -> Result<Vec<Sample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<ManifestRecord>() {
        let rec = rec.map_err(csv_error)?;
        if !(rec.timestamp_seconds.is_finite() && rec.timestamp_seconds >= 0.0) {
            return Err(Error::Parse {
                line: out.len() as u64 + 2,
                message: format!("timestamp {} must be non-negative", rec.timestamp_seconds),
            });
        }
        out.push(Sample {
            sample_id: rec.sample_id,
            raw_person_id: rec.raw_person_id,
            camera_id: rec.camera_id,
            raw_tracklet_id: rec.raw_tracklet_id,
            timestamp: rec.timestamp_seconds,
            tensor_key: rec.tensor_key,
            features: Vec::new(),
        });
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(w: W, samples: &[Sample]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in samples {
        wtr.serialize(ManifestRecord {
            sample_id: s.sample_id,
            raw_person_id: s.raw_person_id,
            camera_id: s.camera_id,
            raw_tracklet_id: s.raw_tracklet_id,
            timestamp_seconds: s.timestamp,
            tensor_key: s.tensor_key.clone(),
        })
        .map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    read_manifest(std::fs::File::open(path)?)
}

pub fn save_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    write_manifest(std::fs::File::create(path)?, samples)
}

/// Fills each sample's features from the archive entry named by its key.
pub fn attach_features(samples: &mut [Sample], archive: &TensorArchive) -> Result<()> {
    for s in samples.iter_mut() {
        let t = archive
            .get(&s.tensor_key)
            .ok_or_else(|| contract_err!("tensor key {} missing from archive", s.tensor_key))?;
        s.features = t.data().to_vec();
    }
    Ok(())
}

/// Collects the feature vectors of `samples` into an archive keyed by
/// their tensor keys.
pub fn features_archive(samples: &[Sample]) -> TensorArchive {
    let mut a = TensorArchive::new();
    for s in samples {
        a.insert(s.tensor_key.clone(), Tensor::vector(s.features.clone()));
    }
    a
}

/// Content hash over manifest fields and feature bits, order-sensitive.
pub fn fingerprint(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.sample_id.to_le_bytes());
        h.update(s.raw_person_id.to_le_bytes());
        h.update((s.camera_id as u64).to_le_bytes());
        h.update(s.raw_tracklet_id.to_le_bytes());
        h.update(s.timestamp.to_le_bytes());
        h.update(s.tensor_key.as_bytes());
        for v in &s.features {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Checks that timestamps never decrease along each raw tracklet in
/// manifest order.
pub fn check_tracklet_order(samples: &[Sample]) -> Result<()> {
    let mut last: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    for s in samples {
        let key = (s.camera_id, s.raw_tracklet_id);
        if let Some(&prev) = last.get(&key) {
            if s.timestamp < prev {
                return Err(contract_err!(
                    "sample {} goes back in time within tracklet {}",
                    s.sample_id,
                    s.raw_tracklet_id
                ));
            }
        }
        last.insert(key, s.timestamp);
    }
    Ok(())
}

/// Samples grouped into WSTs with per-camera label spaces.
#[derive(Debug, Clone)]
pub struct WstDataset {
    samples: Vec<Sample>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    /// `members[c][y]` lists sample indices of WST `y` in camera `c`.
    members: Vec<Vec<Vec<usize>>>,
}

impl WstDataset {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn camera(&self, i: usize) -> usize {
        self.samples[i].camera_id
    }

    /// `M_c` for every camera.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_cameras(&self) -> usize {
        self.class_counts.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_wsts(&self) -> usize {
        self.class_counts.iter().sum()
    }

    pub fn members(&self, camera: usize, label: usize) -> &[usize] {
        &self.members[camera][label]
    }

    pub fn wsts_in_camera(&self, camera: usize) -> &[Vec<usize>] {
        &self.members[camera]
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    /// `[N × input_dim]` matrix of the selected samples' features.
    pub fn feature_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            let f = &self.samples[i].features;
            if f.len() != d || d == 0 {
                return Err(contract_err!(
                    "sample {} has {} features, expected {d}",
                    self.samples[i].sample_id,
                    f.len()
                ));
            }
            data.extend_from_slice(f);
        }
        Tensor::matrix(idx.len(), d, data)
    }

    /// Samples with each manifest's raw person id replaced by its WST
    /// label, as an annotator would export them.
    pub fn relabelled_samples(&self) -> Vec<Sample> {
        self.samples
            .iter()
            .zip(&self.labels)
            .map(|(s, &y)| Sample {
                raw_person_id: y as u64,
                ..s.clone()
            })
            .collect()
    }

    pub fn stats(&self) -> WstStats {
        WstStats {
            per_camera: self.class_counts.clone(),
            images_per_camera: self.members.iter().map(|c| c.iter().map(Vec::len).sum()).collect(),
            total_images: self.len(),
            total_wsts: self.num_wsts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WstStats {
    pub per_camera: Vec<usize>,
    pub images_per_camera: Vec<usize>,
    pub total_images: usize,
    pub total_wsts: usize,
}

/// Merges samples sharing `(raw_person_id, camera_id)` into one WST.
///
/// Labels within a camera follow ascending raw person id. The number of
/// cameras is one past the largest camera id seen.
pub fn build_wst(samples: &[Sample]) -> Result<WstDataset> {
    let cams = samples
        .iter()
        .map(|s| s.camera_id + 1)
        .max()
        .ok_or_else(|| Error::EmptyDataset("no samples to build WSTs from".into()))?;
    build_wst_with_cameras(samples, cams)
}

/// As [`build_wst`] with an explicit camera count `C`.
pub fn build_wst_with_cameras(samples: &[Sample], num_cameras: usize) -> Result<WstDataset> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to build WSTs from".into()));
    }
    let mut persons: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); num_cameras];
    for s in samples {
        if s.camera_id >= num_cameras {
            return Err(contract_err!(
                "sample {} has camera {} but C = {num_cameras}",
                s.sample_id,
                s.camera_id
            ));
        }
        persons[s.camera_id].insert(s.raw_person_id);
    }
    let label_of: Vec<BTreeMap<u64, usize>> = persons
        .iter()
        .map(|set| set.iter().enumerate().map(|(y, &p)| (p, y)).collect())
        .collect();
    let class_counts: Vec<usize> = persons.iter().map(BTreeSet::len).collect();
    let mut members: Vec<Vec<Vec<usize>>> =
        class_counts.iter().map(|&m| vec![Vec::new(); m]).collect();
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let y = label_of[s.camera_id][&s.raw_person_id];
        labels.push(y);
        members[s.camera_id][y].push(i);
    }
    Ok(WstDataset {
        samples: samples.to_vec(),
        labels,
        class_counts,
        members,
    })
}

/// Outcome of a reduced-dataset construction.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub dataset: WstDataset,
    pub original_images: usize,
    pub retained_images: usize,
}

impl Reduction {
    /// Retained share of the original images, in percent.
    pub fn retention_percent(&self) -> f64 {
        100.0 * self.retained_images as f64 / self.original_images as f64
    }
}

/// Splits the samples of one `(person, camera)` group into time-chained
/// WSTs and returns the indices of the one kept: the chain with the most
/// images, ties going to the earliest start.
fn longest_chain(idx: &mut [usize], samples: &[Sample], window_s: f64) -> Vec<usize> {
    idx.sort_by(|&a, &b| {
        samples[a]
            .timestamp
            .total_cmp(&samples[b].timestamp)
            .then(samples[a].sample_id.cmp(&samples[b].sample_id))
    });
    let mut best: &[usize] = &[];
    let mut start = 0;
    for k in 1..=idx.len() {
        let breaks = k == idx.len()
            || samples[idx[k]].timestamp - samples[idx[k - 1]].timestamp > window_s;
        if breaks {
            let chain = &idx[start..k];
            // Strictly longer only: earlier chains win ties.
            if chain.len() > best.len() {
                best = chain;
            }
            start = k;
        }
    }
    best.to_vec()
}

/// Keeps only the longest time-chained WST per `(person, camera)`, where
/// consecutive images at most `window_minutes` apart share a WST.
pub fn build_reduced(samples: &[Sample], window_minutes: f64) -> Result<Reduction> {
    if !(window_minutes.is_finite() && window_minutes > 0.0) {
        return Err(contract_err!("window must be positive, got {window_minutes}"));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to reduce".into()));
    }
    let window_s = window_minutes * 60.0;
    let mut groups: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry((s.raw_person_id, s.camera_id)).or_default().push(i);
    }
    let mut keep = vec![false; samples.len()];
    for idx in groups.values_mut() {
        for i in longest_chain(idx, samples, window_s) {
            keep[i] = true;
        }
    }
    let retained: Vec<Sample> = samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    let cams = samples.iter().map(|s| s.camera_id + 1).max().unwrap_or(0);
    let dataset = build_wst_with_cameras(&retained, cams)?;
    Ok(Reduction {
        original_images: samples.len(),
        retained_images: retained.len(),
        dataset,
    })
}

/// `phi[i][j]`: probability that a person seen in camera `j` is also seen
/// in camera `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrenceMatrix {
    phi: Vec<Vec<f64>>,
}

impl CoOccurrenceMatrix {
    pub fn new(phi: Vec<Vec<f64>>) -> Result<Self> {
        let c = phi.len();
        for (i, row) in phi.iter().enumerate() {
            if row.len() != c {
                return Err(contract_err!("phi row {i} has {} entries, expected {c}", row.len()));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(contract_err!("phi entry {v} outside [0, 1]"));
            }
        }
        Ok(Self { phi })
    }

    pub fn num_cameras(&self) -> usize {
        self.phi.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.phi[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.phi
    }

    /// Header of camera ids, then one comma-separated row per camera.
    pub fn to_csv(&self) -> String {
        let c = self.num_cameras();
        let mut s = (0..c).map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        s.push('\n');
        for row in &self.phi {
            s.push_str(&row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rdr.headers().map_err(csv_error)?.clone();
        for (k, h) in header.iter().enumerate() {
            if h.parse::<usize>().ok() != Some(k) {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("header field {k} should be camera id {k}, got {h:?}"),
                });
            }
        }
        let mut phi = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_error)?;
            let line = rec.position().map_or(0, |p| p.line());
            let row = rec
                .iter()
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Parse {
                        line,
                        message: format!("{v:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            phi.push(row);
        }
        if phi.len() != header.len() {
            return Err(contract_err!(
                "phi has {} rows for {} cameras",
                phi.len(),
                header.len()
            ));
        }
        Self::new(phi)
    }
}

/// Counts persons per camera from raw annotations.
pub fn estimate_phi(samples: &[Sample]) -> Result<CoOccurrenceMatrix> {
    let cams = samples
        .iter()
        .map(|s| s.camera_id + 1)
        .max()
        .ok_or_else(|| Error::EmptyDataset("no samples to estimate phi from".into()))?;
    estimate_phi_with_cameras(samples, cams)
}

pub fn estimate_phi_with_cameras(samples: &[Sample], num_cameras: usize) -> Result<CoOccurrenceMatrix> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to estimate phi from".into()));
    }
    let mut cams_of: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
    for s in samples {
        if s.camera_id >= num_cameras {
            return Err(contract_err!("camera {} out of range", s.camera_id));
        }
        cams_of.entry(s.raw_person_id).or_default().insert(s.camera_id);
    }
    let mut joint = vec![vec![0usize; num_cameras]; num_cameras];
    for cams in cams_of.values() {
        for &i in cams {
            for &j in cams {
                joint[i][j] += 1;
            }
        }
    }
    let phi = (0..num_cameras)
        .map(|i| {
            (0..num_cameras)
                .map(|j| {
                    let in_j = joint[j][j];
                    if in_j == 0 {
                        0.0
                    } else {
                        joint[i][j] as f64 / in_j as f64
                    }
                })
                .collect()
        })
        .collect();
    CoOccurrenceMatrix::new(phi)
}
