//! Two-view, pair-structured mini-batches.
//!
//! Each batch draws `views_per_batch` distinct cameras uniformly, then
//! `pairs_per_view` same-WST image pairs per camera. A WST is drawn
//! uniformly among those with at least two images, with replacement, so
//! one WST may contribute several pairs to a batch.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::WstDataset;
use crate::error::{contract_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub views_per_batch: usize,
    pub pairs_per_view: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        Self {
            views_per_batch: 2,
            pairs_per_view: 16,
        }
    }
}

impl BatchShape {
    pub fn batch_size(&self) -> usize {
        2 * self.views_per_batch * self.pairs_per_view
    }
}

/// A structured batch. `chi` holds dataset sample indices; `rho` holds
/// positions into `chi`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub chi: Vec<usize>,
    /// Camera id → positions into `chi`.
    pub per_camera: BTreeMap<usize, Vec<usize>>,
    pub rho: Vec<(usize, usize)>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.chi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chi.is_empty()
    }

    /// `C_batch`.
    pub fn num_views(&self) -> usize {
        self.per_camera.len()
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.per_camera.keys().copied().collect()
    }

    /// Checks every structural invariant against `dataset`; returns the
    /// first violation found.
    pub fn check(&self, dataset: &WstDataset, shape: &BatchShape) -> Result<()> {
        let b = shape.batch_size();
        if self.chi.len() != b {
            return Err(contract_err!("|chi| = {} but B = {b}", self.chi.len()));
        }
        if self.per_camera.len() != shape.views_per_batch {
            return Err(contract_err!(
                "C_batch = {} but expected {}",
                self.per_camera.len(),
                shape.views_per_batch
            ));
        }
        let per_view = b / shape.views_per_batch;
        let mut covered = vec![false; b];
        for (&cam, pos) in &self.per_camera {
            if pos.len() != per_view {
                return Err(contract_err!("camera {cam} has {} entries, expected {per_view}", pos.len()));
            }
            for &p in pos {
                if dataset.camera(self.chi[p]) != cam {
                    return Err(contract_err!("position {p} filed under camera {cam}"));
                }
                covered[p] = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(contract_err!("per-camera index sets do not cover chi"));
        }
        if self.rho.len() != shape.views_per_batch * shape.pairs_per_view {
            return Err(contract_err!("|rho| = {}", self.rho.len()));
        }
        for &(i, j) in &self.rho {
            let (si, sj) = (self.chi[i], self.chi[j]);
            if i == j || si == sj {
                return Err(contract_err!("pair ({i}, {j}) repeats a sample"));
            }
            if dataset.camera(si) != dataset.camera(sj) || dataset.label(si) != dataset.label(sj) {
                return Err(contract_err!("pair ({i}, {j}) crosses WSTs"));
            }
        }
        Ok(())
    }
}

/// Owns the RNG; one sampler per training run.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    shape: BatchShape,
    rng: ChaCha8Rng,
    /// Per camera, the labels of WSTs holding at least two images.
    eligible: Vec<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(dataset: &WstDataset, shape: BatchShape, seed: u64) -> Result<Self> {
        if shape.views_per_batch == 0 || shape.pairs_per_view == 0 {
            return Err(contract_err!("batch shape {shape:?} must be positive"));
        }
        let eligible: Vec<Vec<usize>> = (0..dataset.num_cameras())
            .map(|c| {
                dataset
                    .wsts_in_camera(c)
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.len() >= 2)
                    .map(|(y, _)| y)
                    .collect()
            })
            .collect();
        let usable = eligible.iter().filter(|e| !e.is_empty()).count();
        if usable < shape.views_per_batch {
            let lacking: Vec<String> = eligible
                .iter()
                .enumerate()
                .filter(|(_, e)| e.is_empty())
                .map(|(c, _)| c.to_string())
                .collect();
            return Err(Error::Sampling(format!(
                "need {} cameras with a multi-image WST, found {usable}; cameras without one: [{}]",
                shape.views_per_batch,
                lacking.join(", ")
            )));
        }
        Ok(Self {
            shape,
            rng: ChaCha8Rng::seed_from_u64(seed),
            eligible,
        })
    }

    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    /// Cameras that can contribute pairs.
    pub fn eligible_cameras(&self) -> Vec<usize> {
        (0..self.eligible.len()).filter(|&c| !self.eligible[c].is_empty()).collect()
    }

    pub fn next_batch(&mut self, dataset: &WstDataset) -> Result<MiniBatch> {
        let cams = self.eligible_cameras();
        let mut chosen: Vec<usize> = index::sample(&mut self.rng, cams.len(), self.shape.views_per_batch)
            .into_iter()
            .map(|k| cams[k])
            .collect();
        chosen.sort_unstable();

        let mut chi = Vec::with_capacity(self.shape.batch_size());
        let mut per_camera = BTreeMap::new();
        let mut rho = Vec::with_capacity(self.shape.views_per_batch * self.shape.pairs_per_view);
        for cam in chosen {
            let labels = &self.eligible[cam];
            let mut positions = Vec::with_capacity(2 * self.shape.pairs_per_view);
            for _ in 0..self.shape.pairs_per_view {
                let y = labels[self.rng.random_range(0..labels.len())];
                let members = dataset.members(cam, y);
                let two = index::sample(&mut self.rng, members.len(), 2);
                let (a, b) = (members[two.index(0)], members[two.index(1)]);
                let pa = chi.len();
                chi.push(a);
                chi.push(b);
                positions.extend([pa, pa + 1]);
                rho.push((pa, pa + 1));
            }
            per_camera.insert(cam, positions);
        }
        Ok(MiniBatch {
            chi,
            per_camera,
            rho,
        })
    }
}

/// Batches per epoch, `⌈N / B⌉`.
pub fn batches_per_epoch(num_samples: usize, shape: &BatchShape) -> usize {
    num_samples.div_ceil(shape.batch_size())
}
