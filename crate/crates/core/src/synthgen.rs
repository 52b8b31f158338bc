//! Deterministic synthetic multi-camera corpus.
//!
//! Each person has a base vector inside a random `identity_dim`-dimensional
//! subspace. Camera `c` adds a fixed shift of norm `sigma_cam`, and every
//! image adds isotropic noise of scale `sigma_id`. Visits follow a matrix
//! indexed by the person's home camera. Training persons and held-out test
//! persons share the camera shifts.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{features_archive, save_manifest, Sample};
use crate::error::{contract_err, Error, Result};
use crate::network::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_persons: usize,
    /// Held-out persons used for the query and gallery splits.
    pub num_test_persons: usize,
    pub num_cameras: usize,
    pub images_per_camera: usize,
    pub input_dim: usize,
    /// Rank of the subspace holding person base vectors; `0` means full.
    pub identity_dim: usize,
    /// Per-image isotropic noise.
    pub sigma_id: f64,
    /// Norm of each camera's additive shift.
    pub sigma_cam: f64,
    /// `visit[h][c]`: probability that a person with home camera `h`
    /// appears in camera `c`. Every person always appears at home.
    pub visit: Vec<Vec<f64>>,
    /// Mean raw tracklets per WST (at least 1).
    pub fragmentation: f64,
    pub frame_interval_seconds: f64,
    /// Gaps between consecutive fragments are uniform in `[1, max]` seconds.
    pub max_fragment_gap_seconds: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let c = 4;
        Self {
            num_persons: 50,
            num_test_persons: 50,
            num_cameras: c,
            images_per_camera: 8,
            input_dim: 32,
            identity_dim: 8,
            sigma_id: 0.5,
            sigma_cam: 2.0,
            visit: uniform_visits(c, 1.0),
            fragmentation: 2.0,
            frame_interval_seconds: 1.0,
            max_fragment_gap_seconds: 300.0,
            seed: 0,
        }
    }
}

/// Home camera always, every other camera with probability `p`.
pub fn uniform_visits(num_cameras: usize, p: f64) -> Vec<Vec<f64>> {
    (0..num_cameras)
        .map(|h| (0..num_cameras).map(|c| if c == h { 1.0 } else { p }).collect())
        .collect()
}

/// Cameras split into consecutive groups of `group` cameras; visits within a
/// group happen with `p_in`, across groups with `p_out`.
pub fn grouped_visits(num_cameras: usize, group: usize, p_in: f64, p_out: f64) -> Vec<Vec<f64>> {
    (0..num_cameras)
        .map(|h| {
            (0..num_cameras)
                .map(|c| match (c == h, c / group.max(1) == h / group.max(1)) {
                    (true, _) => 1.0,
                    (false, true) => p_in,
                    (false, false) => p_out,
                })
                .collect()
        })
        .collect()
}

fn bad_value(key: &str, v: &str, line: u64) -> Error {
    Error::Parse {
        line,
        message: format!("bad value {v:?} for {key}"),
    }
}

impl SynthConfig {
    /// Applies one assignment. `visit` takes `;`-separated rows of
    /// comma-separated probabilities; `visit_p` sets every off-home entry.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        self.set_at(key, v, 0)
    }

    fn set_at(&mut self, key: &str, v: &str, line: u64) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str, line: u64) -> Result<T> {
            v.parse().map_err(|_| bad_value(key, v, line))
        }
        match key {
            "num_persons" => self.num_persons = num(key, v, line)?,
            "num_test_persons" => self.num_test_persons = num(key, v, line)?,
            "num_cameras" => {
                self.num_cameras = num(key, v, line)?;
                self.visit = uniform_visits(self.num_cameras, 1.0);
            }
            "images_per_camera" => self.images_per_camera = num(key, v, line)?,
            "input_dim" => self.input_dim = num(key, v, line)?,
            "identity_dim" => self.identity_dim = num(key, v, line)?,
            "sigma_id" => self.sigma_id = num(key, v, line)?,
            "sigma_cam" => self.sigma_cam = num(key, v, line)?,
            "visit_p" => self.visit = uniform_visits(self.num_cameras, num(key, v, line)?),
            "visit" => {
                self.visit = v
                    .split(';')
                    .map(|row| row.split(',').map(|x| num(key, x.trim(), line)).collect())
                    .collect::<Result<_>>()?
            }
            "fragmentation" => self.fragmentation = num(key, v, line)?,
            "frame_interval_seconds" => self.frame_interval_seconds = num(key, v, line)?,
            "max_fragment_gap_seconds" => self.max_fragment_gap_seconds = num(key, v, line)?,
            "seed" => self.seed = num(key, v, line)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Flat `key = value` text over the defaults; `#` starts a comment.
    /// `num_cameras` resets the visit matrix, so it should come first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = (i + 1) as u64;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected key = value, got {body:?}"),
            })?;
            c.set_at(k.trim(), v.trim(), line)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_persons == 0 || self.num_cameras == 0 || self.images_per_camera == 0 || self.input_dim == 0 {
            return Err(contract_err!("persons, cameras, images and input_dim must be positive"));
        }
        if self.identity_dim > self.input_dim {
            return Err(contract_err!("identity_dim {} exceeds input_dim {}", self.identity_dim, self.input_dim));
        }
        for (k, v) in [
            ("sigma_id", self.sigma_id),
            ("sigma_cam", self.sigma_cam),
            ("frame_interval_seconds", self.frame_interval_seconds),
            ("max_fragment_gap_seconds", self.max_fragment_gap_seconds),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(contract_err!("{k} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.fragmentation >= 1.0 && self.fragmentation.is_finite()) {
            return Err(contract_err!("fragmentation must be at least 1"));
        }
        if self.visit.len() != self.num_cameras || self.visit.iter().any(|r| r.len() != self.num_cameras) {
            return Err(contract_err!("visit matrix must be {0}x{0}", self.num_cameras));
        }
        if self.visit.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(contract_err!("visit probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// What the generator knows and a learner does not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Indexed by raw person id; training persons first.
    pub bases: Vec<Vec<f64>>,
    pub camera_shifts: Vec<Vec<f64>>,
    pub home_camera: Vec<usize>,
    /// `visits[p][c]`.
    pub visits: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Sample>,
    /// First image of every (test person, camera) visit.
    pub query: Vec<Sample>,
    /// Remaining test images.
    pub gallery: Vec<Sample>,
    pub truth: GroundTruth,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormal basis of a random `k`-dimensional subspace of `R^n`.
fn random_basis(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = normal_vec(rng, n);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

struct Emitter {
    next_sample: u64,
    next_tracklet: u64,
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let (c, n) = (config.num_cameras, config.input_dim);
    let k = if config.identity_dim == 0 { n } else { config.identity_dim };
    let mut world = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let basis = random_basis(&mut world, n, k);
    let camera_shifts: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let v = normal_vec(&mut world, n);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * config.sigma_cam / norm).collect()
        })
        .collect();

    let total = config.num_persons + config.num_test_persons;
    let mut people = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
    let mut truth = GroundTruth {
        bases: Vec::with_capacity(total),
        camera_shifts,
        home_camera: Vec::with_capacity(total),
        visits: Vec::with_capacity(total),
    };
    for p in 0..total {
        let coef = normal_vec(&mut people, k);
        let mut base = vec![0.0; n];
        for (a, b) in coef.iter().zip(&basis) {
            base.iter_mut().zip(b).for_each(|(x, y)| *x += a * y);
        }
        // images of a person keep their size on average regardless of k
        let scale = (n as f64 / k as f64).sqrt();
        base.iter_mut().for_each(|x| *x *= scale);
        let home = p % c;
        let visits: Vec<bool> = (0..c).map(|cam| cam == home || people.random::<f64>() < config.visit[home][cam]).collect();
        truth.bases.push(base);
        truth.home_camera.push(home);
        truth.visits.push(visits);
    }

    let mut images = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3));
    let mut em = Emitter {
        next_sample: 0,
        next_tracklet: 0,
    };
    let mut corpus = SynthCorpus {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        truth,
    };
    for p in 0..total {
        for cam in 0..c {
            if !corpus.truth.visits[p][cam] {
                continue;
            }
            let visit = emit_visit(config, &corpus.truth, p, cam, &mut images, &mut em);
            if p < config.num_persons {
                corpus.train.extend(visit);
            } else {
                let mut it = visit.into_iter();
                corpus.query.extend(it.next());
                corpus.gallery.extend(it);
            }
        }
    }
    Ok(corpus)
}

fn emit_visit(
    config: &SynthConfig,
    truth: &GroundTruth,
    person: usize,
    cam: usize,
    rng: &mut ChaCha8Rng,
    em: &mut Emitter,
) -> Vec<Sample> {
    let m = config.images_per_camera;
    let whole = config.fragmentation.floor();
    let extra = rng.random::<f64>() < config.fragmentation - whole;
    let fragments = ((whole as usize) + extra as usize).clamp(1, m);
    // fragment f takes images [cuts[f], cuts[f + 1])
    let cuts: Vec<usize> = (0..=fragments).map(|f| f * m / fragments).collect();
    let mut t = rng.random::<f64>() * 86_400.0;
    let mut out = Vec::with_capacity(m);
    for f in 0..fragments {
        if f > 0 {
            t += 1.0 + rng.random::<f64>() * (config.max_fragment_gap_seconds - 1.0).max(0.0);
        }
        let tracklet = em.next_tracklet;
        em.next_tracklet += 1;
        for i in cuts[f]..cuts[f + 1] {
            if i > cuts[f] {
                t += config.frame_interval_seconds;
            }
            let noise = normal_vec(rng, config.input_dim);
            let features: Vec<f64> = truth.bases[person]
                .iter()
                .zip(&truth.camera_shifts[cam])
                .zip(&noise)
                .map(|((b, s), z)| b + s + config.sigma_id * z)
                .collect();
            let id = em.next_sample;
            em.next_sample += 1;
            out.push(Sample {
                sample_id: id,
                raw_person_id: person as u64,
                camera_id: cam,
                raw_tracklet_id: tracklet,
                timestamp: t,
                tensor_key: format!("s{id:07}"),
                features,
            });
        }
    }
    out
}

/// Writes `<split>_manifest.csv` and `<split>_features.dfml` for the train,
/// query and gallery splits, plus `ground_truth.json`.
pub fn write_corpus(corpus: &SynthCorpus, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for (name, split) in [("train", &corpus.train), ("query", &corpus.query), ("gallery", &corpus.gallery)] {
        save_manifest(&out_dir.join(format!("{name}_manifest.csv")), split)?;
        features_archive(split).save(&out_dir.join(format!("{name}_features.dfml")))?;
    }
    let json = serde_json::to_string_pretty(&corpus.truth).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out_dir.join("ground_truth.json"), json + "\n")?;
    Ok(())
}
