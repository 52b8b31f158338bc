//! Constructed manifests whose counts are known by design.

use std::collections::BTreeMap;
use std::path::PathBuf;

use dfml_core::datamodel::Sample;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub struct Tally {
    pub wsts_per_camera: Vec<usize>,
    pub total_wsts: usize,
    /// `(window minutes, retained images)`.
    pub retained: Vec<(f64, usize)>,
}

pub fn read_tally(path: &std::path::Path) -> Tally {
    let text = std::fs::read_to_string(path).unwrap();
    let kv: BTreeMap<String, String> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#') && l.contains('='))
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.trim().to_string(), v.trim().to_string())
        })
        .collect();
    Tally {
        wsts_per_camera: kv["wsts_per_camera"].split(',').map(|v| v.parse().unwrap()).collect(),
        total_wsts: kv["total_wsts"].parse().unwrap(),
        retained: kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("retained.").map(|w| (w.parse().unwrap(), v.parse().unwrap())))
            .collect(),
    }
}

fn sample(id: u64, person: u64, camera: usize, tracklet: u64, t: f64) -> Sample {
    Sample {
        sample_id: id,
        raw_person_id: person,
        camera_id: camera,
        raw_tracklet_id: tracklet,
        timestamp: t,
        tensor_key: format!("s{id}"),
        features: Vec::new(),
    }
}

/// `(person, camera)` groups: `wide` persons visit `k + 1` cameras, the
/// rest `k`, on consecutive cameras starting at `person % cameras`.
fn groups(persons: u64, cameras: usize, k: usize, wide: u64) -> Vec<(u64, usize)> {
    (0..persons)
        .flat_map(|p| {
            let n = if p < wide { k + 1 } else { k };
            (0..n).map(move |j| (p, (p as usize + j) % cameras))
        })
        .collect()
}

/// 625 persons over 6 cameras with 1,955 person-camera groups split into
/// 8,298 raw tracklets of two images each.
pub fn tracklet_corpus() -> Vec<Sample> {
    let g = groups(625, 6, 3, 80);
    assert_eq!(g.len(), 1955);
    let mut out = Vec::new();
    let mut tracklet = 0;
    for (i, &(p, c)) in g.iter().enumerate() {
        let n = if i < 478 { 5 } else { 4 };
        for f in 0..n {
            let t0 = (i * 10_000 + f * 1_000) as f64;
            for j in 0..2 {
                out.push(sample(out.len() as u64, p, c, tracklet, t0 + j as f64));
            }
            tracklet += 1;
        }
    }
    out
}

/// 751 persons over 6 cameras, 3,262 groups and 12,936 images, each image
/// its own tracklet. Group layouts (seconds between consecutive images):
/// - 499 groups `60, 240, 7200`: 2 images kept at 3 min, 3 at 5 min
/// - 1,873 groups `60, 7200`: 2 of 3 kept at either window
/// - 871 groups of 6 and 19 groups of 5 images, 60 s apart: all kept
pub fn image_corpus() -> Vec<Sample> {
    let g = groups(751, 6, 4, 258);
    assert_eq!(g.len(), 3262);
    let mut out = Vec::new();
    for (i, &(p, c)) in g.iter().enumerate() {
        let gaps: Vec<f64> = match i {
            0..499 => vec![60.0, 240.0, 7200.0],
            499..2372 => vec![60.0, 7200.0],
            2372..3243 => vec![60.0; 5],
            _ => vec![60.0; 4],
        };
        let mut t = i as f64 * 100_000.0;
        for k in 0..=gaps.len() {
            if k > 0 {
                t += gaps[k - 1];
            }
            let id = out.len() as u64;
            out.push(sample(id, p, c, id, t));
        }
    }
    out
}
