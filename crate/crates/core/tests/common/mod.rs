//! Checks shared by the focused integration tests and the acceptance run.
//! Each returns an [`Outcome`] instead of panicking so the acceptance
//! target can report every criterion.
#![allow(dead_code)]

pub mod fixtures;
pub mod oracles;

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dfml_core::datamodel::{build_reduced, build_wst, estimate_phi, load_manifest, save_manifest};
use dfml_core::diffcore::gradcheck::{check_gradients, random_tensor, relative_error};
use dfml_core::diffcore::{BnState, Graph, Mode, Tensor, Var};
use dfml_core::evaluator::{evaluate, evaluate_scores, Item, RANK_CUTOFFS};
use dfml_core::losses::{
    self, cross_camera_loss, js, js_rows_log, kl, kl_rows_log, total_loss, Ablation, BatchData, ExtractorPass,
    Objective, Threshold,
};
use dfml_core::network::{DfmlModel, ModelConfig, Session};
use dfml_core::sampler::{BatchSampler, BatchShape};
use dfml_core::synthgen::{generate, SynthConfig};
use dfml_core::trainer::{train, train_to_dir, TrainConfig};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    /// Panics with the detail when the check failed.
    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> dfml_core::Result<Var>>;

/// Contracts an arbitrary-shape output to a scalar with fixed random weights
/// so every output element's gradient is exercised.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> dfml_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

/// Keeps values away from 0 so kinks and floors sit outside the
/// finite-difference stencil.
fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

fn positive(t: Tensor) -> Tensor {
    t.map(|v| v.abs() + 0.3)
}

fn distribution_rows(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let r: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|v| v / s).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Named gradient cases covering every differentiable operation and loss.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |s: &[usize]| random_tensor(&mut rng, s);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {
            cases.push(($name, $inputs, Box::new($f)))
        };
    }
    case!("matmul", vec![r(&[3, 4]), r(&[4, 2])], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 1)
    });
    case!("add", vec![r(&[2, 3]), r(&[2, 3])], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 2)
    });
    case!("add_row", vec![r(&[3, 4]), r(&[4])], |g, v| {
        let y = g.add_row(v[0], v[1])?;
        weighted_sum(g, y, 3)
    });
    case!("sub", vec![r(&[2, 3]), r(&[2, 3])], |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, 4)
    });
    case!("mul", vec![r(&[2, 3]), r(&[2, 3])], |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 5)
    });
    case!("scale", vec![r(&[5])], |g, v| {
        let y = g.scale(v[0], -1.7);
        weighted_sum(g, y, 6)
    });
    case!("mean_rows", vec![r(&[4, 3])], |g, v| {
        let y = g.mean_rows(v[0])?;
        weighted_sum(g, y, 7)
    });
    case!("sum", vec![r(&[3, 3])], |g, v| {
        let y = g.sum(v[0]);
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    });
    case!("row_sum", vec![r(&[4, 3])], |g, v| {
        let y = g.row_sum(v[0]);
        weighted_sum(g, y, 8)
    });
    case!("sq_norm", vec![r(&[2, 4])], |g, v| Ok(g.sq_norm(v[0])));
    case!("log", vec![positive(r(&[2, 3]))], |g, v| {
        let y = g.log(v[0])?;
        weighted_sum(g, y, 9)
    });
    case!("exp", vec![r(&[2, 3])], |g, v| {
        let y = g.exp(v[0]);
        weighted_sum(g, y, 10)
    });
    case!("relu", vec![away_from_zero(r(&[3, 4]))], |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, 11)
    });
    case!("clamp_min", vec![away_from_zero(r(&[3, 4]))], |g, v| {
        let y = g.clamp_min(v[0], 0.0);
        weighted_sum(g, y, 12)
    });
    case!("concat", vec![r(&[2, 3]), r(&[1, 3])], |g, v| {
        let y = g.concat(&[v[0], v[1], v[0]])?;
        weighted_sum(g, y, 13)
    });
    case!("select_rows", vec![r(&[4, 2])], |g, v| {
        let y = g.select_rows(v[0], &[3, 0, 3, 1])?;
        weighted_sum(g, y, 14)
    });
    case!("slice_rows", vec![r(&[5, 2])], |g, v| {
        let y = g.slice_rows(v[0], 1, 4)?;
        weighted_sum(g, y, 15)
    });
    case!("pick", vec![r(&[3, 4])], |g, v| {
        let y = g.pick(v[0], &[2, 0, 3])?;
        weighted_sum(g, y, 16)
    });
    case!("softmax", vec![r(&[3, 5])], |g, v| {
        let y = g.softmax(v[0])?;
        weighted_sum(g, y, 17)
    });
    case!("log_softmax", vec![r(&[3, 5])], |g, v| {
        let y = g.log_softmax(v[0])?;
        weighted_sum(g, y, 18)
    });
    case!("batchnorm_train", vec![r(&[6, 3]), r(&[3]), r(&[3])], |g, v| {
        let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y, 19)
    });
    case!("batchnorm_eval", vec![r(&[4, 3]), r(&[3]), r(&[3])], |g, v| {
        let mut st = BnState::new(3);
        st.running_mean = vec![0.3, -0.2, 0.1];
        st.running_var = vec![1.5, 0.7, 2.0];
        let y = g.batchnorm(v[0], v[1], v[2], &mut st, Mode::Eval)?;
        weighted_sum(g, y, 20)
    });
    // distribution inputs are parametrised by logits so perturbed inputs
    // stay on the simplex
    case!("ce_loss", vec![r(&[1, 4])], |g, v| {
        let p = g.softmax(v[0])?;
        losses::ce_loss(g, p, 2)
    });
    case!("kl", vec![r(&[1, 4]), r(&[1, 4])], |g, v| {
        let (p, q) = (g.softmax(v[0])?, g.softmax(v[1])?);
        kl(g, p, q)
    });
    case!("js", vec![r(&[1, 4]), r(&[1, 4])], |g, v| {
        let (p, q) = (g.softmax(v[0])?, g.softmax(v[1])?);
        js(g, p, q)
    });
    case!("kl_rows_log", vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
        let (a, b) = (g.log_softmax(v[0])?, g.log_softmax(v[1])?);
        let y = kl_rows_log(g, a, b)?;
        weighted_sum(g, y, 21)
    });
    case!("js_rows_log", vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
        let (a, b) = (g.log_softmax(v[0])?, g.log_softmax(v[1])?);
        let y = js_rows_log(g, a, b)?;
        weighted_sum(g, y, 22)
    });
    case!("ce_rows", vec![r(&[3, 4])], |g, v| {
        let lp = g.log_softmax(v[0])?;
        let y = losses::ce_rows(g, lp, &[1, 3, 0])?;
        weighted_sum(g, y, 23)
    });
    case!("cross_camera_loss", vec![r(&[3, 4]), r(&[2, 4]), r(&[4, 4])], |g, v| cross_camera_loss(g, v));
    cases
}

/// Toy model under 500 parameters and a structured batch drawn from a
/// synthetic corpus.
pub fn toy_setup() -> (DfmlModel, BatchData) {
    let synth = SynthConfig {
        num_persons: 3,
        num_test_persons: 0,
        num_cameras: 2,
        images_per_camera: 4,
        input_dim: 4,
        identity_dim: 0,
        visit: dfml_core::synthgen::uniform_visits(2, 1.0),
        seed: 5,
        ..SynthConfig::default()
    };
    let corpus = generate(&synth).unwrap();
    let ds = build_wst(&corpus.train).unwrap();
    let shape = BatchShape {
        views_per_batch: 2,
        pairs_per_view: 3,
    };
    let mut sampler = BatchSampler::new(&ds, shape, 8).unwrap();
    let mb = sampler.next_batch(&ds).unwrap();
    let cfg = ModelConfig {
        input_dim: 4,
        hidden: vec![6],
        feature_dim: 5,
        branch_hidden: Some(4),
        num_extractors: 2,
        backbone_bn: true,
        branch_relu: true,
    };
    let model = DfmlModel::new(cfg, ds.class_counts(), 13).unwrap();
    (model, BatchData::from_batch(&ds, &mb).unwrap())
}

fn objective_value(model: &DfmlModel, batch: &BatchData, obj: &Objective) -> f64 {
    let mut s = Session::new(model, Mode::Train);
    let (_, r) = total_loss(&mut s, batch, obj).unwrap();
    r.total
}

pub struct ObjectiveCheck {
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub max_grad: f64,
    pub checked: usize,
    pub params: usize,
}

/// Finite-difference check of the full objective over every parameter.
pub fn objective_gradient_check(obj: &Objective) -> ObjectiveCheck {
    let (model, batch) = toy_setup();
    let mut s = Session::new(&model, Mode::Train);
    let (loss, _) = total_loss(&mut s, &batch, obj).unwrap();
    s.graph.backward(loss).unwrap();
    let grads = s.param_grads();
    drop(s);
    let h = 1e-5;
    let mut work = model.clone();
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut max_grad = 0.0f64;
    let mut checked = 0;
    for (pi, g) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let orig = model.params()[pi].data()[e];
            work.params_mut()[pi].data_mut()[e] = orig + h;
            let plus = objective_value(&work, &batch, obj);
            work.params_mut()[pi].data_mut()[e] = orig - h;
            let minus = objective_value(&work, &batch, obj);
            work.params_mut()[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = g.data()[e];
            assert!(a.is_finite() && numeric.is_finite(), "non-finite gradient");
            worst = worst.max(relative_error(a, numeric));
            worst_abs = worst_abs.max((a - numeric).abs());
            max_grad = max_grad.max(a.abs());
            checked += 1;
        }
    }
    ObjectiveCheck { worst_rel: worst, worst_abs, max_grad, checked, params: model.num_parameters() }
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let cases = op_cases();
    let n_ops = cases.len();
    for (name, inputs, build) in cases {
        match check_gradients(&inputs, build) {
            Ok(rep) => {
                worst = worst.max(rep.max_rel_error);
                if rep.max_rel_error > GRAD_TOL {
                    failures.push(format!("{name}: {:.2e}", rep.max_rel_error));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let (_, probe) = toy_setup();
    let phi = estimate_phi_for_toy(&probe);
    let objectives = [
        Objective::new(Ablation::Full),
        Objective {
            threshold: Some(Threshold { phi, eta: 0.5 }),
            ..Objective::new(Ablation::Full)
        },
    ];
    let mut params = 0;
    let (mut worst_abs, mut max_grad) = (0.0f64, 0.0f64);
    for obj in &objectives {
        let c = objective_gradient_check(obj);
        params = c.params;
        worst_abs = worst_abs.max(c.worst_abs);
        max_grad = max_grad.max(c.max_grad);
        let w = c.worst_rel;
        worst = worst.max(w);
        if w > GRAD_TOL {
            failures.push(format!("objective (thresholded: {}): {w:.2e}", obj.threshold.is_some()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && params <= 500 && max_grad > 0.0 && secs < 60.0;
    Outcome::new(
        pass,
        format!(
            "{n_ops} ops + full objective on {params} params, worst rel err {worst:.2e} \
             (objective: worst abs diff {worst_abs:.1e}, max |grad| {max_grad:.2}), {secs:.1}s{}",
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

/// A fixed asymmetric co-occurrence matrix sized to the toy corpus.
fn estimate_phi_for_toy(batch: &BatchData) -> dfml_core::datamodel::CoOccurrenceMatrix {
    let c = batch.cameras.iter().max().unwrap() + 1;
    let rows = (0..c)
        .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.3 + 0.1 * j as f64 }).collect())
        .collect();
    dfml_core::datamodel::CoOccurrenceMatrix::new(rows).unwrap()
}

// -------------------------------------------------------------- divergences

fn direct_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

pub fn divergence_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut violations = Vec::new();
    let (mut max_self, mut max_sym, mut max_decomp, mut min_kl) = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY);
    for i in 0..1000 {
        let m = rng.random_range(2..12);
        let p = distribution_rows(&mut rng, 1, m);
        let q = distribution_rows(&mut rng, 1, m);
        let mut g = Graph::new();
        let (pv, qv) = (g.constant(p.clone()), g.constant(q.clone()));
        let kpq = kl(&mut g, pv, qv).unwrap();
        let kqp = kl(&mut g, qv, pv).unwrap();
        let kpp = kl(&mut g, pv, pv).unwrap();
        let jpq = js(&mut g, pv, qv).unwrap();
        let jqp = js(&mut g, qv, pv).unwrap();
        let v = |x: Var| g.value(x).item();
        let (kpq, kqp, kpp, jpq, jqp) = (v(kpq), v(kqp), v(kpp), v(jpq), v(jqp));
        min_kl = min_kl.min(kpq);
        max_self = max_self.max(kpp.abs());
        max_sym = max_sym.max((jpq - jqp).abs());
        max_decomp = max_decomp.max((jpq - 0.5 * (kpq + kqp)).abs());
        // the graph value must agree with an independent direct sum
        let direct = direct_kl(p.data(), q.data());
        if kpq < 0.0 || (kpq - direct).abs() > 1e-12 {
            violations.push(format!("pair {i}: kl {kpq} vs direct {direct}"));
        }
    }
    let pass = violations.is_empty() && max_self <= 1e-12 && max_sym <= 1e-12 && max_decomp <= 1e-12;
    Outcome::new(
        pass,
        format!(
            "1000 pairs: min kl {min_kl:.3e}, |kl(p,p)| {max_self:.1e}, js asym {max_sym:.1e}, js-decomp {max_decomp:.1e}{}",
            violations.first().map(|v| format!("; {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------- loss identities

/// Per-camera classification on an extractor, recomputed directly from
/// eval-free forward values: mean over samples of `−log P(y | own branch)`.
fn direct_baseline(model: &DfmlModel, batch: &BatchData, lambda: f64) -> f64 {
    let mut s = Session::new(model, Mode::Train);
    let mut pass = ExtractorPass::new(&mut s, 0, batch).unwrap();
    let feats = s.graph.value(pass.features).clone();
    let mut pl = 0.0;
    for (i, (&y, &c)) in batch.labels.iter().zip(&batch.cameras).enumerate() {
        let lp = pass.log_probs(&mut s, c).unwrap();
        pl -= s.graph.value(lp).get(i, y);
    }
    pl /= batch.len() as f64;
    let cams: Vec<&Vec<usize>> = batch.per_camera.values().collect();
    let d = feats.cols();
    let means: Vec<Vec<f64>> = cams
        .iter()
        .map(|pos| {
            let mut m = vec![0.0; d];
            for &p in pos.iter() {
                m.iter_mut().zip(feats.row(p)).for_each(|(a, b)| *a += b / pos.len() as f64);
            }
            m
        })
        .collect();
    let mut cl = 0.0;
    for u in 0..means.len() {
        for v in 0..means.len() {
            cl += means[u].iter().zip(&means[v]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    cl /= (means.len() * (means.len() - 1)) as f64;
    pl + lambda * cl
}

pub fn loss_identities() -> Outcome {
    let (model, batch) = toy_setup();
    let c = model.num_cameras();
    let mut notes = Vec::new();
    let mut pass = true;

    // eta = 0 keeps every branch, so the gated term equals the plain one
    let phi_rows: Vec<Vec<f64>> = (0..c)
        .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.25 }).collect())
        .collect();
    let phi = dfml_core::datamodel::CoOccurrenceMatrix::new(phi_rows).unwrap();
    let mut worst_eta = 0.0f64;
    for theta in 0..model.num_extractors() {
        let mut s = Session::new(&model, Mode::Train);
        let mut p = ExtractorPass::new(&mut s, theta, &batch).unwrap();
        let plain = losses::mlfc_loss(&mut s, &mut p, &batch).unwrap();
        let gated = losses::mlfc_thresholded_loss(&mut s, &mut p, &batch, &phi, 0.0).unwrap();
        worst_eta = worst_eta.max((s.graph.value(plain).item() - s.graph.value(gated).item()).abs());
    }
    pass &= worst_eta <= 1e-12;
    notes.push(format!("eta=0 gap {worst_eta:.1e}"));

    // gamma = 0 on one extractor reduces to per-camera + cross-camera
    let mut gap_base = 0.0f64;
    for mode in [Ablation::Mlfc, Ablation::Baseline] {
        let obj = Objective {
            gamma: 0.0,
            ..Objective::new(mode)
        };
        let mut s = Session::new(&model, Mode::Train);
        let (_, r) = total_loss(&mut s, &batch, &obj).unwrap();
        gap_base = gap_base.max((r.total - direct_baseline(&model, &batch, obj.lambda)).abs());
    }
    pass &= gap_base <= 1e-12;
    notes.push(format!("gamma=0 gap {gap_base:.1e}"));

    // logged totals against their own logged terms
    let corpus = generate(&SynthConfig {
        num_test_persons: 0,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = build_wst(&corpus.train).unwrap();
    let phi = estimate_phi(&corpus.train).unwrap();
    let mut worst_log = 0.0f64;
    let mut records = 0;
    for (mode, eta) in [(Ablation::Full, None), (Ablation::Full, Some(0.5)), (Ablation::Baseline, None), (Ablation::Mlfe, None)] {
        let cfg = TrainConfig {
            mode,
            eta,
            steps: 50,
            seed: 3,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let art = train_to_dir(&ds, &cfg, eta.map(|_| &phi), "x", dir.path()).unwrap();
        let log = dfml_core::trainer::parse_log(&std::fs::read_to_string(art.log).unwrap()).unwrap();
        let (l, g) = (cfg.lambda, if mode.uses_mlfc() { cfg.gamma } else { 0.0 });
        let l = if mode.uses_cross_camera() { l } else { 0.0 };
        for rec in &log {
            worst_log = worst_log.max((rec.total - (rec.pl + l * rec.cl + g * rec.jl)).abs());
            records += 1;
        }
    }
    pass &= worst_log <= 1e-9;
    notes.push(format!("{records} logged totals, worst gap {worst_log:.1e}"));
    Outcome::new(pass, notes.join(", "))
}

// ------------------------------------------------------------ metric oracle

pub fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut instances = 0;
    let mut errors = Vec::new();
    while instances < 150 {
        let ng = rng.random_range(2..=10);
        let nq = rng.random_range(1..=4);
        let persons = rng.random_range(1..=4u64);
        let gallery: Vec<Item> = (0..ng)
            .map(|g| Item {
                person: rng.random_range(0..persons),
                camera: rng.random_range(0..3),
                sample_id: g as u64 * 7 % 11,
            })
            .collect();
        let query: Vec<Item> = (0..nq)
            .map(|q| Item {
                person: rng.random_range(0..persons),
                camera: rng.random_range(0..3),
                sample_id: 100 + q as u64,
            })
            .collect();
        // coarse scores make ties common
        let scores: Vec<Vec<f64>> = (0..nq)
            .map(|_| (0..ng).map(|_| rng.random_range(0..4) as f64 / 4.0).collect())
            .collect();
        let expected = oracles::brute_force_metrics(&scores, &query, &gallery);
        let got = evaluate_scores(&scores, &query, &gallery);
        match (expected, got) {
            (None, Err(_)) => {}
            (Some(e), Ok(g)) => {
                let mut d = (e.map - g.map).abs();
                for (k, v) in &g.rank_curve {
                    d = d.max((e.rank_at(*k) - v).abs());
                }
                if e.skipped != g.skipped || e.scored != g.num_queries {
                    errors.push(format!("instance {instances}: counts differ"));
                }
                worst = worst.max(d);
            }
            (e, g) => errors.push(format!("instance {instances}: oracle {:?} vs evaluator {:?}", e.is_some(), g.is_ok())),
        }
        instances += 1;
    }
    // analytic fixture, matches at ranks 1 and 3 of 5
    let q = [Item {
        person: 1,
        camera: 0,
        sample_id: 50,
    }];
    let g: Vec<Item> = [1, 2, 1, 3, 4]
        .iter()
        .enumerate()
        .map(|(i, &p)| Item {
            person: p,
            camera: 1,
            sample_id: i as u64,
        })
        .collect();
    let r = evaluate_scores(&[vec![0.9, 0.8, 0.7, 0.6, 0.5]], &q, &g).unwrap();
    let analytic = r.map == (1.0 + 2.0 / 3.0) / 2.0 && format!("{:.4}", r.map) == "0.8333";
    let pass = errors.is_empty() && worst <= 1e-12 && analytic && RANK_CUTOFFS == [1, 5, 10, 20];
    Outcome::new(
        pass,
        format!(
            "{instances} instances, worst gap {worst:.1e}, analytic AP {:.4}{}",
            r.map,
            errors.first().map(|e| format!("; {e}")).unwrap_or_default()
        ),
    )
}

// ------------------------------------------------------------- WST fixtures

pub fn wst_fixtures() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let dir = tempfile::tempdir().unwrap();

    // hand-tallied small fixture
    let small = load_manifest(&fixtures::fixture_path("small_manifest.csv")).unwrap();
    let tally = fixtures::read_tally(&fixtures::fixture_path("small_tally.txt"));
    let ds = build_wst(&small).unwrap();
    let mut ok = ds.stats().per_camera == tally.wsts_per_camera && ds.num_wsts() == tally.total_wsts;
    for (w, kept) in &tally.retained {
        ok &= build_reduced(&small, *w).unwrap().retained_images == *kept;
    }
    pass &= ok;
    notes.push(format!("small fixture {}", if ok { "ok" } else { "MISMATCH" }));

    // tracklet-level fixture with the published tracklet and WST totals
    let tracklets = fixtures::tracklet_corpus();
    let path = dir.path().join("tracklets.csv");
    save_manifest(&path, &tracklets).unwrap();
    let back = load_manifest(&path).unwrap();
    let raw: std::collections::BTreeSet<(usize, u64)> = back.iter().map(|s| (s.camera_id, s.raw_tracklet_id)).collect();
    let w = build_wst(&back).unwrap().num_wsts();
    pass &= raw.len() == 8298 && w == 1955;
    notes.push(format!("{} tracklets -> {w} WSTs", raw.len()));

    // image-level fixture with the published image and WST totals, and the
    // reduced-dataset retention at 3 and 5 minutes
    let images = fixtures::image_corpus();
    let path = dir.path().join("images.csv");
    save_manifest(&path, &images).unwrap();
    let back = load_manifest(&path).unwrap();
    let w = build_wst(&back).unwrap().num_wsts();
    pass &= back.len() == 12936 && w == 3262;
    notes.push(format!("{} images -> {w} WSTs", back.len()));
    for (win, kept, pct) in [(3.0, 10065, "77.8"), (5.0, 10564, "81.66")] {
        let r = build_reduced(&back, win).unwrap();
        let shown = if win == 3.0 {
            format!("{:.1}", r.retention_percent())
        } else {
            format!("{:.2}", r.retention_percent())
        };
        pass &= r.retained_images == kept && shown == pct;
        notes.push(format!("{win}min -> {} ({shown}%)", r.retained_images));
    }

    // monotone in window size over a sweep of ten windows
    let corpus = generate(&SynthConfig {
        fragmentation: 3.0,
        max_fragment_gap_seconds: 900.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut last = 0;
    let mut monotone = true;
    let mut sizes = Vec::new();
    for k in 1..=10 {
        let win = 0.5 * k as f64 + if k > 5 { 2.0 } else { 0.0 };
        let n = build_reduced(&corpus.train, win).unwrap().retained_images
            + build_reduced(&images, win).unwrap().retained_images;
        monotone &= n >= last;
        last = n;
        sizes.push(n);
    }
    pass &= monotone && sizes.first() < sizes.last();
    notes.push(format!("10-window sweep monotone: {monotone}"));
    Outcome::new(pass, notes.join(", "))
}

// ------------------------------------------------------------ trained runs

/// Steps per acceptance training run.
pub const ACCEPTANCE_STEPS: usize = 3000;
pub const ACCEPTANCE_SEEDS: [u64; 3] = [0, 1, 2];

/// Rank-1 (percent) of one seeded run on a synthetic corpus.
pub fn run_rank1(synth: &SynthConfig, mode: Ablation, eta: Option<f64>, seed: u64, steps: usize) -> (f64, f64) {
    let start = Instant::now();
    let corpus = generate(&SynthConfig {
        seed,
        ..synth.clone()
    })
    .unwrap();
    let ds = build_wst(&corpus.train).unwrap();
    let phi = estimate_phi(&corpus.train).unwrap();
    let cfg = TrainConfig {
        mode,
        eta,
        seed,
        steps,
        ..TrainConfig::default()
    };
    let out = train(&ds, &cfg, eta.map(|_| &phi)).unwrap();
    let r = evaluate(&out.model, &corpus.query, &corpus.gallery).unwrap();
    (100.0 * r.rank1(), start.elapsed().as_secs_f64())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn ablation_ordering() -> Outcome {
    let synth = SynthConfig::default();
    let mut means = Vec::new();
    let mut slowest = 0.0f64;
    for mode in [Ablation::Full, Ablation::Mlfc, Ablation::Baseline] {
        let runs: Vec<(f64, f64)> = ACCEPTANCE_SEEDS
            .iter()
            .map(|&s| run_rank1(&synth, mode, None, s, ACCEPTANCE_STEPS))
            .collect();
        slowest = runs.iter().map(|r| r.1).fold(slowest, f64::max);
        means.push(mean(&runs.iter().map(|r| r.0).collect::<Vec<_>>()));
    }
    let (full, mlfc, base) = (means[0], means[1], means[2]);
    let pass = full >= mlfc && mlfc >= base && full - base >= 5.0 && slowest <= 600.0;
    Outcome::new(
        pass,
        format!("Rank-1 full {full:.2}, mlfc {mlfc:.2}, baseline {base:.2}; slowest run {slowest:.1}s"),
    )
}

/// Visit pattern of the sweep: cameras 0-2 share most persons, camera 3
/// rarely shares any.
pub fn eta_sweep_corpus() -> SynthConfig {
    let hi = 0.9;
    let lo = 0.1;
    SynthConfig {
        visit: vec![
            vec![1.0, hi, hi, lo],
            vec![hi, 1.0, hi, lo],
            vec![hi, hi, 1.0, lo],
            vec![lo, lo, lo, 1.0],
        ],
        ..SynthConfig::default()
    }
}

pub fn eta_sweep() -> Outcome {
    let synth = eta_sweep_corpus();
    let means: Vec<f64> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&eta| {
            let r: Vec<f64> = ACCEPTANCE_SEEDS
                .iter()
                .map(|&s| run_rank1(&synth, Ablation::Full, Some(eta), s, ACCEPTANCE_STEPS).0)
                .collect();
            mean(&r)
        })
        .collect();
    let (e0, e5, e1) = (means[0], means[1], means[2]);
    let pass = (e0 - e5).abs() <= 2.0 && e0 - e1 >= 3.0;
    Outcome::new(pass, format!("Rank-1 eta=0 {e0:.2}, eta=0.5 {e5:.2}, eta=1 {e1:.2}"))
}

// -------------------------------------------------------------- determinism

pub fn determinism() -> Outcome {
    let corpus = generate(&SynthConfig {
        num_test_persons: 0,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = build_wst(&corpus.train).unwrap();
    let cfg = TrainConfig {
        steps: 120,
        checkpoint_every: 50,
        seed: 11,
        ..TrainConfig::default()
    };
    let fp = dfml_core::datamodel::fingerprint(&corpus.train);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_to_dir(&ds, &cfg, None, &fp, a.path()).unwrap();
    train_to_dir(&ds, &cfg, None, &fp, b.path()).unwrap();
    let mut compared = 0;
    let mut diffs = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "timing.csv")
        .collect();
    names.sort();
    for n in &names {
        let (x, y) = (std::fs::read(a.path().join(n)).unwrap(), std::fs::read(b.path().join(n)).unwrap());
        compared += 1;
        if x != y {
            diffs.push(n.clone());
        }
    }
    let has_ckpt = names.iter().any(|n| n.ends_with(".dfml")) && names.iter().any(|n| n == "train_log.csv");
    Outcome::new(
        diffs.is_empty() && has_ckpt,
        format!("{compared} artifacts compared byte for byte, differing: {diffs:?}"),
    )
}

// ------------------------------------------------------------------ sampler

pub fn sampler_contract() -> Outcome {
    let corpus = generate(&SynthConfig {
        num_test_persons: 0,
        visit: dfml_core::synthgen::uniform_visits(4, 0.6),
        fragmentation: 1.5,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = build_wst(&corpus.train).unwrap();
    let shape = BatchShape::default();
    let mut sampler = BatchSampler::new(&ds, shape, 31).unwrap();
    let mut violations = 0;
    let mut first = None;
    for i in 0..10_000 {
        let b = sampler.next_batch(&ds).unwrap();
        if let Err(e) = b.check(&ds, &shape) {
            violations += 1;
            first.get_or_insert(format!("batch {i}: {e}"));
        }
    }
    Outcome::new(
        violations == 0,
        format!("10000 batches, {violations} violations{}", first.map(|f| format!("; {f}")).unwrap_or_default()),
    )
}
