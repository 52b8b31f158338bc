//! Objective terms and their composition into the ablation grid.
//!
//! All terms consume row-wise log-probabilities from max-shifted
//! log-sum-exp. Divergences floor probabilities at [`PROB_FLOOR`] before any
//! logarithm. The mutual-learning terms back-propagate into both members of
//! each image pair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{CoOccurrenceMatrix, WstDataset};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::network::Session;
use crate::sampler::MiniBatch;

pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `Σp = 1` when a divergence input is checked.
const DIST_TOL: f64 = 1e-9;

fn log_floor() -> f64 {
    PROB_FLOOR.ln()
}

fn check_distribution(t: &Tensor, what: &str) -> Result<()> {
    if t.is_empty() {
        return Err(dim_err!("{what}: empty distribution"));
    }
    for r in 0..t.rows() {
        let row = t.row(r);
        if row.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(contract_err!("{what}: row {r} has a negative or non-finite entry"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > DIST_TOL {
            return Err(contract_err!("{what}: row {r} sums to {s}"));
        }
    }
    Ok(())
}

/// `−ln P_y` for one predicted distribution.
pub fn ce_loss(g: &mut Graph, probs: Var, label: usize) -> Result<Var> {
    let t = g.value(probs);
    check_distribution(t, "ce_loss")?;
    if t.rows() != 1 {
        return Err(dim_err!("ce_loss takes one row, got {:?}", t.shape()));
    }
    if label >= t.cols() {
        return Err(contract_err!("label {label} out of range for {} classes", t.cols()));
    }
    let flat = g.select_rows(probs, &[0])?;
    let p = g.pick(flat, &[label])?;
    let p = g.clamp_min(p, PROB_FLOOR);
    let lp = g.log(p)?;
    let s = g.sum(lp);
    Ok(g.scale(s, -1.0))
}

/// Per-row cross entropy `−log_probs[r, labels[r]]`, as a length-`n` vector.
pub fn ce_rows(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = g.pick(log_probs, labels)?;
    Ok(g.scale(picked, -1.0))
}

/// Row-wise `Σ_l p_l (log p_l − log q_l)` from log-probabilities, floored.
pub fn kl_rows_log(g: &mut Graph, log_p: Var, log_q: Var) -> Result<Var> {
    let floor = log_floor();
    let p = g.exp(log_p);
    let lp = g.clamp_min(log_p, floor);
    let lq = g.clamp_min(log_q, floor);
    let d = g.sub(lp, lq)?;
    let w = g.mul(p, d)?;
    Ok(g.row_sum(w))
}

/// Row-wise symmetrised KL, `½ kl(p, q) + ½ kl(q, p)`.
pub fn js_rows_log(g: &mut Graph, log_p: Var, log_q: Var) -> Result<Var> {
    let a = kl_rows_log(g, log_p, log_q)?;
    let b = kl_rows_log(g, log_q, log_p)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

fn floored_log(g: &mut Graph, p: Var) -> Result<Var> {
    let c = g.clamp_min(p, PROB_FLOOR);
    g.log(c)
}

/// `Σ_l p_l log(p_l / q_l)` over distributions, summed over rows.
pub fn kl(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    check_pair(g, p, q, "kl")?;
    let (lp, lq) = (floored_log(g, p)?, floored_log(g, q)?);
    let w = g.sub(lp, lq)?;
    let w = g.mul(p, w)?;
    Ok(g.sum(w))
}

/// Symmetrised KL, `½ kl(p, q) + ½ kl(q, p)`.
pub fn js(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let a = kl(g, p, q)?;
    let b = kl(g, q, p)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

fn check_pair(g: &Graph, p: Var, q: Var, what: &str) -> Result<()> {
    if g.value(p).shape() != g.value(q).shape() {
        return Err(dim_err!(
            "{what}: shapes {:?} and {:?} differ",
            g.value(p).shape(),
            g.value(q).shape()
        ));
    }
    check_distribution(g.value(p), what)?;
    check_distribution(g.value(q), what)
}

/// `Σ_{u≠v} ‖μ_u − μ_v‖² / (C_b (C_b − 1))` over per-camera feature blocks,
/// counting every ordered pair.
pub fn cross_camera_loss(g: &mut Graph, features_by_camera: &[Var]) -> Result<Var> {
    let cb = features_by_camera.len();
    if cb < 2 {
        return Err(contract_err!("cross-camera loss needs at least 2 cameras, got {cb}"));
    }
    let means = features_by_camera
        .iter()
        .map(|&f| g.mean_rows(f))
        .collect::<Result<Vec<_>>>()?;
    let mut total: Option<Var> = None;
    for u in 0..cb {
        for v in 0..cb {
            if u == v {
                continue;
            }
            let d = g.sub(means[u], means[v])?;
            let sq = g.sq_norm(d);
            total = Some(match total {
                Some(t) => g.add(t, sq)?,
                None => sq,
            });
        }
    }
    let total = total.expect("at least one ordered pair");
    Ok(g.scale(total, 1.0 / (cb * (cb - 1)) as f64))
}

/// Batch inputs resolved against a dataset. Positions in `per_camera` and
/// `rho` index rows of `x`.
#[derive(Debug, Clone)]
pub struct BatchData {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    pub per_camera: BTreeMap<usize, Vec<usize>>,
    pub rho: Vec<(usize, usize)>,
}

impl BatchData {
    pub fn from_batch(dataset: &WstDataset, batch: &MiniBatch) -> Result<Self> {
        Ok(Self {
            x: dataset.feature_rows(&batch.chi)?,
            labels: batch.chi.iter().map(|&i| dataset.label(i)).collect(),
            cameras: batch.chi.iter().map(|&i| dataset.camera(i)).collect(),
            per_camera: batch.per_camera.clone(),
            rho: batch.rho.clone(),
        })
    }

    /// Builds a batch directly; `per_camera` is derived from `cameras`.
    pub fn new(x: Tensor, labels: Vec<usize>, cameras: Vec<usize>, rho: Vec<(usize, usize)>) -> Result<Self> {
        let n = x.rows();
        if labels.len() != n || cameras.len() != n {
            return Err(dim_err!("batch of {n} rows with {} labels, {} cameras", labels.len(), cameras.len()));
        }
        for &(i, j) in &rho {
            if i >= n || j >= n || i == j {
                return Err(contract_err!("bad pair ({i}, {j})"));
            }
            if cameras[i] != cameras[j] || labels[i] != labels[j] {
                return Err(contract_err!("pair ({i}, {j}) crosses WSTs"));
            }
        }
        let mut per_camera: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (p, &c) in cameras.iter().enumerate() {
            per_camera.entry(c).or_default().push(p);
        }
        Ok(Self {
            x,
            labels,
            cameras,
            per_camera,
            rho,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Features of one extractor over a batch with lazily computed branch
/// log-probabilities; each branch runs once over the whole batch.
pub struct ExtractorPass {
    pub theta: usize,
    pub features: Var,
    log_probs: Vec<Option<Var>>,
}

impl ExtractorPass {
    pub fn new(s: &mut Session<'_>, theta: usize, batch: &BatchData) -> Result<Self> {
        let x = s.input(batch.x.clone());
        let features = s.extract(theta, x)?;
        Ok(Self {
            theta,
            features,
            log_probs: vec![None; s.model().num_cameras()],
        })
    }

    pub fn log_probs(&mut self, s: &mut Session<'_>, k: usize) -> Result<Var> {
        if let Some(Some(v)) = self.log_probs.get(k) {
            return Ok(*v);
        }
        let v = s.predict_log(self.features, k)?;
        self.log_probs[k] = Some(v);
        Ok(v)
    }
}

/// `L_PL^Θ`: mean cross entropy with every sample routed to its own
/// camera's branch.
pub fn per_camera_loss(s: &mut Session<'_>, pass: &mut ExtractorPass, batch: &BatchData) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&cam, pos) in &batch.per_camera {
        let lp = pass.log_probs(s, cam)?;
        let rows = s.graph.select_rows(lp, pos)?;
        let labels: Vec<usize> = pos.iter().map(|&p| batch.labels[p]).collect();
        let ce = ce_rows(&mut s.graph, rows, &labels)?;
        let part = s.graph.sum(ce);
        total = Some(match total {
            Some(t) => s.graph.add(t, part)?,
            None => part,
        });
    }
    let total = total.ok_or_else(|| contract_err!("empty batch"))?;
    Ok(s.graph.scale(total, 1.0 / batch.len() as f64))
}

/// `L_CL^Θ` on the extractor's batch features.
pub fn extractor_cross_camera_loss(s: &mut Session<'_>, pass: &ExtractorPass, batch: &BatchData) -> Result<Var> {
    let blocks = batch
        .per_camera
        .values()
        .map(|pos| s.graph.select_rows(pass.features, pos))
        .collect::<Result<Vec<_>>>()?;
    cross_camera_loss(&mut s.graph, &blocks)
}

/// Per-branch pair weights: `weights[k][p]` multiplies the divergence of
/// pair `p` inside branch `k`. `None` marks a branch with no weight at all.
fn mlfc_weights(batch: &BatchData, num_cameras: usize, threshold: Option<(&CoOccurrenceMatrix, f64)>) -> Result<Vec<Option<Vec<f64>>>> {
    if batch.rho.is_empty() {
        return Err(contract_err!("mutual learning on classifiers needs a non-empty pair set"));
    }
    let np = batch.rho.len();
    let Some((phi, eta)) = threshold else {
        let w = 1.0 / (num_cameras * np) as f64;
        return Ok(vec![Some(vec![w; np]); num_cameras]);
    };
    if phi.num_cameras() != num_cameras {
        return Err(contract_err!(
            "phi covers {} cameras, model has {num_cameras}",
            phi.num_cameras()
        ));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(contract_err!("eta {eta} outside [0, 1]"));
    }
    let active = |k: usize, c: usize| phi.get(k, c) >= eta;
    let counts: Vec<usize> = batch
        .rho
        .iter()
        .map(|&(i, _)| (0..num_cameras).filter(|&k| active(k, batch.cameras[i])).count())
        .collect();
    let contributing = counts.iter().filter(|&&n| n > 0).count();
    let mut weights = vec![None; num_cameras];
    if contributing == 0 {
        return Ok(weights);
    }
    for (k, slot) in weights.iter_mut().enumerate() {
        let w: Vec<f64> = batch
            .rho
            .iter()
            .zip(&counts)
            .map(|(&(i, _), &n)| {
                if n > 0 && active(k, batch.cameras[i]) {
                    1.0 / (contributing * n) as f64
                } else {
                    0.0
                }
            })
            .collect();
        if w.iter().any(|&v| v > 0.0) {
            *slot = Some(w);
        }
    }
    Ok(weights)
}

fn weighted_mlfc(
    s: &mut Session<'_>,
    pass: &mut ExtractorPass,
    batch: &BatchData,
    threshold: Option<(&CoOccurrenceMatrix, f64)>,
) -> Result<Var> {
    let c = s.model().num_cameras();
    let weights = mlfc_weights(batch, c, threshold)?;
    let left: Vec<usize> = batch.rho.iter().map(|p| p.0).collect();
    let right: Vec<usize> = batch.rho.iter().map(|p| p.1).collect();
    let mut total: Option<Var> = None;
    for (k, w) in weights.into_iter().enumerate() {
        let Some(w) = w else { continue };
        let lp = pass.log_probs(s, k)?;
        let li = s.graph.select_rows(lp, &left)?;
        let lj = s.graph.select_rows(lp, &right)?;
        // D_KL(x_i, x_j; k) puts P(x_j; k) in the reference role.
        let js = js_rows_log(&mut s.graph, lj, li)?;
        let wv = s.graph.constant(Tensor::vector(w));
        let weighted = s.graph.mul(js, wv)?;
        let part = s.graph.sum(weighted);
        total = Some(match total {
            Some(t) => s.graph.add(t, part)?,
            None => part,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => s.graph.constant(Tensor::scalar(0.0)),
    })
}

/// `L_JL^Θ`: mean over pairs and all `C` branches of the pair divergence.
pub fn mlfc_loss(s: &mut Session<'_>, pass: &mut ExtractorPass, batch: &BatchData) -> Result<Var> {
    weighted_mlfc(s, pass, batch, None)
}

/// `L_JLM^Θ`: branches `k` with `φ(k, c_i) < η` are masked out and each
/// pair is normalised by its own active-branch count.
pub fn mlfc_thresholded_loss(
    s: &mut Session<'_>,
    pass: &mut ExtractorPass,
    batch: &BatchData,
    phi: &CoOccurrenceMatrix,
    eta: f64,
) -> Result<Var> {
    weighted_mlfc(s, pass, batch, Some((phi, eta)))
}

/// Rows of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// One extractor, `L_PL + λ L_CL`.
    Baseline,
    /// One extractor, `L_PL` only.
    BaselineNocl,
    /// All extractors, `L_PL + λ L_CL`.
    Mlfe,
    /// One extractor, `L_PL + λ L_CL + γ L_JL`.
    Mlfc,
    /// All extractors, every term.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::BaselineNocl,
        Ablation::Mlfe,
        Ablation::Mlfc,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::BaselineNocl => "baseline-nocl",
            Ablation::Mlfe => "mlfe",
            Ablation::Mlfc => "mlfc",
            Ablation::Full => "full",
        }
    }

    pub fn uses_all_extractors(self) -> bool {
        matches!(self, Ablation::Mlfe | Ablation::Full)
    }

    pub fn uses_cross_camera(self) -> bool {
        !matches!(self, Ablation::BaselineNocl)
    }

    pub fn uses_mlfc(self) -> bool {
        matches!(self, Ablation::Mlfc | Ablation::Full)
    }
}

impl std::str::FromStr for Ablation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| contract_err!("unknown mode {s:?}"))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub phi: CoOccurrenceMatrix,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub mode: Ablation,
    pub lambda: f64,
    pub gamma: f64,
    /// Replaces `L_JL` with the co-occurrence-gated `L_JLM`.
    pub threshold: Option<Threshold>,
}

impl Objective {
    pub fn new(mode: Ablation) -> Self {
        Self {
            mode,
            lambda: 0.2,
            gamma: 0.4,
            threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(contract_err!("loss weights must be non-negative"));
        }
        if let Some(t) = &self.threshold {
            if !self.mode.uses_mlfc() {
                return Err(contract_err!("a phi threshold needs a mode with MLFC, got {}", self.mode));
            }
            if !(0.0..=1.0).contains(&t.eta) {
                return Err(contract_err!("eta {} outside [0, 1]", t.eta));
            }
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.mode.uses_cross_camera() {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn effective_gamma(&self) -> f64 {
        if self.mode.uses_mlfc() {
            self.gamma
        } else {
            0.0
        }
    }
}

/// Values of every term for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pl: f64,
    pub cl: f64,
    /// `L_JL`, or `L_JLM` when `thresholded`.
    pub jl: f64,
    pub total: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub thresholded: bool,
}

impl LossReport {
    /// `|total − (L_PL + λ L_CL + γ L_JL)|`.
    pub fn identity_gap(&self) -> f64 {
        (self.total - (self.pl + self.lambda * self.cl + self.gamma * self.jl)).abs()
    }
}

fn mean_of(g: &mut Graph, vs: &[Var]) -> Result<Var> {
    let mut t = vs[0];
    for &v in &vs[1..] {
        t = g.add(t, v)?;
    }
    Ok(g.scale(t, 1.0 / vs.len() as f64))
}

/// Builds `L = L_PL + λ L_CL + γ L_JL` on the session's graph. Terms a mode
/// disables are reported as zero with zero weight.
pub fn total_loss(s: &mut Session<'_>, batch: &BatchData, objective: &Objective) -> Result<(Var, LossReport)> {
    objective.validate()?;
    let mode = objective.mode;
    let thetas: Vec<usize> = if mode.uses_all_extractors() {
        (0..s.model().num_extractors()).collect()
    } else {
        vec![0]
    };
    let (lambda, gamma) = (objective.effective_lambda(), objective.effective_gamma());
    let (mut pls, mut cls, mut jls) = (Vec::new(), Vec::new(), Vec::new());
    for &theta in &thetas {
        let mut pass = ExtractorPass::new(s, theta, batch)?;
        pls.push(per_camera_loss(s, &mut pass, batch)?);
        if lambda > 0.0 {
            cls.push(extractor_cross_camera_loss(s, &pass, batch)?);
        }
        if gamma > 0.0 {
            jls.push(match &objective.threshold {
                Some(t) => mlfc_thresholded_loss(s, &mut pass, batch, &t.phi, t.eta)?,
                None => mlfc_loss(s, &mut pass, batch)?,
            });
        }
    }
    let g = &mut s.graph;
    let pl = mean_of(g, &pls)?;
    let mut total = pl;
    let mut report = LossReport {
        pl: g.value(pl).item(),
        cl: 0.0,
        jl: 0.0,
        total: 0.0,
        lambda,
        gamma,
        thresholded: objective.threshold.is_some() && gamma > 0.0,
    };
    if !cls.is_empty() {
        let cl = mean_of(g, &cls)?;
        report.cl = g.value(cl).item();
        let w = g.scale(cl, lambda);
        total = g.add(total, w)?;
    }
    if !jls.is_empty() {
        let jl = mean_of(g, &jls)?;
        report.jl = g.value(jl).item();
        let w = g.scale(jl, gamma);
        total = g.add(total, w)?;
    }
    report.total = g.value(total).item();
    Ok((total, report))
}
