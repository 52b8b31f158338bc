//! ADAM training loop, flat-text configuration and checkpoints.
//!
//! A run is a pure function of `(dataset, config)`. The step log therefore
//! holds only loss values; wall-clock timings go to a separate record so the
//! log itself can be compared bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datamodel::{CoOccurrenceMatrix, WstDataset};
use crate::diffcore::{Mode, Tensor, TensorArchive};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::losses::{total_loss, Ablation, BatchData, LossReport, Objective, Threshold};
use crate::network::{DfmlModel, ModelConfig, Session};
use crate::sampler::{BatchSampler, BatchShape};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Ablation,
    pub lambda: f64,
    pub gamma: f64,
    /// Co-occurrence threshold; requires a φ matrix at train time.
    pub eta: Option<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: BatchShape,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// `input_dim` is taken from the dataset; `num_extractors` applies only
    /// to modes that train several extractors.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Ablation::Full,
            lambda: 0.2,
            gamma: 0.4,
            eta: None,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: BatchShape::default(),
            steps: 2000,
            seed: 0,
            checkpoint_every: 500,
            model: ModelConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str, line: u64) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad value {v:?} for {key}"),
    })
}

fn parse_bool(key: &str, v: &str, line: u64) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse {
            line,
            message: format!("bad boolean {v:?} for {key}"),
        }),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(contract_err!("lambda and gamma must be non-negative"));
        }
        if let Some(eta) = self.eta {
            if !(0.0..=1.0).contains(&eta) {
                return Err(contract_err!("eta {eta} outside [0, 1]"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(contract_err!("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(contract_err!("ADAM betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(contract_err!("ADAM epsilon must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(contract_err!("checkpoint_every must be positive"));
        }
        if self.model.num_extractors == 0 {
            return Err(contract_err!("num_extractors must be positive"));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(key, value, 0)
    }

    fn set_at(&mut self, key: &str, v: &str, line: u64) -> Result<()> {
        match key {
            "mode" => self.mode = v.parse().map_err(|_| Error::Parse {
                line,
                message: format!("unknown mode {v:?}"),
            })?,
            "lambda" => self.lambda = parse_value(key, v, line)?,
            "gamma" => self.gamma = parse_value(key, v, line)?,
            "eta" => {
                self.eta = match v {
                    "none" | "" => None,
                    _ => Some(parse_value(key, v, line)?),
                }
            }
            "learning_rate" => self.learning_rate = parse_value(key, v, line)?,
            "beta1" => self.beta1 = parse_value(key, v, line)?,
            "beta2" => self.beta2 = parse_value(key, v, line)?,
            "adam_eps" => self.adam_eps = parse_value(key, v, line)?,
            "views_per_batch" => self.batch.views_per_batch = parse_value(key, v, line)?,
            "pairs_per_view" => self.batch.pairs_per_view = parse_value(key, v, line)?,
            "steps" => self.steps = parse_value(key, v, line)?,
            "seed" => self.seed = parse_value(key, v, line)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v, line)?,
            "hidden" => {
                self.model.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|w| parse_value(key, w.trim(), line))
                        .collect::<Result<_>>()?
                }
            }
            "feature_dim" => self.model.feature_dim = parse_value(key, v, line)?,
            "branch_hidden" => {
                self.model.branch_hidden = match v {
                    "auto" => None,
                    _ => Some(parse_value(key, v, line)?),
                }
            }
            "num_extractors" => self.model.num_extractors = parse_value(key, v, line)?,
            "backbone_bn" => self.model.backbone_bn = parse_bool(key, v, line)?,
            "branch_relu" => self.model.branch_relu = parse_bool(key, v, line)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
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

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Renders every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let hidden: Vec<String> = m.hidden.iter().map(|h| h.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("mode", self.mode.to_string());
        kv("lambda", self.lambda.to_string());
        kv("gamma", self.gamma.to_string());
        kv("eta", self.eta.map_or("none".into(), |e| e.to_string()));
        kv("learning_rate", self.learning_rate.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("views_per_batch", self.batch.views_per_batch.to_string());
        kv("pairs_per_view", self.batch.pairs_per_view.to_string());
        kv("steps", self.steps.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("hidden", hidden.join(","));
        kv("feature_dim", m.feature_dim.to_string());
        kv("branch_hidden", m.branch_hidden.map_or("auto".into(), |h| h.to_string()));
        kv("num_extractors", m.num_extractors.to_string());
        kv("backbone_bn", m.backbone_bn.to_string());
        kv("branch_relu", m.branch_relu.to_string());
        s
    }

    /// Architecture actually trained on `dataset`.
    pub fn model_config_for(&self, dataset: &WstDataset) -> ModelConfig {
        ModelConfig {
            input_dim: dataset.input_dim(),
            num_extractors: if self.mode.uses_all_extractors() {
                self.model.num_extractors
            } else {
                1
            },
            ..self.model.clone()
        }
    }

    pub fn objective(&self, phi: Option<&CoOccurrenceMatrix>) -> Result<Objective> {
        let threshold = match (self.eta, phi) {
            (Some(eta), Some(phi)) => Some(Threshold { phi: phi.clone(), eta }),
            (None, None) => None,
            (Some(_), None) => return Err(contract_err!("eta is set but no phi matrix was given")),
            (None, Some(_)) => return Err(contract_err!("a phi matrix was given without eta")),
        };
        let o = Objective {
            mode: self.mode,
            lambda: self.lambda,
            gamma: self.gamma,
            threshold,
        };
        o.validate()?;
        Ok(o)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// Bias-corrected ADAM update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(contract_err!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(contract_err!(
                "parameter {i}: shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One line of the step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub pl: f64,
    pub cl: f64,
    pub jl: f64,
    pub total: f64,
}

impl StepRecord {
    fn from_report(step: usize, r: &LossReport) -> Self {
        Self {
            step,
            pl: r.pl,
            cl: r.cl,
            jl: r.jl,
            total: r.total,
        }
    }
}

pub const LOG_HEADER: &str = "step,l_pl,l_cl,l_jl,total";

/// `f64` Display is the shortest round-trip form, so logged values parse
/// back exactly.
pub fn format_log(records: &[StepRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        writeln!(s, "{},{},{},{},{}", r.step, r.pl, r.cl, r.jl, r.total).expect("string write");
    }
    s
}

pub fn parse_log(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LOG_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing log header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line = (i + 1) as u64;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 5 fields, got {}", f.len()),
                });
            }
            Ok(StepRecord {
                step: parse_value("step", f[0], line)?,
                pl: parse_value("l_pl", f[1], line)?,
                cl: parse_value("l_cl", f[2], line)?,
                jl: parse_value("l_jl", f[3], line)?,
                total: parse_value("total", f[4], line)?,
            })
        })
        .collect()
}

/// Provenance stored next to every checkpoint and report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub mode: Ablation,
    pub step: usize,
    pub config: TrainConfig,
    /// Architecture as trained, including `input_dim`.
    pub model: ModelConfig,
    pub class_counts: Vec<usize>,
    pub phi: Option<CoOccurrenceMatrix>,
}

/// Writes `<stem>.dfml` (tensors) and `<stem>.json` (metadata).
pub fn save_checkpoint(stem: &Path, model: &DfmlModel, meta: &RunMetadata) -> Result<()> {
    model.to_archive().save(&stem.with_extension("dfml"))?;
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(stem.with_extension("json"), json + "\n")?;
    Ok(())
}

/// Loads a checkpoint given either file of the pair (or their stem).
pub fn load_checkpoint(path: &Path) -> Result<(DfmlModel, RunMetadata)> {
    let json = fs::read_to_string(path.with_extension("json"))?;
    let meta: RunMetadata = serde_json::from_str(&json).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let archive = TensorArchive::load(&path.with_extension("dfml"))?;
    let model = DfmlModel::from_archive(meta.model.clone(), &meta.class_counts, &archive)?;
    Ok((model, meta))
}

/// Stateful training run.
pub struct Trainer {
    config: TrainConfig,
    objective: Objective,
    model: DfmlModel,
    adam: AdamState,
    sampler: BatchSampler,
    step: usize,
}

impl Trainer {
    pub fn new(dataset: &WstDataset, config: TrainConfig, phi: Option<&CoOccurrenceMatrix>) -> Result<Self> {
        config.validate()?;
        let objective = config.objective(phi)?;
        if let Some(phi) = phi {
            if phi.num_cameras() != dataset.num_cameras() {
                return Err(dim_err!(
                    "phi is {0}x{0} but the dataset has {1} cameras",
                    phi.num_cameras(),
                    dataset.num_cameras()
                ));
            }
        }
        let model = DfmlModel::new(config.model_config_for(dataset), dataset.class_counts(), config.seed)?;
        // the sampler stream is decorrelated from parameter initialisation
        let sampler = BatchSampler::new(dataset, config.batch, crate::network::derive_seed(config.seed, u64::MAX))?;
        Ok(Self {
            adam: AdamState::new(model.params()),
            config,
            objective,
            model,
            sampler,
            step: 0,
        })
    }

    pub fn model(&self) -> &DfmlModel {
        &self.model
    }

    pub fn into_model(self) -> DfmlModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One `next_batch → total_loss → backward → adam_step` cycle.
    pub fn step(&mut self, dataset: &WstDataset) -> Result<(StepRecord, LossReport)> {
        let batch = self.sampler.next_batch(dataset)?;
        let data = BatchData::from_batch(dataset, &batch)?;
        let (grads, moments, report) = {
            let mut s = Session::new(&self.model, Mode::Train);
            let (loss, report) = total_loss(&mut s, &data, &self.objective)?;
            if !report.total.is_finite() {
                return Err(contract_err!("non-finite loss at step {}", self.step + 1));
            }
            s.graph.backward(loss)?;
            (s.param_grads(), s.take_moments(), report)
        };
        let cfg = self.config.adam();
        adam_step(self.model.params_mut(), &grads, &mut self.adam, &cfg)?;
        self.model.apply_moments(&moments);
        self.step += 1;
        Ok((StepRecord::from_report(self.step, &report), report))
    }

    pub fn metadata(&self, dataset_fingerprint: &str, phi: Option<&CoOccurrenceMatrix>) -> RunMetadata {
        RunMetadata {
            tool_version: TOOL_VERSION.to_string(),
            dataset_fingerprint: dataset_fingerprint.to_string(),
            seed: self.config.seed,
            mode: self.config.mode,
            step: self.step,
            config: self.config.clone(),
            model: self.model.config().clone(),
            class_counts: self.model.class_counts().to_vec(),
            phi: phi.cloned(),
        }
    }
}

/// Result of an in-memory run.
pub struct TrainOutcome {
    pub model: DfmlModel,
    pub log: Vec<StepRecord>,
}

/// Runs `config.steps` steps and returns the final model and its log.
pub fn train(dataset: &WstDataset, config: &TrainConfig, phi: Option<&CoOccurrenceMatrix>) -> Result<TrainOutcome> {
    let mut t = Trainer::new(dataset, config.clone(), phi)?;
    let mut log = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        log.push(t.step(dataset)?.0);
    }
    Ok(TrainOutcome {
        model: t.into_model(),
        log,
    })
}

/// Files written by [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub log: PathBuf,
    pub timing: PathBuf,
    pub config: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_stem(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("checkpoint-{step:06}"))
}

/// Trains and writes under `out_dir`: `train_log.csv`, `timing.csv`, the
/// resolved `train_config.txt`, `checkpoint-NNNNNN.{dfml,json}` every
/// `checkpoint_every` steps and `final.{dfml,json}`.
pub fn train_to_dir(
    dataset: &WstDataset,
    config: &TrainConfig,
    phi: Option<&CoOccurrenceMatrix>,
    dataset_fingerprint: &str,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    fs::create_dir_all(out_dir)?;
    let mut t = Trainer::new(dataset, config.clone(), phi)?;
    let mut log = Vec::with_capacity(config.steps);
    let mut timing = String::from("step,ms\n");
    let mut checkpoints = Vec::new();
    for _ in 0..config.steps {
        let start = Instant::now();
        let (rec, _) = t.step(dataset)?;
        writeln!(timing, "{},{:.3}", rec.step, start.elapsed().as_secs_f64() * 1e3).expect("string write");
        log.push(rec);
        if rec.step % config.checkpoint_every == 0 {
            let stem = checkpoint_stem(out_dir, rec.step);
            save_checkpoint(&stem, t.model(), &t.metadata(dataset_fingerprint, phi))?;
            checkpoints.push(stem.with_extension("dfml"));
        }
    }
    let final_stem = out_dir.join("final");
    save_checkpoint(&final_stem, t.model(), &t.metadata(dataset_fingerprint, phi))?;
    let artifacts = RunArtifacts {
        log: out_dir.join("train_log.csv"),
        timing: out_dir.join("timing.csv"),
        config: out_dir.join("train_config.txt"),
        checkpoints,
        final_checkpoint: final_stem.with_extension("dfml"),
    };
    fs::write(&artifacts.log, format_log(&log))?;
    fs::write(&artifacts.timing, timing)?;
    fs::write(&artifacts.config, config.to_text())?;
    Ok(artifacts)
}
