//! Feature extractors and the shared bank of per-camera classifier branches.
//!
//! Every extractor feeds the same branches: branch `k` is
//! `fc1 (D→H) → BN → ReLU → fc2 (H→M_k)` and is shared by all extractors.
//! The extractor is a multilayer perceptron standing in for a CNN backbone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BatchMoments, BnState, Graph, Mode, Tensor, TensorArchive, Var};
use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the extractor, input side first.
    pub hidden: Vec<usize>,
    /// Feature dimension `D`.
    pub feature_dim: usize,
    /// Branch hidden width `H`; `None` means `D / 2`.
    pub branch_hidden: Option<usize>,
    pub num_extractors: usize,
    /// BN after each hidden extractor layer.
    pub backbone_bn: bool,
    /// ReLU between the branch BN and its second FC layer.
    pub branch_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![128],
            feature_dim: 64,
            branch_hidden: None,
            num_extractors: 2,
            backbone_bn: false,
            branch_relu: true,
        }
    }
}

impl ModelConfig {
    pub fn branch_width(&self) -> usize {
        self.branch_hidden.unwrap_or((self.feature_dim / 2).max(1))
    }
}

type ParamId = usize;

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    state: usize,
}

#[derive(Debug, Clone)]
struct Backbone {
    layers: Vec<Linear>,
    bns: Vec<BnLayer>,
}

#[derive(Debug, Clone)]
struct ClassifierBranch {
    fc1: Linear,
    bn: BnLayer,
    fc2: Linear,
}

/// Extractors plus the shared branch bank.
#[derive(Debug, Clone)]
pub struct DfmlModel {
    config: ModelConfig,
    class_counts: Vec<usize>,
    param_names: Vec<String>,
    params: Vec<Tensor>,
    bn_names: Vec<String>,
    bn_states: Vec<BnState>,
    extractors: Vec<Backbone>,
    branches: Vec<ClassifierBranch>,
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform weights on `±sqrt(3 / fan_in)`, i.e. variance `1 / fan_in`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (3.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("fan-in shape")
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    bn_names: Vec<String>,
    bn_states: Vec<BnState>,
}

impl Builder {
    fn param(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn linear(&mut self, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = fan_in_uniform(rng, fan_in, fan_out);
        Linear {
            weight: self.param(format!("{prefix}.weight"), w),
            bias: self.param(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn bn(&mut self, prefix: &str, dim: usize) -> BnLayer {
        let gamma = self.param(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = self.param(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
        self.bn_names.push(prefix.to_string());
        self.bn_states.push(BnState::new(dim));
        BnLayer {
            gamma,
            beta,
            state: self.bn_states.len() - 1,
        }
    }
}

impl DfmlModel {
    /// Builds and initializes a model. Extractor `e` draws from sub-seed
    /// stream `e + 1` and the branch bank from stream 0, so extractors never
    /// coincide.
    pub fn new(config: ModelConfig, class_counts: &[usize], seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.feature_dim == 0 || config.num_extractors == 0 {
            return Err(contract_err!("model dimensions and extractor count must be positive"));
        }
        if config.hidden.contains(&0) {
            return Err(contract_err!("hidden widths must be positive"));
        }
        if class_counts.is_empty() {
            return Err(contract_err!("need at least one camera"));
        }
        if let Some(k) = class_counts.iter().position(|&m| m == 0) {
            return Err(contract_err!("camera {k} has no WSTs"));
        }
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            bn_names: Vec::new(),
            bn_states: Vec::new(),
        };
        let mut extractors = Vec::with_capacity(config.num_extractors);
        for e in 0..config.num_extractors {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, e as u64 + 1));
            let mut widths = vec![config.input_dim];
            widths.extend(&config.hidden);
            widths.push(config.feature_dim);
            let mut layers = Vec::new();
            let mut bns = Vec::new();
            for l in 0..widths.len() - 1 {
                let prefix = format!("extractor.{e}.layer.{l}");
                layers.push(b.linear(&mut rng, &prefix, widths[l], widths[l + 1]));
                if config.backbone_bn && l + 1 < widths.len() - 1 {
                    bns.push(b.bn(&format!("{prefix}.bn"), widths[l + 1]));
                }
            }
            extractors.push(Backbone { layers, bns });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let h = config.branch_width();
        let branches = class_counts
            .iter()
            .enumerate()
            .map(|(k, &m)| ClassifierBranch {
                fc1: b.linear(&mut rng, &format!("branch.{k}.fc1"), config.feature_dim, h),
                bn: b.bn(&format!("branch.{k}.bn"), h),
                fc2: b.linear(&mut rng, &format!("branch.{k}.fc2"), h, m),
            })
            .collect();
        Ok(Self {
            config,
            class_counts: class_counts.to_vec(),
            param_names: b.names,
            params: b.params,
            bn_names: b.bn_names,
            bn_states: b.bn_states,
            extractors,
            branches,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_cameras(&self) -> usize {
        self.branches.len()
    }

    pub fn num_extractors(&self) -> usize {
        self.extractors.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn bn_states(&self) -> &[BnState] {
        &self.bn_states
    }

    /// Folds train-mode batch moments into the running statistics.
    pub fn apply_moments(&mut self, moments: &[(usize, BatchMoments)]) {
        for (id, m) in moments {
            self.bn_states[*id].update(m);
        }
    }

    /// Exchanges the parameters of extractors `a` and `b`.
    pub fn swap_extractors(&mut self, a: usize, b: usize) {
        let (ea, eb) = (self.extractors[a].clone(), self.extractors[b].clone());
        for (la, lb) in ea.layers.iter().zip(&eb.layers) {
            self.params.swap(la.weight, lb.weight);
            self.params.swap(la.bias, lb.bias);
        }
        for (ba, bb) in ea.bns.iter().zip(&eb.bns) {
            self.params.swap(ba.gamma, bb.gamma);
            self.params.swap(ba.beta, bb.beta);
            self.bn_states.swap(ba.state, bb.state);
        }
    }

    /// Eval-mode features `[n × D]` from extractor `theta`.
    pub fn extract_features(&self, theta: usize, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(self, Mode::Eval);
        let xv = s.input(x.clone());
        let f = s.extract(theta, xv)?;
        Ok(s.graph.value(f).clone())
    }

    /// Eval-mode softmax predictions `[n × M_k]` of branch `k`.
    pub fn predict_probs(&self, features: &Tensor, k: usize) -> Result<Tensor> {
        let mut s = Session::new(self, Mode::Eval);
        let fv = s.input(features.clone());
        let p = s.predict(fv, k)?;
        Ok(s.graph.value(p).clone())
    }

    /// Parameters and running statistics keyed by path.
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (n, t) in self.param_names.iter().zip(&self.params) {
            a.insert(n.clone(), t.clone());
        }
        for (n, s) in self.bn_names.iter().zip(&self.bn_states) {
            a.insert(format!("{n}.running_mean"), Tensor::vector(s.running_mean.clone()));
            a.insert(format!("{n}.running_var"), Tensor::vector(s.running_var.clone()));
        }
        a
    }

    /// Rebuilds the architecture and loads every entry from `archive`.
    pub fn from_archive(config: ModelConfig, class_counts: &[usize], archive: &TensorArchive) -> Result<Self> {
        let mut m = Self::new(config, class_counts, 0)?;
        for (n, t) in m.param_names.iter().zip(m.params.iter_mut()) {
            let src = archive
                .get(n)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {n}")))?;
            if src.shape() != t.shape() {
                return Err(dim_err!("checkpoint {n} has shape {:?}, model {:?}", src.shape(), t.shape()));
            }
            *t = src.clone();
        }
        for (n, s) in m.bn_names.iter().zip(m.bn_states.iter_mut()) {
            for (suffix, dst) in [("running_mean", &mut s.running_mean), ("running_var", &mut s.running_var)] {
                let key = format!("{n}.{suffix}");
                let src = archive
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
                if src.len() != dst.len() {
                    return Err(dim_err!("checkpoint {key} has {} entries", src.len()));
                }
                dst.copy_from_slice(src.data());
            }
        }
        let expected = m.params.len() + 2 * m.bn_states.len();
        if archive.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint has {} entries, model expects {expected}",
                archive.len()
            )));
        }
        Ok(m)
    }
}

/// One forward/backward pass over a model.
///
/// In train mode every parameter is a differentiable leaf and batch
/// normalization uses batch statistics; the observed moments are collected
/// for [`DfmlModel::apply_moments`]. In eval mode parameters are constants
/// and the model is never touched.
pub struct Session<'m> {
    model: &'m DfmlModel,
    pub graph: Graph,
    params: Vec<Var>,
    mode: Mode,
    moments: Vec<(usize, BatchMoments)>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m DfmlModel, mode: Mode) -> Self {
        let mut graph = Graph::new();
        let params = model
            .params
            .iter()
            .map(|t| match mode {
                Mode::Train => graph.leaf(t.clone()),
                Mode::Eval => graph.constant(t.clone()),
            })
            .collect();
        Self {
            model,
            graph,
            params,
            mode,
            moments: Vec::new(),
        }
    }

    pub fn model(&self) -> &DfmlModel {
        self.model
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.graph.constant(x)
    }

    fn linear(&mut self, l: &Linear, x: Var) -> Result<Var> {
        let y = self.graph.matmul(x, self.params[l.weight])?;
        self.graph.add_row(y, self.params[l.bias])
    }

    fn bn(&mut self, b: &BnLayer, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.params[b.gamma], self.params[b.beta]);
        match self.mode {
            Mode::Train => {
                let eps = self.model.bn_states[b.state].eps;
                let (y, m) = self.graph.batchnorm_train(x, gamma, beta, eps)?;
                self.moments.push((b.state, m));
                Ok(y)
            }
            Mode::Eval => self.graph.batchnorm_eval(x, gamma, beta, &self.model.bn_states[b.state]),
        }
    }

    /// Features `[n × D]` of extractor `theta` for inputs `x [n × input_dim]`.
    pub fn extract(&mut self, theta: usize, x: Var) -> Result<Var> {
        let model = self.model;
        let bb = model
            .extractors
            .get(theta)
            .ok_or_else(|| contract_err!("no extractor {theta}"))?;
        let xt = self.graph.value(x);
        if xt.rank() != 2 || xt.cols() != model.config.input_dim {
            return Err(dim_err!(
                "extractor expects [n × {}], got {:?}",
                model.config.input_dim,
                xt.shape()
            ));
        }
        let mut h = x;
        let last = bb.layers.len() - 1;
        for (l, layer) in bb.layers.iter().enumerate() {
            h = self.linear(layer, h)?;
            if l < last {
                if let Some(b) = bb.bns.get(l) {
                    h = self.bn(b, h)?;
                }
                h = self.graph.relu(h);
            }
        }
        Ok(h)
    }

    /// Pre-softmax scores `[n × M_k]` of branch `k`.
    pub fn branch_logits(&mut self, features: Var, k: usize) -> Result<Var> {
        let model = self.model;
        let br = model
            .branches
            .get(k)
            .ok_or_else(|| contract_err!("no classifier branch for camera {k}"))?;
        let ft = self.graph.value(features);
        if ft.rank() != 2 || ft.cols() != model.config.feature_dim {
            return Err(dim_err!(
                "branch expects [n × {}], got {:?}",
                model.config.feature_dim,
                ft.shape()
            ));
        }
        let h = self.linear(&br.fc1, features)?;
        let mut h = self.bn(&br.bn, h)?;
        if model.config.branch_relu {
            h = self.graph.relu(h);
        }
        self.linear(&br.fc2, h)
    }

    /// Row-wise softmax predictions of branch `k`.
    pub fn predict(&mut self, features: Var, k: usize) -> Result<Var> {
        let z = self.branch_logits(features, k)?;
        self.graph.softmax(z)
    }

    /// Row-wise log-probabilities of branch `k`.
    pub fn predict_log(&mut self, features: Var, k: usize) -> Result<Var> {
        let z = self.branch_logits(features, k)?;
        self.graph.log_softmax(z)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.model
            .param_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.params[i])
    }

    /// Gradients aligned with [`DfmlModel::params`]; unreached parameters
    /// get zeros.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&self.model.params)
            .map(|(&v, t)| self.graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn take_moments(&mut self) -> Vec<(usize, BatchMoments)> {
        std::mem::take(&mut self.moments)
    }
}
