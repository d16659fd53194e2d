//! Feature extractor, cosine classification head and prototype imprinting.
//!
//! The extractor is a small multilayer perceptron over raw input vectors. With
//! no hidden layers it is the identity map. Classifier weights are stored one
//! column per class (`d x C`); on the tape they are bound as rows (`C x d`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Error, Result};
use crate::rng::{keyed_rng, Purpose};
use crate::tape::{Gradients, Tape, Var};
use crate::types::{ClassId, ClassifierWeights, PredictionMatrix};

/// Norms are clamped below at this value before dividing.
pub const COSINE_EPS: f64 = 1e-12;
pub const DEFAULT_GAMMA: f64 = 10.0;
/// Lower bound kept on the learnable scale after every update.
pub const MIN_GAMMA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Tanh,
    LeakyRelu { slope: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub input_dim: usize,
    /// Hidden widths. Empty means the extractor is the identity.
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl ExtractorSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self { input_dim, hidden, output_dim, activation: Activation::Tanh }
    }

    pub fn identity(dim: usize) -> Self {
        Self { input_dim: dim, hidden: Vec::new(), output_dim: dim, activation: Activation::Tanh }
    }

    pub fn is_identity(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        if self.is_identity() {
            self.input_dim
        } else {
            self.output_dim
        }
    }

    fn widths(&self) -> Vec<usize> {
        if self.is_identity() {
            return Vec::new();
        }
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn n_layers(&self) -> usize {
        self.widths().len().saturating_sub(1)
    }
}

fn weight_key(layer: usize) -> String {
    format!("layer{layer}.weight")
}

fn bias_key(layer: usize) -> String {
    format!("layer{layer}.bias")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ExtractorSpec,
    /// `layerK.weight` is `in x out`, `layerK.bias` is `1 x out`.
    pub theta: BTreeMap<String, Array2<f64>>,
    pub gamma: f64,
}

impl ModelState {
    /// Glorot-normal weights and zero biases, drawn from the `(seed, 0, Init)` stream.
    pub fn init(spec: ExtractorSpec, gamma: f64, seed: u64) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(config("gamma must be positive"));
        }
        if spec.is_identity() && spec.output_dim != spec.input_dim {
            return Err(config("an identity extractor needs output_dim == input_dim"));
        }
        let mut rng = keyed_rng(seed, 0, Purpose::Init);
        let widths = spec.widths();
        let mut theta = BTreeMap::new();
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(&mut rng));
            theta.insert(weight_key(l), w);
            theta.insert(bias_key(l), Array2::zeros((1, fan_out)));
        }
        Ok(Self { spec, theta, gamma })
    }

    pub fn d(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Validation(format!("gamma = {} is not positive", self.gamma)));
        }
        for (k, v) in &self.theta {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("parameter {k} is not finite")));
            }
        }
        Ok(())
    }

    pub fn n_parameters(&self) -> usize {
        self.theta.values().map(|v| v.len()).sum::<usize>() + 1
    }
}

/// Maps raw inputs `(n, input_dim)` to features `(n, d)`.
pub fn extract_features(state: &ModelState, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    if inputs.ncols() != state.spec.input_dim {
        return Err(shape(format!(
            "inputs have {} columns, extractor expects {}",
            inputs.ncols(),
            state.spec.input_dim
        )));
    }
    let mut h = inputs.clone();
    let n_layers = state.spec.n_layers();
    for l in 0..n_layers {
        h = h.dot(&state.theta[&weight_key(l)]) + &state.theta[&bias_key(l)];
        if l + 1 < n_layers {
            h = match state.spec.activation {
                Activation::Tanh => h.mapv(f64::tanh),
                Activation::LeakyRelu { slope } => h.mapv(|x| if x > 0.0 { x } else { slope * x }),
            };
        }
    }
    Ok(h)
}

/// Rows scaled to unit norm, with the norm floored at [`COSINE_EPS`].
pub fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt().max(COSINE_EPS);
        r /= n;
    }
    out
}

/// `gamma * cos(f_i, w_k)` for features `(n, d)` and weights `(d, C)`.
pub fn cosine_logits(features: &Array2<f64>, weights: &Array2<f64>, gamma: f64) -> Array2<f64> {
    let f = normalize_rows(features);
    let w = normalize_rows(&weights.t().to_owned());
    f.dot(&w.t()) * gamma
}

/// Softmax over `gamma * cos(f, w_k)` against every column of `[W_b, W_n]`.
pub fn cosine_classify(
    features: &Array2<f64>,
    weights: &ClassifierWeights,
    gamma: f64,
) -> Result<PredictionMatrix> {
    if features.ncols() != weights.d() {
        return Err(shape(format!(
            "features have d={}, weights have d={}",
            features.ncols(),
            weights.d()
        )));
    }
    if gamma <= 0.0 {
        return Err(config("gamma must be positive"));
    }
    Ok(PredictionMatrix::from_logits(&cosine_logits(features, &weights.joint(), gamma)))
}

/// Class means of episode-labeled support features, one column per novel
/// class in label order `n_base+1..=n_base+n_way`.
pub fn compute_prototypes(
    features: &Array2<f64>,
    labels: &[ClassId],
    n_base: usize,
    n_way: usize,
) -> Result<Array2<f64>> {
    if features.nrows() != labels.len() {
        return Err(shape("one label per support feature row is required"));
    }
    let d = features.ncols();
    let mut sums = Array2::<f64>::zeros((d, n_way));
    let mut counts = vec![0usize; n_way];
    for (row, &label) in features.rows().into_iter().zip(labels) {
        let j = (label as usize)
            .checked_sub(n_base + 1)
            .filter(|&j| j < n_way)
            .ok_or_else(|| Error::Validation(format!("label {label} is not an episode novel label")))?;
        let mut col = sums.column_mut(j);
        col += &row;
        counts[j] += 1;
    }
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyClass((n_base + 1 + j) as ClassId));
        }
        sums.column_mut(j).mapv_inplace(|v| v / c as f64);
    }
    Ok(sums)
}

pub fn build_joint_weights(base: Array2<f64>, novel: Array2<f64>) -> Result<ClassifierWeights> {
    ClassifierWeights::new(base, novel)
}

/// `[W_b, prototypes]` with the prototypes imprinted from the episode support.
pub fn imprint_weights(
    state: &ModelState,
    base: &Array2<f64>,
    episode: &crate::types::Episode,
) -> Result<ClassifierWeights> {
    let f = extract_features(state, &episode.support_inputs())?;
    let labels: Vec<ClassId> = episode.support.iter().map(|e| e.label).collect();
    let protos = compute_prototypes(&f, &labels, episode.n_base, episode.n_way())?;
    ClassifierWeights::new(base.clone(), protos)
}

/// Model parameters bound to a tape.
pub struct BoundModel {
    pub theta: BTreeMap<String, Var>,
    pub gamma: Var,
    /// `N_b x d`
    pub base_rows: Var,
    spec: ExtractorSpec,
}

/// Gradients in the same layout as [`ModelState`] and the `d x N_b` base weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub theta: BTreeMap<String, Array2<f64>>,
    pub gamma: f64,
    pub base: Array2<f64>,
}

impl ParamGrads {
    pub fn zeros_like(state: &ModelState, base: &Array2<f64>) -> Self {
        Self {
            theta: state.theta.iter().map(|(k, v)| (k.clone(), Array2::zeros(v.dim()))).collect(),
            gamma: 0.0,
            base: Array2::zeros(base.dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.is_finite()
            && self.base.iter().all(|v| v.is_finite())
            && self.theta.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.theta
            .values()
            .flat_map(|t| t.iter())
            .chain(self.base.iter())
            .chain(std::iter::once(&self.gamma))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, state: &ModelState, base: &Array2<f64>) -> Self {
        let theta = state.theta.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        let gamma = tape.scalar_leaf(state.gamma);
        let base_rows = tape.leaf(base.t().to_owned());
        Self { theta, gamma, base_rows, spec: state.spec.clone() }
    }

    pub fn features(&self, tape: &mut Tape, inputs: Var) -> Var {
        let mut h = inputs;
        let n_layers = self.spec.n_layers();
        for l in 0..n_layers {
            let w = self.theta[&weight_key(l)];
            let b = self.theta[&bias_key(l)];
            let z = tape.matmul(h, w);
            h = tape.add_row(z, b);
            if l + 1 < n_layers {
                h = match self.spec.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::LeakyRelu { slope } => tape.leaky_relu(h, slope),
                };
            }
        }
        h
    }

    pub fn grads(&self, g: &Gradients) -> ParamGrads {
        ParamGrads {
            theta: self.theta.iter().map(|(k, v)| (k.clone(), g.wrt(*v))).collect(),
            gamma: g.wrt(self.gamma)[[0, 0]],
            base: g.wrt(self.base_rows).t().to_owned(),
        }
    }
}

/// `gamma * cos` logits on the tape; `weight_rows` is `C x d`.
pub fn cosine_logits_on(tape: &mut Tape, features: Var, weight_rows: Var, gamma: Var) -> Var {
    let f = tape.normalize_rows(features, COSINE_EPS);
    let w = tape.normalize_rows(weight_rows, COSINE_EPS);
    let wt = tape.transpose(w);
    let cos = tape.matmul(f, wt);
    tape.scale_by(cos, gamma)
}

/// Prototype rows `N x d` as `A * F_s` with `A` the class-averaging matrix.
pub fn prototypes_on(
    tape: &mut Tape,
    support_features: Var,
    labels: &[ClassId],
    n_base: usize,
    n_way: usize,
) -> Result<Var> {
    let avg = averaging_matrix(labels, n_base, n_way)?;
    let a = tape.leaf(avg);
    Ok(tape.matmul(a, support_features))
}

/// `N x n_s` matrix whose row `j` averages the support rows of class `j`.
pub(crate) fn averaging_matrix(labels: &[ClassId], n_base: usize, n_way: usize) -> Result<Array2<f64>> {
    let mut m = membership_matrix(labels, n_base, n_way)?;
    for (j, mut row) in m.rows_mut().into_iter().enumerate() {
        let c = row.sum();
        if c == 0.0 {
            return Err(Error::EmptyClass((n_base + 1 + j) as ClassId));
        }
        row /= c;
    }
    Ok(m)
}

/// `N x n_s` 0/1 matrix of class membership.
pub(crate) fn membership_matrix(labels: &[ClassId], n_base: usize, n_way: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((n_way, labels.len()));
    for (i, &label) in labels.iter().enumerate() {
        let j = (label as usize)
            .checked_sub(n_base + 1)
            .filter(|&j| j < n_way)
            .ok_or_else(|| Error::Validation(format!("label {label} is not an episode novel label")))?;
        m[[j, i]] = 1.0;
    }
    Ok(m)
}

/// Plain gradient descent: `theta -= eta_theta * g`, `gamma -= eta_theta * g`,
/// `W_b -= eta_base * g`.
pub fn sgd_step(
    state: &mut ModelState,
    base: &mut Array2<f64>,
    grads: &ParamGrads,
    eta_theta: f64,
    eta_base: f64,
) {
    for (k, v) in state.theta.iter_mut() {
        v.scaled_add(-eta_theta, &grads.theta[k]);
    }
    state.gamma = (state.gamma - eta_theta * grads.gamma).max(MIN_GAMMA);
    base.scaled_add(-eta_base, &grads.base);
}

/// Velocity buffers for the optional momentum variant of [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Momentum {
    pub beta: f64,
    velocity: ParamGrads,
}

impl Momentum {
    pub fn new(beta: f64, state: &ModelState, base: &Array2<f64>) -> Self {
        Self { beta, velocity: ParamGrads::zeros_like(state, base) }
    }

    pub fn step(
        &mut self,
        state: &mut ModelState,
        base: &mut Array2<f64>,
        grads: &ParamGrads,
        eta_theta: f64,
        eta_base: f64,
    ) {
        let v = &mut self.velocity;
        for (k, vel) in v.theta.iter_mut() {
            vel.mapv_inplace(|x| x * self.beta);
            *vel += &grads.theta[k];
        }
        v.gamma = self.beta * v.gamma + grads.gamma;
        v.base.mapv_inplace(|x| x * self.beta);
        v.base += &grads.base;
        let snapshot = v.clone();
        sgd_step(state, base, &snapshot, eta_theta, eta_base);
    }
}

/// Versioned checkpoint container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    #[serde(default)]
    pub stream_seed: u64,
    pub d: usize,
    pub state: ModelState,
    /// `d x N_b`
    pub base_weights: Array2<f64>,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "incfsl-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn new(state: ModelState, base_weights: Array2<f64>, config_hash: impl Into<String>) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            config_hash: config_hash.into(),
            stream_seed: 0,
            d: state.d(),
            state,
            base_weights,
        }
    }

    pub fn with_seed(mut self, stream_seed: u64) -> Self {
        self.stream_seed = stream_seed;
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.format != Self::FORMAT || ck.version != Self::VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        if ck.base_weights.nrows() != ck.d || ck.state.d() != ck.d {
            return Err(Error::Format("checkpoint dimensions disagree".into()));
        }
        ck.state.validate()?;
        Ok(ck)
    }

    /// Loads and rejects checkpoints written under a different configuration.
    pub fn load_matching(path: &Path, config_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config_hash != config_hash {
            return Err(Error::HashMismatch {
                expected: config_hash.to_string(),
                found: ck.config_hash,
            });
        }
        Ok(ck)
    }
}

/// Column means of `x` (`n x d`) as a `1 x d` row.
pub fn mean_row(x: &Array2<f64>) -> Array2<f64> {
    x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
}
