//! Test-time adaptation of the extractor and base weights to one episode.
//!
//! The objective is `w_cls * L_cls + w_ctr * L_ctr + w_dst * L_dst`:
//! cross-entropy of the support set against `[W_b, prototypes]`, a
//! normalized-temperature contrastive loss over two perturbed views of
//! unlabeled samples, and a distillation term that keeps the softened
//! base-class predictions on unlabeled samples close to those of a frozen
//! copy of the model taken before adaptation.

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Error, Result};
use crate::model::{
    cosine_logits, cosine_logits_on, extract_features, normalize_rows, prototypes_on, sgd_step,
    BoundModel, ModelState, COSINE_EPS,
};
use crate::rng::{keyed_rng, Purpose};
use crate::tape::{log_softmax_rows, Tape, Var};
use crate::training::LOG_EPS;
use crate::types::{stack_inputs, Episode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Standard deviation of additive Gaussian noise.
    pub sigma: f64,
    /// Probability that a coordinate is zeroed.
    pub mask_rate: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { sigma: 0.1, mask_rate: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub w_cls: f64,
    pub w_ctr: f64,
    pub w_dst: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Upper bound on the unlabeled batch; the effective size is `min(B, |U|)`.
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub augmentation: AugmentationSpec,
    /// Classify the support set against all classes (`true`) or novel only.
    pub cls_all_classes: bool,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_ctr: 0.5,
            w_dst: 1.0,
            tau1: 0.5,
            tau2: 4.0,
            batch_size: 64,
            steps: 30,
            lr: 1e-3,
            augmentation: AugmentationSpec::default(),
            cls_all_classes: true,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(config("temperatures must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config("batch size must be at least 1"));
        }
        if self.w_cls < 0.0 || self.w_ctr < 0.0 || self.w_dst < 0.0 {
            return Err(config("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.augmentation.mask_rate) || self.augmentation.sigma < 0.0 {
            return Err(config("augmentation needs sigma >= 0 and mask rate in [0, 1]"));
        }
        Ok(())
    }
}

/// Frozen copy of the model taken before adaptation starts.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSnapshot {
    model: ModelState,
    base: Array2<f64>,
}

impl TeacherSnapshot {
    pub fn capture(state: &ModelState, base: &Array2<f64>) -> Self {
        Self { model: state.clone(), base: base.clone() }
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn base_weights(&self) -> &Array2<f64> {
        &self.base
    }

    pub fn gamma(&self) -> f64 {
        self.model.gamma
    }

    /// Softened base-class distribution `softmax(gamma * cos / tau2)`.
    pub fn soft_predictions(&self, inputs: &Array2<f64>, tau2: f64) -> Result<Array2<f64>> {
        soft_base_predictions(&self.model, &self.base, inputs, tau2)
    }
}

fn soft_base_predictions(
    state: &ModelState,
    base: &Array2<f64>,
    inputs: &Array2<f64>,
    tau2: f64,
) -> Result<Array2<f64>> {
    let f = extract_features(state, inputs)?;
    let logits = cosine_logits(&f, base, state.gamma / tau2);
    Ok(log_softmax_rows(&logits).mapv(f64::exp))
}

/// Checks that `pairing` is an involution without fixed points.
pub fn validate_pairing(pairing: &[usize]) -> Result<()> {
    if pairing.is_empty() {
        return Err(config("contrastive batch is empty"));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= pairing.len() || j == i || pairing[j] != i {
            return Err(config(format!("pairing is not a fixed-point-free involution at {i}")));
        }
    }
    Ok(())
}

/// `i <-> i + B` pairing for `2B` stacked views.
pub fn stacked_pairing(b: usize) -> Vec<usize> {
    (0..2 * b).map(|i| if i < b { i + b } else { i - b }).collect()
}

/// Contrastive loss over `2B` view features: the mean over every ordered
/// positive pair `(i, j)` of
/// `-ln( exp(cos(f_i, f_j)/tau) / sum_{k != i} exp(cos(f_i, f_k)/tau) )`.
pub fn contrastive_loss(view_features: &Array2<f64>, pairing: &[usize], tau1: f64) -> Result<f64> {
    validate_pairing(pairing)?;
    if view_features.nrows() != pairing.len() {
        return Err(shape("one pairing entry per view is required"));
    }
    if tau1 <= 0.0 {
        return Err(config("tau1 must be positive"));
    }
    let f = normalize_rows(view_features);
    let sim = f.dot(&f.t()) / tau1;
    let n = pairing.len();
    let mut total = 0.0;
    for i in 0..n {
        let m = (0..n).filter(|&k| k != i).map(|k| sim[[i, k]]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..n).filter(|&k| k != i).map(|k| (sim[[i, k]] - m).exp()).sum::<f64>().ln();
        total -= sim[[i, pairing[i]]] - lse;
    }
    Ok(total / n as f64)
}

/// Tape version of [`contrastive_loss`].
pub fn contrastive_on(tape: &mut Tape, view_features: Var, pairing: &[usize], tau1: f64) -> Var {
    let n = pairing.len();
    let f = tape.normalize_rows(view_features, COSINE_EPS);
    let ft = tape.transpose(f);
    let sim = tape.matmul(f, ft);
    let sim = tape.scale(sim, 1.0 / tau1);
    let mut mask = Array2::zeros((n, n));
    for i in 0..n {
        mask[[i, i]] = f64::NEG_INFINITY;
    }
    let masked = tape.add_const(sim, &mask);
    let logp = tape.log_softmax_rows(masked);
    let picks: Vec<(usize, usize)> = pairing.iter().copied().enumerate().collect();
    let picked = tape.gather(logp, &picks);
    let total = tape.sum_all(picked);
    tape.scale(total, -1.0 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distillation {
    pub value: f64,
    /// Student probabilities that fell below the log floor.
    pub clamped: usize,
}

/// `-(1/B) sum_i sum_k zbar_ik ln z_ik` over base classes, where both
/// distributions are `softmax(gamma * cos / tau2)` of the teacher and the
/// student, each with its own scale.
pub fn distillation_loss(
    inputs: &Array2<f64>,
    student: (&ModelState, &Array2<f64>),
    teacher: &TeacherSnapshot,
    tau2: f64,
) -> Result<Distillation> {
    if student.1.dim() != teacher.base.dim() {
        return Err(shape("student and teacher disagree on d or N_b"));
    }
    if tau2 <= 0.0 {
        return Err(config("tau2 must be positive"));
    }
    let zbar = teacher.soft_predictions(inputs, tau2)?;
    let z = soft_base_predictions(student.0, student.1, inputs, tau2)?;
    let mut clamped = 0;
    let mut total = 0.0;
    for (zb, zs) in zbar.iter().zip(z.iter()) {
        if *zs < LOG_EPS {
            clamped += 1;
        }
        total -= zb * zs.max(LOG_EPS).ln();
    }
    Ok(Distillation { value: total / inputs.nrows().max(1) as f64, clamped })
}

/// Tape version of the distillation term. `teacher_probs` is constant.
pub fn distillation_on(
    tape: &mut Tape,
    student_features: Var,
    base_rows: Var,
    gamma: Var,
    teacher_probs: &Array2<f64>,
    tau2: f64,
) -> Var {
    let logits = cosine_logits_on(tape, student_features, base_rows, gamma);
    let logits = tape.scale(logits, 1.0 / tau2);
    let logz = tape.log_softmax_rows(logits);
    let logz = tape.clamp_min(logz, LOG_EPS.ln());
    let weighted = tape.mul_const(logz, teacher_probs.clone());
    let total = tape.sum_all(weighted);
    tape.scale(total, -1.0 / teacher_probs.nrows().max(1) as f64)
}

/// Two stochastic views: additive Gaussian noise, then each coordinate is
/// zeroed with probability `mask_rate`.
pub fn make_views<R: Rng + ?Sized>(
    sample: &[f64],
    aug: &AugmentationSpec,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let a = perturb(sample, aug, rng);
    let b = perturb(sample, aug, rng);
    (a, b)
}

pub(crate) fn perturb<R: Rng + ?Sized>(sample: &[f64], aug: &AugmentationSpec, rng: &mut R) -> Vec<f64> {
    let noise = Normal::new(0.0, aug.sigma.max(0.0)).expect("finite sigma");
    sample
        .iter()
        .map(|&x| {
            let v = if aug.sigma > 0.0 { x + noise.sample(rng) } else { x };
            if aug.mask_rate > 0.0 && rng.random::<f64>() < aug.mask_rate {
                0.0
            } else {
                v
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapted {
    pub state: ModelState,
    pub base: Array2<f64>,
    pub losses: Vec<f64>,
    /// Set when a non-finite loss aborted adaptation; `state`/`base` are then
    /// the unadapted inputs.
    pub fell_back: bool,
}

/// Per-term values of one adaptation objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptationTerms {
    pub cls: f64,
    pub ctr: f64,
    pub dst: f64,
    pub total: f64,
}

/// Builds the weighted adaptation objective on `tape` for one batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn adaptation_objective_on(
    tape: &mut Tape,
    model: &BoundModel,
    episode: &Episode,
    views: &Array2<f64>,
    distill_inputs: &Array2<f64>,
    teacher_probs: &Array2<f64>,
    cfg: &AdaptationConfig,
) -> Result<(Var, [Var; 3])> {
    let n_s = episode.support.len();
    let n_v = views.nrows();
    let n_d = distill_inputs.nrows();
    let support = episode.support_inputs();
    let x = ndarray::concatenate(
        ndarray::Axis(0),
        &[support.view(), views.view(), distill_inputs.view()],
    )
    .map_err(|e| shape(e.to_string()))?;
    let xv = tape.leaf(x);
    let f = model.features(tape, xv);

    let zero = tape.scalar_leaf(0.0);
    let fs = tape.select_rows(f, &(0..n_s).collect::<Vec<_>>());
    let labels: Vec<_> = episode.support.iter().map(|e| e.label).collect();
    let protos = prototypes_on(tape, fs, &labels, episode.n_base, episode.n_way())?;
    let cls = if cfg.w_cls > 0.0 {
        let (w, picks): (Var, Vec<(usize, usize)>) = if cfg.cls_all_classes {
            let w = tape.concat_rows(model.base_rows, protos);
            (w, episode.support_columns().into_iter().enumerate().collect())
        } else {
            let cols = episode.support_columns().into_iter().map(|c| c - episode.n_base);
            (protos, cols.enumerate().collect())
        };
        let logits = cosine_logits_on(tape, fs, w, model.gamma);
        let logp = tape.log_softmax_rows(logits);
        let logp = tape.clamp_min(logp, LOG_EPS.ln());
        let picked = tape.gather(logp, &picks);
        let total = tape.sum_all(picked);
        tape.scale(total, -1.0 / n_s as f64)
    } else {
        zero
    };
    let ctr = if cfg.w_ctr > 0.0 && n_v >= 2 {
        let fv = tape.select_rows(f, &(n_s..n_s + n_v).collect::<Vec<_>>());
        contrastive_on(tape, fv, &stacked_pairing(n_v / 2), cfg.tau1)
    } else {
        zero
    };
    let dst = if cfg.w_dst > 0.0 && n_d > 0 {
        let fd = tape.select_rows(f, &(n_s + n_v..n_s + n_v + n_d).collect::<Vec<_>>());
        distillation_on(tape, fd, model.base_rows, model.gamma, teacher_probs, cfg.tau2)
    } else {
        zero
    };
    let a = tape.scale(cls, cfg.w_cls);
    let b = tape.scale(ctr, cfg.w_ctr);
    let c = tape.scale(dst, cfg.w_dst);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    Ok((total, [cls, ctr, dst]))
}

/// Adapts `(state, base)` to `episode` with `cfg.steps` gradient steps. The
/// unlabeled pool is only read through its learning view.
pub fn adapt_model(
    state: &ModelState,
    base: &Array2<f64>,
    episode: &Episode,
    cfg: &AdaptationConfig,
) -> Result<Adapted> {
    cfg.validate()?;
    if episode.support.is_empty() {
        return Err(Error::Validation("adaptation needs a non-empty support set".into()));
    }
    let needs_unlabeled = cfg.w_ctr > 0.0 || cfg.w_dst > 0.0;
    if needs_unlabeled && episode.unlabeled.is_empty() {
        return Err(Error::Validation(
            "contrastive or distillation weight set but the unlabeled set is empty".into(),
        ));
    }
    let teacher = TeacherSnapshot::capture(state, base);
    let u_all = if episode.unlabeled.is_empty() {
        Array2::zeros((0, state.spec.input_dim))
    } else {
        episode.unlabeled_inputs()
    };
    let teacher_all = if cfg.w_dst > 0.0 {
        teacher.soft_predictions(&u_all, cfg.tau2)?
    } else {
        Array2::zeros((u_all.nrows(), base.ncols()))
    };

    let mut rng = keyed_rng(cfg.seed ^ episode.spec.seed, episode.index, Purpose::Views);
    let mut cur_state = state.clone();
    let mut cur_base = base.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size.min(u_all.nrows());
    let dim = state.spec.input_dim;
    for _ in 0..cfg.steps {
        let batch = if b > 0 { index::sample(&mut rng, u_all.nrows(), b).into_vec() } else { Vec::new() };
        let views = if cfg.w_ctr > 0.0 && b > 0 {
            let mut first = Vec::with_capacity(b);
            let mut second = Vec::with_capacity(b);
            for &i in &batch {
                let (v1, v2) = make_views(u_all.row(i).as_slice().expect("row-major"), &cfg.augmentation, &mut rng);
                first.push(v1);
                second.push(v2);
            }
            stack_inputs(first.iter().chain(second.iter()).map(|v| v.as_slice()), dim)
        } else {
            Array2::zeros((0, dim))
        };
        let (distill_inputs, distill_targets) = if cfg.w_dst > 0.0 && b > 0 {
            (u_all.select(ndarray::Axis(0), &batch), teacher_all.select(ndarray::Axis(0), &batch))
        } else {
            (Array2::zeros((0, dim)), Array2::zeros((0, base.ncols())))
        };

        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, &cur_state, &cur_base);
        let (total, _) = adaptation_objective_on(
            &mut tape,
            &model,
            episode,
            &views,
            &distill_inputs,
            &distill_targets,
            cfg,
        )?;
        let loss = tape.scalar(total);
        let grads = model.grads(&tape.backward(total));
        if !loss.is_finite() || !grads.is_finite() {
            log::warn!("adaptation of episode {} aborted: non-finite loss", episode.index);
            return Ok(Adapted { state: state.clone(), base: base.clone(), losses, fell_back: true });
        }
        sgd_step(&mut cur_state, &mut cur_base, &grads, cfg.lr, cfg.lr);
        if cur_state.validate().is_err() || cur_base.iter().any(|v| !v.is_finite()) {
            log::warn!("adaptation of episode {} aborted: parameters overflowed", episode.index);
            return Ok(Adapted { state: state.clone(), base: base.clone(), losses, fell_back: true });
        }
        losses.push(loss);
    }
    debug_assert_eq!(teacher, TeacherSnapshot::capture(state, base));
    Ok(Adapted { state: cur_state, base: cur_base, losses, fell_back: false })
}

/// Max-norm of `z - zbar` over base classes on `inputs`.
pub fn base_prediction_drift(
    adapted: (&ModelState, &Array2<f64>),
    teacher: &TeacherSnapshot,
    inputs: &Array2<f64>,
    tau2: f64,
) -> Result<f64> {
    let z = soft_base_predictions(adapted.0, adapted.1, inputs, tau2)?;
    let zbar = teacher.soft_predictions(inputs, tau2)?;
    Ok((&z - &zbar).iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Mean entropy of the rows of `p`.
pub fn mean_entropy(p: &Array2<f64>) -> f64 {
    let ent: Array1<f64> = p
        .rows()
        .into_iter()
        .map(|r| -r.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>())
        .collect();
    ent.mean().unwrap_or(0.0)
}
