//! Pre-training on base classes and the two episodic meta-training loops.
//!
//! Both meta-training variants build novel weights from support prototypes,
//! classify the episode's queries against all `N_b + N` classes and take one
//! plain gradient step on the extractor (with the learnable scale) at rate
//! `eta1` and on the base weights at rate `eta2`. The fake-unlabeled variant
//! refines the prototypes with the episode's unlabeled pool first, and the
//! gradient flows through that refinement unless `stop_gradient` is set.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::model::{
    cosine_logits_on, prototypes_on, sgd_step, BoundModel, ModelState, Momentum, ParamGrads,
};
use crate::refinement::{refine_on, RefinementConfig};
use crate::rng::{keyed_rng, Purpose};
use crate::sampler::{sample_fake_unlabeled_episode, sample_incremental_episode, SamplerConfig};
use crate::tape::Tape;
use crate::types::{stack_inputs, DatasetBundle, Episode, EpisodeMode, EpisodeSpec, PredictionMatrix, Stage};

/// Probabilities are floored here before taking logs.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaAlgorithm {
    /// Episodes without unlabeled data.
    Baseline,
    /// Episodes with a fake unlabeled pool used for prototype refinement.
    FakeUnlabeled,
}

impl MetaAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            MetaAlgorithm::Baseline => "alg1",
            MetaAlgorithm::FakeUnlabeled => "alg2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rate for the extractor parameters and the scale.
    pub eta1: f64,
    /// Rate for the base weights.
    pub eta2: f64,
    /// Pre-training passes over `base_train`.
    pub epochs: usize,
    /// Meta-training episodes.
    pub steps: usize,
    pub batch_size: usize,
    /// Heavy-ball coefficient; `None` is plain gradient descent.
    pub momentum: Option<f64>,
    pub episode: SamplerConfig,
    pub refinement: RefinementConfig,
    /// Treat the soft assignments inside refinement as constants.
    pub stop_gradient: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta1: 1e-2,
            eta2: 1e-2,
            epochs: 10,
            steps: 2000,
            batch_size: 64,
            momentum: None,
            episode: SamplerConfig::new(
                EpisodeSpec::standard(1, EpisodeMode::SemiSupervised, 0),
                Stage::Train,
            ),
            refinement: RefinementConfig::default(),
            stop_gradient: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta1 < 0.0 || self.eta2 < 0.0 || !self.eta1.is_finite() || !self.eta2.is_finite() {
            return Err(config("learning rates must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be at least 1"));
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(config("momentum must be in [0, 1)"));
            }
        }
        if self.episode.stage != Stage::Train {
            return Err(config("meta-training episodes must come from the training splits"));
        }
        self.refinement.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Rows whose true-class probability fell below [`LOG_EPS`].
    pub clamped: usize,
}

/// Mean of `-ln p[row, label]` with probabilities floored at [`LOG_EPS`].
/// `labels` are zero-based column indices.
pub fn cross_entropy_loss(preds: &PredictionMatrix, labels: &[usize]) -> Result<CrossEntropy> {
    if labels.len() != preds.n_rows() {
        return Err(crate::error::shape("one label per prediction row is required"));
    }
    if preds.n_rows() == 0 {
        return Ok(CrossEntropy { value: 0.0, clamped: 0 });
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (row, &label) in preds.probs().rows().into_iter().zip(labels) {
        let p = *row.get(label).ok_or_else(|| {
            Error::Validation(format!("label column {label} out of range"))
        })?;
        if p < LOG_EPS {
            clamped += 1;
        }
        total -= p.max(LOG_EPS).ln();
    }
    Ok(CrossEntropy { value: total / preds.n_rows() as f64, clamped })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Query cross-entropy of one episode and its gradient w.r.t. the extractor,
/// the scale and the base weights. With `refine` set, prototypes are refined
/// with the episode's unlabeled inputs before classifying the queries.
pub fn episode_objective(
    state: &ModelState,
    base: &Array2<f64>,
    episode: &Episode,
    refine: Option<(&RefinementConfig, bool)>,
) -> Result<StepOutcome> {
    let dim = state.spec.input_dim;
    let n_s = episode.support.len();
    let n_q = episode.query.len();
    let u_inputs = episode.unlabeled.inputs();
    let n_u = if refine.is_some() { u_inputs.len() } else { 0 };

    let rows = episode
        .support
        .iter()
        .map(|e| e.input.as_slice())
        .chain(episode.query.iter().map(|e| e.input.as_slice()))
        .chain(u_inputs.iter().take(n_u).map(|v| v.as_slice()));
    let x = stack_inputs(rows, dim);

    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, state, base);
    let xv = tape.leaf(x);
    let f = model.features(&mut tape, xv);
    let support_idx: Vec<usize> = (0..n_s).collect();
    let query_idx: Vec<usize> = (n_s..n_s + n_q).collect();
    let fs = tape.select_rows(f, &support_idx);
    let fq = tape.select_rows(f, &query_idx);

    let labels: Vec<_> = episode.support.iter().map(|e| e.label).collect();
    let mut protos = prototypes_on(&mut tape, fs, &labels, episode.n_base, episode.n_way())?;
    if let Some((cfg, stop_gradient)) = refine {
        if n_u > 0 {
            let u_idx: Vec<usize> = (n_s + n_q..n_s + n_q + n_u).collect();
            let fu = tape.select_rows(f, &u_idx);
            protos = refine_on(
                &mut tape,
                model.base_rows,
                protos,
                fu,
                fs,
                &labels,
                episode.n_base,
                model.gamma,
                cfg,
                stop_gradient,
            )?;
        }
    }
    let w = tape.concat_rows(model.base_rows, protos);
    let logits = cosine_logits_on(&mut tape, fq, w, model.gamma);
    let logp = tape.log_softmax_rows(logits);
    let logp = tape.clamp_min(logp, LOG_EPS.ln());
    let picks: Vec<(usize, usize)> =
        episode.query_columns().into_iter().enumerate().collect();
    let picked = tape.gather(logp, &picks);
    let total = tape.sum_all(picked);
    let loss = tape.scale(total, -1.0 / n_q.max(1) as f64);
    let grads = model.grads(&tape.backward(loss));
    Ok(StepOutcome { loss: tape.scalar(loss), grads })
}

fn check_finite(loss: f64, grads: &ParamGrads, step: usize) -> Result<()> {
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged { step, detail: format!("loss = {loss}") });
    }
    Ok(())
}

/// One meta-training step without unlabeled data.
pub fn meta_train_step_alg1(
    state: &mut ModelState,
    base: &mut Array2<f64>,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    index: u64,
) -> Result<f64> {
    cfg.validate()?;
    let episode = sample_incremental_episode(bundle, &cfg.episode, index)?;
    let out = episode_objective(state, base, &episode, None)?;
    check_finite(out.loss, &out.grads, index as usize)?;
    sgd_step(state, base, &out.grads, cfg.eta1, cfg.eta2);
    Ok(out.loss)
}

/// One meta-training step with a fake unlabeled pool refining the prototypes.
pub fn meta_train_step_alg2(
    state: &mut ModelState,
    base: &mut Array2<f64>,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    index: u64,
) -> Result<f64> {
    cfg.validate()?;
    let episode = sample_fake_unlabeled_episode(bundle, &cfg.episode, index)?;
    let out = episode_objective(state, base, &episode, Some((&cfg.refinement, cfg.stop_gradient)))?;
    check_finite(out.loss, &out.grads, index as usize)?;
    sgd_step(state, base, &out.grads, cfg.eta1, cfg.eta2);
    Ok(out.loss)
}

/// Runs `cfg.steps` meta-training episodes, indices `0..steps`, and returns
/// the per-step losses.
pub fn meta_train(
    state: &mut ModelState,
    base: &mut Array2<f64>,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    algorithm: MetaAlgorithm,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut losses = Vec::with_capacity(cfg.steps);
    match cfg.momentum {
        None => {
            for i in 0..cfg.steps as u64 {
                let loss = match algorithm {
                    MetaAlgorithm::Baseline => meta_train_step_alg1(state, base, bundle, cfg, i)?,
                    MetaAlgorithm::FakeUnlabeled => meta_train_step_alg2(state, base, bundle, cfg, i)?,
                };
                losses.push(loss);
            }
        }
        Some(beta) => {
            let mut opt = Momentum::new(beta, state, base);
            for i in 0..cfg.steps as u64 {
                let out = match algorithm {
                    MetaAlgorithm::Baseline => {
                        let ep = sample_incremental_episode(bundle, &cfg.episode, i)?;
                        episode_objective(state, base, &ep, None)?
                    }
                    MetaAlgorithm::FakeUnlabeled => {
                        let ep = sample_fake_unlabeled_episode(bundle, &cfg.episode, i)?;
                        episode_objective(state, base, &ep, Some((&cfg.refinement, cfg.stop_gradient)))?
                    }
                };
                check_finite(out.loss, &out.grads, i as usize)?;
                opt.step(state, base, &out.grads, cfg.eta1, cfg.eta2);
                losses.push(out.loss);
            }
        }
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub state: ModelState,
    /// `d x N_b`
    pub base_weights: Array2<f64>,
    pub losses: Vec<f64>,
}

/// Random unit-scale base weights for a fresh classifier.
pub fn init_base_weights(d: usize, n_base: usize, seed: u64) -> Array2<f64> {
    let mut rng = keyed_rng(seed, 1, Purpose::Init);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_fn((d, n_base), |_| normal.sample(&mut rng))
}

/// Cross-entropy of base-class minibatch `batch` (indices into `base_train`).
pub fn base_batch_objective(
    state: &ModelState,
    base: &Array2<f64>,
    bundle: &DatasetBundle,
    batch: &[usize],
) -> StepOutcome {
    let examples = &bundle.base_train;
    let x = stack_inputs(batch.iter().map(|&i| examples[i].input.as_slice()), state.spec.input_dim);
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, state, base);
    let xv = tape.leaf(x);
    let f = model.features(&mut tape, xv);
    let logits = cosine_logits_on(&mut tape, f, model.base_rows, model.gamma);
    let logp = tape.log_softmax_rows(logits);
    let logp = tape.clamp_min(logp, LOG_EPS.ln());
    let picks: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .map(|(r, &i)| (r, examples[i].label as usize - 1))
        .collect();
    let picked = tape.gather(logp, &picks);
    let total = tape.sum_all(picked);
    let loss = tape.scale(total, -1.0 / batch.len() as f64);
    let grads = model.grads(&tape.backward(loss));
    StepOutcome { loss: tape.scalar(loss), grads }
}

/// Supervised cosine-classifier training on `base_train`, starting from
/// `state` and freshly initialized base weights.
pub fn pretrain(bundle: &DatasetBundle, state: ModelState, cfg: &TrainConfig) -> Result<Pretrained> {
    if bundle.base_train.is_empty() {
        return Err(Error::Validation("base_train is empty".into()));
    }
    if cfg.eta1 < 0.0 || cfg.eta2 < 0.0 || cfg.batch_size == 0 {
        return Err(config("pretraining needs non-negative rates and a positive batch size"));
    }
    let mut state = state;
    let mut base = init_base_weights(state.d(), bundle.n_base(), cfg.seed);
    let mut opt = cfg.momentum.map(|beta| Momentum::new(beta, &state, &base));
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..bundle.base_train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut keyed_rng(cfg.seed, epoch as u64, Purpose::Shuffle));
        for batch in order.chunks(cfg.batch_size) {
            let out = base_batch_objective(&state, &base, bundle, batch);
            check_finite(out.loss, &out.grads, step)?;
            match opt.as_mut() {
                Some(m) => m.step(&mut state, &mut base, &out.grads, cfg.eta1, cfg.eta2),
                None => sgd_step(&mut state, &mut base, &out.grads, cfg.eta1, cfg.eta2),
            }
            losses.push(out.loss);
            step += 1;
        }
    }
    Ok(Pretrained { state, base_weights: base, losses })
}

/// Full-dataset base-class cross-entropy (used to monitor pre-training).
pub fn base_train_loss(state: &ModelState, base: &Array2<f64>, bundle: &DatasetBundle) -> f64 {
    let all: Vec<usize> = (0..bundle.base_train.len()).collect();
    base_batch_objective(state, base, bundle, &all).loss
}

/// Writes `step,loss,config_hash` rows.
pub fn write_training_log(path: &Path, losses: &[f64], config_hash: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss,config_hash")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l},{config_hash}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cosine_classify, extract_features, ExtractorSpec};
    use crate::types::{ClassifierWeights, LabeledExample};
    use ndarray::array;
    use std::collections::BTreeSet;

    #[test]
    fn ce_one_hot_is_zero() {
        let p = PredictionMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(cross_entropy_loss(&p, &[1, 0]).unwrap().value, 0.0);
    }

    #[test]
    fn ce_uniform_is_log_c() {
        let p = PredictionMatrix::new(Array2::from_elem((3, 4), 0.25)).unwrap();
        assert!((cross_entropy_loss(&p, &[0, 1, 3]).unwrap().value - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_two_rows() {
        let p = PredictionMatrix::new(array![[0.5, 0.5, 0.0], [0.25, 0.5, 0.25]]).unwrap();
        let ce = cross_entropy_loss(&p, &[0, 2]).unwrap().value;
        assert!((ce - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
        assert!((ce - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn ce_zero_probability_is_clamped() {
        let p = PredictionMatrix::new(array![[1.0, 0.0]]).unwrap();
        let ce = cross_entropy_loss(&p, &[1]).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!((ce.value + LOG_EPS.ln()).abs() < 1e-12);
    }

    fn separable_bundle() -> DatasetBundle {
        let mut base_train = Vec::new();
        for i in 0..40 {
            let t = i as f64 * 0.01;
            base_train.push(LabeledExample::new(vec![1.0 + t, 0.2 - t], 1));
            base_train.push(LabeledExample::new(vec![-0.1 + t, 1.0 + t], 2));
        }
        DatasetBundle {
            input_dim: 2,
            base_train,
            base_val: vec![],
            base_test: vec![],
            novel_train: vec![],
            novel_val: vec![],
            novel_test: vec![],
            base_classes: BTreeSet::from([1, 2]),
            novel_classes: BTreeSet::new(),
        }
    }

    #[test]
    fn pretrain_separates_two_classes() {
        let b = separable_bundle();
        let state = ModelState::init(ExtractorSpec::mlp(2, vec![8], 2), 10.0, 3).unwrap();
        let cfg = TrainConfig { eta1: 0.05, eta2: 0.05, epochs: 30, batch_size: 16, ..Default::default() };
        let init_base = init_base_weights(2, 2, cfg.seed);
        let before = base_train_loss(&state, &init_base, &b);
        let out = pretrain(&b, state, &cfg).unwrap();
        let after = base_train_loss(&out.state, &out.base_weights, &b);
        assert!(after < before, "{after} !< {before}");

        let x = stack_inputs(b.base_train.iter().map(|e| e.input.as_slice()), 2);
        let f = extract_features(&out.state, &x).unwrap();
        let w = ClassifierWeights::new(out.base_weights.clone(), Array2::zeros((2, 0))).unwrap();
        let pred = cosine_classify(&f, &w, out.state.gamma).unwrap().argmax();
        let correct = pred.iter().zip(&b.base_train).filter(|(p, e)| **p + 1 == e.label as usize).count();
        assert!(correct as f64 / b.base_train.len() as f64 >= 0.99);
    }

    #[test]
    fn zero_rates_freeze_pretraining() {
        let b = separable_bundle();
        let state = ModelState::init(ExtractorSpec::mlp(2, vec![8], 2), 10.0, 3).unwrap();
        let cfg = TrainConfig { eta1: 0.0, eta2: 0.0, epochs: 3, batch_size: 16, ..Default::default() };
        let out = pretrain(&b, state.clone(), &cfg).unwrap();
        assert_eq!(out.state, state);
        assert_eq!(out.base_weights, init_base_weights(2, 2, cfg.seed));
        assert_eq!(out.losses.len(), 15);
    }

    #[test]
    fn non_train_stage_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.episode.stage = Stage::Test;
        assert!(cfg.validate().is_err());
    }
}
