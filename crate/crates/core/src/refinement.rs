//! Soft prototype refinement with unlabeled data.
//!
//! One refinement step classifies the unlabeled pool against `[W_b, W_n]`,
//! keeps only the novel-class columns of the predictions (samples that look
//! like base classes then carry almost no weight), re-estimates each novel
//! prototype as the weighted mean of unlabeled and support features, and
//! blends it into the current prototype with rate `alpha`. Base weights are
//! never touched.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Result};
use crate::model::{cosine_logits, cosine_logits_on, extract_features, membership_matrix};
use crate::tape::{Tape, Var};
use crate::types::{ClassId, ClassifierWeights, Episode, PredictionMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub n_steps: usize,
    pub alpha: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self { n_steps: 1, alpha: 1.0 }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(config("n_steps must be at least 1"));
        }
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(config(format!("alpha = {alpha} is outside (0, 1]")))
    }
}

/// Novel-class columns `n_base..` of the joint predictions, without
/// renormalizing the rows.
pub fn slice_novel_predictions(preds: &PredictionMatrix, n_base: usize) -> Result<Array2<f64>> {
    if n_base >= preds.n_classes() {
        return Err(shape(format!(
            "n_base = {n_base} leaves no novel columns in a {}-class prediction",
            preds.n_classes()
        )));
    }
    Ok(preds.probs().slice(s![.., n_base..]).to_owned())
}

/// Weighted class means: for each novel class `j`,
/// `(sum_i y[i, j] u_i + sum_{s in S_j} s) / (sum_i y[i, j] + |S_j|)`.
/// Returns `d x N`.
pub fn reestimate_prototypes(
    y_novel: &Array2<f64>,
    unlabeled_features: &Array2<f64>,
    support_features: &Array2<f64>,
    support_labels: &[ClassId],
    n_base: usize,
) -> Result<Array2<f64>> {
    let n_way = y_novel.ncols();
    if y_novel.nrows() != unlabeled_features.nrows() {
        return Err(shape("one prediction row per unlabeled feature is required"));
    }
    if unlabeled_features.ncols() != support_features.ncols() {
        return Err(shape("unlabeled and support features differ in d"));
    }
    let member = membership_matrix(support_labels, n_base, n_way)?;
    let num = y_novel.t().dot(unlabeled_features) + member.dot(support_features);
    let mut den = y_novel.sum_axis(ndarray::Axis(0));
    den += &member.sum_axis(ndarray::Axis(1));
    let mut protos = num;
    for (mut row, q) in protos.rows_mut().into_iter().zip(den.iter()) {
        row /= *q;
    }
    Ok(protos.reversed_axes())
}

/// `alpha * p_new + (1 - alpha) * p_old`.
pub fn ema_update(p_old: &Array2<f64>, p_new: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    if p_old.dim() != p_new.dim() {
        return Err(shape("prototype blocks differ in shape"));
    }
    Ok(p_new * alpha + p_old * (1.0 - alpha))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub weights: ClassifierWeights,
    /// Set when refinement was skipped because the unlabeled pool was empty.
    pub skipped_empty: bool,
}

/// Refinement given precomputed features.
pub fn refine_features(
    weights: &ClassifierWeights,
    gamma: f64,
    unlabeled_features: &Array2<f64>,
    support_features: &Array2<f64>,
    support_labels: &[ClassId],
    cfg: &RefinementConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    if unlabeled_features.nrows() == 0 {
        log::warn!("prototype refinement skipped: empty unlabeled set");
        return Ok(RefineOutcome { weights: weights.clone(), skipped_empty: true });
    }
    let n_base = weights.n_base();
    let mut novel = weights.novel.clone();
    for _ in 0..cfg.n_steps {
        let current = ClassifierWeights::new(weights.base.clone(), novel.clone())?;
        let preds = PredictionMatrix::from_logits(&cosine_logits(
            unlabeled_features,
            &current.joint(),
            gamma,
        ));
        let y = slice_novel_predictions(&preds, n_base)?;
        let fresh =
            reestimate_prototypes(&y, unlabeled_features, support_features, support_labels, n_base)?;
        novel = ema_update(&novel, &fresh, cfg.alpha)?;
    }
    Ok(RefineOutcome { weights: ClassifierWeights::new(weights.base.clone(), novel)?, skipped_empty: false })
}

/// Refines the novel weights of `weights` with the episode's unlabeled set,
/// recomputing the soft assignments against the current prototypes each step.
pub fn refine_loop(
    state: &crate::model::ModelState,
    weights: &ClassifierWeights,
    episode: &Episode,
    cfg: &RefinementConfig,
) -> Result<RefineOutcome> {
    let u = if episode.unlabeled.is_empty() {
        Array2::zeros((0, state.d()))
    } else {
        extract_features(state, &episode.unlabeled_inputs())?
    };
    let s = extract_features(state, &episode.support_inputs())?;
    let labels: Vec<ClassId> = episode.support.iter().map(|e| e.label).collect();
    refine_features(weights, state.gamma, &u, &s, &labels, cfg)
}

/// Differentiable refinement on a tape. `prototype_rows` is `N x d`, the
/// result has the same shape. With `stop_gradient` the soft assignments are
/// treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn refine_on(
    tape: &mut Tape,
    base_rows: Var,
    prototype_rows: Var,
    unlabeled_features: Var,
    support_features: Var,
    support_labels: &[ClassId],
    n_base: usize,
    gamma: Var,
    cfg: &RefinementConfig,
    stop_gradient: bool,
) -> Result<Var> {
    cfg.validate()?;
    if tape.value(unlabeled_features).nrows() == 0 {
        return Ok(prototype_rows);
    }
    let n_way = tape.value(prototype_rows).nrows();
    let member = membership_matrix(support_labels, n_base, n_way)?;
    let counts = member.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
    let member = tape.leaf(member);
    let support_sum = tape.matmul(member, support_features);

    let mut protos = prototype_rows;
    for _ in 0..cfg.n_steps {
        let w = tape.concat_rows(base_rows, protos);
        let logits = cosine_logits_on(tape, unlabeled_features, w, gamma);
        let logp = tape.log_softmax_rows(logits);
        let p = tape.exp(logp);
        let mut y = tape.slice_cols(p, n_base, n_base + n_way);
        if stop_gradient {
            y = tape.detach(y);
        }
        let yt = tape.transpose(y);
        let weighted = tape.matmul(yt, unlabeled_features);
        let num = tape.add(weighted, support_sum);
        let mass = tape.sum_cols(y);
        let mass = tape.transpose(mass);
        let den = tape.add_const(mass, &counts);
        let fresh = tape.div_rows(num, den);
        protos = if cfg.alpha == 1.0 {
            fresh
        } else {
            let a = tape.scale(fresh, cfg.alpha);
            let b = tape.scale(protos, 1.0 - cfg.alpha);
            tape.add(a, b)
        };
    }
    Ok(protos)
}
