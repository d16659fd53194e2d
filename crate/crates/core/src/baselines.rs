//! Comparison methods: plain prototype refinement, label propagation over a
//! graph whose labeled vertices are the classifier weight columns, and a
//! confidence-thresholded consistency adaptation in the style of FixMatch.

use ndarray::{s, Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::adaptation::{perturb, AugmentationSpec};
use crate::error::{config, shape, Error, Result};
use crate::evaluation::{score_model, EpisodeMetrics};
use crate::model::{
    cosine_classify, cosine_logits, cosine_logits_on, extract_features, imprint_weights,
    normalize_rows, prototypes_on, sgd_step, BoundModel, ModelState,
};
use crate::refinement::{refine_loop, RefinementConfig};
use crate::rng::{keyed_rng, Purpose};
use crate::tape::{log_softmax_rows, Tape};
use crate::training::LOG_EPS;
use crate::types::{stack_inputs, ClassifierWeights, Episode, PredictionMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Kernel bandwidth on cosine distance.
    pub sigma: f64,
    /// Propagation damping in (0, 1).
    pub lambda: f64,
    pub iterations: usize,
    /// Keep only each vertex's `k` strongest edges (symmetrized); `None`
    /// keeps the dense graph.
    #[serde(default)]
    pub k_neighbors: Option<usize>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { sigma: 1.0, lambda: 0.9, iterations: 20, k_neighbors: None }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(config("graph bandwidth must be positive"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(config("propagation damping must lie in (0, 1)"));
        }
        if self.iterations == 0 {
            return Err(config("propagation needs at least one iteration"));
        }
        if self.k_neighbors == Some(0) {
            return Err(config("k_neighbors must be at least 1"));
        }
        Ok(())
    }
}

/// Label propagation output over the query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagated {
    pub predictions: PredictionMatrix,
    /// Query rows that received no label mass and were classified by cosine
    /// similarity instead.
    pub fallback_rows: Vec<usize>,
}

/// Symmetrically normalized affinity `D^-1/2 A D^-1/2` of the kernel
/// `exp(-(1 - cos)^2 / (2 sigma^2))` with a zero diagonal, optionally
/// restricted to each vertex's `k` strongest edges.
pub fn normalized_affinity(vertices: &Array2<f64>, sigma: f64, k: Option<usize>) -> Array2<f64> {
    let v = normalize_rows(vertices);
    let cos = v.dot(&v.t());
    let n = cos.nrows();
    let mut a = cos.mapv(|c| {
        let dist = 1.0 - c;
        (-dist * dist / (2.0 * sigma * sigma)).exp()
    });
    for i in 0..n {
        a[[i, i]] = 0.0;
    }
    if let Some(k) = k.filter(|&k| k + 1 < n) {
        let mut keep = Array2::<bool>::from_elem((n, n), false);
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&x, &y| a[[i, y]].total_cmp(&a[[i, x]]).then(x.cmp(&y)));
            for &j in &order[..k] {
                keep[[i, j]] = true;
                keep[[j, i]] = true;
            }
        }
        a.zip_mut_with(&keep, |x, &kp| if !kp { *x = 0.0 });
    }
    let inv_sqrt: Vec<f64> = a
        .rows()
        .into_iter()
        .map(|r| {
            let d: f64 = r.sum();
            if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }
        })
        .collect();
    for ((i, j), x) in a.indexed_iter_mut() {
        *x *= inv_sqrt[i] * inv_sqrt[j];
    }
    a
}

/// Damped label spreading `F <- lambda S F + (1 - lambda) Y` from `F = Y`,
/// where the labeled vertices are the columns of `weights` and the unlabeled
/// vertices are the unlabeled and query features. Query rows are normalized
/// to distributions over the `N_b + N` classes.
pub fn label_propagation_predict(
    weights: &ClassifierWeights,
    unlabeled_features: &Array2<f64>,
    query_features: &Array2<f64>,
    gamma: f64,
    cfg: &GraphConfig,
) -> Result<Propagated> {
    cfg.validate()?;
    let d = weights.d();
    if unlabeled_features.ncols() != d && unlabeled_features.nrows() > 0 || query_features.ncols() != d {
        return Err(shape("vertex features must share the weight dimension"));
    }
    if query_features.nrows() == 0 {
        return Err(Error::Validation("label propagation needs at least one query".into()));
    }
    let c = weights.n_classes();
    let n_u = unlabeled_features.nrows();
    let n_q = query_features.nrows();
    let joint = weights.joint();
    let vertices = ndarray::concatenate(
        Axis(0),
        &[joint.t(), unlabeled_features.view().into_shape_with_order((n_u, d)).map_err(|e| shape(e.to_string()))?, query_features.view()],
    )
    .map_err(|e| shape(e.to_string()))?;
    let s_mat = normalized_affinity(&vertices, cfg.sigma, cfg.k_neighbors);
    let n = c + n_u + n_q;
    let mut y = Array2::<f64>::zeros((n, c));
    for k in 0..c {
        y[[k, k]] = 1.0;
    }
    let mut f = y.clone();
    for _ in 0..cfg.iterations {
        f = cfg.lambda * s_mat.dot(&f) + (1.0 - cfg.lambda) * &y;
    }
    let mut out = f.slice(s![c + n_u.., ..]).to_owned();
    let mut fallback_rows = Vec::new();
    let direct = cosine_classify(query_features, weights, gamma)?;
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mass: f64 = row.sum();
        if mass > f64::MIN_POSITIVE && mass.is_finite() {
            row /= mass;
        } else {
            row.assign(&direct.probs().row(i));
            fallback_rows.push(i);
        }
    }
    if !fallback_rows.is_empty() {
        log::warn!("label propagation fell back to cosine scores on {} query rows", fallback_rows.len());
    }
    Ok(Propagated { predictions: PredictionMatrix::new(out)?, fallback_rows })
}

/// Imprints the episode weights and scores label propagation predictions.
pub fn run_label_propagation(
    state: &ModelState,
    base: &Array2<f64>,
    episode: &Episode,
    cfg: &GraphConfig,
) -> Result<EpisodeMetrics> {
    let weights = imprint_weights(state, base, episode)?;
    let u = if episode.unlabeled.is_empty() {
        Array2::zeros((0, state.d()))
    } else {
        extract_features(state, &episode.unlabeled_inputs())?
    };
    let q = extract_features(state, &episode.query_inputs())?;
    let joint = label_propagation_predict(&weights, &u, &q, state.gamma, cfg)?.predictions;
    let [b, n] = crate::evaluation::restrict_joint(&joint, episode.n_base)?;
    crate::evaluation::score_episode(&joint, Some(&b), Some(&n), episode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixMatchConfig {
    /// Pseudo-labels are kept when the weak-view max probability reaches this.
    pub threshold: f64,
    pub consistency_weight: f64,
    /// Weight of the support cross-entropy; zero disables supervised updates.
    pub supervised_weight: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weak: AugmentationSpec,
    pub strong: AugmentationSpec,
    pub seed: u64,
}

impl Default for FixMatchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            consistency_weight: 1.0,
            supervised_weight: 1.0,
            steps: 30,
            lr: 1e-3,
            batch_size: 64,
            weak: AugmentationSpec { sigma: 0.05, mask_rate: 0.0 },
            strong: AugmentationSpec { sigma: 0.3, mask_rate: 0.3 },
            seed: 0,
        }
    }
}

impl FixMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(config("confidence threshold must lie in [0, 1]"));
        }
        if self.consistency_weight < 0.0 || self.supervised_weight < 0.0 {
            return Err(config("loss weights must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Pseudo-labels from weak-view probabilities: `(row, argmax)` for every row
/// whose max probability is at least `threshold`.
pub fn pseudo_labels(weak: &PredictionMatrix, threshold: f64) -> Vec<(usize, usize)> {
    weak.argmax()
        .into_iter()
        .enumerate()
        .filter(|&(i, k)| weak.probs()[[i, k]] >= threshold)
        .collect()
}

/// Consistency term `-(1/B) sum_{kept i} ln p_strong(i, pseudo_i)` for fixed
/// joint weights, returned with the number of kept rows.
pub fn consistency_loss(
    state: &ModelState,
    joint_weights: &Array2<f64>,
    weak_inputs: &Array2<f64>,
    strong_inputs: &Array2<f64>,
    threshold: f64,
) -> Result<(f64, usize)> {
    let fw = extract_features(state, weak_inputs)?;
    let fs = extract_features(state, strong_inputs)?;
    let weak = PredictionMatrix::from_logits(&cosine_logits(&fw, joint_weights, state.gamma));
    let kept = pseudo_labels(&weak, threshold);
    let logp = log_softmax_rows(&cosine_logits(&fs, joint_weights, state.gamma));
    let total: f64 = kept.iter().map(|&(i, k)| -logp[[i, k]].max(LOG_EPS.ln())).sum();
    Ok((total / weak_inputs.nrows().max(1) as f64, kept.len()))
}

/// Adapts `(state, base)` with a supervised support loss plus the
/// consistency term on strongly perturbed unlabeled samples.
pub fn fixmatch_adapt(
    state: &ModelState,
    base: &Array2<f64>,
    episode: &Episode,
    cfg: &FixMatchConfig,
) -> Result<(ModelState, Array2<f64>)> {
    cfg.validate()?;
    if episode.unlabeled.is_empty() {
        return Err(Error::Validation("consistency adaptation needs unlabeled samples".into()));
    }
    let u_all = episode.unlabeled_inputs();
    let dim = state.spec.input_dim;
    let b = cfg.batch_size.min(u_all.nrows());
    let support = episode.support_inputs();
    let n_s = support.nrows();
    let labels: Vec<_> = episode.support.iter().map(|e| e.label).collect();
    let support_cols = episode.support_columns();
    let mut rng = keyed_rng(cfg.seed ^ episode.spec.seed, episode.index, Purpose::Views);
    let mut cur = state.clone();
    let mut cur_base = base.clone();
    for _ in 0..cfg.steps {
        let batch = index::sample(&mut rng, u_all.nrows(), b).into_vec();
        let mut weak = Vec::with_capacity(b);
        let mut strong = Vec::with_capacity(b);
        for &i in &batch {
            let x = u_all.row(i).to_vec();
            weak.push(perturb(&x, &cfg.weak, &mut rng));
            strong.push(perturb(&x, &cfg.strong, &mut rng));
        }
        let weak = stack_inputs(weak.iter().map(|v| v.as_slice()), dim);
        let strong = stack_inputs(strong.iter().map(|v| v.as_slice()), dim);

        let joint = imprint_weights(&cur, &cur_base, episode)?.joint();
        let fw = extract_features(&cur, &weak)?;
        let weak_preds = PredictionMatrix::from_logits(&cosine_logits(&fw, &joint, cur.gamma));
        let kept = pseudo_labels(&weak_preds, cfg.threshold);
        if (kept.is_empty() || cfg.consistency_weight == 0.0) && cfg.supervised_weight == 0.0 {
            continue;
        }

        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, &cur, &cur_base);
        let rows: Vec<usize> = kept.iter().map(|&(i, _)| i).collect();
        let x = ndarray::concatenate(Axis(0), &[support.view(), strong.select(Axis(0), &rows).view()])
            .map_err(|e| shape(e.to_string()))?;
        let xv = tape.leaf(x);
        let f = model.features(&mut tape, xv);
        let fs = tape.select_rows(f, &(0..n_s).collect::<Vec<_>>());
        let protos = prototypes_on(&mut tape, fs, &labels, episode.n_base, episode.n_way())?;
        let w = tape.concat_rows(model.base_rows, protos);
        let logits = cosine_logits_on(&mut tape, f, w, model.gamma);
        let logp = tape.log_softmax_rows(logits);
        let logp = tape.clamp_min(logp, LOG_EPS.ln());
        let sup_picks: Vec<(usize, usize)> = support_cols.iter().copied().enumerate().collect();
        let sup = tape.gather(logp, &sup_picks);
        let sup = tape.sum_all(sup);
        let sup = tape.scale(sup, -cfg.supervised_weight / n_s as f64);
        let total = if kept.is_empty() {
            sup
        } else {
            let picks: Vec<(usize, usize)> =
                kept.iter().enumerate().map(|(j, &(_, k))| (n_s + j, k)).collect();
            let con = tape.gather(logp, &picks);
            let con = tape.sum_all(con);
            let con = tape.scale(con, -cfg.consistency_weight / b as f64);
            tape.add(sup, con)
        };
        if !tape.scalar(total).is_finite() {
            log::warn!("consistency adaptation of episode {} aborted: non-finite loss", episode.index);
            return Ok((state.clone(), base.clone()));
        }
        let grads = model.grads(&tape.backward(total));
        sgd_step(&mut cur, &mut cur_base, &grads, cfg.lr, cfg.lr);
        if cur.validate().is_err() || cur_base.iter().any(|v| !v.is_finite()) {
            log::warn!("consistency adaptation of episode {} aborted: parameters overflowed", episode.index);
            return Ok((state.clone(), base.clone()));
        }
    }
    Ok((cur, cur_base))
}

/// Imprints prototypes and, if the unlabeled set is non-empty, refines them
/// at test time before scoring.
pub fn run_plain_pr(
    state: &ModelState,
    base: &Array2<f64>,
    episode: &Episode,
    cfg: &RefinementConfig,
) -> Result<EpisodeMetrics> {
    let weights = imprint_weights(state, base, episode)?;
    let refined = refine_loop(state, &weights, episode, cfg)?;
    score_model(state, &refined.weights, episode)
}
