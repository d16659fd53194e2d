//! Central finite-difference checks of the analytic gradients.

use ndarray::Array2;
use rand::Rng;

use incfsl::adaptation::{contrastive_loss, contrastive_on, distillation_loss, distillation_on, stacked_pairing, TeacherSnapshot};
use incfsl::model::{cosine_classify, extract_features, imprint_weights, BoundModel, ModelState, ParamGrads};
use incfsl::refinement::{refine_loop, RefinementConfig};
use incfsl::tape::Tape;
use incfsl::training::{cross_entropy_loss, episode_objective};
use incfsl::types::Episode;

use super::{randn, random_episode, random_model, rng};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Norm-wise relative error; absolute when both sides are negligible.
pub fn rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let norm = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&(analytic - numeric));
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

pub fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = xp[idx];
        xp[idx] = orig + STEP;
        let up = f(&xp);
        xp[idx] = orig - STEP;
        let down = f(&xp);
        xp[idx] = orig;
        g[idx] = (up - down) / (2.0 * STEP);
    }
    g
}

/// Largest relative error over every parameter block (each `theta` entry,
/// `gamma` and the base weights) of `analytic` against differences of `loss`.
pub fn model_grad_error(
    state: &ModelState,
    base: &Array2<f64>,
    analytic: &ParamGrads,
    loss: impl Fn(&ModelState, &Array2<f64>) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (key, value) in &state.theta {
        let numeric = numeric_grad(value, |v| {
            let mut s = state.clone();
            s.theta.insert(key.clone(), v.clone());
            loss(&s, base)
        });
        worst = worst.max(rel_err(&analytic.theta[key], &numeric));
    }
    let g = Array2::from_elem((1, 1), state.gamma);
    let numeric = numeric_grad(&g, |v| {
        let mut s = state.clone();
        s.gamma = v[[0, 0]];
        loss(&s, base)
    });
    worst = worst.max(rel_err(&Array2::from_elem((1, 1), analytic.gamma), &numeric));
    let numeric = numeric_grad(base, |b| loss(state, b));
    worst.max(rel_err(&analytic.base, &numeric))
}

/// Query cross-entropy of the cosine classifier on `[W_b, prototypes]`,
/// computed without the tape.
pub fn query_ce(state: &ModelState, base: &Array2<f64>, ep: &Episode, refine: Option<&RefinementConfig>) -> f64 {
    let mut w = imprint_weights(state, base, ep).unwrap();
    if let Some(cfg) = refine {
        w = refine_loop(state, &w, ep, cfg).unwrap().weights;
    }
    let f = extract_features(state, &ep.query_inputs()).unwrap();
    let preds = cosine_classify(&f, &w, state.gamma).unwrap();
    cross_entropy_loss(&preds, &ep.query_columns()).unwrap().value
}

/// Cross-entropy over the cosine classifier w.r.t. extractor, scale and base
/// weights on a random toy episode.
pub fn cosine_ce_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ep = random_episode(&mut r, 3, 0);
    let (state, base) = random_model(&mut r, 3, 2);
    let out = episode_objective(&state, &base, &ep, None).unwrap();
    assert!((out.loss - query_ce(&state, &base, &ep, None)).abs() < 1e-10);
    model_grad_error(&state, &base, &out.grads, |s, b| query_ce(s, b, &ep, None))
}

/// Full fake-unlabeled step: gradient through refinement.
pub fn alg2_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n_u = r.random_range(1..6);
    let ep = random_episode(&mut r, 2, n_u);
    let (state, base) = random_model(&mut r, 2, 2);
    let cfg = if seed.is_multiple_of(2) {
        RefinementConfig::default()
    } else {
        RefinementConfig { n_steps: 2, alpha: r.random_range(0.3..1.0) }
    };
    let out = episode_objective(&state, &base, &ep, Some((&cfg, false))).unwrap();
    assert!((out.loss - query_ce(&state, &base, &ep, Some(&cfg))).abs() < 1e-10);
    model_grad_error(&state, &base, &out.grads, |s, b| query_ce(s, b, &ep, Some(&cfg)))
}

/// Contrastive loss w.r.t. the view features.
pub fn contrastive_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.random_range(2..5);
    let tau1 = r.random_range(0.3..1.5);
    let x = randn(&mut r, 2 * b, 3);
    let pairing = stacked_pairing(b);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = contrastive_on(&mut tape, v, &pairing, tau1);
    let analytic = tape.backward(loss).wrt(v);
    let value = contrastive_loss(&x, &pairing, tau1).unwrap();
    assert!((tape.scalar(loss) - value).abs() < 1e-10);
    rel_err(&analytic, &numeric_grad(&x, |y| contrastive_loss(y, &pairing, tau1).unwrap()))
}

/// Distillation loss w.r.t. the student. The teacher is evaluated on the same
/// tape and must receive no gradient.
pub fn distillation_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (state, base) = random_model(&mut r, 3, 4);
    let (t_state, t_base) = random_model(&mut r, 3, 4);
    let teacher = TeacherSnapshot::capture(&t_state, &t_base);
    let tau2 = r.random_range(1.0..6.0);
    let inputs = randn(&mut r, 5, 3);

    let mut tape = Tape::new();
    let teacher_model = BoundModel::bind(&mut tape, &t_state, &t_base);
    let tx = tape.leaf(inputs.clone());
    let tf = teacher_model.features(&mut tape, tx);
    let tl = incfsl::model::cosine_logits_on(&mut tape, tf, teacher_model.base_rows, teacher_model.gamma);
    let tl = tape.scale(tl, 1.0 / tau2);
    let tlog = tape.log_softmax_rows(tl);
    let tp = tape.exp(tlog);
    let teacher_probs = tape.value(tp).clone();
    let direct = teacher.soft_predictions(&inputs, tau2).unwrap();
    assert!(rel_err(&teacher_probs, &direct) < 1e-12);

    let student = BoundModel::bind(&mut tape, &state, &base);
    let x = tape.leaf(inputs.clone());
    let f = student.features(&mut tape, x);
    let loss = distillation_on(&mut tape, f, student.base_rows, student.gamma, &teacher_probs, tau2);
    let grads = tape.backward(loss);
    assert!(!grads.touched(teacher_model.gamma) && !grads.touched(teacher_model.base_rows));
    assert!(teacher_model.theta.values().all(|v| !grads.touched(*v)));
    let value = |s: &ModelState, b: &Array2<f64>| distillation_loss(&inputs, (s, b), &teacher, tau2).unwrap().value;
    assert!((tape.scalar(loss) - value(&state, &base)).abs() < 1e-10);
    model_grad_error(&state, &base, &student.grads(&grads), value)
}

/// Runs `check` on `n` seeds and returns the worst error.
pub fn worst(n: u64, check: fn(u64) -> f64) -> f64 {
    (0..n).map(check).fold(0.0, f64::max)
}

