//! Randomized property checks. Each runs `cases` proptest cases and reports
//! the first failure as a string, so both `#[test]`s and the acceptance
//! runner can drive them.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

use incfsl::adaptation::{
    adapt_model, contrastive_loss, distillation_loss, mean_entropy, stacked_pairing, AdaptationConfig, TeacherSnapshot,
};
use incfsl::baselines::{
    fixmatch_adapt, label_propagation_predict, run_label_propagation, run_plain_pr, FixMatchConfig, GraphConfig,
};
use incfsl::evaluation::{aggregate, score_episode, score_model, EpisodeMetrics};
use incfsl::model::{compute_prototypes, cosine_classify, imprint_weights, sgd_step, ParamGrads};
use incfsl::refinement::{refine_features, refine_loop, RefinementConfig};
use incfsl::sampler::{sample_test_episode, SamplerConfig};
use incfsl::synth::{synthesize_dataset, SyntheticSpec};
use incfsl::training::episode_objective;
use incfsl::types::{ClassId, ClassifierWeights, DatasetBundle, EpisodeMode, EpisodeSpec, PredictionMatrix, SplitName, Stage};

use super::{episode, randn, random_episode, random_model, rng};

type Check = Result<(), String>;

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn weights(r: &mut impl Rng, d: usize, nb: usize, nn: usize) -> ClassifierWeights {
    ClassifierWeights::new(randn(r, d, nb), randn(r, d, nn)).unwrap()
}

/// Cosine-classifier rows are distributions, including with zero vectors.
pub fn softmax_normalization(cases: u32) -> Check {
    run(cases, (any::<u64>(), 1usize..8, 1usize..5, 1usize..4, 1usize..4, 1e-3f64..200.0), |(seed, n, d, nb, nn, gamma)| {
        let mut r = rng(seed);
        let mut f = randn(&mut r, n, d);
        let mut w = weights(&mut r, d, nb, nn);
        if seed % 3 == 0 {
            f.row_mut(0).fill(0.0);
            w.novel.column_mut(0).fill(0.0);
        }
        let p = cosine_classify(&f, &w, gamma).unwrap();
        for row in p.probs().rows() {
            prop_assert!(row.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
        Ok(())
    })
}

/// A vanishing scale gives uniform predictions.
pub fn small_scale_is_uniform(cases: u32) -> Check {
    run(cases, (any::<u64>(), 1usize..6, 1usize..5, 1usize..5), |(seed, n, d, c)| {
        let mut r = rng(seed);
        let f = randn(&mut r, n, d);
        let w = weights(&mut r, d, c, 1);
        let p = cosine_classify(&f, &w, 1e-6).unwrap();
        let u = 1.0 / (c + 1) as f64;
        prop_assert!(p.probs().iter().all(|v| (v - u).abs() < 1e-4));
        Ok(())
    })
}

/// Rescaling one feature row by a positive factor keeps every argmax.
pub fn argmax_scale_invariance(cases: u32) -> Check {
    run(cases, (any::<u64>(), 1usize..8, 1usize..5, 1e-3f64..1e3, 0.5f64..50.0), |(seed, n, d, c, gamma)| {
        let mut r = rng(seed);
        let f = randn(&mut r, n, d);
        let w = weights(&mut r, d, 3, 2);
        let row = r.random_range(0..n);
        let mut g = f.clone();
        g.row_mut(row).mapv_inplace(|v| v * c);
        let a = cosine_classify(&f, &w, gamma).unwrap();
        let b = cosine_classify(&g, &w, gamma).unwrap();
        prop_assert_eq!(a.argmax(), b.argmax());
        Ok(())
    })
}

/// Prototypes do not depend on the order of examples.
pub fn prototype_permutation_invariance(cases: u32) -> Check {
    run(cases, (any::<u64>(), 1usize..6, 1usize..5, 1usize..4), |(seed, n_way, k, d)| {
        let mut r = rng(seed);
        let f = randn(&mut r, n_way * k, d);
        let labels: Vec<ClassId> = (0..n_way * k).map(|i| (4 + i % n_way) as ClassId).collect();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut r);
        let g = f.select(Axis(0), &order);
        let l2: Vec<ClassId> = order.iter().map(|&i| labels[i]).collect();
        let a = compute_prototypes(&f, &labels, 3, n_way).unwrap();
        let b = compute_prototypes(&g, &l2, 3, n_way).unwrap();
        prop_assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
        Ok(())
    })
}

fn refine_case(seed: u64) -> (ClassifierWeights, Array2<f64>, Array2<f64>, Vec<ClassId>, f64, RefinementConfig) {
    let mut r = rng(seed);
    let d = r.random_range(1..5);
    let n_way = r.random_range(1..4);
    let k = r.random_range(1..3);
    let s = randn(&mut r, n_way * k, d);
    let labels: Vec<ClassId> = (0..n_way * k).map(|i| (3 + i % n_way) as ClassId).collect();
    let protos = compute_prototypes(&s, &labels, 2, n_way).unwrap();
    let w = ClassifierWeights::new(randn(&mut r, d, 2), protos).unwrap();
    let n_u = r.random_range(1..8);
    let u = randn(&mut r, n_u, d);
    let cfg = RefinementConfig { n_steps: r.random_range(1..4), alpha: r.random_range(0.05..1.0) };
    (w, u, s, labels, r.random_range(0.5..20.0), cfg)
}

/// Refined prototypes are convex combinations of support and unlabeled
/// features, so their norm is bounded by the largest feature norm.
pub fn prototype_convexity(cases: u32) -> Check {
    run(cases, any::<u64>(), |seed| {
        let (w, u, s, labels, gamma, cfg) = refine_case(seed);
        let out = refine_features(&w, gamma, &u, &s, &labels, &cfg).unwrap().weights;
        let bound = u.rows().into_iter().chain(s.rows()).map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
        for col in out.novel.columns() {
            prop_assert!(col.dot(&col).sqrt() <= bound * (1.0 + 1e-12) + 1e-12);
        }
        // Per coordinate the prototype stays inside the bounding box.
        for (k, col) in out.novel.rows().into_iter().enumerate() {
            let lo = u.column(k).iter().chain(s.column(k).iter()).cloned().fold(f64::INFINITY, f64::min);
            let hi = u.column(k).iter().chain(s.column(k).iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(col.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        }
        Ok(())
    })
}

/// Refinement leaves the base weights bit-identical.
pub fn base_weights_immutable(cases: u32) -> Check {
    run(cases, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let n_u = r.random_range(0..6);
        let ep = random_episode(&mut r, 3, n_u);
        let (state, base) = random_model(&mut r, 3, 2);
        let w = imprint_weights(&state, &base, &ep).unwrap();
        let before: Vec<u64> = w.base.iter().map(|v| v.to_bits()).collect();
        let cfg = RefinementConfig { n_steps: r.random_range(1..4), alpha: r.random_range(0.05..1.0) };
        let out = refine_loop(&state, &w, &ep, &cfg).unwrap().weights;
        let after: Vec<u64> = out.base.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(before, after);
        Ok(())
    })
}

/// Relabeling the novel classes permutes the refined prototypes accordingly.
pub fn refinement_permutation_equivariance(cases: u32) -> Check {
    run(cases, any::<u64>(), |seed| {
        let (w, u, s, labels, gamma, cfg) = refine_case(seed);
        let n_way = w.n_novel();
        let mut perm: Vec<usize> = (0..n_way).collect();
        perm.shuffle(&mut rng(seed ^ 1));
        let labels2: Vec<ClassId> = labels.iter().map(|&l| (3 + perm[l as usize - 3]) as ClassId).collect();
        let mut novel2 = w.novel.clone();
        for j in 0..n_way {
            novel2.column_mut(perm[j]).assign(&w.novel.column(j));
        }
        let w2 = ClassifierWeights::new(w.base.clone(), novel2).unwrap();
        let a = refine_features(&w, gamma, &u, &s, &labels, &cfg).unwrap().weights;
        let b = refine_features(&w2, gamma, &u, &s, &labels2, &cfg).unwrap().weights;
        for j in 0..n_way {
            let diff = &a.novel.column(j) - &b.novel.column(perm[j]);
            prop_assert!(diff.iter().all(|v| v.abs() < 1e-10));
        }
        Ok(())
    })
}

fn quick_adaptation(seed: u64) -> AdaptationConfig {
    AdaptationConfig { steps: 2, lr: 0.05, batch_size: 4, seed, ..AdaptationConfig::default() }
}

/// Adaptation never modifies the model it starts from, so the teacher taken
/// from it is identical before and after.
pub fn teacher_immutable(cases: u32) -> Check {
    run(cases, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let n_u = r.random_range(1..6);
        let ep = random_episode(&mut r, 3, n_u);
        let (state, base) = random_model(&mut r, 3, 2);
        let before = TeacherSnapshot::capture(&state, &base);
        let bits = |s: &TeacherSnapshot| -> Vec<u64> {
            s.model().theta.values().flat_map(|t| t.iter().map(|v| v.to_bits())).chain(s.base_weights().iter().map(|v| v.to_bits())).chain([s.gamma().to_bits()]).collect()
        };
        let adapted = adapt_model(&state, &base, &ep, &quick_adaptation(seed)).unwrap();
        prop_assert!(!adapted.fell_back);
        prop_assert!(adapted.base != base || adapted.state != state);
        let after = TeacherSnapshot::capture(&state, &base);
        prop_assert_eq!(bits(&before), bits(&after));
        Ok(())
    })
}

/// No learning or scoring path reads the hidden labels of the unlabeled set.
pub fn label_guard_zero_access(cases: u32) -> Check {
    run(cases, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let n_u = r.random_range(1..6);
        let ep = random_episode(&mut r, 3, n_u);
        let (state, base) = random_model(&mut r, 3, 2);
        let refine = RefinementConfig::default();
        episode_objective(&state, &base, &ep, Some((&refine, false))).unwrap();
        run_plain_pr(&state, &base, &ep, &refine).unwrap();
        adapt_model(&state, &base, &ep, &quick_adaptation(seed)).unwrap();
        let fm = FixMatchConfig { steps: 2, threshold: 0.3, ..FixMatchConfig::default() };
        fixmatch_adapt(&state, &base, &ep, &fm).unwrap();
        run_label_propagation(&state, &base, &ep, &GraphConfig::default()).unwrap();
        score_model(&state, &imprint_weights(&state, &base, &ep).unwrap(), &ep).unwrap();
        prop_assert_eq!(ep.unlabeled.oracle_reads(), 0);
        Ok(())
    })
}

fn random_rotation(r: &mut impl Rng, d: usize) -> Array2<f64> {
    let a = randn(r, d, d);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = a.column(j).to_owned();
        for k in 0..j {
            let p = q.column(k).dot(&v);
            v = &v - &(&q.column(k) * p);
        }
        let n = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / n));
    }
    q
}

/// The contrastive loss only sees cosines, so a global rotation of all view
/// features leaves it unchanged.
pub fn contrastive_rotation_invariance(cases: u32) -> Check {
    run(cases, (any::<u64>(), 1usize..6, 2usize..6, 0.1f64..2.0), |(seed, b, d, tau1)| {
        let mut r = rng(seed);
        let x = randn(&mut r, 2 * b, d);
        let q = random_rotation(&mut r, d);
        let pairing = stacked_pairing(b);
        let a = contrastive_loss(&x, &pairing, tau1).unwrap();
        let c = contrastive_loss(&x.dot(&q), &pairing, tau1).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - c).abs() < 1e-9 * a.abs().max(1.0));
        Ok(())
    })
}

/// Distillation is bounded below by the teacher entropy, with equality for a
/// student identical to the teacher.
pub fn distillation_entropy_bound(cases: u32) -> Check {
    run(cases, (any::<u64>(), 0.5f64..8.0), |(seed, tau2)| {
        let mut r = rng(seed);
        let (s, sb) = random_model(&mut r, 3, 4);
        let (t, tb) = random_model(&mut r, 3, 4);
        let teacher = TeacherSnapshot::capture(&t, &tb);
        let x = randn(&mut r, 6, 3);
        let h = mean_entropy(&teacher.soft_predictions(&x, tau2).unwrap());
        let l = distillation_loss(&x, (&s, &sb), &teacher, tau2).unwrap().value;
        prop_assert!(l - h >= -1e-12);
        let same = distillation_loss(&x, (&t, &tb), &teacher, tau2).unwrap().value;
        prop_assert!((same - h).abs() <= 1e-8);
        Ok(())
    })
}

/// Label propagation query rows are distributions.
pub fn propagation_rows_are_distributions(cases: u32) -> Check {
    run(cases, (any::<u64>(), 0usize..6, 1usize..6, 0.05f64..3.0, 0.05f64..0.95), |(seed, n_u, n_q, sigma, lambda)| {
        let mut r = rng(seed);
        let d = r.random_range(2..5);
        let (nb, nn) = (r.random_range(1..4), r.random_range(1..4));
        let w = weights(&mut r, d, nb, nn);
        let u = randn(&mut r, n_u, d);
        let q = randn(&mut r, n_q, d);
        let k = if seed % 2 == 0 { None } else { Some(r.random_range(1..4)) };
        let cfg = GraphConfig { sigma, lambda, iterations: r.random_range(1..30), k_neighbors: k };
        let out = label_propagation_predict(&w, &u, &q, 10.0, &cfg).unwrap();
        for row in out.predictions.probs().rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
        Ok(())
    })
}

fn random_metrics(r: &mut impl Rng) -> EpisodeMetrics {
    EpisodeMetrics::from_accuracies(r.random(), r.random(), r.random(), r.random(), r.random())
}

/// Aggregation does not depend on episode order.
pub fn aggregation_permutation_invariance(cases: u32) -> Check {
    run(cases, (any::<u64>(), 1usize..40), |(seed, n)| {
        let mut r = rng(seed);
        let m: Vec<EpisodeMetrics> = (0..n).map(|_| random_metrics(&mut r)).collect();
        let mut p = m.clone();
        p.shuffle(&mut r);
        let a = aggregate(&m).unwrap();
        let b = aggregate(&p).unwrap();
        for (x, y) in a.fields().iter().zip(b.fields().iter()) {
            prop_assert!((x.mean - y.mean).abs() < 1e-12);
            match (x.ci95, y.ci95) {
                (Some(u), Some(v)) => prop_assert!((u - v).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "CI presence differs"),
            }
        }
        Ok(())
    })
}

/// Metric identities, and the balanced-query identity for scored episodes.
pub fn metric_identities(cases: u32) -> Check {
    run(cases, (any::<u64>(), 1usize..8), |(seed, half)| {
        let mut r = rng(seed);
        let m = random_metrics(&mut r);
        prop_assert_eq!(m.delta_b, m.acc_b_all - m.acc_b_b);
        prop_assert_eq!(m.delta_n, m.acc_n_all - m.acc_n_n);
        prop_assert_eq!(m.delta, (m.delta_b + m.delta_n) / 2.0);

        let mut labels: Vec<ClassId> = (0..half).map(|_| r.random_range(1..=2)).collect();
        labels.extend((0..half).map(|_| r.random_range(3..=4) as ClassId));
        let ep = episode(2, 2, vec![(vec![1.0], 3), (vec![1.0], 4)], labels.iter().map(|&l| (vec![0.0], l)).collect(), vec![]);
        let pm = |c: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let raw = Array2::from_shape_fn((2 * half, c), |_| r.random::<f64>() + 1e-3);
            let s = raw.sum_axis(Axis(1)).insert_axis(Axis(1));
            PredictionMatrix::new(&raw / &s).unwrap()
        };
        let (j, b, n) = (pm(4, &mut r), pm(2, &mut r), pm(2, &mut r));
        let s = score_episode(&j, Some(&b), Some(&n), &ep).unwrap();
        prop_assert!((s.acc_all_all - (s.acc_b_all + s.acc_n_all) / 2.0).abs() < 1e-15);
        prop_assert!(ep.unlabeled.oracle_reads() == 0);
        Ok(())
    })
}

/// One plain gradient step moves each block by at most `eta * |grad|`.
pub fn sgd_step_is_bounded(cases: u32) -> Check {
    run(cases, (any::<u64>(), 0.0f64..1.0, 0.0f64..1.0), |(seed, eta1, eta2)| {
        let mut r = rng(seed);
        let (state, base) = random_model(&mut r, 3, 2);
        let mut g = ParamGrads::zeros_like(&state, &base);
        for t in g.theta.values_mut() {
            *t = randn(&mut r, t.nrows(), t.ncols());
        }
        g.gamma = r.random_range(-50.0..50.0);
        g.base = randn(&mut r, base.nrows(), base.ncols());
        let (mut s, mut b) = (state.clone(), base.clone());
        sgd_step(&mut s, &mut b, &g, eta1, eta2);
        let norm = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (k, t) in &s.theta {
            prop_assert!(norm(&(t - &state.theta[k])) <= eta1 * norm(&g.theta[k]) * (1.0 + 1e-12) + 1e-15);
        }
        prop_assert!((s.gamma - state.gamma).abs() <= eta1 * g.gamma.abs() * (1.0 + 1e-12) + 1e-15);
        prop_assert!(s.gamma > 0.0);
        prop_assert!(norm(&(&b - &base)) <= eta2 * norm(&g.base) * (1.0 + 1e-12) + 1e-15);
        Ok(())
    })
}

/// FixMatch with an unreachable threshold and no supervised term is a no-op.
pub fn fixmatch_unit_threshold_is_noop(cases: u32) -> Check {
    run(cases, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let n_u = r.random_range(1..6);
        let ep = random_episode(&mut r, 3, n_u);
        let (state, base) = random_model(&mut r, 3, 2);
        let cfg = FixMatchConfig { threshold: 1.0, supervised_weight: 0.0, steps: 3, lr: 0.5, seed, ..FixMatchConfig::default() };
        let (s, b) = fixmatch_adapt(&state, &base, &ep, &cfg).unwrap();
        prop_assert_eq!(s, state);
        prop_assert_eq!(b, base);
        Ok(())
    })
}

pub fn sampler_bundle() -> DatasetBundle {
    let spec = SyntheticSpec { n_base_classes: 6, n_novel_classes: 6, input_dim: 3, base_per_class: [20, 5, 40], novel_per_class: [70, 70, 70], ..SyntheticSpec::default() };
    synthesize_dataset(&spec, 3).unwrap()
}

/// Stratified support, exact query composition, disjoint sources and an
/// invertible label map, for any index, mode and ratio.
pub fn sampler_invariants(cases: u32) -> Check {
    let bundle = sampler_bundle();
    run(cases, (any::<u64>(), 0u64..10_000, 1usize..=5, 0usize..3, 0u32..4, 0u32..4), |(seed, index, k, mode, rb, rn)| {
        let mode = [EpisodeMode::Inductive, EpisodeMode::Transductive, EpisodeMode::SemiSupervised][mode];
        let (rb, rn) = if rb + rn == 0 { (1, 1) } else { (rb, rn) };
        let mut spec = EpisodeSpec::standard(k, mode, seed);
        spec.n_unlabeled_novel = 40;
        spec.n_unlabeled_base = 40;
        let cfg = SamplerConfig::new(spec, Stage::Test).with_ratio(rb, rn);
        let ep = sample_test_episode(&bundle, &cfg, index).unwrap();
        let nb = ep.n_base;
        for j in 0..ep.n_way() {
            let c = ep.support.iter().filter(|e| e.label as usize == nb + 1 + j).count();
            prop_assert_eq!(c, k);
        }
        prop_assert_eq!(ep.query.iter().filter(|e| (e.label as usize) > nb).count(), 75);
        prop_assert_eq!(ep.query.iter().filter(|e| (e.label as usize) <= nb).count(), 75);
        let refs = |v: &[incfsl::types::SourceRef]| v.iter().map(|s| (s.split, s.index)).collect::<BTreeSet<(SplitName, usize)>>();
        let (s, q, u) = (refs(&ep.sources.support), refs(&ep.sources.query), refs(&ep.sources.unlabeled));
        prop_assert_eq!(s.len(), ep.support.len());
        prop_assert_eq!(q.len(), ep.query.len());
        prop_assert!(s.is_disjoint(&q));
        prop_assert!(s.is_disjoint(&u));
        if mode == EpisodeMode::Transductive {
            prop_assert_eq!(&u, &q);
        } else {
            prop_assert!(q.is_disjoint(&u));
            prop_assert_eq!(u.len(), ep.unlabeled.len());
        }
        for (orig, lab) in ep.label_map.iter() {
            prop_assert_eq!(ep.label_map.inverse(lab), Some(orig));
        }
        Ok(())
    })
}

/// Every named property with its check, in reporting order.
pub type Property = fn(u32) -> Check;

pub const ALL: [(&str, Property); 18] = [
    ("softmax normalization", softmax_normalization),
    ("uniform predictions at vanishing scale", small_scale_is_uniform),
    ("argmax scale invariance", argmax_scale_invariance),
    ("prototype permutation invariance", prototype_permutation_invariance),
    ("prototype convexity", prototype_convexity),
    ("base weights immutable under refinement", base_weights_immutable),
    ("refinement permutation equivariance", refinement_permutation_equivariance),
    ("teacher immutable under adaptation", teacher_immutable),
    ("label guard zero access", label_guard_zero_access),
    ("contrastive rotation invariance", contrastive_rotation_invariance),
    ("distillation entropy bound", distillation_entropy_bound),
    ("propagation rows are distributions", propagation_rows_are_distributions),
    ("aggregation permutation invariance", aggregation_permutation_invariance),
    ("metric identities", metric_identities),
    ("plain gradient step bound", sgd_step_is_bounded),
    ("unit-threshold consistency is a no-op", fixmatch_unit_threshold_is_noop),
    ("sampler invariants", sampler_invariants),
    ("prediction matrices from logits", prediction_rows_from_logits),
];

/// `PredictionMatrix::from_logits` rows are distributions even for extreme logits.
pub fn prediction_rows_from_logits(cases: u32) -> Check {
    run(cases, (any::<u64>(), 1usize..6, 1usize..6, 1e-3f64..1e3), |(seed, n, c, scale)| {
        let mut r = rng(seed);
        let p = PredictionMatrix::from_logits(&(randn(&mut r, n, c) * scale));
        for row in p.probs().rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
        Ok(())
    })
}
