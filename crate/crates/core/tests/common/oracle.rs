//! Straight-line reimplementations on plain vectors, used as independent
//! references on tiny instances.

use ndarray::Array2;
use rand::Rng;

use incfsl::baselines::{label_propagation_predict, GraphConfig};
use incfsl::evaluation::{score_episode, EpisodeMetrics};
use incfsl::model::ExtractorSpec;
use incfsl::refinement::{refine_loop, RefinementConfig};
use incfsl::types::{ClassId, ClassifierWeights, Episode, PredictionMatrix};

use super::{episode, randv, rng};

type V = Vec<f64>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt().max(1e-12) * dot(b, b).sqrt().max(1e-12))
}

fn softmax(z: &[f64]) -> V {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: V = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Refinement with explicit loops. `support` pairs a feature with its novel
/// column `0..N`.
pub fn brute_refine(
    base: &[V],
    protos: &[V],
    gamma: f64,
    unlabeled: &[V],
    support: &[(V, usize)],
    n_steps: usize,
    alpha: f64,
) -> Vec<V> {
    let d = base[0].len();
    let mut p: Vec<V> = protos.to_vec();
    for _ in 0..n_steps {
        let mut columns: Vec<V> = base.to_vec();
        columns.extend(p.iter().cloned());
        let mut fresh = Vec::new();
        for j in 0..p.len() {
            let mut num = vec![0.0; d];
            let mut den = 0.0;
            for u in unlabeled {
                let logits: V = columns.iter().map(|w| gamma * cos(u, w)).collect();
                let y = softmax(&logits)[base.len() + j];
                for k in 0..d {
                    num[k] += y * u[k];
                }
                den += y;
            }
            for (s, c) in support {
                if *c == j {
                    for k in 0..d {
                        num[k] += s[k];
                    }
                    den += 1.0;
                }
            }
            fresh.push(num.iter().map(|v| v / den).collect::<V>());
        }
        p = p.iter().zip(&fresh).map(|(o, n)| o.iter().zip(n).map(|(a, b)| alpha * b + (1.0 - alpha) * a).collect()).collect();
    }
    p
}

fn cols(vs: &[V]) -> Array2<f64> {
    Array2::from_shape_fn((vs[0].len(), vs.len()), |(i, j)| vs[j][i])
}

/// Tiny refinement instance (d = 2, two base and two novel classes) checked
/// through `refine_loop` with an identity extractor. Returns the max error.
pub fn refine_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let base: Vec<V> = (0..2).map(|_| randv(&mut r, 2)).collect();
    let support: Vec<(V, usize)> = (0..2).map(|j| (randv(&mut r, 2), j)).collect();
    let n_u = r.random_range(1..6);
    let unlabeled: Vec<V> = (0..n_u).map(|_| randv(&mut r, 2)).collect();
    let gamma = r.random_range(1.0..10.0);
    let cfg = RefinementConfig { n_steps: r.random_range(1..4), alpha: r.random_range(0.2..1.0) };

    let ep = episode(
        2,
        2,
        support.iter().map(|(x, j)| (x.clone(), 3 + *j as ClassId)).collect(),
        vec![],
        unlabeled.iter().map(|x| (x.clone(), 1)).collect(),
    );
    let state = incfsl::model::ModelState::init(ExtractorSpec::identity(2), gamma, 0).unwrap();
    let protos: Vec<V> = support.iter().map(|(x, _)| x.clone()).collect();
    let w = ClassifierWeights::new(cols(&base), cols(&protos)).unwrap();
    let got = refine_loop(&state, &w, &ep, &cfg).unwrap().weights;
    assert_eq!(got.base, w.base);
    let want = brute_refine(&base, &protos, gamma, &unlabeled, &support, cfg.n_steps, cfg.alpha);
    let want = cols(&want);
    (&got.novel - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Solves `a x = b` for every column of `b` by Gaussian elimination with
/// partial pivoting.
pub fn solve(a: &[V], b: &[V]) -> Vec<V> {
    let n = a.len();
    let mut m: Vec<V> = a.iter().zip(b).map(|(r, y)| r.iter().chain(y).cloned().collect()).collect();
    let w = m[0].len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        for i in 0..n {
            if i != c {
                let f = m[i][c] / m[c][c];
                for k in c..w {
                    m[i][k] -= f * m[c][k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n..].iter().map(|v| v / m[i][i]).collect()).collect()
}

fn affinity(vertices: &[V], sigma: f64) -> Vec<V> {
    let n = vertices.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dist = 1.0 - cos(&vertices[i], &vertices[j]);
                a[i][j] = (-dist * dist / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let deg: V = a.iter().map(|r| r.iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i][j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    a
}

/// Closed-form propagation fixed point `(1 - lambda)(I - lambda S)^-1 Y`,
/// query rows normalized.
pub fn brute_lp_fixed_point(labeled: &[V], unlabeled: &[V], query: &[V], sigma: f64, lambda: f64) -> Vec<V> {
    let mut vertices = labeled.to_vec();
    vertices.extend(unlabeled.iter().cloned());
    vertices.extend(query.iter().cloned());
    let n = vertices.len();
    let c = labeled.len();
    let s = affinity(&vertices, sigma);
    let a: Vec<V> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j)) - lambda * s[i][j]).collect()).collect();
    let y: Vec<V> = (0..n).map(|i| (0..c).map(|k| (1.0 - lambda) * f64::from(u8::from(i == k))).collect()).collect();
    let f = solve(&a, &y);
    f[n - query.len()..]
        .iter()
        .map(|row| {
            let t: f64 = row.iter().sum();
            row.iter().map(|v| v / t).collect()
        })
        .collect()
}

/// Finite propagation `F <- lambda S F + (1 - lambda) Y` from `F = Y`.
pub fn brute_lp_iterated(labeled: &[V], unlabeled: &[V], query: &[V], sigma: f64, lambda: f64, iterations: usize) -> Vec<V> {
    let mut vertices = labeled.to_vec();
    vertices.extend(unlabeled.iter().cloned());
    vertices.extend(query.iter().cloned());
    let n = vertices.len();
    let c = labeled.len();
    let s = affinity(&vertices, sigma);
    let y: Vec<V> = (0..n).map(|i| (0..c).map(|k| f64::from(u8::from(i == k))).collect()).collect();
    let mut f = y.clone();
    for _ in 0..iterations {
        let mut next = vec![vec![0.0; c]; n];
        for i in 0..n {
            for k in 0..c {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += s[i][j] * f[j][k];
                }
                next[i][k] = lambda * acc + (1.0 - lambda) * y[i][k];
            }
        }
        f = next;
    }
    f[n - query.len()..]
        .iter()
        .map(|row| {
            let t: f64 = row.iter().sum();
            row.iter().map(|v| v / t).collect()
        })
        .collect()
}

/// Label propagation on d = 2 with four weight columns, up to three unlabeled
/// and up to three query points, against both the iterated and the
/// closed-form references.
pub fn lp_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let labeled: Vec<V> = (0..4).map(|_| randv(&mut r, 2)).collect();
    let unlabeled: Vec<V> = (0..r.random_range(0..4)).map(|_| randv(&mut r, 2)).collect();
    let query: Vec<V> = (0..r.random_range(1..4)).map(|_| randv(&mut r, 2)).collect();
    let sigma = r.random_range(0.5..2.0);
    let lambda = r.random_range(0.1..0.9);
    let to_rows = |vs: &[V]| Array2::from_shape_fn((vs.len(), 2), |(i, j)| vs[i][j]);
    let w = ClassifierWeights::new(cols(&labeled[..2]), cols(&labeled[2..])).unwrap();
    let u = if unlabeled.is_empty() { Array2::zeros((0, 2)) } else { to_rows(&unlabeled) };
    let q = to_rows(&query);

    let iters = 15;
    let cfg = GraphConfig { sigma, lambda, iterations: iters, k_neighbors: None };
    let got = label_propagation_predict(&w, &u, &q, 5.0, &cfg).unwrap();
    let want = brute_lp_iterated(&labeled, &unlabeled, &query, sigma, lambda, iters);
    let mut err = max_diff(got.predictions.probs(), &want);

    let cfg = GraphConfig { sigma, lambda, iterations: 400, k_neighbors: None };
    let got = label_propagation_predict(&w, &u, &q, 5.0, &cfg).unwrap();
    let want = brute_lp_fixed_point(&labeled, &unlabeled, &query, sigma, lambda);
    err = err.max(max_diff(got.predictions.probs(), &want));
    err
}

fn max_diff(a: &Array2<f64>, b: &[V]) -> f64 {
    let mut m = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((a[[i, j]] - v).abs());
        }
    }
    m
}

fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Counting reference for the five accuracies.
pub fn brute_score(joint: &[V], base: &[V], novel: &[V], labels: &[ClassId], n_base: usize) -> [f64; 5] {
    let (mut hb, mut hn, mut hbb, mut hnn, mut cb, mut cn) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..labels.len() {
        let truth = labels[i] as usize - 1;
        let is_base = truth < n_base;
        let hit_joint = argmax_first(&joint[i]) == truth;
        if is_base {
            cb += 1.0;
            if hit_joint {
                hb += 1.0;
            }
            if argmax_first(&base[i]) == truth {
                hbb += 1.0;
            }
        } else {
            cn += 1.0;
            if hit_joint {
                hn += 1.0;
            }
            if argmax_first(&novel[i]) + n_base == truth {
                hnn += 1.0;
            }
        }
    }
    let frac = |h: f64, c: f64| if c > 0.0 { h / c } else { 0.0 };
    [frac(hb + hn, cb + cn), frac(hb, cb), frac(hn, cn), frac(hbb, cb), frac(hnn, cn)]
}

fn random_rows(r: &mut impl Rng, n: usize, c: usize, ties: bool) -> Vec<V> {
    (0..n)
        .map(|_| {
            // Coarse values make argmax ties common.
            let raw: V = (0..c).map(|_| if ties { f64::from(r.random_range(0..3u8)) + 0.1 } else { r.random::<f64>() + 0.01 }).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Random query episode scored by `score_episode` and by counting. Returns
/// whether all five accuracies agree exactly, and the metrics.
pub fn score_instance(seed: u64) -> (bool, EpisodeMetrics) {
    let mut r = rng(seed);
    let n_q = r.random_range(1..=10);
    let labels: Vec<ClassId> = (0..n_q).map(|_| r.random_range(1..=4)).collect();
    let ties = seed.is_multiple_of(2);
    let joint = random_rows(&mut r, n_q, 4, ties);
    let base = random_rows(&mut r, n_q, 2, ties);
    let novel = random_rows(&mut r, n_q, 2, ties);
    let ep: Episode = episode(
        2,
        2,
        vec![(vec![1.0, 0.0], 3), (vec![0.0, 1.0], 4)],
        labels.iter().map(|&l| (vec![0.0, 0.0], l)).collect(),
        vec![],
    );
    let pm = |v: &[V]| PredictionMatrix::new(Array2::from_shape_fn((v.len(), v[0].len()), |(i, j)| v[i][j])).unwrap();
    let m = score_episode(&pm(&joint), Some(&pm(&base)), Some(&pm(&novel)), &ep).unwrap();
    let want = brute_score(&joint, &base, &novel, &labels, 2);
    let got = [m.acc_all_all, m.acc_b_all, m.acc_n_all, m.acc_b_b, m.acc_n_n];
    (got == want, m)
}
