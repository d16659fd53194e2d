//! Episode scoring and multi-episode aggregation.
//!
//! Five accuracies are computed per episode: joint accuracy over all queries
//! (`acc_all_all`), base and novel queries against all classes (`acc_b_all`,
//! `acc_n_all`), and base and novel queries restricted to their own label
//! space (`acc_b_b`, `acc_n_n`). The degradations are
//! `delta_b = acc_b_all - acc_b_b`, `delta_n = acc_n_all - acc_n_n` and
//! `delta = (delta_b + delta_n) / 2`. Aggregates report means with 95%
//! confidence half-widths `1.96 * s / sqrt(E)`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::model::{cosine_classify, extract_features, ModelState};
use crate::sampler::{sample_test_episode, SamplerConfig};
use crate::types::{ClassifierWeights, DatasetBundle, Episode, EpisodeMode, PredictionMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub acc_all_all: f64,
    pub acc_b_all: f64,
    pub acc_n_all: f64,
    pub acc_b_b: f64,
    pub acc_n_n: f64,
    pub delta_b: f64,
    pub delta_n: f64,
    pub delta: f64,
}

pub const METRIC_NAMES: [&str; 8] =
    ["acc_all_all", "acc_b_all", "acc_n_all", "acc_b_b", "acc_n_n", "delta_b", "delta_n", "delta"];

impl EpisodeMetrics {
    /// Fills in the deltas from the five accuracies.
    pub fn from_accuracies(acc_all_all: f64, acc_b_all: f64, acc_n_all: f64, acc_b_b: f64, acc_n_n: f64) -> Self {
        let delta_b = acc_b_all - acc_b_b;
        let delta_n = acc_n_all - acc_n_n;
        Self {
            acc_all_all,
            acc_b_all,
            acc_n_all,
            acc_b_b,
            acc_n_n,
            delta_b,
            delta_n,
            delta: (delta_b + delta_n) / 2.0,
        }
    }

    /// Joint accuracy from the two per-pool accuracies for a query set whose
    /// base share is `base_fraction` (0.5 for balanced queries).
    pub fn from_pool_accuracies(acc_b_all: f64, acc_n_all: f64, acc_b_b: f64, acc_n_n: f64, base_fraction: f64) -> Self {
        let joint = base_fraction * acc_b_all + (1.0 - base_fraction) * acc_n_all;
        Self::from_accuracies(joint, acc_b_all, acc_n_all, acc_b_b, acc_n_n)
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.acc_all_all,
            self.acc_b_all,
            self.acc_n_all,
            self.acc_b_b,
            self.acc_n_n,
            self.delta_b,
            self.delta_n,
            self.delta,
        ]
    }

    fn from_values(v: [f64; 8]) -> Self {
        Self {
            acc_all_all: v[0],
            acc_b_all: v[1],
            acc_n_all: v[2],
            acc_b_b: v[3],
            acc_n_n: v[4],
            delta_b: v[5],
            delta_n: v[6],
            delta: v[7],
        }
    }
}

fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Scores one episode. `base_only` has `N_b` columns, `novel_only` has `N`.
/// Argmax ties go to the lowest column. A query pool with no members scores 0.
pub fn score_episode(
    joint: &PredictionMatrix,
    base_only: Option<&PredictionMatrix>,
    novel_only: Option<&PredictionMatrix>,
    episode: &Episode,
) -> Result<EpisodeMetrics> {
    let (base_only, novel_only) = match (base_only, novel_only) {
        (Some(b), Some(n)) => (b, n),
        _ => return Err(Error::Validation("restricted predictions are required".into())),
    };
    let nq = episode.query.len();
    let nb = episode.n_base;
    if joint.n_rows() != nq || base_only.n_rows() != nq || novel_only.n_rows() != nq {
        return Err(shape("prediction rows must match the query set"));
    }
    if joint.n_classes() != episode.n_classes()
        || base_only.n_classes() != nb
        || novel_only.n_classes() != episode.n_way()
    {
        return Err(shape("prediction columns must be N_b + N, N_b and N"));
    }
    let pj = joint.argmax();
    let pb = base_only.argmax();
    let pn = novel_only.argmax();
    let (mut hb, mut hn, mut hbb, mut hnn, mut cb, mut cn) = (0, 0, 0, 0, 0, 0);
    for (i, q) in episode.query.iter().enumerate() {
        let col = q.label as usize - 1;
        if col < nb {
            cb += 1;
            hb += usize::from(pj[i] == col);
            hbb += usize::from(pb[i] == col);
        } else {
            cn += 1;
            hn += usize::from(pj[i] == col);
            hnn += usize::from(pn[i] == col - nb);
        }
    }
    Ok(EpisodeMetrics::from_accuracies(
        ratio(hb + hn, nq),
        ratio(hb, cb),
        ratio(hn, cn),
        ratio(hbb, cb),
        ratio(hnn, cn),
    ))
}

/// Joint, base-only and novel-only cosine predictions for query features.
pub fn predict_restricted(
    query_features: &Array2<f64>,
    weights: &ClassifierWeights,
    gamma: f64,
) -> Result<[PredictionMatrix; 3]> {
    let joint = cosine_classify(query_features, weights, gamma)?;
    let base = PredictionMatrix::from_logits(&crate::model::cosine_logits(query_features, &weights.base, gamma));
    let novel = PredictionMatrix::from_logits(&crate::model::cosine_logits(query_features, &weights.novel, gamma));
    Ok([joint, base, novel])
}

/// Restricted predictions from a joint matrix by renormalizing column blocks.
pub fn restrict_joint(joint: &PredictionMatrix, n_base: usize) -> Result<[PredictionMatrix; 2]> {
    let p = joint.probs();
    let block = |lo: usize, hi: usize| -> Result<PredictionMatrix> {
        let mut b = p.slice(ndarray::s![.., lo..hi]).to_owned();
        for mut row in b.rows_mut() {
            let s: f64 = row.sum();
            if s > 0.0 {
                row /= s;
            } else {
                row.fill(1.0 / (hi - lo) as f64);
            }
        }
        PredictionMatrix::new(b)
    };
    Ok([block(0, n_base)?, block(n_base, p.ncols())?])
}

/// Classifies the episode's queries with `weights` and scores them.
pub fn score_model(state: &ModelState, weights: &ClassifierWeights, episode: &Episode) -> Result<EpisodeMetrics> {
    let f = extract_features(state, &episode.query_inputs())?;
    let [j, b, n] = predict_restricted(&f, weights, state.gamma)?;
    score_episode(&j, Some(&b), Some(&n), episode)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// 95% half-width; `None` with fewer than two episodes.
    pub ci95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub acc_all_all: MeanCi,
    pub acc_b_all: MeanCi,
    pub acc_n_all: MeanCi,
    pub acc_b_b: MeanCi,
    pub acc_n_n: MeanCi,
    pub delta_b: MeanCi,
    pub delta_n: MeanCi,
    pub delta: MeanCi,
    pub episodes: usize,
    pub stream_seed: u64,
    pub config_hash: String,
}

impl AggregateReport {
    pub fn fields(&self) -> [MeanCi; 8] {
        [
            self.acc_all_all,
            self.acc_b_all,
            self.acc_n_all,
            self.acc_b_b,
            self.acc_n_n,
            self.delta_b,
            self.delta_n,
            self.delta,
        ]
    }

    /// Mean metrics as an [`EpisodeMetrics`] value.
    pub fn means(&self) -> EpisodeMetrics {
        EpisodeMetrics::from_values(self.fields().map(|m| m.mean))
    }

    pub fn with_provenance(mut self, stream_seed: u64, config_hash: impl Into<String>) -> Self {
        self.stream_seed = stream_seed;
        self.config_hash = config_hash.into();
        self
    }
}

/// Per-field mean and 95% half-width over episodes.
pub fn aggregate(metrics: &[EpisodeMetrics]) -> Result<AggregateReport> {
    if metrics.is_empty() {
        return Err(Error::Validation("cannot aggregate an empty episode list".into()));
    }
    let e = metrics.len() as f64;
    let stat = |k: usize| -> MeanCi {
        let mean = metrics.iter().map(|m| m.values()[k]).sum::<f64>() / e;
        let ci95 = (metrics.len() >= 2).then(|| {
            let var = metrics.iter().map(|m| (m.values()[k] - mean).powi(2)).sum::<f64>() / (e - 1.0);
            1.96 * var.sqrt() / e.sqrt()
        });
        MeanCi { mean, ci95 }
    };
    Ok(AggregateReport {
        acc_all_all: stat(0),
        acc_b_all: stat(1),
        acc_n_all: stat(2),
        acc_b_b: stat(3),
        acc_n_n: stat(4),
        delta_b: stat(5),
        delta_n: stat(6),
        delta: stat(7),
        episodes: metrics.len(),
        stream_seed: 0,
        config_hash: String::new(),
    })
}

/// Runs `method` on episodes `0..n_episodes` of the test stream described by
/// `cfg`. Episodes are spread over `workers` threads by index and merged back
/// in index order, so the output does not depend on the worker count.
pub fn evaluate_stream<F>(
    bundle: &DatasetBundle,
    cfg: &SamplerConfig,
    n_episodes: usize,
    workers: usize,
    method: &F,
) -> Result<Vec<EpisodeMetrics>>
where
    F: Fn(&Episode) -> Result<EpisodeMetrics> + Sync,
{
    let run = |i: usize| -> Result<EpisodeMetrics> { method(&sample_test_episode(bundle, cfg, i as u64)?) };
    let workers = workers.clamp(1, n_episodes.max(1));
    if workers == 1 {
        return (0..n_episodes).map(run).collect();
    }
    let mut slots: Vec<Option<Result<EpisodeMetrics>>> = (0..n_episodes).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run = &run;
                scope.spawn(move || {
                    (w..n_episodes).step_by(workers).map(|i| (i, run(i))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every episode evaluated")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: (u32, u32),
    pub joint: MeanCi,
    /// Joint accuracy minus that of the 1:1 point.
    pub degradation: f64,
}

/// Evaluates `method` once per base:novel unlabeled ratio on the same episode
/// indices. The reference point is 1:1 if requested, otherwise the first ratio.
pub fn ratio_sweep<F>(
    bundle: &DatasetBundle,
    cfg: &SamplerConfig,
    ratios: &[(u32, u32)],
    n_episodes: usize,
    workers: usize,
    method: &F,
) -> Result<Vec<SweepRow>>
where
    F: Fn(&Episode) -> Result<EpisodeMetrics> + Sync,
{
    if cfg.spec.mode != EpisodeMode::SemiSupervised {
        return Err(Error::Config("ratio sweep needs semi-supervised episodes".into()));
    }
    if ratios.is_empty() {
        return Err(Error::Config("ratio sweep needs at least one ratio".into()));
    }
    let mut joint = Vec::with_capacity(ratios.len());
    for &(b, n) in ratios {
        let point = cfg.clone().with_ratio(b, n);
        let metrics = evaluate_stream(bundle, &point, n_episodes, workers, method)?;
        joint.push(aggregate(&metrics)?.acc_all_all);
    }
    let reference = ratios
        .iter()
        .position(|&(b, n)| b == n)
        .unwrap_or(0);
    let ref_acc = joint[reference].mean;
    Ok(ratios
        .iter()
        .zip(joint)
        .map(|(&ratio, j)| SweepRow { ratio, joint: j, degradation: j.mean - ref_acc })
        .collect())
}

/// Header of a results file.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsHeader {
    pub config_hash: String,
    pub stream_seed: u64,
}

/// Per-episode rows grouped by method, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub methods: Vec<(String, Vec<EpisodeMetrics>)>,
}

impl ResultsTable {
    pub fn push(&mut self, method: impl Into<String>, metrics: Vec<EpisodeMetrics>) {
        self.methods.push((method.into(), metrics));
    }

    pub fn get(&self, method: &str) -> Option<&[EpisodeMetrics]> {
        self.methods.iter().find(|(m, _)| m == method).map(|(_, v)| v.as_slice())
    }
}

fn fmt_ci(ci: Option<f64>) -> String {
    ci.map_or_else(|| "nan".to_string(), |c| format!("{c:.6}"))
}

/// Renders the comma-separated results format: `#` header lines with the
/// config hash and seed, one row per (method, episode), then a summary block.
pub fn render_results(header: &ResultsHeader, table: &ResultsTable) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "# incfsl-results v1");
    let _ = writeln!(out, "# config_hash={}", header.config_hash);
    let _ = writeln!(out, "# stream_seed={}", header.stream_seed);
    let _ = writeln!(out, "method,episode,{}", METRIC_NAMES.join(","));
    for (method, rows) in &table.methods {
        for (i, m) in rows.iter().enumerate() {
            let vals: Vec<String> = m.values().iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{method},{i},{}", vals.join(","));
        }
    }
    let _ = writeln!(out, "# summary");
    let cols: Vec<String> = METRIC_NAMES.iter().flat_map(|n| [format!("{n}_mean"), format!("{n}_ci95")]).collect();
    let _ = writeln!(out, "# method,episodes,{}", cols.join(","));
    for (method, rows) in &table.methods {
        let agg = aggregate(rows)?;
        let vals: Vec<String> = agg
            .fields()
            .iter()
            .flat_map(|f| [format!("{:.6}", f.mean), fmt_ci(f.ci95)])
            .collect();
        let _ = writeln!(out, "# {method},{},{}", agg.episodes, vals.join(","));
    }
    Ok(out)
}

pub fn write_results(path: &Path, header: &ResultsHeader, table: &ResultsTable) -> Result<()> {
    let text = render_results(header, table)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Parses a results file back into its header and per-episode rows.
pub fn read_results(text: &str) -> Result<(ResultsHeader, ResultsTable)> {
    let mut hash = None;
    let mut seed = None;
    let mut table = ResultsTable::default();
    let mut seen_columns = false;
    for (n, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some(h) = rest.strip_prefix("config_hash=") {
                hash = Some(h.to_string());
            } else if let Some(s) = rest.strip_prefix("stream_seed=") {
                seed = Some(s.parse::<u64>().map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?);
            }
            continue;
        }
        if !seen_columns {
            seen_columns = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 2 + METRIC_NAMES.len() {
            return Err(Error::Format(format!("line {}: expected {} fields", n + 1, 2 + METRIC_NAMES.len())));
        }
        let mut v = [0.0; 8];
        for (slot, p) in v.iter_mut().zip(&parts[2..]) {
            *slot = p.parse().map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        }
        let m = EpisodeMetrics::from_values(v);
        match table.methods.last_mut() {
            Some((name, rows)) if name == parts[0] => rows.push(m),
            _ => table.push(parts[0], vec![m]),
        }
    }
    match (hash, seed) {
        (Some(config_hash), Some(stream_seed)) => Ok((ResultsHeader { config_hash, stream_seed }, table)),
        _ => Err(Error::Format("results file lacks config hash or seed header".into())),
    }
}
