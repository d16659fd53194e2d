use incfsl::error::{Error, Result};
use incfsl::evaluation::EpisodeMetrics;
use incfsl::model::cosine_classify;
use incfsl::refinement::{refine_features, RefinementConfig};
use incfsl::types::{ClassId, ClassifierWeights};
use ndarray::Array2;

/// Flat `[x0, y0, x1, y1, ..]` to an `n x 2` matrix.
pub fn points(flat: &[f64]) -> Result<Array2<f64>> {
    if !flat.len().is_multiple_of(2) {
        return Err(Error::Shape(format!("{} coordinates do not form 2-D points", flat.len())));
    }
    Array2::from_shape_vec((flat.len() / 2, 2), flat.to_vec()).map_err(|e| Error::Shape(e.to_string()))
}

/// Base and novel point lists to `2 x N` column weights.
pub fn weights(base: &[f64], novel: &[f64]) -> Result<ClassifierWeights> {
    let b = points(base)?.reversed_axes();
    let n = points(novel)?.reversed_axes();
    if b.ncols() == 0 || n.ncols() == 0 {
        return Err(Error::Validation("the demo needs at least one base and one novel class".into()));
    }
    ClassifierWeights::new(b.as_standard_layout().to_owned(), n.as_standard_layout().to_owned())
}

pub fn classify(base: &[f64], novel: &[f64], at: [f64; 2], gamma: f64) -> Result<Vec<f64>> {
    let w = weights(base, novel)?;
    let f = Array2::from_shape_vec((1, 2), at.to_vec()).expect("one point");
    Ok(cosine_classify(&f, &w, gamma)?.into_inner().into_raw_vec_and_offset().0)
}

pub fn decision_grid(base: &[f64], novel: &[f64], gamma: f64, n: usize, extent: f64) -> Result<Vec<u32>> {
    let w = weights(base, novel)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let step = 2.0 * extent / n as f64;
    let cell = |i: usize| -extent + (i as f64 + 0.5) * step;
    let grid = Array2::from_shape_fn((n * n, 2), |(k, c)| if c == 0 { cell(k % n) } else { -cell(k / n) });
    Ok(cosine_classify(&grid, &w, gamma)?.argmax().into_iter().map(|k| k as u32).collect())
}

#[allow(clippy::too_many_arguments)]
pub fn refine_step(
    base: &[f64],
    novel: &[f64],
    support: &[f64],
    support_class: &[u32],
    unlabeled: &[f64],
    gamma: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    let w = weights(base, novel)?;
    let s = points(support)?;
    if s.nrows() != support_class.len() {
        return Err(Error::Shape("one class index per support point is required".into()));
    }
    let n_base = w.n_base();
    let labels: Vec<ClassId> = support_class.iter().map(|&c| (n_base + 1) as ClassId + c).collect();
    let cfg = RefinementConfig { n_steps: 1, alpha };
    let out = refine_features(&w, gamma, &points(unlabeled)?, &s, &labels, &cfg)?;
    Ok(out.weights.novel.t().iter().copied().collect())
}

pub fn metrics_json(acc_b_all: f64, acc_n_all: f64, acc_b_b: f64, acc_n_n: f64, base_fraction: f64) -> Result<String> {
    for v in [acc_b_all, acc_n_all, acc_b_b, acc_n_n, base_fraction] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!("{v} is not a fraction in [0, 1]")));
        }
    }
    let m = EpisodeMetrics::from_pool_accuracies(acc_b_all, acc_n_all, acc_b_b, acc_n_n, base_fraction);
    Ok(serde_json::to_string(&m)?)
}
