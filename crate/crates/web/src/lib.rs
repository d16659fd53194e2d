//! Browser bindings for the interactive demo page in `www/`.
//!
//! Points and weight vectors cross the boundary as flat `[x0, y0, x1, y1, ..]`
//! arrays. The plain functions in [`demo`] carry the logic and are what the
//! native tests exercise; the exported wrappers only convert errors.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: incfsl::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Class probabilities of the 2-D point `(x, y)` against base weights and
/// novel prototypes, at scale `gamma`.
#[wasm_bindgen]
pub fn classify(base: &[f64], novel: &[f64], x: f64, y: f64, gamma: f64) -> Result<Vec<f64>, JsError> {
    demo::classify(base, novel, [x, y], gamma).map_err(js)
}

/// Winning class index per cell of an `n x n` grid over `[-extent, extent]^2`,
/// row by row from the top.
#[wasm_bindgen]
pub fn decision_grid(base: &[f64], novel: &[f64], gamma: f64, n: usize, extent: f64) -> Result<Vec<u32>, JsError> {
    demo::decision_grid(base, novel, gamma, n, extent).map_err(js)
}

/// One refinement step of the novel prototypes using the support points
/// (with their novel class indices) and the unlabeled points.
#[wasm_bindgen]
pub fn refine_step(
    base: &[f64],
    novel: &[f64],
    support: &[f64],
    support_class: &[u32],
    unlabeled: &[f64],
    gamma: f64,
    alpha: f64,
) -> Result<Vec<f64>, JsError> {
    demo::refine_step(base, novel, support, support_class, unlabeled, gamma, alpha).map_err(js)
}

/// Degradation metrics from the four restricted/joint accuracies, as JSON.
#[wasm_bindgen]
pub fn metrics(acc_b_all: f64, acc_n_all: f64, acc_b_b: f64, acc_n_n: f64, base_fraction: f64) -> Result<String, JsError> {
    demo::metrics_json(acc_b_all, acc_n_all, acc_b_b, acc_n_n, base_fraction).map_err(js)
}
