//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each exported function has a plain Rust counterpart so the logic is tested
//! natively; the wasm wrappers only convert arguments and results.

use dive_core::distill::{supervision_mass, weighted_ce, SupervisionMass};
use dive_core::evalkit::{fit_lin_quad_ratio, CostModel};
use dive_core::lexicon::{mark_decisive, MaskPair, WeightProfile};
use dive_core::pipeline::stages::task_lexicon;
use dive_core::pipeline::RunConfig;
use dive_core::steering::inject;
use dive_core::synthtask::{make_splits, EOS};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Reference points the cost proxy is fitted to: prompt tokens and relative cost.
pub const COST_POINTS: [(usize, f64); 5] = [(413, 1.00), (724, 1.77), (1036, 2.56), (1665, 4.22), (2913, 7.69)];

/// Injection of `delta` into `h` in two dimensions. Returns
/// `[x, y, unclipped_x, unclipped_y, factor]`.
pub fn clip_point(h: [f64; 2], delta: [f64; 2], rho: f64) -> [f64; 5] {
    let out = inject(&h, &delta, rho, 1.0);
    let raw = [h[0] + delta[0], h[1] + delta[1]];
    let raw_norm = raw[0].hypot(raw[1]);
    let factor = if raw_norm == 0.0 { 1.0 } else { out[0].hypot(out[1]) / raw_norm };
    [out[0], out[1], raw[0], raw[1], factor]
}

/// Masks of the first `n` distill cases of the default task at `seed`.
pub fn sample_masks(n: usize, seed: u64) -> Result<Vec<MaskPair>, String> {
    let mut cfg = RunConfig::default();
    cfg.task.seed = seed;
    cfg.task.sizes.distill = n.max(1);
    cfg.task.sizes.pool = 1;
    cfg.task.sizes.val = 1;
    cfg.task.sizes.test = 1;
    let splits = make_splits(&cfg.task).map_err(|e| e.to_string())?;
    let lex = task_lexicon(&cfg).map_err(|e| e.to_string())?;
    splits
        .distill
        .iter()
        .map(|c| mark_decisive(&c.report, &c.labels, &lex.matcher, EOS).map_err(|e| e.to_string()))
        .collect()
}

fn mass_json(m: &SupervisionMass) -> serde_json::Value {
    json!({
        "template": m.template,
        "path": m.path,
        "eos": m.eos,
        "total": m.total(),
        "decisive_share": m.decisive_share(),
    })
}

/// Supervision masses under `(path_w, eos_w)` and under uniform weights.
pub fn mass_report(masks: &[MaskPair], path_w: f64, eos_w: f64) -> serde_json::Value {
    let profile = WeightProfile { path: path_w, eos: eos_w };
    json!({
        "cases": masks.len(),
        "weighted": mass_json(&supervision_mass(masks, &profile)),
        "uniform": mass_json(&supervision_mass(masks, &WeightProfile::UNIFORM)),
    })
}

/// Weighted CE of per-token losses. `kinds` marks each token as template (0),
/// path (1) or EOS (2).
pub fn weighted_ce_of(ces: &[f64], kinds: &[u8], path_w: f64, eos_w: f64) -> Result<f64, String> {
    if ces.len() != kinds.len() {
        return Err(format!("{} losses but {} kinds", ces.len(), kinds.len()));
    }
    // a two-class row with logits (0, ln(e^c − 1)) has CE c for target 0
    let rows: Vec<Vec<f64>> = ces.iter().map(|&c| vec![0.0, c.exp_m1().ln()]).collect();
    let weights: Vec<f64> = kinds
        .iter()
        .map(|k| match k {
            1 => path_w,
            2 => eos_w,
            _ => 1.0,
        })
        .collect();
    weighted_ce(&rows, &vec![0; ces.len()], &weights).map_err(|e| e.to_string())
}

/// `points` samples of the cost ratio over `[n0, n_max]`, as `[n, ratio]` pairs.
pub fn ratio_curve(lin_over_quad: f64, n0: usize, n_max: usize, points: usize) -> Vec<[f64; 2]> {
    let Ok(model) = CostModel::new(lin_over_quad, 1.0) else {
        return Vec::new();
    };
    let points = points.max(2);
    (0..points)
        .filter_map(|i| {
            let n = n0 + (n_max.saturating_sub(n0)) * i / (points - 1);
            model.ratio(n, n0).ok().map(|r| [n as f64, r])
        })
        .collect()
}

#[wasm_bindgen(js_name = clipPoint)]
pub fn clip_point_js(hx: f64, hy: f64, dx: f64, dy: f64, rho: f64) -> Vec<f64> {
    clip_point([hx, hy], [dx, dy], rho).to_vec()
}

/// Mass report as a JSON string.
#[wasm_bindgen(js_name = supervisionMass)]
pub fn supervision_mass_js(path_w: f64, eos_w: f64, cases: usize, seed: u64) -> Result<String, JsError> {
    let masks = sample_masks(cases, seed).map_err(|e| JsError::new(&e))?;
    Ok(mass_report(&masks, path_w, eos_w).to_string())
}

#[wasm_bindgen(js_name = weightedCe)]
pub fn weighted_ce_js(ces: Vec<f64>, kinds: Vec<u8>, path_w: f64, eos_w: f64) -> Result<f64, JsError> {
    weighted_ce_of(&ces, &kinds, path_w, eos_w).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fittedCostRatio)]
pub fn fitted_cost_ratio() -> Result<f64, JsError> {
    fit_lin_quad_ratio(&COST_POINTS, COST_POINTS[0].0).map_err(|e| JsError::new(&e.to_string()))
}

/// Flattened `[n0, r0, n1, r1, ...]`.
#[wasm_bindgen(js_name = ratioCurve)]
pub fn ratio_curve_js(lin_over_quad: f64, n0: usize, n_max: usize, points: usize) -> Vec<f64> {
    ratio_curve(lin_over_quad, n0, n_max, points).into_iter().flatten().collect()
}
