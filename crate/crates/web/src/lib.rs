//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported function is a thin wrapper over a plain Rust function in
//! [`ops`], which is where the behaviour lives and what the tests exercise.

use wasm_bindgen::prelude::*;

pub mod ops;

fn js(e: ops::DemoError) -> JsError {
    JsError::new(&e.to_string())
}

/// `L·D` uniform slots in `[-1, 1]`, row-major.
#[wasm_bindgen]
pub fn random_bank(slots: usize, width: usize, seed: u64) -> Vec<f64> {
    ops::random_bank(slots, width, seed)
}

/// Addressing weights (first `L` entries) followed by the read vector (`D` entries).
#[wasm_bindgen]
pub fn address(slots: &[f64], width: usize, key: &[f64], sharpness: f64) -> Result<Vec<f64>, JsError> {
    let a = ops::address(slots, width, key, sharpness).map_err(js)?;
    Ok(a.weights.into_iter().chain(a.read).collect())
}

/// Writes `value` with erase `erase` at the slots addressed by `key`; returns the new slots.
#[wasm_bindgen]
pub fn write(slots: &[f64], width: usize, key: &[f64], value: &[f64], erase: f64, sharpness: f64) -> Result<Vec<f64>, JsError> {
    ops::write(slots, width, key, value, erase, sharpness).map_err(js)
}

/// Row-major `L×2` principal-component coordinates of the slots.
#[wasm_bindgen]
pub fn project(slots: &[f64], width: usize) -> Result<Vec<f64>, JsError> {
    ops::project(slots, width).map_err(js)
}

/// Indices (into the input order) of the boxes kept by NMS, best first.
#[wasm_bindgen]
pub fn suppress(starts: &[f64], ends: &[f64], scores: &[f64], top_n: usize) -> Result<Vec<u32>, JsError> {
    let kept = ops::suppress(starts, ends, scores, top_n).map_err(js)?;
    Ok(kept.into_iter().map(|i| i as u32).collect())
}

#[wasm_bindgen]
pub fn interval_iou(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> Result<f64, JsError> {
    ops::iou(a_start, a_end, b_start, b_end).map_err(js)
}
