//! wasm-bindgen entry points for the static page in `www/`. Results cross
//! the boundary as JSON strings.

pub mod demo;

use wasm_bindgen::prelude::*;

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

/// Original and distorted activity curves of a synthetic clip.
#[wasm_bindgen]
pub fn preview(kind: &str, level_index: u32, seed: u32) -> Result<String, JsError> {
    let p = demo::preview(kind, level_index as usize, seed as u64).map_err(|e| JsError::new(&e))?;
    to_json(&p)
}

/// FAD / FVD / FAVD rows for the ten audio-shift levels.
#[wasm_bindgen]
pub fn shift_sweep(n_clips: u32, seed: u32) -> Result<String, JsError> {
    let rows = demo::shift_sweep(n_clips as usize, seed as u64).map_err(|e| JsError::new(&e))?;
    to_json(&rows)
}

/// The 21-bin slot of an opinion score.
#[wasm_bindgen]
pub fn bin_of(score: f64) -> Result<String, JsError> {
    to_json(&demo::bin_of(score))
}

#[wasm_bindgen]
pub fn n_bins() -> u32 {
    demo::n_bins() as u32
}
