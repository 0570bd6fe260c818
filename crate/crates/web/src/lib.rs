//! wasm-bindgen bindings for the browser demo. Results cross as JSON strings or RGBA buffers.

pub mod demo;

use patchprobe::harness::synth::SynthParams;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Scores of one synthetic collapse pair, as JSON.
#[wasm_bindgen]
pub fn collapse_scores(
    n: usize,
    d: usize,
    changes: usize,
    angle: f64,
    jitter: f64,
    seed: u32,
) -> Result<String, JsError> {
    let p = SynthParams { n, d, change_count: changes, change_angle: angle, jitter, seed: seed as u64 };
    let r = demo::collapse_scores(&p).map_err(js_err)?;
    serde_json::to_string(&r).map_err(js_err)
}

/// Layout-bias gap of every mechanism over layout fractions 0..=1, as JSON.
#[wasm_bindgen]
pub fn attention_sweep(n: usize, steps: usize) -> Result<String, JsError> {
    let pts = demo::attention_sweep(n, steps).map_err(js_err)?;
    serde_json::to_string(&pts).map_err(js_err)
}

#[wasm_bindgen]
pub struct Perturbed {
    inner: demo::PerturbResult,
}

#[wasm_bindgen]
impl Perturbed {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.inner.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.inner.height
    }

    #[wasm_bindgen(getter)]
    pub fn changed_pixels(&self) -> f64 {
        self.inner.changed_pixels as f64
    }

    /// `[x, y, w, h]` of the edited region.
    #[wasm_bindgen(getter)]
    pub fn bbox(&self) -> Vec<u32> {
        let b = self.inner.bbox;
        vec![b.x, b.y, b.w, b.h]
    }

    pub fn original(&self) -> Vec<u8> {
        self.inner.original.clone()
    }

    pub fn edited(&self) -> Vec<u8> {
        self.inner.edited.clone()
    }
}

/// Renders a table, applies one edit, and returns both pages.
#[wasm_bindgen]
pub fn perturb_table(cells: &str, row: usize, col: usize, new_text: &str, mode: &str) -> Result<Perturbed, JsError> {
    let mode = mode.parse().map_err(js_err)?;
    let inner = demo::perturb_table(cells, row, col, new_text, mode).map_err(js_err)?;
    Ok(Perturbed { inner })
}
