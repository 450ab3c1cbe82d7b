//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Grids cross the boundary as row-major gray bytes (`round(value·255)`),
//! always on the default 101×101 canvas.

use wasm_bindgen::prelude::*;

use dlsp_core::chgen::{ch_run, ChParams};
use dlsp_core::morpho::{binarize, quantize, Morphology, DEFAULT_SIDE, DEFAULT_THRESHOLD};
use dlsp_core::oracle::{evaluate, solve_exciton, OracleParams};
use dlsp_core::presets;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn side() -> usize {
    DEFAULT_SIDE
}

/// Runs one Cahn-Hilliard simulation to `steps` and returns the cropped
/// morphology.
#[wasm_bindgen]
pub fn simulate(seed: u64, steps: u32, blend_mean: f64) -> Result<Vec<u8>, JsError> {
    let params = ChParams {
        seed,
        blend_mean,
        snapshot_steps: vec![steps.max(1) as u64],
        ..ChParams::default()
    };
    let snaps = ch_run(&params).map_err(err)?;
    Ok(snaps[0].morphology.to_bytes())
}

/// Named preset (`bilayer`, `columns_w4`, `columns_w10`, `blocking_layer`,
/// `blob_field`).
#[wasm_bindgen]
pub fn preset(name: &str) -> Result<Vec<u8>, JsError> {
    let b = presets::by_name(name).ok_or_else(|| JsError::new(&format!("unknown preset {name:?}")))?;
    Ok(Morphology::from(&b).to_bytes())
}

/// Evenly tiled vertical columns, optionally cut off from the bottom
/// electrode by `blocking_rows` acceptor rows.
#[wasm_bindgen]
pub fn columnar(stripe: usize, blocking_rows: usize) -> Result<Vec<u8>, JsError> {
    let mut b = presets::columnar(DEFAULT_SIDE, DEFAULT_SIDE, stripe).map_err(err)?;
    if blocking_rows > 0 {
        b = presets::with_blocking_layer(&b, DEFAULT_SIDE.saturating_sub(blocking_rows));
    }
    Ok(Morphology::from(&b).to_bytes())
}

/// Oracle result as JSON: `{jsc, proxy, eta_diss, eta_transport}`.
#[wasm_bindgen]
pub fn oracle(grid: &[u8]) -> Result<String, JsError> {
    let m = Morphology::from_bytes(DEFAULT_SIDE, DEFAULT_SIDE, grid).map_err(err)?;
    let r = evaluate(&m, &OracleParams::default()).map_err(err)?;
    serde_json::to_string(&r).map_err(err)
}

/// Exciton density of the oracle's diffusion solve, max-normalized to bytes,
/// for drawing next to the morphology.
#[wasm_bindgen]
pub fn exciton_density(grid: &[u8]) -> Result<Vec<u8>, JsError> {
    let m = Morphology::from_bytes(DEFAULT_SIDE, DEFAULT_SIDE, grid).map_err(err)?;
    let ex = solve_exciton(&binarize(&m, DEFAULT_THRESHOLD), &OracleParams::default()).map_err(err)?;
    let max = ex.density.iter().copied().fold(0.0, f64::max);
    Ok(ex
        .density
        .iter()
        .map(|&n| if max > 0.0 { quantize(n / max) } else { 0 })
        .collect())
}
