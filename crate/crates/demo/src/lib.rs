//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Every export returns a flat `Vec<f64>` so the page needs no glue beyond
//! what `wasm-bindgen` generates.

use orthotune::adapters::{cayley, energy_drift, materialize_skew, neumann_deviation, orthogonality_residual, SkewParam};
use orthotune::cutout::{apply_cutout, SimilarityMap};
use orthotune::tensor::determinant;
use orthotune::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const GRID: usize = 4;

fn js_err(e: orthotune::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Rotation for the 2×2 skew matrix `[[0, c], [−c, 0]]`.
///
/// Returns `[a00, a01, a10, a11, ‖A−(I+2C)‖, ‖A−(I−2C)‖, residual, det]`.
#[wasm_bindgen]
pub fn cayley_2d(c: f64) -> Result<Vec<f64>, JsError> {
    let skew = materialize_skew(&SkewParam::from_upper(2, vec![c]).map_err(js_err)?);
    let a = cayley(&skew).map_err(js_err)?;
    let (plus, minus) = neumann_deviation(&skew).map_err(js_err)?;
    let mut out = a.data().to_vec();
    out.extend([
        plus,
        minus,
        orthogonality_residual(&a).map_err(js_err)?,
        determinant(&a).map_err(js_err)?,
    ]);
    Ok(out)
}

/// A seeded 4×4 similarity map in `[−1, 1]`, quantized to tenths so that
/// ties occur.
pub fn seeded_map(seed: u64) -> SimilarityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SimilarityMap::new(Matrix::from_fn(GRID, GRID, |_, _| {
        (rng.random_range(-10i32..=10) as f64) / 10.0
    }))
}

/// The 16 map values followed by 16 flags (1 = patch zeroed) for the top-`k`
/// cutout of the seeded map.
#[wasm_bindgen]
pub fn cutout_grid(seed: u64, k: usize) -> Result<Vec<f64>, JsError> {
    let map = seeded_map(seed);
    let cells = GRID * GRID;
    let ones = Matrix::filled(cells, 1, 1.0);
    let cut = apply_cutout(&ones, &map, k).map_err(js_err)?;
    let mut out = map.grid().data().to_vec();
    out.extend(cut.data().iter().map(|v| 1.0 - v));
    Ok(out)
}

/// Energy drift of a random `dim×neurons` layer under orthogonal and
/// low-rank updates of growing size.
///
/// Row `s` of the result is `[step size, orthogonal drift, low-rank drift]`
/// for `s = 0..steps`, flattened. Both updates use the same random
/// direction scaled by the step size.
#[wasm_bindgen]
pub fn drift_curve(dim: usize, neurons: usize, steps: usize, max_step: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    if dim < 2 || neurons < 2 || steps < 2 {
        return Err(JsError::new("dim, neurons and steps must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    let w0 = uniform(dim, neurons);
    let direction = uniform(1, SkewParam::count(dim));
    let down = uniform(dim, 2);
    let up = uniform(2, neurons);
    let delta = down.matmul(&up).map_err(js_err)?;
    let mut out = Vec::with_capacity(3 * steps);
    for s in 0..steps {
        let t = max_step * s as f64 / (steps - 1) as f64;
        let skew = SkewParam::from_upper(dim, direction.scale(t).into_vec()).map_err(js_err)?;
        let a = cayley(&materialize_skew(&skew)).map_err(js_err)?;
        let orth = energy_drift(&a.matmul(&w0).map_err(js_err)?, &w0).map_err(js_err)?;
        let low = energy_drift(&w0.add(&delta.scale(t)).map_err(js_err)?, &w0).map_err(js_err)?;
        out.extend([t, orth, low]);
    }
    Ok(out)
}
