//! Browser bindings for three small interactive views: a synthetic spatial
//! expression map, an HSIC dependence probe and the temperature-scaled soft
//! target matrix of the alignment loss.
//!
//! The `*_json` / `*_svg` functions are plain Rust so they can be tested
//! natively; the `#[wasm_bindgen]` wrappers only convert errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use st_align_core::data::{generate_synthetic, log_normalize, GridKind, SynthConfig};
use st_align_core::eval::spatial_map_svg;
use st_align_core::hsic::{hsic, median_bandwidth, nhsic};
use st_align_core::linalg::{l2_normalize_rows, row_softmax};
use st_align_core::objectives::alignment_loss;
use st_align_core::Matrix;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Spatial map of one synthetic gene after log normalization.
pub fn synthetic_map_svg(n_spots: usize, seed: u64, gene: usize, hex: bool) -> Result<String, String> {
    let synth = generate_synthetic(&SynthConfig {
        n_spots,
        n_genes: 20,
        f_img: 4,
        seed,
        grid: if hex { GridKind::Hex } else { GridKind::Square },
    })
    .map_err(|e| e.to_string())?;
    let counts = synth.slide.expression.as_ref().expect("synthetic slides carry expression");
    if gene >= counts.cols() {
        return Err(format!("gene index {gene} outside 0..{}", counts.cols()));
    }
    let norm = log_normalize(counts).map_err(|e| e.to_string())?;
    let name = &synth.slide.gene_names[gene];
    spatial_map_svg(&synth.slide.coords, &norm.column(gene), &format!("{name}, seed {seed}")).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct Dependence {
    pub hsic: f64,
    pub nhsic: f64,
    /// Same statistic against an independent sample of the same size.
    pub nhsic_independent: f64,
}

/// Dependence between `x` and `sin(2x) + noise·ε`, against an independent
/// baseline.
pub fn hsic_probe(n: usize, noise: f64, seed: u64) -> Result<Dependence, String> {
    if n < 2 {
        return Err("need at least two samples".into());
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(format!("noise must be a nonnegative number, got {noise}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(n, 1, &mut rng);
    let eps = gaussian(n, 1, &mut rng);
    let y = Matrix::from_fn(n, 1, |i, _| (2.0 * x[(i, 0)]).sin() + noise * eps[(i, 0)]);
    let other = gaussian(n, 1, &mut rng);
    let (sx, sy, so) = (median_bandwidth(&x), median_bandwidth(&y), median_bandwidth(&other));
    let err = |e: st_align_core::Error| e.to_string();
    Ok(Dependence {
        hsic: hsic(&x, &y, sx, sy).map_err(err)?,
        nhsic: nhsic(&x, &y, sx, sy).map_err(err)?,
        nhsic_independent: nhsic(&x, &other, sx, so).map_err(err)?,
    })
}

#[derive(Debug, Serialize)]
pub struct SoftTargets {
    /// Row-softmax of the averaged within-modality similarities over `tau`.
    pub targets: Vec<Vec<f64>>,
    pub loss: f64,
}

/// Soft targets for `batch` paired embeddings where the image side is the
/// gene side plus noise of scale `noise`.
pub fn soft_targets(batch: usize, tau: f64, noise: f64, seed: u64) -> Result<SoftTargets, String> {
    if batch == 0 || batch > 64 {
        return Err(format!("batch must be in 1..=64, got {batch}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = l2_normalize_rows(&gaussian(batch, 8, &mut rng));
    let jitter = gaussian(batch, 8, &mut rng);
    let g = l2_normalize_rows(&Matrix::from_fn(batch, 8, |i, j| t[(i, j)] + noise * jitter[(i, j)]));
    let sim = Matrix::from_fn(batch, batch, |i, j| {
        let dot = |m: &Matrix| m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum::<f64>();
        0.5 * (dot(&t) + dot(&g))
    });
    let targets = row_softmax(&sim, tau).map_err(|e| e.to_string())?;
    Ok(SoftTargets {
        targets: targets.row_iter().map(<[f64]>::to_vec).collect(),
        loss: alignment_loss(&t, &g, tau).map_err(|e| e.to_string())?,
    })
}

fn js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("plain data serializes"))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = syntheticMap)]
pub fn synthetic_map(n_spots: u32, seed: u32, gene: u32, hex: bool) -> Result<String, JsValue> {
    synthetic_map_svg(n_spots as usize, seed as u64, gene as usize, hex).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = hsicProbe)]
pub fn hsic_probe_js(n: u32, noise: f64, seed: u32) -> Result<String, JsValue> {
    js(hsic_probe(n as usize, noise, seed as u64))
}

#[wasm_bindgen(js_name = softTargets)]
pub fn soft_targets_js(batch: u32, tau: f64, noise: f64, seed: u32) -> Result<String, JsValue> {
    js(soft_targets(batch as usize, tau, noise, seed as u64))
}
