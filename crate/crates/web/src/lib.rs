//! WebAssembly bindings for the browser demo. Every export takes and returns
//! plain numbers, strings and `Vec<f64>` so the page needs no glue beyond the
//! generated module.

use ditmem::diffusion::{inject_cutoff, sampler_steps};
use ditmem::freq_filter::{apply_filter, Band, FeatureTensor, FrequencyMask};
use ditmem::retrieval_bank::embed_caption;
use ditmem::synthetic::{attributes, caption_for};
use ditmem::autograd::Tensor;
use wasm_bindgen::prelude::*;

// Errors cross into JavaScript as thrown strings.
fn band(name: &str) -> Result<Band, String> {
    name.parse().map_err(|e: ditmem::Error| e.to_string())
}

fn js(e: ditmem::Error) -> String {
    e.to_string()
}

/// Mask values of a `d x h x w` grid at depth `slice`, row-major `h x w`.
#[wasm_bindgen]
pub fn mask_slice(d: usize, h: usize, w: usize, slice: usize, band_name: &str, rho: f64, gamma: f64) -> Result<Vec<f64>, String> {
    let m = FrequencyMask::build(&[d, h, w], band(band_name)?, rho, gamma).map_err(js)?;
    if slice >= d {
        return Err(format!("slice {slice} outside 0..{d}"));
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(m.value_at(&[slice, y, x]));
        }
    }
    Ok(out)
}

/// Band-filters a 1D signal along its only axis.
#[wasm_bindgen]
pub fn filter_signal(signal: &[f64], band_name: &str, rho: f64, gamma: f64, residual: bool) -> Result<Vec<f64>, String> {
    let column = Tensor::from_shape_vec(vec![signal.len(), 1], signal.to_vec()).expect("length matches");
    let x = FeatureTensor::new(column).map_err(js)?;
    let m = FrequencyMask::build(&[signal.len()], band(band_name)?, rho, gamma).map_err(js)?;
    Ok(apply_filter(&x, &m, residual).map_err(js)?.into_data().into_iter().collect())
}

/// Test signal: a slow sine plus a fast square ripple.
#[wasm_bindgen]
pub fn demo_signal(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / n.max(1) as f64;
            let slow = (2.0 * std::f64::consts::PI * 2.0 * t).sin();
            let fast = if (i / 2) % 2 == 0 { 0.35 } else { -0.35 };
            slow + fast
        })
        .collect()
}

/// Timesteps of an `s`-step sampler over `total` training steps, paired with
/// whether steering is injected there: `[t0, flag0, t1, flag1, ...]`.
#[wasm_bindgen]
pub fn steering_schedule(total: usize, s: usize, fraction: f64) -> Result<Vec<f64>, String> {
    let steps = sampler_steps(total, s).map_err(js)?;
    let cut = inject_cutoff(s, fraction);
    Ok(steps
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| [t as f64, if i < cut { 1.0 } else { 0.0 }])
        .collect())
}

/// Caption of synthetic clip `i` in a fixed demo corpus.
#[wasm_bindgen]
pub fn corpus_caption(i: usize) -> String {
    caption_for(&attributes(7, i as u64))
}

/// Ranks the first `n` corpus captions against `query`; returns the top `k`
/// as `index:score` strings joined by newlines. Ties go to the lower index.
#[wasm_bindgen]
pub fn retrieve(query: &str, n: usize, k: usize) -> Result<String, String> {
    const D: usize = 256;
    let q = embed_caption(query, D).map_err(js)?;
    let mut scored: Vec<(usize, f64)> = (0..n)
        .map(|i| {
            let e = embed_caption(&corpus_caption(i), D)?;
            Ok((i, e.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>()))
        })
        .collect::<Result<_, ditmem::Error>>()
        .map_err(js)?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .iter()
        .take(k)
        .map(|(i, s)| format!("{i}:{s:.4}"))
        .collect::<Vec<_>>()
        .join("\n"))
}
