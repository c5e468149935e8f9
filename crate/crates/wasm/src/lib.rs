//! Browser bindings: glyph rendering, forward noising and the isolation forest.

use paia_core::audit::paired_noise;
use paia_core::dataset::{generate_concepts, render, ConceptSpec, GRID_SIZE, SIDE};
use paia_core::diffusion::{forward_noise, NoiseSchedule, ScheduleKind};
use paia_core::outlier::{ForestParams, IsolationForest};
use wasm_bindgen::prelude::*;

fn err(e: paia_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn spec(concept: usize, seed: u64) -> Result<ConceptSpec, paia_core::Error> {
    generate_concepts(GRID_SIZE, seed)?
        .into_iter()
        .nth(concept)
        .ok_or_else(|| paia_core::Error::Argument(format!("concept {concept} outside 0..{GRID_SIZE}")))
}

#[wasm_bindgen]
pub fn side() -> usize {
    SIDE
}

#[wasm_bindgen]
pub fn concept_count() -> usize {
    GRID_SIZE
}

/// `"disk, scale 1, striped, intensity 2"`.
#[wasm_bindgen]
pub fn describe(concept: usize, seed: u64) -> Result<String, JsError> {
    let s = spec(concept, seed).map_err(err)?;
    Ok(format!(
        "{:?}, scale {}, {:?}, intensity {}{}",
        s.shape,
        s.scale_bucket,
        s.texture,
        s.intensity_bucket,
        if s.trigger.is_some() { ", has trigger word" } else { "" }
    )
    .to_lowercase())
}

/// Pixels in [-1, 1], row-major `side × side`.
#[wasm_bindgen]
pub fn glyph(concept: usize, seed: u64, jitter: u64) -> Result<Vec<f64>, JsError> {
    let s = spec(concept, seed).map_err(err)?;
    Ok(render(&s, Some(jitter)).pixels().to_vec())
}

/// `x_t` for the glyph under a `steps`-step schedule.
#[wasm_bindgen]
pub fn noised(concept: usize, seed: u64, jitter: u64, t: usize, steps: usize, schedule: &str) -> Result<Vec<f64>, JsError> {
    let kind: ScheduleKind = schedule.parse().map_err(err)?;
    let sched = NoiseSchedule::new(kind, steps).map_err(err)?;
    let x0 = render(&spec(concept, seed).map_err(err)?, Some(jitter));
    let eps = paired_noise(seed, jitter, t, 0, SIDE);
    Ok(forward_noise(&x0, t, &eps, &sched).map_err(err)?.pixels().to_vec())
}

#[wasm_bindgen]
pub fn alpha_bar(t: usize, steps: usize, schedule: &str) -> Result<f64, JsError> {
    let kind: ScheduleKind = schedule.parse().map_err(err)?;
    NoiseSchedule::new(kind, steps).and_then(|s| s.alpha_bar(t)).map_err(err)
}

/// Fits a forest on flat `[x0, y0, x1, y1, ...]` points in the unit square and
/// scores a `grid × grid` lattice over it; the threshold is appended last.
#[wasm_bindgen]
pub fn forest_map(points: &[f64], grid: usize, quantile: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    let rows: Vec<Vec<f64>> = points.chunks_exact(2).map(<[f64]>::to_vec).collect();
    let params = ForestParams {
        quantile,
        seed,
        ..ForestParams::default()
    };
    let forest = IsolationForest::fit(&rows, &params).map_err(err)?;
    let mut out = Vec::with_capacity(grid * grid + 1);
    for gy in 0..grid {
        for gx in 0..grid {
            let p = [(gx as f64 + 0.5) / grid as f64, (gy as f64 + 0.5) / grid as f64];
            out.push(forest.score(&p).map_err(err)?);
        }
    }
    out.push(forest.threshold);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_and_noise_shapes() {
        let g = glyph(3, 0, 1).unwrap();
        assert_eq!(g.len(), SIDE * SIDE);
        assert_eq!(noised(3, 0, 1, 0, 100, "cosine").unwrap(), g);
        let x = noised(3, 0, 1, 100, 100, "cosine").unwrap();
        assert_ne!(x, g);
        assert!(describe(0, 0).unwrap().contains("trigger"));
    }

    #[test]
    fn forest_map_scores_far_corner_higher() {
        let mut pts = Vec::new();
        for i in 0..40 {
            pts.push(0.2 + 0.01 * (i % 7) as f64);
            pts.push(0.2 + 0.01 * (i % 5) as f64);
        }
        let m = forest_map(&pts, 10, 0.95, 0).unwrap();
        assert_eq!(m.len(), 101);
        assert!(m[99] > m[22]);
    }
}
