//! Detectors for the ways a generative prior departs from its input:
//! aspect-ratio drift, global translation, and fidelity/perception
//! divergence.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::image::ImageBuffer;

/// Confidence below which a translation estimate is treated as unreliable.
pub const CONFIDENCE_THRESHOLD: f64 = 0.1;
/// Aspect-ratio drift above which a prior is flagged as reshaped.
pub const DRIFT_THRESHOLD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum FidelityError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
}

/// `|r_in - r_p| / r_in` with `r = width / height`; dims are `(h, w)`.
pub fn aspect_ratio_drift(input_dims: (usize, usize), raw_prior_dims: (usize, usize)) -> f64 {
    let ratio = |(h, w): (usize, usize)| w as f64 / h as f64;
    let r_in = ratio(input_dims);
    (r_in - ratio(raw_prior_dims)).abs() / r_in
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

fn centred_luma(img: &ImageBuffer) -> Vec<Complex<f64>> {
    let luma: Vec<f64> = img.luma().into_iter().map(|v| v as f64).collect();
    let mean = luma.iter().sum::<f64>() / luma.len() as f64;
    luma.into_iter().map(|v| Complex::new(v - mean, 0.0)).collect()
}

/// Integer translation `(dy, dx)` with `b(p) ~ a(p - (dy, dx))`, by phase
/// correlation on mean-removed luma. Confidence is the correlation peak over
/// the L2 norm of the correlation surface, in `[0, 1]`; constant inputs give
/// `(0, 0, 0.0)`.
pub fn estimate_global_shift(a: &ImageBuffer, b: &ImageBuffer) -> Result<(i64, i64, f64), FidelityError> {
    if a.dims() != b.dims() {
        return Err(FidelityError::DimMismatch(a.dims(), b.dims()));
    }
    let (h, w) = (a.height(), a.width());
    let mut fa = centred_luma(a);
    let mut fb = centred_luma(b);
    fft2(&mut fa, h, w, false);
    fft2(&mut fb, h, w, false);
    let scale = fa.iter().chain(&fb).map(|z| z.norm()).fold(0.0, f64::max);
    let floor = scale * 1e-9;
    let mut cross: Vec<Complex<f64>> = fa
        .iter()
        .zip(&fb)
        .map(|(za, zb)| {
            let z = zb * za.conj();
            let n = z.norm();
            if n > floor && n > 0.0 {
                z / n
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    if cross.iter().all(|z| z.norm() == 0.0) {
        return Ok((0, 0, 0.0));
    }
    fft2(&mut cross, h, w, true);
    let n = (h * w) as f64;
    let surface: Vec<f64> = cross.iter().map(|z| z.re / n).collect();
    let (peak_i, peak) =
        surface.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let energy = surface.iter().map(|v| v * v).sum::<f64>().sqrt();
    let confidence = if energy > 0.0 { (peak / energy).clamp(0.0, 1.0) } else { 0.0 };
    let wrap = |i: usize, n: usize| if i > n / 2 { i as i64 - n as i64 } else { i as i64 };
    Ok((wrap(peak_i / w, h), wrap(peak_i % w, w), confidence))
}

/// The prior looks better yet is further from the ground truth than the
/// degraded input.
pub fn divergence_flag(psnr_prior_vs_gt: f64, psnr_degraded_vs_gt: f64, iqa_prior: f64, iqa_degraded: f64) -> bool {
    psnr_prior_vs_gt < psnr_degraded_vs_gt && iqa_prior > iqa_degraded
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub aspect_ratio_delta: f64,
    pub translation_estimate: (i64, i64),
    pub translation_confidence: f64,
    /// Absent when the IQA scores or the ground truth are unavailable.
    pub divergence_flag: Option<bool>,
    pub notes: String,
}

/// Inputs for [`analyze`]; PSNR and IQA values are optional.
#[derive(Debug, Clone, Copy, Default)]
pub struct DivergenceInputs {
    pub psnr_prior_vs_gt: Option<f64>,
    pub psnr_degraded_vs_gt: Option<f64>,
    pub iqa_prior: Option<f64>,
    pub iqa_degraded: Option<f64>,
}

pub fn analyze(
    degraded: &ImageBuffer,
    prior: &ImageBuffer,
    raw_prior_dims: (usize, usize),
    div: DivergenceInputs,
) -> Result<FidelityReport, FidelityError> {
    let aspect_ratio_delta = aspect_ratio_drift((degraded.height(), degraded.width()), raw_prior_dims);
    let (dy, dx, confidence) = estimate_global_shift(degraded, prior)?;
    let divergence_flag = match (div.psnr_prior_vs_gt, div.psnr_degraded_vs_gt, div.iqa_prior, div.iqa_degraded) {
        (Some(a), Some(b), Some(c), Some(d)) => Some(divergence_flag(a, b, c, d)),
        _ => None,
    };
    let mut notes = Vec::new();
    if aspect_ratio_delta > DRIFT_THRESHOLD {
        notes.push(format!("aspect ratio changed by {:.1}%", 100.0 * aspect_ratio_delta));
    }
    if confidence < CONFIDENCE_THRESHOLD {
        notes.push("no single global translation; viewpoint or content change".to_string());
    } else if (dy, dx) != (0, 0) {
        notes.push(format!("content shifted by ({dy}, {dx}) px"));
    }
    if divergence_flag == Some(true) {
        notes.push("looks better but is less faithful than the input".to_string());
    }
    Ok(FidelityReport {
        aspect_ratio_delta,
        translation_estimate: (dy, dx),
        translation_confidence: confidence,
        divergence_flag,
        notes: notes.join("; "),
    })
}
