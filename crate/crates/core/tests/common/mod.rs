//! Synthetic restoration task shared by integration and acceptance tests.
#![allow(dead_code)]

use priorfuse::dataset::SampleTriplet;
use priorfuse::prior::{synthesize_offline_prior, SimilarityWarp, SyntheticPriorConfig};
use priorfuse::{ImageBuffer, RandomSeed};
use rand::Rng;

/// Clean image built from a colour gradient, soft-edged discs and boxes, and
/// a low-frequency grating.
pub fn clean_image(seed: RandomSeed, index: u64, size: usize) -> ImageBuffer {
    let mut rng = seed.stream("clean", index);
    let s = size as f32;
    let base: [f32; 3] = [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)];
    let slope: [f32; 3] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let freq: f32 = rng.gen_range(0.15..0.45);
    let grating_amp: f32 = rng.gen_range(0.04..0.1);
    let shapes: Vec<(bool, f32, f32, f32, f32, [f32; 3])> = (0..rng.gen_range(5..9))
        .map(|_| {
            (
                rng.gen::<bool>(),
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(s * 0.06..s * 0.2),
                rng.gen_range(s * 0.06..s * 0.2),
                [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            )
        })
        .collect();
    ImageBuffer::from_fn(size, size, 3, |y, x, c| {
        let (fy, fx) = (y as f32 / s, x as f32 / s);
        let mut v = base[c] + slope[c] * (fx - fy);
        v += grating_amp * ((x as f32 * angle.cos() + y as f32 * angle.sin()) * freq).sin();
        for &(disc, cy, cx, ry, rx, col) in &shapes {
            let inside = if disc {
                let d = (((y as f32 - cy) / ry).powi(2) + ((x as f32 - cx) / rx).powi(2)).sqrt();
                ((1.0 - d) * 6.0).clamp(0.0, 1.0)
            } else {
                let dy = ry - (y as f32 - cy).abs();
                let dx = rx - (x as f32 - cx).abs();
                (dy.min(dx) * 0.8).clamp(0.0, 1.0)
            };
            v += inside * (col[c] - v) * 0.85;
        }
        v.clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Gamma darkening plus Gaussian noise.
pub fn degrade(gt: &ImageBuffer, seed: RandomSeed, index: u64, gamma: f32, sigma: f32) -> ImageBuffer {
    let mut rng = seed.stream("degrade", index);
    let normal = rand_distr::Normal::new(0.0f32, sigma).unwrap();
    let (h, w, c) = gt.dims();
    let data = gt.data().iter().map(|&v| v.powf(gamma) + rng.sample(normal)).collect();
    priorfuse::image::clamp_to_unit(h, w, c, data).unwrap()
}

pub struct SyntheticTask {
    pub train: Vec<SampleTriplet>,
    pub test: Vec<SampleTriplet>,
}

/// `n` clean images, the first `n_train` for training. Priors come from the
/// offline synthesizer with a per-image seed.
pub fn synthetic_task(seed: RandomSeed, n: usize, n_train: usize, size: usize, max_translation: f64) -> SyntheticTask {
    let all: Vec<SampleTriplet> = (0..n as u64)
        .map(|i| {
            let gt = clean_image(seed, i, size);
            let degraded = degrade(&gt, seed, i, 2.0, 0.04);
            let cfg = SyntheticPriorConfig { max_translation, seed: seed.derive("prior", i), ..Default::default() };
            let prior = synthesize_offline_prior(&gt, &cfg).unwrap();
            SampleTriplet::new(format!("img{i:03}"), degraded, Some(prior), Some(gt)).unwrap()
        })
        .collect();
    let mut train = all;
    let test = train.split_off(n_train);
    SyntheticTask { train, test }
}

/// Same task with every prior translated by exactly `(dy, dx)` and no other
/// change.
pub fn shifted_task(seed: RandomSeed, n: usize, size: usize, dy: f64, dx: f64) -> Vec<SampleTriplet> {
    (0..n as u64)
        .map(|i| {
            let gt = clean_image(seed, i, size);
            let degraded = degrade(&gt, seed, i, 2.0, 0.04);
            let prior = SimilarityWarp::translation(dy, dx).apply(&gt);
            SampleTriplet::new(format!("img{i:03}"), degraded, Some(prior), Some(gt)).unwrap()
        })
        .collect()
}
