//! Full-reference fidelity metrics and the perceptual-quality interface.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::ImageBuffer;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("image {h}x{w} is smaller than the {window}-pixel SSIM window")]
    TooSmall { h: usize, w: usize, window: usize },
    #[error("invalid metric config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub max_value: f64,
    pub psnr_cap: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { max_value: 1.0, psnr_cap: 100.0, ssim_window: 11, ssim_sigma: 1.5, ssim_k1: 0.01, ssim_k2: 0.03 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.max_value > 0.0) {
            return Err(MetricError::Config(format!("max_value {} must be positive", self.max_value)));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(MetricError::Config(format!("ssim_window {} must be odd and >= 3", self.ssim_window)));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(MetricError::Config("ssim_sigma must be positive".into()));
        }
        Ok(())
    }
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// PSNR in dB with one MSE over all channels; `psnr_cap` when identical.
pub fn psnr(pred: &ImageBuffer, reference: &ImageBuffer, cfg: &MetricConfig) -> Result<f64, MetricError> {
    cfg.validate()?;
    check_dims(pred, reference)?;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let mse = sse / pred.data().len() as f64;
    if mse == 0.0 {
        return Ok(cfg.psnr_cap);
    }
    Ok((10.0 * (cfg.max_value * cfg.max_value / mse).log10()).min(cfg.psnr_cap))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (t, &kv) in k.iter().enumerate() {
            let src = &rows[(y + t) * ow..(y + t + 1) * ow];
            for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kv * v;
            }
        }
    }
    out
}

/// Mean local SSIM over valid window positions, averaged over channels.
pub fn ssim(pred: &ImageBuffer, reference: &ImageBuffer, cfg: &MetricConfig) -> Result<f64, MetricError> {
    cfg.validate()?;
    check_dims(pred, reference)?;
    let (h, w, c) = pred.dims();
    if h < cfg.ssim_window || w < cfg.ssim_window {
        return Err(MetricError::TooSmall { h, w, window: cfg.ssim_window });
    }
    let k = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma);
    let c1 = (cfg.ssim_k1 * cfg.max_value).powi(2);
    let c2 = (cfg.ssim_k2 * cfg.max_value).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = pred.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let y: Vec<f64> = reference.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let exx = filter_valid(&prod(&x, &x), h, w, &k);
        let eyy = filter_valid(&prod(&y, &y), h, w, &k);
        let exy = filter_valid(&prod(&x, &y), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (mx2, my2, mxy) = (mx[i] * mx[i], my[i] * my[i], mx[i] * my[i]);
            let (sx, sy, sxy) = (exx[i] - mx2, eyy[i] - my2, exy[i] - mxy);
            sum += ((2.0 * mxy + c1) * (2.0 * sxy + c2)) / ((mx2 + my2 + c1) * (sx + sy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Debug, thiserror::Error)]
pub enum IqaError {
    #[error("IQA provider unavailable: {0}")]
    Unavailable(String),
    #[error("IQA provider returned {0}, outside [0, 1]")]
    OutOfRange(f64),
}

/// Perceptual quality score in `[0, 1]`, higher is better.
pub trait IqaProvider: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, image: &ImageBuffer) -> Result<f64, IqaError>;
}

/// Returns the same score for every image.
#[derive(Debug, Clone)]
pub struct ConstantIqa(pub f64);

impl IqaProvider for ConstantIqa {
    fn name(&self) -> &str {
        "constant"
    }

    fn score(&self, _: &ImageBuffer) -> Result<f64, IqaError> {
        Ok(self.0)
    }
}

/// Always unavailable; stands in when no provider is configured.
#[derive(Debug, Clone, Default)]
pub struct NoIqa;

impl IqaProvider for NoIqa {
    fn name(&self) -> &str {
        "none"
    }

    fn score(&self, _: &ImageBuffer) -> Result<f64, IqaError> {
        Err(IqaError::Unavailable("no IQA provider configured".into()))
    }
}

/// Hash of an image's dims and 8-bit quantized content.
pub fn image_hash(image: &ImageBuffer) -> [u8; 32] {
    let (h, w, c) = image.dims();
    let mut hasher = Sha256::new();
    for d in [h, w, c] {
        hasher.update((d as u64).to_le_bytes());
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| crate::image::to_u8(v)).collect();
    hasher.update(&bytes);
    hasher.finalize().into()
}

/// Memoizes another provider by image hash.
pub struct CachedIqa<P> {
    inner: P,
    cache: Mutex<HashMap<[u8; 32], f64>>,
}

impl<P: IqaProvider> CachedIqa<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

impl<P: IqaProvider> IqaProvider for CachedIqa<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn score(&self, image: &ImageBuffer) -> Result<f64, IqaError> {
        let key = image_hash(image);
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let v = self.inner.score(image)?;
        self.cache.lock().unwrap().insert(key, v);
        Ok(v)
    }
}

/// Provider score, checked to lie in `[0, 1]`.
pub fn iqa_score(image: &ImageBuffer, provider: &dyn IqaProvider) -> Result<f64, IqaError> {
    let v = provider.score(image)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(IqaError::OutOfRange(v));
    }
    Ok(v)
}

/// Joint image/text embedding model.
pub trait EmbeddingModel: Send + Sync {
    fn name(&self) -> &str;
    fn embed_image(&self, image: &ImageBuffer) -> Result<Vec<f32>, IqaError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, IqaError>;
}

/// Antonym-prompt quality score: softmax over scaled cosine similarities to
/// a positive and a negative text anchor, reporting the positive share.
pub struct AnchorIqa<E> {
    model: E,
    positive: Vec<f32>,
    negative: Vec<f32>,
    pub logit_scale: f64,
}

impl<E: EmbeddingModel> AnchorIqa<E> {
    pub const POSITIVE: &'static str = "Good photo.";
    pub const NEGATIVE: &'static str = "Bad photo.";

    pub fn new(model: E) -> Result<Self, IqaError> {
        let positive = model.embed_text(Self::POSITIVE)?;
        let negative = model.embed_text(Self::NEGATIVE)?;
        Ok(Self { model, positive, negative, logit_scale: 100.0 })
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl<E: EmbeddingModel> IqaProvider for AnchorIqa<E> {
    fn name(&self) -> &str {
        self.model.name()
    }

    fn score(&self, image: &ImageBuffer) -> Result<f64, IqaError> {
        let e = self.model.embed_image(image)?;
        if e.len() != self.positive.len() {
            return Err(IqaError::Unavailable(format!("image embedding has {} dims, text embedding {}", e.len(), self.positive.len())));
        }
        let lp = self.logit_scale * cosine(&e, &self.positive);
        let ln = self.logit_scale * cosine(&e, &self.negative);
        Ok(1.0 / (1.0 + (ln - lp).exp()))
    }
}
