//! Acquiring the generative prior: prompt rendering, provider adapters, the
//! on-disk cache, rate limiting, and an offline synthetic stand-in.
//!
//! Provider outputs are decoded, stretched to the request frame when their
//! dims differ, and quantized to 8 bits before being cached, so a cache hit
//! returns exactly what the original miss returned.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::DegradationType;
use crate::image::{self, decode_png, encode_png, resize_bilinear, ImageBuffer, ImageError};
use crate::nn::conv::reflect_index;
use crate::seed::RandomSeed;

/// Environment variable holding the bearer token for [`HttpProvider`].
pub const API_KEY_ENV: &str = "PRIORFUSE_API_KEY";

pub fn render_prompt(degradation: DegradationType) -> String {
    format!(
        "Please remove the {} from the image. The processed image should remain aligned with the input image.",
        degradation.display_name()
    )
}

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },
    #[error("provider `{provider}` timed out after {elapsed:.1?}")]
    Timeout { provider: String, elapsed: Duration },
    #[error("provider output is not a decodable image: {0}")]
    Undecodable(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("invalid synthetic prior config: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A remote image editor: PNG bytes and a prompt in, image bytes out.
pub trait PriorProvider: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, png: &[u8], prompt: &str) -> Result<Vec<u8>, String>;
}

/// Stable id over the quantized pixels, dims, prompt and provider.
pub fn request_id(image: &ImageBuffer, prompt: &str, provider: &str) -> String {
    let (h, w, c) = image.dims();
    let mut hasher = Sha256::new();
    for d in [h, w, c] {
        hasher.update((d as u64).to_le_bytes());
    }
    let pixels: Vec<u8> = image.data().iter().map(|&v| image::to_u8(v)).collect();
    hasher.update(&pixels);
    for field in [prompt, provider] {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorRequest {
    pub image: ImageBuffer,
    pub degradation: DegradationType,
    pub prompt: String,
    pub provider: String,
    pub request_id: String,
}

impl PriorRequest {
    /// Request with the rendered prompt.
    pub fn new(image: ImageBuffer, degradation: DegradationType, provider: &str) -> Self {
        let prompt = render_prompt(degradation);
        Self::with_prompt(image, degradation, provider, prompt)
    }

    pub fn with_prompt(image: ImageBuffer, degradation: DegradationType, provider: &str, prompt: String) -> Self {
        let request_id = request_id(&image, &prompt, provider);
        Self { image, degradation, prompt, provider: provider.to_string(), request_id }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorResult {
    /// Normalized to the request dims.
    pub prior: ImageBuffer,
    /// Provider output `(height, width)` before normalization.
    pub raw_dims: (usize, usize),
    pub provider: String,
    pub latency: f64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    prompt: String,
    raw_dims: (usize, usize),
    latency: f64,
    timestamp: u64,
}

/// Bounded concurrency plus an optional requests-per-minute token bucket.
pub struct RateLimiter {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
    bucket: Option<Mutex<Bucket>>,
}

struct Bucket {
    per_minute: f64,
    tokens: f64,
    last: Instant,
}

pub struct Permit<'a>(&'a RateLimiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.released.notify_one();
    }
}

impl RateLimiter {
    pub fn new(max_in_flight: usize, requests_per_minute: Option<f64>) -> Self {
        let bucket = requests_per_minute.map(|rpm| Mutex::new(Bucket { per_minute: rpm, tokens: 1.0, last: Instant::now() }));
        Self { max_in_flight: max_in_flight.max(1), in_flight: Mutex::new(0), released: Condvar::new(), bucket }
    }

    /// Block until a request may start.
    pub fn acquire(&self) -> Permit<'_> {
        if let Some(bucket) = &self.bucket {
            loop {
                let wait = {
                    let mut b = bucket.lock().unwrap();
                    let now = Instant::now();
                    let refill = now.duration_since(b.last).as_secs_f64() * b.per_minute / 60.0;
                    b.tokens = (b.tokens + refill).min(b.per_minute.max(1.0));
                    b.last = now;
                    if b.tokens >= 1.0 {
                        b.tokens -= 1.0;
                        None
                    } else {
                        Some(Duration::from_secs_f64((1.0 - b.tokens) * 60.0 / b.per_minute))
                    }
                };
                match wait {
                    None => break,
                    Some(d) => std::thread::sleep(d),
                }
            }
        }
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.released.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

/// Cached, rate-limited access to one provider.
pub struct PriorClient {
    provider: Arc<dyn PriorProvider>,
    cache_dir: PathBuf,
    limiter: RateLimiter,
    timeout: Option<Duration>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl PriorClient {
    pub fn new(provider: Arc<dyn PriorProvider>, cache_dir: &Path) -> Self {
        Self {
            provider,
            cache_dir: cache_dir.to_path_buf(),
            limiter: RateLimiter::new(2, None),
            timeout: None,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_limits(mut self, max_in_flight: usize, requests_per_minute: Option<f64>) -> Self {
        self.limiter = RateLimiter::new(max_in_flight, requests_per_minute);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    /// Cached prior image for `req`; the JSON sidecar sits next to it.
    pub fn cache_path(&self, req: &PriorRequest) -> PathBuf {
        self.paths(req).0
    }

    fn paths(&self, req: &PriorRequest) -> (PathBuf, PathBuf) {
        let dir = self.cache_dir.join(&req.provider);
        (dir.join(format!("{}.png", req.request_id)), dir.join(format!("{}.json", req.request_id)))
    }

    fn lookup(&self, req: &PriorRequest) -> Result<Option<PriorResult>, PriorError> {
        let (png, json) = self.paths(req);
        if !(png.exists() && json.exists()) {
            return Ok(None);
        }
        let sidecar: Sidecar =
            serde_json::from_slice(&std::fs::read(&json)?).map_err(|e| PriorError::Cache(format!("{}: {e}", json.display())))?;
        let prior = image::load_png(&png, req.image.channels())?;
        if prior.dims() != req.image.dims() {
            return Err(PriorError::Cache(format!("{} has dims {:?}, request {:?}", png.display(), prior.dims(), req.image.dims())));
        }
        Ok(Some(PriorResult {
            prior,
            raw_dims: sidecar.raw_dims,
            provider: req.provider.clone(),
            latency: sidecar.latency,
            from_cache: true,
        }))
    }

    fn call(&self, png: Vec<u8>, prompt: &str) -> Result<Vec<u8>, PriorError> {
        let name = self.provider.name().to_string();
        let started = Instant::now();
        let result = match self.timeout {
            None => self.provider.generate(&png, prompt),
            Some(limit) => {
                let (tx, rx) = mpsc::channel();
                let provider = Arc::clone(&self.provider);
                let prompt = prompt.to_string();
                std::thread::spawn(move || {
                    let _ = tx.send(provider.generate(&png, &prompt));
                });
                match rx.recv_timeout(limit) {
                    Ok(r) => r,
                    Err(_) => return Err(PriorError::Timeout { provider: name, elapsed: started.elapsed() }),
                }
            }
        };
        result.map_err(|message| PriorError::Provider { provider: name, message })
    }

    /// Cached prior for `req`, calling the provider at most once per id.
    pub fn acquire(&self, req: &PriorRequest) -> Result<PriorResult, PriorError> {
        let lock = Arc::clone(self.locks.lock().unwrap().entry(req.request_id.clone()).or_default());
        let _guard = lock.lock().unwrap();
        if let Some(hit) = self.lookup(req)? {
            return Ok(hit);
        }
        let png = encode_png(&req.image)?;
        let started = Instant::now();
        let bytes = {
            let _permit = self.limiter.acquire();
            self.call(png, &req.prompt)?
        };
        let latency = started.elapsed().as_secs_f64();
        let raw = decode_png(&bytes, req.image.channels()).map_err(|e| PriorError::Undecodable(e.to_string()))?;
        let raw_dims = (raw.height(), raw.width());
        let prior = resize_bilinear(&raw, req.image.height(), req.image.width())?.quantized();

        let (png_path, json_path) = self.paths(req);
        let dir = png_path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir)?;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let sidecar = Sidecar { prompt: req.prompt.clone(), raw_dims, latency, timestamp };
        write_atomic(dir, &png_path, &encode_png(&prior)?)?;
        write_atomic(dir, &json_path, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes").as_bytes())?;
        Ok(PriorResult { prior, raw_dims, provider: req.provider.clone(), latency, from_cache: false })
    }
}

fn write_atomic(dir: &Path, path: &Path, bytes: &[u8]) -> Result<(), PriorError> {
    use std::io::Write;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| PriorError::Io(e.error))?;
    Ok(())
}

/// Convenience wrapper over a one-off [`PriorClient`].
pub fn acquire_prior(req: &PriorRequest, provider: Arc<dyn PriorProvider>, cache_dir: &Path) -> Result<PriorResult, PriorError> {
    PriorClient::new(provider, cache_dir).acquire(req)
}

/// Reference HTTP adapter. Sends `{"image": <base64 PNG>, "prompt": ..}` as
/// JSON with `Authorization: Bearer $PRIORFUSE_API_KEY`; accepts either raw
/// image bytes or a JSON body with a base64 `image` field.
pub struct HttpProvider {
    name: String,
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct HttpRequestBody<'a> {
    image: String,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct HttpResponseBody {
    image: String,
}

impl HttpProvider {
    pub fn new(name: &str, endpoint: &str) -> Self {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(300))).http_status_as_error(false).build().into();
        Self { name: name.to_string(), endpoint: endpoint.to_string(), api_key: std::env::var(API_KEY_ENV).ok(), agent }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }
}

impl PriorProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, png: &[u8], prompt: &str) -> Result<Vec<u8>, String> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = serde_json::to_vec(&HttpRequestBody { image: b64.encode(png), prompt }).map_err(|e| e.to_string())?;
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(&body[..]).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let is_json = resp.headers().get("content-type").and_then(|v| v.to_str().ok()).is_some_and(|v| v.contains("json"));
        let bytes = resp.body_mut().with_config().limit(256 << 20).read_to_vec().map_err(|e| e.to_string())?;
        if status >= 400 {
            return Err(format!("HTTP {status}: {}", String::from_utf8_lossy(&bytes[..bytes.len().min(512)])));
        }
        if is_json {
            let parsed: HttpResponseBody = serde_json::from_slice(&bytes).map_err(|e| format!("bad JSON response: {e}"))?;
            b64.decode(parsed.image.as_bytes()).map_err(|e| format!("bad base64 image: {e}"))
        } else {
            Ok(bytes)
        }
    }
}

/// Offline stand-in for a generative editor: a clean image under mild
/// geometric drift and colour change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticPriorConfig {
    /// Largest translation length in pixels.
    pub max_translation: f64,
    pub max_scale_delta: f64,
    /// Largest per-channel gain deviation.
    pub color_jitter: f64,
    pub seed: RandomSeed,
}

impl Default for SyntheticPriorConfig {
    fn default() -> Self {
        Self { max_translation: 8.0, max_scale_delta: 0.03, color_jitter: 0.05, seed: RandomSeed(0) }
    }
}

impl SyntheticPriorConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        let ok = self.max_translation >= 0.0 && self.color_jitter >= 0.0 && (0.0..0.5).contains(&self.max_scale_delta);
        if !ok {
            return Err(PriorError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Similarity transform about the image centre plus per-channel gains.
/// Content at `p` moves to `centre + scale * (p - centre) + (dy, dx)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityWarp {
    pub dy: f64,
    pub dx: f64,
    pub scale: f64,
    pub gains: [f64; 4],
}

impl SimilarityWarp {
    pub fn translation(dy: f64, dx: f64) -> Self {
        Self { dy, dx, scale: 1.0, gains: [1.0; 4] }
    }

    pub fn draw(cfg: &SyntheticPriorConfig) -> Self {
        let mut rng = cfg.seed.stream("synthetic-prior", 0);
        let r = cfg.max_translation * rng.gen::<f64>().sqrt();
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let scale = 1.0 + cfg.max_scale_delta * (2.0 * rng.gen::<f64>() - 1.0);
        let mut gains = [1.0; 4];
        for g in &mut gains {
            *g = 1.0 + cfg.color_jitter * (2.0 * rng.gen::<f64>() - 1.0);
        }
        Self { dy: r * theta.sin(), dx: r * theta.cos(), scale, gains }
    }

    /// Bilinear resampling with reflected borders, gains, clamp.
    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        let (h, w, c) = img.dims();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            let sy = cy + (y as f64 - cy - self.dy) / self.scale;
            let (y0, fy) = (sy.floor(), sy - sy.floor());
            let (ya, yb) = (reflect_index(y0 as isize, h), reflect_index(y0 as isize + 1, h));
            for x in 0..w {
                let sx = cx + (x as f64 - cx - self.dx) / self.scale;
                let (x0, fx) = (sx.floor(), sx - sx.floor());
                let (xa, xb) = (reflect_index(x0 as isize, w), reflect_index(x0 as isize + 1, w));
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| img.get(yy, xx, ch) as f64;
                    let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                    let bot = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                    let v = (top * (1.0 - fy) + bot * fy) * self.gains[ch.min(3)];
                    out.push(v as f32);
                }
            }
        }
        image::clamp_to_unit(h, w, c, out).expect("finite warp output")
    }
}

pub fn synthesize_offline_prior(gt: &ImageBuffer, cfg: &SyntheticPriorConfig) -> Result<ImageBuffer, PriorError> {
    cfg.validate()?;
    Ok(SimilarityWarp::draw(cfg).apply(gt))
}

/// Provider that echoes its input, optionally resized to fixed dims.
pub struct EchoProvider {
    pub name: String,
    pub output_dims: Option<(usize, usize)>,
}

impl PriorProvider for EchoProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, png: &[u8], _prompt: &str) -> Result<Vec<u8>, String> {
        match self.output_dims {
            None => Ok(png.to_vec()),
            Some((h, w)) => {
                let img = decode_png(png, 3).map_err(|e| e.to_string())?;
                let out = resize_bilinear(&img, h, w).map_err(|e| e.to_string())?;
                encode_png(&out).map_err(|e| e.to_string())
            }
        }
    }
}
