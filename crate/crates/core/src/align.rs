//! Deformable alignment of prior features onto the degraded frame.
//!
//! A shallow encoder (shared by both inputs) maps each image to
//! `feat_channels` features at full resolution. An offset head reads the
//! concatenated features of the degraded image and the prior and predicts,
//! per position and tap, a bounded 2-D offset `max_offset * tanh(.)` and an
//! optional modulation weight `sigmoid(.)`. The prior features are then
//! gathered at the displaced taps (see [`crate::nn::deform`]) and mixed by a
//! learned `[C, C, k, k]` weight.
//!
//! Parameters live under `align.encoder.*`, `align.offset_head.*` and
//! `align.mix.*`.

use serde::{Deserialize, Serialize};

use crate::image::ImageBuffer;
use crate::nn::{conv_weight, Elem, Padding, Params, Session, Tensor, Var};
use crate::seed::RandomSeed;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("invalid align config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub feat_channels: usize,
    /// Number of sampling taps; a perfect square.
    pub taps: usize,
    pub max_offset: f64,
    pub use_modulation: bool,
    pub in_channels: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { feat_channels: 32, taps: 9, max_offset: 16.0, use_modulation: true, in_channels: 3 }
    }
}

impl AlignConfig {
    pub fn kernel(&self) -> usize {
        (self.taps as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        let k = self.kernel();
        if k * k != self.taps || k % 2 == 0 {
            return Err(AlignError::Config(format!("taps {} must be an odd perfect square", self.taps)));
        }
        if !(self.max_offset >= 1.0) {
            return Err(AlignError::Config(format!("max_offset {} must be >= 1", self.max_offset)));
        }
        if self.feat_channels == 0 || self.in_channels == 0 {
            return Err(AlignError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Output channels of the offset head.
    fn head_channels(&self) -> usize {
        if self.use_modulation {
            3 * self.taps
        } else {
            2 * self.taps
        }
    }
}

/// Planar `[C, H, W]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, AlignError> {
        if channels * height * width == 0 || data.len() != channels * height * width {
            return Err(AlignError::DimMismatch(format!("{} values for a {channels}x{height}x{width} feature map", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(AlignError::DimMismatch(format!("non-finite feature at index {i}")));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
    }

    fn from_tensor(t: &Tensor<f32>) -> Self {
        let (_, c, h, w) = t.dims4();
        Self { channels: c, height: h, width: w, data: t.data()[..c * h * w].to_vec() }
    }
}

/// Per-position, per-tap sampling displacement in cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentField {
    pub taps: usize,
    pub height: usize,
    pub width: usize,
    /// `[2 * taps, H, W]`: `(dy, dx)` of tap `k` at channels `2k`, `2k + 1`.
    pub offsets: Vec<f32>,
    /// `[taps, H, W]` in `[0, 1]`.
    pub modulation: Option<Vec<f32>>,
}

impl AlignmentField {
    /// All taps displaced by the same `(dy, dx)`, unit modulation.
    pub fn uniform(taps: usize, height: usize, width: usize, dy: f32, dx: f32) -> Self {
        let hw = height * width;
        let mut offsets = vec![0.0; 2 * taps * hw];
        for k in 0..taps {
            offsets[2 * k * hw..(2 * k + 1) * hw].fill(dy);
            offsets[(2 * k + 1) * hw..(2 * k + 2) * hw].fill(dx);
        }
        Self { taps, height, width, offsets, modulation: None }
    }

    /// `(dy, dx)` of tap `k` at `(y, x)`.
    pub fn offset(&self, k: usize, y: usize, x: usize) -> (f32, f32) {
        let hw = self.height * self.width;
        let p = y * self.width + x;
        (self.offsets[2 * k * hw + p], self.offsets[(2 * k + 1) * hw + p])
    }

    /// Mean `(dy, dx)` over all positions and taps.
    pub fn mean_offset(&self) -> (f64, f64) {
        let hw = self.height * self.width;
        let (mut sy, mut sx) = (0.0, 0.0);
        for k in 0..self.taps {
            sy += self.offsets[2 * k * hw..(2 * k + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
            sx += self.offsets[(2 * k + 1) * hw..(2 * k + 2) * hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let n = (self.taps * hw) as f64;
        (sy / n, sx / n)
    }

    pub fn max_abs_offset(&self) -> f32 {
        self.offsets.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

const ENCODER: [&str; 2] = ["align.encoder.0", "align.encoder.1"];
const HEAD: [&str; 2] = ["align.offset_head.0", "align.offset_head.1"];
const MIX: &str = "align.mix";

fn param_seed(seed: RandomSeed, name: &str) -> rand_chacha::ChaCha8Rng {
    seed.stream(&format!("init:{name}"), 0)
}

/// Random encoder/mix weights, zero offset head output layer (so training
/// starts from zero offsets and modulation 0.5), zero biases.
pub fn init_params(cfg: &AlignConfig, seed: RandomSeed) -> Result<Params, AlignError> {
    cfg.validate()?;
    let (f, k) = (cfg.feat_channels, cfg.kernel());
    let mut p = Params::new();
    let mut conv = |name: &str, c_out: usize, c_in: usize, ks: usize, zero: bool| {
        let w = if zero { Tensor::zeros(&[c_out, c_in, ks, ks]) } else { conv_weight(&mut param_seed(seed, name), c_out, c_in, ks) };
        p.insert(format!("{name}.weight"), w);
        p.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
    };
    conv(ENCODER[0], f, cfg.in_channels, 3, false);
    conv(ENCODER[1], f, f, 3, false);
    conv(HEAD[0], f, 2 * f, 3, false);
    conv(HEAD[1], cfg.head_channels(), f, 3, true);
    conv(MIX, f, f, k, false);
    Ok(p)
}

/// Mixing weight that passes channel `c` of the centre tap to output `c`.
pub fn identity_mix(channels: usize, kernel: usize) -> Tensor<f32> {
    let kk = kernel * kernel;
    let mut w = Tensor::zeros(&[channels, channels, kernel, kernel]);
    for c in 0..channels {
        w.data_mut()[(c * channels + c) * kk + kk / 2] = 1.0;
    }
    w
}

fn conv<T: Elem>(s: &mut Session<'_, T>, x: Var, name: &str) -> Var {
    let w = s.p(&format!("{name}.weight"));
    let b = s.opt(&format!("{name}.bias"));
    s.graph.conv2d(x, w, b, Padding::Reflect)
}

/// Shared shallow encoder on `[N, C_in, H, W]` images.
pub fn encode<T: Elem>(s: &mut Session<'_, T>, image: Var) -> Var {
    let h = conv(s, image, ENCODER[0]);
    let h = s.graph.gelu(h);
    conv(s, h, ENCODER[1])
}

/// Offset field (and modulation) from degraded and prior features.
pub fn predict_offsets_graph<T: Elem>(s: &mut Session<'_, T>, cfg: &AlignConfig, deg_feat: Var, prior_feat: Var) -> (Var, Option<Var>) {
    let joint = s.graph.concat_channels(&[deg_feat, prior_feat]);
    let h = conv(s, joint, HEAD[0]);
    let h = s.graph.gelu(h);
    let raw = conv(s, h, HEAD[1]);
    let off = s.graph.slice_channels(raw, 0, 2 * cfg.taps);
    let off = s.graph.tanh(off);
    let off = s.graph.scale(off, cfg.max_offset);
    let mask = cfg.use_modulation.then(|| {
        let m = s.graph.slice_channels(raw, 2 * cfg.taps, cfg.taps);
        s.graph.sigmoid(m)
    });
    (off, mask)
}

pub fn deformable_sample_graph<T: Elem>(s: &mut Session<'_, T>, prior_feat: Var, offsets: Var, mask: Option<Var>) -> Var {
    let w = s.p(&format!("{MIX}.weight"));
    let b = s.opt(&format!("{MIX}.bias"));
    s.graph.deform_conv(prior_feat, offsets, mask, w, b)
}

/// Graph nodes produced by one alignment pass.
#[derive(Debug, Clone, Copy)]
pub struct AlignNodes {
    pub aligned: Var,
    pub offsets: Var,
    pub modulation: Option<Var>,
}

pub fn align_graph<T: Elem>(s: &mut Session<'_, T>, cfg: &AlignConfig, degraded: Var, prior: Var) -> AlignNodes {
    let deg_feat = encode(s, degraded);
    let prior_feat = encode(s, prior);
    let (offsets, modulation) = predict_offsets_graph(s, cfg, deg_feat, prior_feat);
    let aligned = deformable_sample_graph(s, prior_feat, offsets, modulation);
    AlignNodes { aligned, offsets, modulation }
}

fn image_tensor(img: &ImageBuffer) -> Tensor<f32> {
    Tensor::from_vec(&[1, img.channels(), img.height(), img.width()], img.to_planar())
}

fn check_params(params: &Params, names: &[&str]) -> Result<(), AlignError> {
    for n in names {
        for suffix in ["weight", "bias"] {
            let full = format!("{n}.{suffix}");
            if !params.contains(&full) {
                return Err(AlignError::MissingParam(full));
            }
        }
    }
    Ok(())
}

pub fn extract_features(image: &ImageBuffer, cfg: &AlignConfig, params: &Params) -> Result<FeatureMap, AlignError> {
    cfg.validate()?;
    check_params(params, &ENCODER)?;
    if image.channels() != cfg.in_channels {
        return Err(AlignError::DimMismatch(format!("image has {} channels, encoder expects {}", image.channels(), cfg.in_channels)));
    }
    let mut s = Session::<f32>::new(params, false);
    let x = s.graph.input(image_tensor(image));
    let f = encode(&mut s, x);
    Ok(FeatureMap::from_tensor(s.graph.value(f)))
}

pub fn predict_offsets(
    deg_feat: &FeatureMap,
    prior_feat: &FeatureMap,
    cfg: &AlignConfig,
    params: &Params,
) -> Result<AlignmentField, AlignError> {
    cfg.validate()?;
    check_params(params, &HEAD)?;
    if (deg_feat.channels, deg_feat.height, deg_feat.width) != (prior_feat.channels, prior_feat.height, prior_feat.width) {
        return Err(AlignError::DimMismatch(format!(
            "degraded features {}x{}x{} vs prior features {}x{}x{}",
            deg_feat.channels, deg_feat.height, deg_feat.width, prior_feat.channels, prior_feat.height, prior_feat.width
        )));
    }
    let mut s = Session::<f32>::new(params, false);
    let d = s.graph.input(deg_feat.to_tensor());
    let p = s.graph.input(prior_feat.to_tensor());
    let (off, mask) = predict_offsets_graph(&mut s, cfg, d, p);
    Ok(AlignmentField {
        taps: cfg.taps,
        height: deg_feat.height,
        width: deg_feat.width,
        offsets: s.graph.value(off).data().to_vec(),
        modulation: mask.map(|m| s.graph.value(m).data().to_vec()),
    })
}

pub fn deformable_sample(prior_feat: &FeatureMap, field: &AlignmentField, params: &Params) -> Result<FeatureMap, AlignError> {
    check_params(params, &[MIX])?;
    if (field.height, field.width) != (prior_feat.height, prior_feat.width) {
        return Err(AlignError::DimMismatch(format!(
            "field {}x{} vs features {}x{}",
            field.height, field.width, prior_feat.height, prior_feat.width
        )));
    }
    let wshape = params.get(&format!("{MIX}.weight")).map(|w| w.shape().to_vec()).unwrap_or_default();
    if wshape.len() != 4 || wshape[1] != prior_feat.channels || wshape[2] * wshape[3] != field.taps {
        return Err(AlignError::DimMismatch(format!("mix weight {wshape:?} vs {} channels, {} taps", prior_feat.channels, field.taps)));
    }
    let (h, w, k) = (field.height, field.width, field.taps);
    let mut s = Session::<f32>::new(params, false);
    let x = s.graph.input(prior_feat.to_tensor());
    let off = s.graph.input(Tensor::from_vec(&[1, 2 * k, h, w], field.offsets.clone()));
    let mask = field.modulation.as_ref().map(|m| s.graph.input(Tensor::from_vec(&[1, k, h, w], m.clone())));
    let out = deformable_sample_graph(&mut s, x, off, mask);
    Ok(FeatureMap::from_tensor(s.graph.value(out)))
}

/// Aligned prior features on the degraded frame, plus the field used.
pub fn align_prior_with_field(
    degraded: &ImageBuffer,
    prior: &ImageBuffer,
    cfg: &AlignConfig,
    params: &Params,
) -> Result<(FeatureMap, AlignmentField), AlignError> {
    cfg.validate()?;
    check_params(params, &ENCODER)?;
    check_params(params, &HEAD)?;
    check_params(params, &[MIX])?;
    if degraded.dims() != prior.dims() {
        return Err(AlignError::DimMismatch(format!("degraded {:?} vs prior {:?}", degraded.dims(), prior.dims())));
    }
    let mut s = Session::<f32>::new(params, false);
    let d = s.graph.input(image_tensor(degraded));
    let p = s.graph.input(image_tensor(prior));
    let nodes = align_graph(&mut s, cfg, d, p);
    let field = AlignmentField {
        taps: cfg.taps,
        height: degraded.height(),
        width: degraded.width(),
        offsets: s.graph.value(nodes.offsets).data().to_vec(),
        modulation: nodes.modulation.map(|m| s.graph.value(m).data().to_vec()),
    };
    Ok((FeatureMap::from_tensor(s.graph.value(nodes.aligned)), field))
}

pub fn align_prior(degraded: &ImageBuffer, prior: &ImageBuffer, cfg: &AlignConfig, params: &Params) -> Result<FeatureMap, AlignError> {
    align_prior_with_field(degraded, prior, cfg, params).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> AlignConfig {
        AlignConfig { feat_channels: 4, ..Default::default() }
    }

    fn textured(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, 3, |y, x, c| 0.5 + 0.3 * ((y as f32 * 0.7 + c as f32).sin() * (x as f32 * 0.45).cos())).unwrap()
    }

    fn feature_map(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        FeatureMap::new(c, h, w, data).unwrap()
    }

    fn identity_params(c: usize) -> Params {
        let mut p = Params::new();
        p.insert("align.mix.weight", identity_mix(c, 3));
        p.insert("align.mix.bias", Tensor::zeros(&[c]));
        p
    }

    #[test]
    fn config_validation() {
        assert!(AlignConfig { taps: 8, ..Default::default() }.validate().is_err());
        assert!(AlignConfig { taps: 4, ..Default::default() }.validate().is_err());
        assert!(AlignConfig { max_offset: 0.5, ..Default::default() }.validate().is_err());
        assert!(AlignConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let cfg = small_cfg();
        let mut p = init_params(&cfg, RandomSeed(1)).unwrap();
        for (name, t) in p.iter_mut() {
            if name.starts_with("align.encoder") {
                t.data_mut().fill(0.0);
            }
        }
        let f = extract_features(&textured(12, 10), &cfg, &p).unwrap();
        assert_eq!((f.channels, f.height, f.width), (4, 12, 10));
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_deterministic_and_constant_on_flat_input() {
        let cfg = small_cfg();
        let p = init_params(&cfg, RandomSeed(2)).unwrap();
        let img = textured(9, 11);
        assert_eq!(extract_features(&img, &cfg, &p).unwrap(), extract_features(&img, &cfg, &p).unwrap());

        let flat = ImageBuffer::from_fn(12, 12, 3, |_, _, c| [0.2, 0.6, 0.9][c]).unwrap();
        let f = extract_features(&flat, &cfg, &p).unwrap();
        for c in 0..f.channels {
            let v0 = f.get(c, 6, 6);
            for y in 2..10 {
                for x in 2..10 {
                    assert!((f.get(c, y, x) - v0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_offsets_and_half_modulation() {
        let cfg = small_cfg();
        let p = init_params(&cfg, RandomSeed(3)).unwrap();
        let d = extract_features(&textured(10, 10), &cfg, &p).unwrap();
        let q = extract_features(&textured(10, 10).flip_horizontal(), &cfg, &p).unwrap();
        let field = predict_offsets(&d, &q, &cfg, &p).unwrap();
        assert!(field.offsets.iter().all(|&v| v == 0.0));
        assert!(field.modulation.unwrap().iter().all(|&v| v == 0.5));
        let bad = feature_map(4, 9, 10, |_, _, _| 0.0);
        assert!(matches!(predict_offsets(&d, &bad, &cfg, &p), Err(AlignError::DimMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn offsets_stay_bounded_for_any_params(seed in 0u64..10_000, scale in 0.1f32..50.0, max_offset in 1.0f64..20.0) {
            let cfg = AlignConfig { feat_channels: 3, max_offset, ..Default::default() };
            let mut p = init_params(&cfg, RandomSeed(seed)).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for (_, t) in p.iter_mut() {
                for v in t.data_mut() {
                    *v = rng.gen_range(-1.0..1.0) * scale;
                }
            }
            let d = extract_features(&textured(8, 9), &cfg, &p).unwrap();
            let q = extract_features(&textured(8, 9).rotate90(2), &cfg, &p).unwrap();
            let field = predict_offsets(&d, &q, &cfg, &p).unwrap();
            prop_assert!(field.max_abs_offset() as f64 <= max_offset + 1e-4);
            prop_assert!(field.modulation.unwrap().iter().all(|m| (0.0..=1.0).contains(m)));
        }
    }

    #[test]
    fn identity_sampling_reproduces_features() {
        let f = feature_map(3, 7, 9, |c, y, x| (c as f32 + 1.0) * ((y * 9 + x) as f32).sin());
        let field = AlignmentField::uniform(9, 7, 9, 0.0, 0.0);
        let out = deformable_sample(&f, &field, &identity_params(3)).unwrap();
        assert!(out.data.iter().zip(&f.data).all(|(a, b)| (a - b).abs() < 1e-6));
        let ones = AlignmentField { modulation: Some(vec![1.0; 9 * 63]), ..field };
        let out = deformable_sample(&f, &ones, &identity_params(3)).unwrap();
        assert!(out.data.iter().zip(&f.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn integer_shift_moves_content_left() {
        let f = feature_map(2, 8, 10, |c, y, x| ((c * 31 + y * 7 + x * x) % 13) as f32 / 13.0);
        let field = AlignmentField::uniform(9, 8, 10, 0.0, 2.0);
        let out = deformable_sample(&f, &field, &identity_params(2)).unwrap();
        for c in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    assert!((out.get(c, y, x) - f.get(c, y, x + 2)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn fractional_shift_is_exact_on_ramps() {
        let f = feature_map(1, 6, 12, |_, _, x| 0.25 * x as f32 - 1.0);
        let field = AlignmentField::uniform(9, 6, 12, 0.0, 0.5);
        let out = deformable_sample(&f, &field, &identity_params(1)).unwrap();
        for y in 0..6 {
            for x in 0..11 {
                let want = 0.25 * (x as f32 + 0.5) - 1.0;
                assert!((out.get(0, y, x) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn self_alignment_is_a_no_op_at_init() {
        let cfg = AlignConfig { feat_channels: 4, use_modulation: false, ..Default::default() };
        let mut p = init_params(&cfg, RandomSeed(4)).unwrap();
        p.insert("align.mix.weight", identity_mix(4, 3));
        let img = textured(10, 12);
        let aligned = align_prior(&img, &img, &cfg, &p).unwrap();
        let feats = extract_features(&img, &cfg, &p).unwrap();
        assert!(aligned.data.iter().zip(&feats.data).all(|(a, b)| (a - b).abs() < 1e-6));
        // with modulation the zero head yields 0.5, which a doubled identity mix undoes
        let cfg_m = AlignConfig { use_modulation: true, ..cfg };
        let mut pm = init_params(&cfg_m, RandomSeed(4)).unwrap();
        let mut mix = identity_mix(4, 3);
        mix.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        pm.insert("align.mix.weight", mix);
        let aligned = align_prior(&img, &img, &cfg_m, &pm).unwrap();
        assert!(aligned.data.iter().zip(&feats.data).all(|(a, b)| (a - b).abs() < 1e-5));
        assert_eq!(align_prior(&img, &img, &cfg_m, &pm).unwrap(), aligned);
    }

    /// Finite differences through the whole alignment pass (f64), with
    /// respect to the offset head's output bias, i.e. a uniform offset.
    #[test]
    fn offset_gradient_matches_finite_differences_on_toy_map() {
        let cfg = AlignConfig { feat_channels: 2, max_offset: 4.0, ..Default::default() };
        let mut p = init_params(&cfg, RandomSeed(5)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for v in p.get_mut("align.offset_head.1.bias").unwrap().data_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
        let deg = textured(9, 9).crop(1, 1, 8, 8).unwrap();
        let prior = textured(8, 8).flip_horizontal();
        let to64 = |img: &ImageBuffer| Tensor::<f64>::from_vec(&[1, 3, 8, 8], img.to_planar().iter().map(|&v| v as f64).collect());
        let target: Vec<f64> = (0..2 * 64).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let loss = |params: &Params| -> (f64, Option<Tensor<f64>>) {
            let mut s = Session::<f64>::new(params, true);
            let d = s.graph.input(to64(&deg));
            let q = s.graph.input(to64(&prior));
            let nodes = align_graph(&mut s, &cfg, d, q);
            let t = s.graph.input(Tensor::from_vec(&[1, 2, 8, 8], target.clone()));
            let l = s.graph.charbonnier(nodes.aligned, t, 1e-3);
            let val = s.graph.value(l).data()[0];
            let g = s.graph.backward(l);
            let grads = s.param_grads(&g);
            (val, grads.get("align.offset_head.1.bias").map(|t| t.cast()))
        };
        let (_, analytic) = loss(&p);
        let analytic = analytic.unwrap();
        let h = 1e-4;
        for j in 0..2 * cfg.taps {
            let mut plus = p.clone();
            plus.get_mut("align.offset_head.1.bias").unwrap().data_mut()[j] += h as f32;
            let mut minus = p.clone();
            minus.get_mut("align.offset_head.1.bias").unwrap().data_mut()[j] -= h as f32;
            let bp = plus.get("align.offset_head.1.bias").unwrap().data()[j] as f64;
            let bm = minus.get("align.offset_head.1.bias").unwrap().data()[j] as f64;
            let numeric = (loss(&plus).0 - loss(&minus).0) / (bp - bm);
            let a = analytic.data()[j];
            assert!((a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()) + 1e-8, "tap channel {j}: analytic {a} numeric {numeric}");
        }
    }
}
