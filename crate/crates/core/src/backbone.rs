//! Restoration networks: a small Restormer-style U-net and a plain residual
//! conv net, both optionally fed with prior features.
//!
//! With `fusion = prior_concat`, the prior (aligned features or a raw prior
//! image) passes a 1x1 projection to `width` channels and is concatenated
//! with the degraded image in front of the first projection. Parameters live
//! under `backbone.*`.

use serde::{Deserialize, Serialize};

use crate::align::FeatureMap;
use crate::image::{clamp_to_unit, ImageBuffer, ImageError};
use crate::nn::{conv_weight, Elem, Padding, Params, Session, Tensor, Var};
use crate::seed::RandomSeed;

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("invalid backbone spec: {0}")]
    Spec(String),
    #[error("fusion requires a prior but none was given")]
    MissingPrior,
    #[error("prior given to a backbone built without fusion")]
    UnexpectedPrior,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    RestormerTiny,
    ResnetTiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    None,
    PriorConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub width: usize,
    /// Blocks per stage. Restormer: four levels, encoder/decoder share the
    /// count, the last entry is the bottleneck. ResNet: total blocks is the sum.
    pub depth: Vec<usize>,
    /// Attention heads per Restormer level.
    pub heads: Vec<usize>,
    pub ffn_expansion: f64,
    pub refinement_blocks: usize,
    pub downsample_factor: usize,
    pub fusion: Fusion,
    /// Channels of the prior input when fusing.
    pub prior_channels: usize,
    pub in_channels: usize,
    pub residual_mode: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::restormer_tiny(16)
    }
}

impl BackboneSpec {
    pub fn restormer_tiny(width: usize) -> Self {
        Self {
            kind: BackboneKind::RestormerTiny,
            width,
            depth: vec![1, 1, 1, 1],
            heads: vec![1, 2, 4, 8],
            ffn_expansion: 2.66,
            refinement_blocks: 0,
            downsample_factor: 8,
            fusion: Fusion::None,
            prior_channels: 0,
            in_channels: 3,
            residual_mode: true,
        }
    }

    pub fn resnet_tiny(width: usize) -> Self {
        Self {
            kind: BackboneKind::ResnetTiny,
            width,
            depth: vec![4],
            heads: vec![],
            ffn_expansion: 0.0,
            refinement_blocks: 0,
            downsample_factor: 1,
            fusion: Fusion::None,
            prior_channels: 0,
            in_channels: 3,
            residual_mode: true,
        }
    }

    pub fn with_prior(mut self, prior_channels: usize) -> Self {
        self.fusion = Fusion::PriorConcat;
        self.prior_channels = prior_channels;
        self
    }

    pub fn without_prior(mut self) -> Self {
        self.fusion = Fusion::None;
        self.prior_channels = 0;
        self
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let err = |m: String| Err(BackboneError::Spec(m));
        if self.width < 8 {
            return err(format!("width {} < 8", self.width));
        }
        if !self.downsample_factor.is_power_of_two() {
            return err(format!("downsample_factor {} is not a power of two", self.downsample_factor));
        }
        if self.in_channels == 0 {
            return err("in_channels must be positive".into());
        }
        match self.fusion {
            Fusion::PriorConcat if self.prior_channels == 0 => return err("prior_concat needs prior_channels > 0".into()),
            Fusion::None if self.prior_channels != 0 => return err("prior_channels set without fusion".into()),
            _ => {}
        }
        match self.kind {
            BackboneKind::RestormerTiny => {
                if self.depth.len() != 4 || self.heads.len() != 4 {
                    return err("restormer_tiny needs four depth and head entries".into());
                }
                if self.downsample_factor != 8 {
                    return err(format!("restormer_tiny downsamples by 8, not {}", self.downsample_factor));
                }
                if self.depth.iter().any(|&d| d == 0) {
                    return err("every level needs at least one block".into());
                }
                if !(self.ffn_expansion > 0.0) || self.hidden(self.width) == 0 {
                    return err(format!("ffn_expansion {} too small", self.ffn_expansion));
                }
                for (level, &h) in self.heads.iter().enumerate() {
                    let c = self.width << level;
                    if h == 0 || c % h != 0 {
                        return err(format!("{h} heads do not divide {c} channels at level {}", level + 1));
                    }
                }
                if (2 * self.width) % self.heads[0] != 0 {
                    return err("heads[0] must divide 2 * width".into());
                }
            }
            BackboneKind::ResnetTiny => {
                if self.downsample_factor != 1 {
                    return err("resnet_tiny runs at full resolution; downsample_factor must be 1".into());
                }
                if self.depth.iter().sum::<usize>() == 0 {
                    return err("resnet_tiny needs at least one block".into());
                }
            }
        }
        Ok(())
    }

    fn hidden(&self, c: usize) -> usize {
        (c as f64 * self.ffn_expansion) as usize
    }

    /// Channels entering the first projection.
    fn stem_inputs(&self) -> usize {
        match self.fusion {
            Fusion::None => self.in_channels,
            Fusion::PriorConcat => self.in_channels + self.width,
        }
    }
}

struct Init<'a> {
    seed: RandomSeed,
    params: &'a mut Params,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, c_out: usize, c_in_per_group: usize, k: usize, bias: bool) {
        let mut rng = self.seed.stream(&format!("init:{name}.weight"), 0);
        self.params.insert(format!("{name}.weight"), conv_weight(&mut rng, c_out, c_in_per_group, k));
        if bias {
            self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        }
    }

    fn zero_conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool) {
        self.params.insert(format!("{name}.weight"), Tensor::zeros(&[c_out, c_in, k, k]));
        if bias {
            self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        }
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.weight"), Tensor::full(&[c], 1.0));
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
    }

    fn transformer_block(&mut self, p: &str, c: usize, heads: usize, hidden: usize) {
        self.norm(&format!("{p}.norm1"), c);
        self.params.insert(format!("{p}.attn.temperature"), Tensor::full(&[heads], 1.0));
        self.conv(&format!("{p}.attn.qkv"), 3 * c, c, 1, false);
        self.conv(&format!("{p}.attn.qkv_dw"), 3 * c, 1, 3, false);
        self.conv(&format!("{p}.attn.project_out"), c, c, 1, false);
        self.norm(&format!("{p}.norm2"), c);
        self.conv(&format!("{p}.ffn.project_in"), 2 * hidden, c, 1, false);
        self.conv(&format!("{p}.ffn.dw"), 2 * hidden, 1, 3, false);
        self.conv(&format!("{p}.ffn.project_out"), c, hidden, 1, false);
    }
}

/// Initial weights for `spec`. Each tensor is drawn from its own stream keyed
/// by name, so specs that share a layer share its initial values.
pub fn build_backbone(spec: &BackboneSpec, seed: RandomSeed) -> Result<Params, BackboneError> {
    spec.validate()?;
    let mut params = Params::new();
    let mut init = Init { seed, params: &mut params };
    let w = spec.width;
    let inc = spec.in_channels;
    if spec.fusion == Fusion::PriorConcat {
        init.conv("backbone.prior_proj", w, spec.prior_channels, 1, true);
    }
    match spec.kind {
        BackboneKind::RestormerTiny => {
            init.conv("backbone.patch_embed", w, spec.stem_inputs(), 3, false);
            for level in 0..3 {
                let c = w << level;
                let blocks = spec.depth[level];
                for i in 0..blocks {
                    init.transformer_block(&format!("backbone.encoder{}.{i}", level + 1), c, spec.heads[level], spec.hidden(c));
                }
                init.conv(&format!("backbone.down{}", level + 1), c / 2, c, 3, false);
            }
            let c4 = w << 3;
            for i in 0..spec.depth[3] {
                init.transformer_block(&format!("backbone.latent.{i}"), c4, spec.heads[3], spec.hidden(c4));
            }
            for level in (0..3).rev() {
                let c = w << level;
                init.conv(&format!("backbone.up{}", level + 1), 4 * c, 2 * c, 3, false);
                let dc = if level == 0 {
                    2 * c
                } else {
                    init.conv(&format!("backbone.reduce{}", level + 1), c, 2 * c, 1, false);
                    c
                };
                for i in 0..spec.depth[level] {
                    init.transformer_block(&format!("backbone.decoder{}.{i}", level + 1), dc, spec.heads[level], spec.hidden(dc));
                }
            }
            for i in 0..spec.refinement_blocks {
                init.transformer_block(&format!("backbone.refinement.{i}"), 2 * w, spec.heads[0], spec.hidden(2 * w));
            }
            init.zero_conv("backbone.output", inc, 2 * w, 3, false);
        }
        BackboneKind::ResnetTiny => {
            init.conv("backbone.head", w, spec.stem_inputs(), 3, true);
            let blocks: usize = spec.depth.iter().sum::<usize>() + spec.refinement_blocks;
            for i in 0..blocks {
                init.conv(&format!("backbone.blocks.{i}.conv1"), w, w, 3, true);
                init.conv(&format!("backbone.blocks.{i}.conv2"), w, w, 3, true);
            }
            init.zero_conv("backbone.tail", inc, w, 3, true);
        }
    }
    Ok(params)
}

fn conv<T: Elem>(s: &mut Session<'_, T>, x: Var, name: &str) -> Var {
    let w = s.p(&format!("{name}.weight"));
    let b = s.opt(&format!("{name}.bias"));
    s.graph.conv2d(x, w, b, Padding::Reflect)
}

fn layer_norm<T: Elem>(s: &mut Session<'_, T>, x: Var, name: &str) -> Var {
    let w = s.p(&format!("{name}.weight"));
    let b = s.p(&format!("{name}.bias"));
    s.graph.channel_layer_norm(x, w, b)
}

/// Multi-head attention across channels: each head's `d x d` channel
/// affinity matrix is computed from L2-normalized query/key rows.
fn channel_attention<T: Elem>(s: &mut Session<'_, T>, x: Var, p: &str, heads: usize) -> Var {
    let (n, c, h, w) = s.graph.value(x).dims4();
    let d = c / heads;
    let qkv = conv(s, x, &format!("{p}.qkv"));
    let qkv = conv(s, qkv, &format!("{p}.qkv_dw"));
    let mut split = |i: usize| {
        let t = s.graph.slice_channels(qkv, i * c, c);
        s.graph.reshape(t, &[n * heads, d, h * w])
    };
    let (q, k, v) = (split(0), split(1), split(2));
    let q = s.graph.l2_normalize_rows(q);
    let k = s.graph.l2_normalize_rows(k);
    let attn = s.graph.matmul(q, k, true);
    let attn = s.graph.reshape(attn, &[n, heads, d * d]);
    let temp = s.p(&format!("{p}.temperature"));
    let attn = s.graph.scale_groups(attn, temp);
    let attn = s.graph.reshape(attn, &[n * heads, d, d]);
    let attn = s.graph.softmax_rows(attn);
    let out = s.graph.matmul(attn, v, false);
    let out = s.graph.reshape(out, &[n, c, h, w]);
    conv(s, out, &format!("{p}.project_out"))
}

fn gated_ffn<T: Elem>(s: &mut Session<'_, T>, x: Var, p: &str) -> Var {
    let y = conv(s, x, &format!("{p}.project_in"));
    let y = conv(s, y, &format!("{p}.dw"));
    let hidden = s.graph.shape(y)[1] / 2;
    let a = s.graph.slice_channels(y, 0, hidden);
    let g = s.graph.slice_channels(y, hidden, hidden);
    let a = s.graph.gelu(a);
    let y = s.graph.mul(a, g);
    conv(s, y, &format!("{p}.project_out"))
}

fn transformer_block<T: Elem>(s: &mut Session<'_, T>, x: Var, p: &str, heads: usize) -> Var {
    let n1 = layer_norm(s, x, &format!("{p}.norm1"));
    let a = channel_attention(s, n1, &format!("{p}.attn"), heads);
    let x = s.graph.add(x, a);
    let n2 = layer_norm(s, x, &format!("{p}.norm2"));
    let f = gated_ffn(s, n2, &format!("{p}.ffn"));
    s.graph.add(x, f)
}

fn stage<T: Elem>(s: &mut Session<'_, T>, mut x: Var, p: &str, blocks: usize, heads: usize) -> Var {
    for i in 0..blocks {
        x = transformer_block(s, x, &format!("{p}.{i}"), heads);
    }
    x
}

fn restormer<T: Elem>(s: &mut Session<'_, T>, spec: &BackboneSpec, stem: Var) -> Var {
    let mut x = conv(s, stem, "backbone.patch_embed");
    let mut skips = Vec::with_capacity(3);
    for level in 0..3 {
        let e = stage(s, x, &format!("backbone.encoder{}", level + 1), spec.depth[level], spec.heads[level]);
        skips.push(e);
        let d = conv(s, e, &format!("backbone.down{}", level + 1));
        x = s.graph.pixel_unshuffle(d, 2);
    }
    x = stage(s, x, "backbone.latent", spec.depth[3], spec.heads[3]);
    for level in (0..3).rev() {
        let u = conv(s, x, &format!("backbone.up{}", level + 1));
        let u = s.graph.pixel_shuffle(u, 2);
        x = s.graph.concat_channels(&[u, skips[level]]);
        if level > 0 {
            x = conv(s, x, &format!("backbone.reduce{}", level + 1));
        }
        x = stage(s, x, &format!("backbone.decoder{}", level + 1), spec.depth[level], spec.heads[level]);
    }
    x = stage(s, x, "backbone.refinement", spec.refinement_blocks, spec.heads[0]);
    conv(s, x, "backbone.output")
}

fn resnet<T: Elem>(s: &mut Session<'_, T>, spec: &BackboneSpec, stem: Var) -> Var {
    let mut x = conv(s, stem, "backbone.head");
    let blocks: usize = spec.depth.iter().sum::<usize>() + spec.refinement_blocks;
    for i in 0..blocks {
        let h = conv(s, x, &format!("backbone.blocks.{i}.conv1"));
        let h = s.graph.gelu(h);
        let h = conv(s, h, &format!("backbone.blocks.{i}.conv2"));
        x = s.graph.add(x, h);
    }
    conv(s, x, "backbone.tail")
}

/// Unclamped prediction for `[N, C, H, W]` inputs whose spatial dims are
/// already multiples of the downsample factor.
pub fn forward<T: Elem>(s: &mut Session<'_, T>, spec: &BackboneSpec, degraded: Var, prior: Option<Var>) -> Result<Var, BackboneError> {
    let (_, c, h, w) = s.graph.value(degraded).dims4();
    if c != spec.in_channels {
        return Err(BackboneError::DimMismatch(format!("{c} input channels, spec expects {}", spec.in_channels)));
    }
    let f = spec.downsample_factor;
    if h % f != 0 || w % f != 0 {
        return Err(BackboneError::DimMismatch(format!("{h}x{w} is not a multiple of {f}")));
    }
    let stem = match (spec.fusion, prior) {
        (Fusion::None, None) => degraded,
        (Fusion::None, Some(_)) => return Err(BackboneError::UnexpectedPrior),
        (Fusion::PriorConcat, None) => return Err(BackboneError::MissingPrior),
        (Fusion::PriorConcat, Some(p)) => {
            let (_, pc, ph, pw) = s.graph.value(p).dims4();
            if (pc, ph, pw) != (spec.prior_channels, h, w) {
                return Err(BackboneError::DimMismatch(format!("prior {pc}x{ph}x{pw}, expected {}x{h}x{w}", spec.prior_channels)));
            }
            let proj = conv(s, p, "backbone.prior_proj");
            s.graph.concat_channels(&[degraded, proj])
        }
    };
    let pred = match spec.kind {
        BackboneKind::RestormerTiny => restormer(s, spec, stem),
        BackboneKind::ResnetTiny => resnet(s, spec, stem),
    };
    Ok(if spec.residual_mode { s.graph.add(degraded, pred) } else { pred })
}

/// Reflect-pads bottom/right up to the downsample multiple, runs
/// [`forward`], and crops back.
pub fn forward_padded<T: Elem>(
    s: &mut Session<'_, T>,
    spec: &BackboneSpec,
    degraded: Var,
    prior: Option<Var>,
) -> Result<Var, BackboneError> {
    let (_, _, h, w) = s.graph.value(degraded).dims4();
    let f = spec.downsample_factor;
    let (ph, pw) = (h.div_ceil(f) * f - h, w.div_ceil(f) * f - w);
    if ph == 0 && pw == 0 {
        return forward(s, spec, degraded, prior);
    }
    let d = s.graph.reflect_pad(degraded, ph, pw);
    let p = match prior {
        Some(p) => {
            let (_, _, qh, qw) = s.graph.value(p).dims4();
            if (qh, qw) != (h, w) {
                return Err(BackboneError::DimMismatch(format!("prior {qh}x{qw} vs degraded {h}x{w}")));
            }
            Some(s.graph.reflect_pad(p, ph, pw))
        }
        None => None,
    };
    let out = forward(s, spec, d, p)?;
    Ok(s.graph.crop(out, h, w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationOutput {
    pub restored: ImageBuffer,
    pub residual_mode: bool,
}

fn check_params(spec: &BackboneSpec, params: &Params) -> Result<(), BackboneError> {
    let expected = build_backbone(spec, RandomSeed(0))?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            None => return Err(BackboneError::MissingParam(name.clone())),
            Some(p) if p.shape() != t.shape() => {
                return Err(BackboneError::DimMismatch(format!("{name}: {:?} vs {:?}", p.shape(), t.shape())))
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn restore(
    degraded: &ImageBuffer,
    aligned_prior: Option<&FeatureMap>,
    spec: &BackboneSpec,
    params: &Params,
) -> Result<RestorationOutput, BackboneError> {
    spec.validate()?;
    check_params(spec, params)?;
    let (h, w, c) = degraded.dims();
    let mut s = Session::<f32>::new(params, false);
    let d = s.graph.input(Tensor::from_vec(&[1, c, h, w], degraded.to_planar()));
    let p = aligned_prior.map(|f| s.graph.input(f.to_tensor()));
    let out = forward_padded(&mut s, spec, d, p)?;
    let planar = s.graph.value(out).data();
    let hw = h * w;
    let mut hwc = vec![0.0; hw * c];
    for ci in 0..c {
        for i in 0..hw {
            hwc[i * c + ci] = planar[ci * hw + i];
        }
    }
    Ok(RestorationOutput { restored: clamp_to_unit(h, w, c, hwc)?, residual_mode: spec.residual_mode })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, 3, |y, x, c| 0.5 + 0.4 * ((y as f32 * 0.31 + c as f32).sin() * (x as f32 * 0.17).cos())).unwrap()
    }

    fn randomize(p: &mut Params, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in p.iter_mut() {
            if name.ends_with("output.weight") || name.ends_with("tail.weight") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
            }
        }
    }

    /// Independent per-layer tally for the Restormer layout.
    fn restormer_count(spec: &BackboneSpec) -> usize {
        let w = spec.width;
        let block = |c: usize, heads: usize| {
            let hid = (c as f64 * spec.ffn_expansion).floor() as usize;
            let norms = 2 * 2 * c;
            let attn = heads + 3 * c * c + 3 * c * 9 + c * c;
            let ffn = 2 * hid * c + 2 * hid * 9 + c * hid;
            norms + attn + ffn
        };
        let mut total = w * spec.stem_inputs() * 9;
        for l in 0..3 {
            let c = w << l;
            total += spec.depth[l] * block(c, spec.heads[l]);
            total += (c / 2) * c * 9;
            total += (4 * c) * (2 * c) * 9;
            if l > 0 {
                total += c * 2 * c;
                total += spec.depth[l] * block(c, spec.heads[l]);
            } else {
                total += spec.depth[0] * block(2 * c, spec.heads[0]);
            }
        }
        total += spec.depth[3] * block(8 * w, spec.heads[3]);
        total += spec.refinement_blocks * block(2 * w, spec.heads[0]);
        total += 3 * 2 * w * 9;
        if spec.fusion == Fusion::PriorConcat {
            total += w * spec.prior_channels + w;
        }
        total
    }

    #[test]
    fn parameter_count_matches_layer_tally() {
        for spec in [
            BackboneSpec::restormer_tiny(16),
            BackboneSpec::restormer_tiny(24).with_prior(16),
            BackboneSpec { refinement_blocks: 2, depth: vec![2, 1, 3, 2], ..BackboneSpec::restormer_tiny(16) },
        ] {
            let p = build_backbone(&spec, RandomSeed(1)).unwrap();
            assert_eq!(p.num_scalars(), restormer_count(&spec), "{spec:?}");
        }
        let r = BackboneSpec::resnet_tiny(12);
        let p = build_backbone(&r, RandomSeed(1)).unwrap();
        assert_eq!(p.num_scalars(), (12 * 3 * 9 + 12) + 4 * 2 * (12 * 12 * 9 + 12) + (3 * 12 * 9 + 3));
    }

    #[test]
    fn spec_validation() {
        assert!(BackboneSpec { width: 4, ..Default::default() }.validate().is_err());
        assert!(BackboneSpec { downsample_factor: 6, ..Default::default() }.validate().is_err());
        assert!(BackboneSpec { heads: vec![1, 3, 4, 8], ..Default::default() }.validate().is_err());
        assert!(BackboneSpec { fusion: Fusion::PriorConcat, ..Default::default() }.validate().is_err());
        assert!(BackboneSpec { downsample_factor: 2, ..BackboneSpec::resnet_tiny(8) }.validate().is_err());
        let json = serde_json::to_string(&BackboneSpec::restormer_tiny(16).with_prior(3)).unwrap();
        assert_eq!(serde_json::from_str::<BackboneSpec>(&json).unwrap(), BackboneSpec::restormer_tiny(16).with_prior(3));
    }

    #[test]
    fn fusion_switch_only_touches_prior_path() {
        let base = BackboneSpec::restormer_tiny(16);
        let a = build_backbone(&base, RandomSeed(9)).unwrap();
        let b = build_backbone(&base.clone().with_prior(8), RandomSeed(9)).unwrap();
        assert_eq!(a, build_backbone(&base, RandomSeed(9)).unwrap());
        let names_a: Vec<_> = a.names().collect();
        let extra: Vec<_> = b.names().filter(|n| !a.contains(n)).collect();
        assert_eq!(extra, ["backbone.prior_proj.bias", "backbone.prior_proj.weight"]);
        assert_eq!(b.len(), a.len() + 2);
        for n in names_a {
            let (ta, tb) = (a.get(n).unwrap(), b.get(n).unwrap());
            if n == "backbone.patch_embed.weight" {
                assert_eq!(ta.shape(), &[16, 3, 3, 3]);
                assert_eq!(tb.shape(), &[16, 3 + 16, 3, 3]);
            } else {
                assert_eq!(ta, tb, "{n}");
            }
        }
    }

    #[test]
    fn zero_output_layer_is_identity() {
        for spec in [BackboneSpec::restormer_tiny(16), BackboneSpec::resnet_tiny(8)] {
            let p = build_backbone(&spec, RandomSeed(3)).unwrap();
            let img = textured(24, 16);
            let out = restore(&img, None, &spec, &p).unwrap();
            assert_eq!(out.restored, img);
            assert!(out.residual_mode);
        }
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let spec = BackboneSpec::restormer_tiny(8).with_prior(4);
        let spec = BackboneSpec { heads: vec![1, 1, 2, 4], ..spec };
        let mut p = build_backbone(&spec, RandomSeed(4)).unwrap();
        randomize(&mut p, 4);
        for (h, w) in [(250, 250), (17, 23), (8, 9)] {
            let img = textured(h, w);
            let prior = FeatureMap::new(4, h, w, vec![0.1; 4 * h * w]).unwrap();
            let out = restore(&img, Some(&prior), &spec, &p).unwrap();
            assert_eq!(out.restored.dims(), (h, w, 3));
            assert_eq!(restore(&img, Some(&prior), &spec, &p).unwrap(), out);
            assert_ne!(out.restored, img);
        }
    }

    #[test]
    fn prior_contract_errors() {
        let spec = BackboneSpec::resnet_tiny(8).with_prior(4);
        let p = build_backbone(&spec, RandomSeed(5)).unwrap();
        let img = textured(16, 16);
        assert!(matches!(restore(&img, None, &spec, &p), Err(BackboneError::MissingPrior)));
        let bad = FeatureMap::new(4, 16, 15, vec![0.0; 4 * 16 * 15]).unwrap();
        assert!(matches!(restore(&img, Some(&bad), &spec, &p), Err(BackboneError::DimMismatch(_))));
        let plain = BackboneSpec::resnet_tiny(8);
        let q = build_backbone(&plain, RandomSeed(5)).unwrap();
        let ok = FeatureMap::new(4, 16, 16, vec![0.0; 4 * 256]).unwrap();
        assert!(matches!(restore(&img, Some(&ok), &plain, &q), Err(BackboneError::UnexpectedPrior)));
        assert!(matches!(restore(&img, None, &spec, &q), Err(BackboneError::DimMismatch(_))));
        let r: Params = p.iter().filter(|(n, _)| !n.starts_with("backbone.prior_proj")).map(|(n, t)| (n.clone(), t.clone())).collect();
        assert!(matches!(restore(&img, Some(&ok), &spec, &r), Err(BackboneError::MissingParam(_))));
    }

    #[test]
    fn restormer_gradients_match_finite_differences() {
        let spec = BackboneSpec { heads: vec![1, 2, 2, 4], ..BackboneSpec::restormer_tiny(8).with_prior(2) };
        let mut p = build_backbone(&spec, RandomSeed(6)).unwrap();
        randomize(&mut p, 6);
        let x: Vec<f64> = (0..3 * 64).map(|i| ((i * 17) % 23) as f64 / 23.0).collect();
        let q: Vec<f64> = (0..2 * 64).map(|i| ((i * 5) % 7) as f64 / 7.0).collect();
        let loss = |params: &Params| -> (f64, Params) {
            let mut s = Session::<f64>::new(params, true);
            let d = s.graph.input(Tensor::from_vec(&[1, 3, 8, 8], x.clone()));
            let pr = s.graph.input(Tensor::from_vec(&[1, 2, 8, 8], q.clone()));
            let out = forward(&mut s, &spec, d, Some(pr)).unwrap();
            let t = s.graph.input(Tensor::zeros(&[1, 3, 8, 8]));
            let l = s.graph.charbonnier(out, t, 1e-3);
            let v = s.graph.value(l).data()[0];
            let g = s.graph.backward(l);
            (v, s.param_grads(&g))
        };
        let (_, grads) = loss(&p);
        for name in [
            "backbone.latent.0.attn.temperature",
            "backbone.encoder2.0.attn.qkv.weight",
            "backbone.prior_proj.weight",
            "backbone.decoder1.0.norm2.weight",
        ] {
            for j in [0, 1] {
                let h = 1e-3f32;
                let mut plus = p.clone();
                plus.get_mut(name).unwrap().data_mut()[j] += h;
                let mut minus = p.clone();
                minus.get_mut(name).unwrap().data_mut()[j] -= h;
                let dh = (plus.get(name).unwrap().data()[j] - minus.get(name).unwrap().data()[j]) as f64;
                let numeric = (loss(&plus).0 - loss(&minus).0) / dh;
                let a = grads.get(name).unwrap().data()[j] as f64;
                assert!((a - numeric).abs() <= 2e-3 * a.abs().max(numeric.abs()) + 1e-6, "{name}[{j}]: {a} vs {numeric}");
            }
        }
    }
}
