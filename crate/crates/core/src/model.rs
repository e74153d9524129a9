//! The full restoration model: optional alignment in front of a backbone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::{self, AlignConfig, AlignError};
use crate::backbone::{self, BackboneError, BackboneSpec, Fusion};
use crate::image::{clamp_to_unit, ImageBuffer};
use crate::nn::{Elem, Params, Session, Tensor, Var};
use crate::seed::RandomSeed;

/// How the prior reaches the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// No prior.
    Baseline,
    /// Raw prior image concatenated through the fusion projection.
    Concat,
    /// Prior features warped by the alignment module, then fused.
    Aligned,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Baseline, FusionMode::Concat, FusionMode::Aligned];

    pub fn key(self) -> &'static str {
        match self {
            FusionMode::Baseline => "baseline",
            FusionMode::Concat => "concat",
            FusionMode::Aligned => "aligned",
        }
    }

    pub fn uses_prior(self) -> bool {
        self != FusionMode::Baseline
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| format!("unknown fusion mode `{s}` (expected baseline, concat or aligned)"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("{0} mode needs a prior image")]
    MissingPrior(FusionMode),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub fusion_mode: FusionMode,
    /// Backbone with its fusion input set to match `fusion_mode`.
    pub backbone: BackboneSpec,
    pub align: AlignConfig,
}

impl Model {
    pub fn new(fusion_mode: FusionMode, backbone: &BackboneSpec, align: &AlignConfig) -> Self {
        let backbone = match fusion_mode {
            FusionMode::Baseline => backbone.clone().without_prior(),
            FusionMode::Concat => backbone.clone().with_prior(backbone.in_channels),
            FusionMode::Aligned => backbone.clone().with_prior(align.feat_channels),
        };
        Self { fusion_mode, backbone, align: align.clone() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        if self.fusion_mode == FusionMode::Aligned {
            self.align.validate()?;
            if self.align.in_channels != self.backbone.in_channels {
                return Err(AlignError::Config("align and backbone disagree on input channels".into()).into());
            }
        }
        Ok(())
    }

    /// Backbone weights, plus alignment weights in aligned mode.
    pub fn init(&self, seed: RandomSeed) -> Result<Params, ModelError> {
        self.validate()?;
        let mut p = backbone::build_backbone(&self.backbone, seed.derive("backbone", 0))?;
        if self.fusion_mode == FusionMode::Aligned {
            p.extend(align::init_params(&self.align, seed.derive("align", 0))?);
        }
        Ok(p)
    }

    /// Unclamped restoration of `[N, C, H, W]` inputs of any spatial size.
    pub fn forward<T: Elem>(&self, s: &mut Session<'_, T>, degraded: Var, prior: Option<Var>) -> Result<Var, ModelError> {
        let fused = match (self.fusion_mode, prior) {
            (FusionMode::Baseline, _) => None,
            (mode, None) => return Err(ModelError::MissingPrior(mode)),
            (FusionMode::Concat, Some(p)) => Some(p),
            (FusionMode::Aligned, Some(p)) => Some(align::align_graph(s, &self.align, degraded, p).aligned),
        };
        debug_assert_eq!(fused.is_some(), self.backbone.fusion == Fusion::PriorConcat);
        Ok(backbone::forward_padded(s, &self.backbone, degraded, fused)?)
    }

    /// Restored image, clamped to `[0, 1]`.
    pub fn restore(&self, params: &Params, degraded: &ImageBuffer, prior: Option<&ImageBuffer>) -> Result<ImageBuffer, ModelError> {
        let (h, w, c) = degraded.dims();
        if let Some(p) = prior {
            degraded.same_dims(p)?;
        }
        let mut s = Session::<f32>::new(params, false);
        let d = s.graph.input(planar_batch(&[degraded]));
        let p = match prior {
            Some(p) if self.fusion_mode.uses_prior() => Some(s.graph.input(planar_batch(&[p]))),
            _ => None,
        };
        let out = self.forward(&mut s, d, p)?;
        Ok(clamp_to_unit(h, w, c, interleave(s.graph.value(out).data(), h, w, c))?)
    }
}

/// Stack equally sized images into one `[N, C, H, W]` tensor.
pub fn planar_batch<T: Elem>(images: &[&ImageBuffer]) -> Tensor<T> {
    let (h, w, c) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        assert_eq!(img.dims(), (h, w, c), "batch images must share dims");
        data.extend(img.to_planar().into_iter().map(|v| T::of(v as f64)));
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

/// First item of a planar batch as interleaved HWC values.
pub fn interleave<T: Elem>(planar: &[T], h: usize, w: usize, c: usize) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0.0; hw * c];
    for ci in 0..c {
        for i in 0..hw {
            out[i * c + ci] = planar[ci * hw + i].f64() as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing_and_prior_channels() {
        for m in FusionMode::ALL {
            assert_eq!(m.key().parse::<FusionMode>().unwrap(), m);
        }
        assert!("both".parse::<FusionMode>().is_err());
        let spec = BackboneSpec::resnet_tiny(8);
        let align = AlignConfig { feat_channels: 6, ..Default::default() };
        assert_eq!(Model::new(FusionMode::Baseline, &spec, &align).backbone.prior_channels, 0);
        assert_eq!(Model::new(FusionMode::Concat, &spec, &align).backbone.prior_channels, 3);
        assert_eq!(Model::new(FusionMode::Aligned, &spec, &align).backbone.prior_channels, 6);
    }

    #[test]
    fn every_mode_is_identity_at_init() {
        let img = ImageBuffer::from_fn(19, 21, 3, |y, x, c| ((y * 3 + x * 5 + c) % 17) as f32 / 16.0).unwrap();
        let prior = img.flip_horizontal();
        let align = AlignConfig { feat_channels: 4, ..Default::default() };
        for mode in FusionMode::ALL {
            let m = Model::new(mode, &BackboneSpec::restormer_tiny(8), &align);
            let m = Model { backbone: BackboneSpec { heads: vec![1, 1, 2, 2], ..m.backbone }, ..m };
            let p = m.init(RandomSeed(1)).unwrap();
            assert_eq!(m.restore(&p, &img, Some(&prior)).unwrap(), img);
            if mode.uses_prior() {
                assert!(matches!(m.restore(&p, &img, None), Err(ModelError::MissingPrior(_))));
            }
        }
    }
}
