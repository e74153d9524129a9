//! JSON-lines dataset manifests, triplet loading, and co-augmented patch
//! sampling.
//!
//! Manifest layout: the first non-blank line is a header
//! `{"name": .., "degradation": .., "split": "train"|"test"}`, each further
//! line is an entry `{"id": .., "degraded": .., "gt": .., "prior": ..}` with
//! `gt` and `prior` optional. Relative paths resolve against the manifest's
//! directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::DegradationType;
use crate::image::{self, ImageBuffer, ImageError};
use crate::seed::RandomSeed;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("duplicate entry id `{0}`")]
    DuplicateId(String),
    #[error("train split entry `{0}` has no gt path")]
    MissingGt(String),
    #[error("missing files:\n  {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n  "))]
    MissingFiles(Vec<PathBuf>),
    #[error("entry `{id}` has no prior path")]
    MissingPrior { id: String },
    #[error("entry `{id}`: {what} dims {got:?} differ from degraded dims {want:?}")]
    DimMismatch { id: String, what: &'static str, got: (usize, usize, usize), want: (usize, usize, usize) },
    #[error("crop {crop} exceeds image {height}x{width}; pre-resize the triplet")]
    CropTooLarge { crop: usize, height: usize, width: usize },
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("entry `{id}`: {source}")]
    Image {
        id: String,
        #[source]
        source: ImageError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub degraded: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    name: String,
    degradation: DegradationType,
    split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub degradation: DegradationType,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parse manifest text; relative paths are joined onto `base`. Checks ids
    /// and the train-split gt rule, but not file existence.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, DatasetError> {
        let parse_err = |line: usize, message: String| DatasetError::Parse { path: origin.to_path_buf(), line, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(header).map_err(|e| parse_err(hl + 1, format!("header: {e}")))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            if !seen.insert(e.id.clone()) {
                return Err(DatasetError::DuplicateId(e.id));
            }
            if header.split == Split::Train && e.gt.is_none() {
                return Err(DatasetError::MissingGt(e.id));
            }
            entries.push(ManifestEntry { id: e.id, degraded: resolve(e.degraded), gt: e.gt.map(resolve), prior: e.prior.map(resolve) });
        }
        Ok(Self { name: header.name, degradation: header.degradation, split: header.split, entries })
    }

    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader { name: self.name.clone(), degradation: self.degradation, split: self.split };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(out, "{}", serde_json::to_string(e).expect("entry serializes"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
    }

    /// Every referenced path that does not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::once(&e.degraded).chain(e.gt.iter()).chain(e.prior.iter()))
            .filter(|p| !p.exists())
            .cloned()
            .collect()
    }
}

/// Read and fully validate a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = DatasetManifest::parse(&text, base, path)?;
    let missing = manifest.missing_files();
    if !missing.is_empty() {
        return Err(DatasetError::MissingFiles(missing));
    }
    Ok(manifest)
}

/// One training/evaluation unit. `prior` is absent for runs that do not use
/// priors, so such runs never read prior files.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTriplet {
    pub id: String,
    pub degraded: ImageBuffer,
    pub prior: Option<ImageBuffer>,
    pub gt: Option<ImageBuffer>,
}

impl SampleTriplet {
    pub fn new(
        id: impl Into<String>,
        degraded: ImageBuffer,
        prior: Option<ImageBuffer>,
        gt: Option<ImageBuffer>,
    ) -> Result<Self, DatasetError> {
        let id = id.into();
        let want = degraded.dims();
        for (what, img) in [("prior", &prior), ("gt", &gt)] {
            if let Some(img) = img {
                if img.dims() != want {
                    return Err(DatasetError::DimMismatch { id, what, got: img.dims(), want });
                }
            }
        }
        Ok(Self { id, degraded, prior, gt })
    }

    fn map(&self, f: impl Fn(&ImageBuffer) -> ImageBuffer) -> SampleTriplet {
        SampleTriplet { id: self.id.clone(), degraded: f(&self.degraded), prior: self.prior.as_ref().map(&f), gt: self.gt.as_ref().map(&f) }
    }
}

/// Source of decoded images, so tests can observe which files a run reads.
pub trait ImageLoader {
    fn load(&self, path: &Path) -> Result<ImageBuffer, ImageError>;
}

/// 8-bit PNG loader producing `channels`-channel images.
#[derive(Debug, Clone, Copy)]
pub struct PngLoader {
    pub channels: usize,
}

impl Default for PngLoader {
    fn default() -> Self {
        Self { channels: 3 }
    }
}

impl ImageLoader for PngLoader {
    fn load(&self, path: &Path) -> Result<ImageBuffer, ImageError> {
        image::load_png(path, self.channels)
    }
}

/// Load every entry of `manifest`. Priors are read only when `with_prior`.
pub fn load_triplets(manifest: &DatasetManifest, loader: &dyn ImageLoader, with_prior: bool) -> Result<Vec<SampleTriplet>, DatasetError> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let ctx = |source| DatasetError::Image { id: e.id.clone(), source };
            let degraded = loader.load(&e.degraded).map_err(ctx)?;
            let gt = e.gt.as_ref().map(|p| loader.load(p)).transpose().map_err(ctx)?;
            let prior = if with_prior {
                let path = e.prior.as_ref().ok_or_else(|| DatasetError::MissingPrior { id: e.id.clone() })?;
                Some(loader.load(path).map_err(ctx)?)
            } else {
                None
            };
            SampleTriplet::new(e.id.clone(), degraded, prior, gt)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub crop: usize,
    pub hflip_prob: f64,
    /// Allowed rotations in degrees, each a multiple of 90.
    pub rotation_set: Vec<u16>,
    pub seed: RandomSeed,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { crop: 256, hflip_prob: 0.5, rotation_set: vec![0, 90, 180, 270], seed: RandomSeed(0) }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(DatasetError::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if self.rotation_set.is_empty() || self.rotation_set.iter().any(|r| r % 90 != 0 || *r >= 360) {
            return Err(DatasetError::Config(format!("rotation_set {:?} must hold multiples of 90 below 360", self.rotation_set)));
        }
        if self.crop < image::MIN_SIDE {
            return Err(DatasetError::Config(format!("crop {} below {}", self.crop, image::MIN_SIDE)));
        }
        Ok(())
    }
}

/// Geometric transform drawn for one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchDraw {
    pub top: usize,
    pub left: usize,
    pub hflip: bool,
    pub quarter_turns: u8,
}

pub fn draw_patch(height: usize, width: usize, cfg: &AugmentationConfig, draw_index: u64) -> PatchDraw {
    let mut rng = cfg.seed.stream("patch", draw_index);
    let top = rng.gen_range(0..=height - cfg.crop);
    let left = rng.gen_range(0..=width - cfg.crop);
    let hflip = rng.gen::<f64>() < cfg.hflip_prob;
    let rot = cfg.rotation_set[rng.gen_range(0..cfg.rotation_set.len())];
    PatchDraw { top, left, hflip, quarter_turns: (rot / 90) as u8 }
}

/// Crop all images of `triplet` at one window and apply one flip/rotation.
pub fn sample_patch(triplet: &SampleTriplet, cfg: &AugmentationConfig, draw_index: u64) -> Result<SampleTriplet, DatasetError> {
    cfg.validate()?;
    let (h, w, _) = triplet.degraded.dims();
    if cfg.crop > h.min(w) {
        return Err(DatasetError::CropTooLarge { crop: cfg.crop, height: h, width: w });
    }
    let d = draw_patch(h, w, cfg, draw_index);
    Ok(triplet.map(|img| {
        let mut out = img.crop(d.top, d.left, cfg.crop, cfg.crop).expect("validated crop window");
        if d.hflip {
            out = out.flip_horizontal();
        }
        out.rotate90(d.quarter_turns)
    }))
}

/// Visiting order of `n` items in epoch `epoch`.
pub fn epoch_order(n: usize, seed: RandomSeed, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.stream("epoch", epoch));
    order
}

/// Item visited at global draw `draw` when epochs are consumed back to back.
pub fn item_for_draw(n: usize, seed: RandomSeed, draw: u64) -> usize {
    epoch_order(n, seed, draw / n as u64)[(draw % n as u64) as usize]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn touch_images(dir: &Path, names: &[&str]) {
        let img = ImageBuffer::filled(8, 8, 3, 0.5).unwrap();
        for n in names {
            image::save_png(&img, &dir.join(n)).unwrap();
        }
    }

    #[test]
    fn two_entry_manifest_parses_and_resolves() {
        let dir = tempfile::tempdir().unwrap();
        touch_images(dir.path(), &["a.png", "a_gt.png", "b.png", "b_gt.png"]);
        let m = write(
            dir.path(),
            "m.jsonl",
            "{\"name\":\"toy\",\"degradation\":\"haze\",\"split\":\"train\"}\n\
             {\"id\":\"a\",\"degraded\":\"a.png\",\"gt\":\"a_gt.png\"}\n\
             {\"id\":\"b\",\"degraded\":\"b.png\",\"gt\":\"b_gt.png\"}\n",
        );
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.entries.len(), 2);
        assert_eq!(man.degradation, DegradationType::Haze);
        assert_eq!(man.entries[0].degraded, dir.path().join("a.png"));
        // serialization round-trips
        let again = DatasetManifest::parse(&man.to_jsonl(), dir.path(), &m).unwrap();
        assert_eq!(again, man);
    }

    #[test]
    fn validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path();
        let header = "{\"name\":\"t\",\"degradation\":\"rain\",\"split\":\"train\"}\n";
        let no_gt = format!("{header}{{\"id\":\"a\",\"degraded\":\"a.png\"}}\n");
        assert!(matches!(DatasetManifest::parse(&no_gt, base, base), Err(DatasetError::MissingGt(id)) if id == "a"));

        let dup =
            format!("{header}{{\"id\":\"a\",\"degraded\":\"a.png\",\"gt\":\"g\"}}\n{{\"id\":\"a\",\"degraded\":\"b.png\",\"gt\":\"g\"}}\n");
        assert!(matches!(DatasetManifest::parse(&dup, base, base), Err(DatasetError::DuplicateId(id)) if id == "a"));

        let p = write(base, "m.jsonl", &format!("{header}{{\"id\":\"a\",\"degraded\":\"x.png\",\"gt\":\"y.png\"}}\n"));
        match load_manifest(&p) {
            Err(DatasetError::MissingFiles(v)) => assert_eq!(v, vec![base.join("x.png"), base.join("y.png")]),
            other => panic!("{other:?}"),
        }
        let bad = write(base, "bad.jsonl", "{\"name\":1}\n");
        assert!(matches!(load_manifest(&bad), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn test_split_without_gt_is_fine() {
        let text = "{\"name\":\"t\",\"degradation\":\"low_light\",\"split\":\"test\"}\n{\"id\":\"a\",\"degraded\":\"a.png\"}\n";
        let m = DatasetManifest::parse(text, Path::new("/d"), Path::new("m")).unwrap();
        assert_eq!(m.entries[0].gt, None);
    }

    /// Constructed pair: gt = degraded + 0.1 everywhere. Any co-transformed
    /// patch keeps the difference at exactly that offset.
    #[test]
    fn co_augmentation_preserves_pairwise_difference() {
        let deg = ImageBuffer::from_fn(24, 20, 3, |y, x, c| ((y * 5 + x * 3 + c) % 50) as f32 / 100.0).unwrap();
        let gt = ImageBuffer::from_fn(24, 20, 3, |y, x, c| deg.get(y, x, c) + 0.1).unwrap();
        let t = SampleTriplet::new("p", deg.clone(), Some(deg.clone()), Some(gt)).unwrap();
        let cfg = AugmentationConfig { crop: 12, seed: RandomSeed(5), ..Default::default() };
        for draw in 0..40 {
            let p = sample_patch(&t, &cfg, draw).unwrap();
            let (pd, pg) = (&p.degraded, p.gt.as_ref().unwrap());
            assert_eq!(pd.dims(), (12, 12, 3));
            assert!(pg.data().iter().zip(pd.data()).all(|(g, d)| (g - d - 0.1).abs() < 1e-6));
            assert_eq!(p.prior.as_ref().unwrap(), pd);
        }
    }

    /// Coordinates embedded in the channels identify the exact transform,
    /// and across draws all eight dihedral variants appear.
    #[test]
    fn coordinate_embedding_reveals_shared_transform() {
        let n = 16usize;
        let enc = ImageBuffer::from_fn(n, n, 3, |y, x, c| match c {
            0 => y as f32 / 15.0,
            1 => x as f32 / 15.0,
            _ => 0.5,
        })
        .unwrap();
        let t = SampleTriplet::new("c", enc.clone(), Some(enc.clone()), Some(enc)).unwrap();
        let cfg = AugmentationConfig { crop: 16, seed: RandomSeed(11), ..Default::default() };
        let mut variants = HashSet::new();
        for draw in 0..200 {
            let p = sample_patch(&t, &cfg, draw).unwrap();
            assert_eq!(Some(&p.degraded), p.gt.as_ref());
            assert_eq!(Some(&p.degraded), p.prior.as_ref());
            let corner = |y, x| ((p.degraded.get(y, x, 0) * 15.0).round() as u8, (p.degraded.get(y, x, 1) * 15.0).round() as u8);
            variants.insert((corner(0, 0), corner(0, 15)));
        }
        assert_eq!(variants.len(), 8);
    }

    #[test]
    fn identity_augmentation_and_determinism() {
        let deg = ImageBuffer::from_fn(10, 10, 3, |y, x, _| (y * 10 + x) as f32 / 99.0).unwrap();
        let t = SampleTriplet::new("i", deg.clone(), None, Some(deg.clone())).unwrap();
        let cfg = AugmentationConfig { crop: 10, hflip_prob: 0.0, rotation_set: vec![0], seed: RandomSeed(1) };
        assert_eq!(sample_patch(&t, &cfg, 3).unwrap(), t);

        let cfg = AugmentationConfig { crop: 6, seed: RandomSeed(1), ..Default::default() };
        let cfg = AugmentationConfig { crop: 8, ..cfg };
        assert_eq!(sample_patch(&t, &cfg, 9).unwrap(), sample_patch(&t, &cfg, 9).unwrap());
        let big = AugmentationConfig { crop: 11, ..cfg };
        assert!(matches!(sample_patch(&t, &big, 0), Err(DatasetError::CropTooLarge { .. })));
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation() {
        let a = epoch_order(45, RandomSeed(3), 2);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..45).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(45, RandomSeed(3), 2));
        assert_ne!(a, epoch_order(45, RandomSeed(3), 3));
        let draws: HashSet<usize> = (90..135).map(|d| item_for_draw(45, RandomSeed(3), d)).collect();
        assert_eq!(draws.len(), 45);
    }

    struct Recording(RefCell<Vec<PathBuf>>);

    impl ImageLoader for Recording {
        fn load(&self, path: &Path) -> Result<ImageBuffer, ImageError> {
            self.0.borrow_mut().push(path.to_path_buf());
            ImageBuffer::filled(8, 8, 3, 0.25)
        }
    }

    #[test]
    fn loader_skips_priors_when_not_requested() {
        let text = "{\"name\":\"t\",\"degradation\":\"haze\",\"split\":\"train\"}\n{\"id\":\"a\",\"degraded\":\"d.png\",\"gt\":\"g.png\",\"prior\":\"p.png\"}\n";
        let m = DatasetManifest::parse(text, Path::new("/r"), Path::new("m")).unwrap();
        let rec = Recording(RefCell::new(Vec::new()));
        let t = load_triplets(&m, &rec, false).unwrap();
        assert!(t[0].prior.is_none());
        assert!(!rec.0.borrow().iter().any(|p| p.ends_with("p.png")));
        load_triplets(&m, &rec, true).unwrap();
        assert!(rec.0.borrow().iter().any(|p| p.ends_with("p.png")));
    }
}
