//! Training: Charbonnier loss, Adam with cosine-annealed learning rate,
//! patch sampling keyed by draw index, checkpoints and resumable runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::backbone::BackboneSpec;
use crate::dataset::{self, AugmentationConfig, DatasetError, DatasetManifest, PngLoader, SampleTriplet};
use crate::image::ImageBuffer;
use crate::metrics::{self, MetricConfig};
use crate::model::{planar_batch, FusionMode, Model, ModelError};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::{Params, Session};
use crate::seed::RandomSeed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("iteration {iteration} outside [0, {iterations}]")]
    IterationOutOfRange { iteration: u64, iterations: u64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("batch has {got} samples, expected {want}")]
    BatchSize { got: usize, want: usize },
    #[error("sample `{0}` has no ground truth")]
    MissingGt(String),
    #[error("sample `{0}` has no prior but the fusion mode needs one")]
    MissingPrior(String),
    #[error("non-finite loss {loss} at iteration {iteration} (gradient norm {grad_norm})")]
    NonFinite { iteration: u64, loss: f64, grad_norm: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub charbonnier_eps: f64,
    pub fusion_mode: FusionMode,
    /// Seeds initialization, epoch order and patch draws. `augment.seed` is
    /// ignored in favour of a stream derived from this.
    pub seed: RandomSeed,
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
    pub backbone: BackboneSpec,
    pub align: AlignConfig,
    pub augment: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            lr_min: 1e-6,
            batch_size: 2,
            iterations: 150_000,
            charbonnier_eps: 1e-3,
            fusion_mode: FusionMode::Aligned,
            seed: RandomSeed(0),
            checkpoint_every: 5_000,
            adam: AdamConfig::default(),
            backbone: BackboneSpec::restormer_tiny(32),
            align: AlignConfig::default(),
            augment: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.lr_min > 0.0 && self.lr_init > self.lr_min) {
            return err(format!("need lr_init > lr_min > 0, got {} and {}", self.lr_init, self.lr_min));
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if !(self.charbonnier_eps > 0.0) {
            return err("charbonnier_eps must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return err("checkpoint_every must be >= 1".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return err(format!("bad Adam settings {a:?}"));
        }
        self.augment_config().validate()?;
        self.model().validate()?;
        Ok(())
    }

    pub fn model(&self) -> Model {
        Model::new(self.fusion_mode, &self.backbone, &self.align)
    }

    pub fn augment_config(&self) -> AugmentationConfig {
        AugmentationConfig { seed: self.seed.derive("augment", 0), ..self.augment.clone() }
    }
}

/// Mean of `sqrt((pred - target)^2 + eps^2)` over all elements.
pub fn charbonnier_loss(pred: &ImageBuffer, target: &ImageBuffer, eps: f64) -> Result<f64, TrainError> {
    if pred.dims() != target.dims() {
        return Err(TrainError::DimMismatch(format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    if !(eps > 0.0) {
        return Err(TrainError::Config(format!("charbonnier eps {eps} must be positive")));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            (d * d + eps * eps).sqrt()
        })
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// Cosine-annealed learning rate from `lr_init` at 0 to `lr_min` at `iterations`.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if iteration > cfg.iterations {
        return Err(TrainError::IterationOutOfRange { iteration, iterations: cfg.iterations });
    }
    if cfg.iterations == 0 {
        return Ok(cfg.lr_init);
    }
    let t = iteration as f64 / cfg.iterations as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub iteration: u64,
    pub params: Params,
    pub adam_m: Params,
    pub adam_v: Params,
    pub best_val_psnr: Option<f64>,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

impl TrainState {
    pub fn new(params: Params) -> Self {
        Self { iteration: 0, adam_m: params.zeros_like(), adam_v: params.zeros_like(), params, best_val_psnr: None }
    }

    pub fn init(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self::new(cfg.model().init(cfg.seed)?))
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<(), TrainError> {
        let mut all = self.params.clone();
        for (n, t) in self.adam_m.iter() {
            all.insert(format!("{M_PREFIX}{n}"), t.clone());
        }
        for (n, t) in self.adam_v.iter() {
            all.insert(format!("{V_PREFIX}{n}"), t.clone());
        }
        let mut meta = BTreeMap::new();
        meta.insert("iteration".into(), self.iteration.to_string());
        if let Some(b) = self.best_val_psnr {
            meta.insert("best_val_psnr".into(), format!("{b:?}"));
        }
        meta.insert("config".into(), serde_json::to_string(cfg).expect("config serializes"));
        checkpoint::save(path, &all, &meta)?;
        Ok(())
    }

    /// State and the config it was trained with.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig), TrainError> {
        let (all, meta) = checkpoint::load(path)?;
        let field = |k: &str| meta.get(k).ok_or_else(|| TrainError::Checkpoint(format!("{} lacks `{k}`", path.display())));
        let iteration = field("iteration")?.parse().map_err(|e| TrainError::Checkpoint(format!("iteration: {e}")))?;
        let best_val_psnr = match meta.get("best_val_psnr") {
            Some(v) => Some(v.parse().map_err(|e| TrainError::Checkpoint(format!("best_val_psnr: {e}")))?),
            None => None,
        };
        let cfg: TrainConfig = serde_json::from_str(field("config")?).map_err(|e| TrainError::Checkpoint(format!("config: {e}")))?;
        let (mut params, mut adam_m, mut adam_v) = (Params::new(), Params::new(), Params::new());
        for (n, t) in all.iter() {
            if let Some(rest) = n.strip_prefix(M_PREFIX) {
                adam_m.insert(rest, t.clone());
            } else if let Some(rest) = n.strip_prefix(V_PREFIX) {
                adam_v.insert(rest, t.clone());
            } else {
                params.insert(n.clone(), t.clone());
            }
        }
        if adam_m.len() != params.len() || adam_v.len() != params.len() {
            return Err(TrainError::Checkpoint(format!("{} has incomplete optimizer moments", path.display())));
        }
        Ok((Self { iteration, params, adam_m, adam_v, best_val_psnr }, cfg))
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_update(state: &mut TrainState, grads: &Params, lr: f64, t: u64, cfg: &AdamConfig) {
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let step = (lr / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    let eps = cfg.eps as f32;
    for (name, p) in state.params.iter_mut() {
        let g = grads.get(name).expect("gradient for every parameter");
        let m = state.adam_m.get_mut(name).expect("first moment");
        let v = state.adam_v.get_mut(name).expect("second moment");
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            *pv -= step * *mv / (vv.sqrt() / c2_sqrt + eps);
        }
    }
}

fn stack<'a>(
    batch: &'a [SampleTriplet],
    cfg: &TrainConfig,
) -> Result<(Vec<&'a ImageBuffer>, Vec<&'a ImageBuffer>, Option<Vec<&'a ImageBuffer>>), TrainError> {
    if batch.len() != cfg.batch_size {
        return Err(TrainError::BatchSize { got: batch.len(), want: cfg.batch_size });
    }
    let dims = batch[0].degraded.dims();
    let mut deg = Vec::new();
    let mut gt = Vec::new();
    let mut prior = Vec::new();
    for t in batch {
        if t.degraded.dims() != dims {
            return Err(TrainError::DimMismatch(format!("batch mixes {:?} and {:?}", dims, t.degraded.dims())));
        }
        deg.push(&t.degraded);
        gt.push(t.gt.as_ref().ok_or_else(|| TrainError::MissingGt(t.id.clone()))?);
        if cfg.fusion_mode.uses_prior() {
            prior.push(t.prior.as_ref().ok_or_else(|| TrainError::MissingPrior(t.id.clone()))?);
        }
    }
    Ok((deg, gt, cfg.fusion_mode.uses_prior().then_some(prior)))
}

/// Forward, backward and one Adam update at the current iteration's
/// learning rate. Returns the batch loss.
pub fn train_step(state: &mut TrainState, batch: &[SampleTriplet], cfg: &TrainConfig) -> Result<f64, TrainError> {
    let lr = lr_at(state.iteration, cfg)?;
    let (deg, gt, prior) = stack(batch, cfg)?;
    let model = cfg.model();
    let (loss, grads) = {
        let mut s = Session::<f32>::new(&state.params, true);
        let d = s.graph.input(planar_batch(&deg));
        let p = prior.map(|p| s.graph.input(planar_batch(&p)));
        let out = model.forward(&mut s, d, p)?;
        let target = s.graph.input(planar_batch(&gt));
        let l = s.graph.charbonnier(out, target, cfg.charbonnier_eps);
        let loss = s.graph.value(l).data()[0] as f64;
        let g = s.graph.backward(l);
        (loss, s.param_grads(&g))
    };
    let grad_norm = grads.global_norm();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(TrainError::NonFinite { iteration: state.iteration, loss, grad_norm });
    }
    adam_update(state, &grads, lr, state.iteration + 1, &cfg.adam);
    state.iteration += 1;
    Ok(loss)
}

/// Patches for iteration `iteration`: draw `iteration * batch + b` picks an
/// item from the seeded epoch order and samples its window and transform.
pub fn batch_for_iteration(train: &[SampleTriplet], iteration: u64, cfg: &TrainConfig) -> Result<Vec<SampleTriplet>, TrainError> {
    let aug = cfg.augment_config();
    let order_seed = cfg.seed.derive("order", 0);
    (0..cfg.batch_size as u64)
        .map(|b| {
            let draw = iteration * cfg.batch_size as u64 + b;
            let item = dataset::item_for_draw(train.len(), order_seed, draw);
            Ok(dataset::sample_patch(&train[item], &aug, draw)?)
        })
        .collect()
}

/// Mean PSNR of full-image restorations over `val`.
pub fn validate(model: &Model, params: &Params, val: &[SampleTriplet]) -> Result<Option<f64>, TrainError> {
    if val.is_empty() {
        return Ok(None);
    }
    let cfg = MetricConfig::default();
    let mut sum = 0.0;
    for t in val {
        let gt = t.gt.as_ref().ok_or_else(|| TrainError::MissingGt(t.id.clone()))?;
        let prior = if model.fusion_mode.uses_prior() {
            Some(t.prior.as_ref().ok_or_else(|| TrainError::MissingPrior(t.id.clone()))?)
        } else {
            None
        };
        let restored = model.restore(params, &t.degraded, prior)?;
        sum += metrics::psnr(&restored, gt, &cfg).map_err(|e| TrainError::DimMismatch(e.to_string()))?;
    }
    Ok(Some(sum / val.len() as f64))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `<out>/latest.safetensors` when it exists.
    pub resume: bool,
    /// Stop once this many iterations are complete, as if interrupted.
    pub stop_after: Option<u64>,
    /// Print a progress line every this many iterations.
    pub progress_every: Option<u64>,
}

/// Files written under a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter_{iteration:08}.safetensors"))
    }
    pub fn latest(&self) -> PathBuf {
        self.root.join("latest.safetensors")
    }
    pub fn best(&self) -> PathBuf {
        self.root.join("best.safetensors")
    }
    pub fn loss_log(&self) -> PathBuf {
        self.root.join("loss_log.csv")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
}

pub const LOSS_LOG_HEADER: &str = "iteration,lr,loss,wallclock";

/// One parsed loss-log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub wallclock: f64,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>, TrainError> {
    let text = fs::read_to_string(path)?;
    let bad = |line: &str| TrainError::Checkpoint(format!("malformed loss log line `{line}`"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            Ok(LossRow {
                iteration: f[0].parse().map_err(|_| bad(line))?,
                lr: f[1].parse().map_err(|_| bad(line))?,
                loss: f[2].parse().map_err(|_| bad(line))?,
                wallclock: f[3].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

fn write_checkpoint(state: &mut TrainState, cfg: &TrainConfig, layout: &RunLayout, val: &[SampleTriplet]) -> Result<(), TrainError> {
    let score = validate(&cfg.model(), &state.params, val)?;
    let improved = match (score, state.best_val_psnr) {
        (Some(s), Some(b)) => s > b,
        (Some(_), None) => true,
        _ => false,
    };
    if improved {
        state.best_val_psnr = score;
    }
    let path = layout.checkpoint(state.iteration);
    state.save(&path, cfg)?;
    fs::copy(&path, layout.latest())?;
    if improved {
        fs::copy(&path, layout.best())?;
    }
    Ok(())
}

/// Train on in-memory triplets. `val` drives best-checkpoint selection.
pub fn run_training_on(
    train: &[SampleTriplet],
    val: &[SampleTriplet],
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }
    let layout = RunLayout::new(out_dir);
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    let started = Instant::now();

    let resumed = if opts.resume && layout.latest().exists() {
        let (state, saved) = TrainState::load(&layout.latest())?;
        if saved.model() != cfg.model() {
            return Err(TrainError::Config("checkpoint was trained with a different model".into()));
        }
        Some(state)
    } else {
        None
    };
    fs::write(layout.config(), serde_json::to_string_pretty(cfg).expect("config serializes"))?;

    let mut state = match resumed {
        Some(state) => {
            let kept: Vec<LossRow> = if layout.loss_log().exists() {
                read_loss_log(&layout.loss_log())?.into_iter().filter(|r| r.iteration < state.iteration).collect()
            } else {
                Vec::new()
            };
            let mut text = format!("{LOSS_LOG_HEADER}\n");
            for r in kept {
                text.push_str(&format!("{},{:?},{:?},{:.3}\n", r.iteration, r.lr, r.loss, r.wallclock));
            }
            fs::write(layout.loss_log(), text)?;
            state
        }
        None => {
            fs::write(layout.loss_log(), format!("{LOSS_LOG_HEADER}\n"))?;
            let mut state = TrainState::init(cfg)?;
            write_checkpoint(&mut state, cfg, &layout, val)?;
            state
        }
    };

    let mut log = std::io::BufWriter::new(fs::OpenOptions::new().append(true).open(layout.loss_log())?);
    while state.iteration < cfg.iterations {
        if opts.stop_after.is_some_and(|s| state.iteration >= s) {
            break;
        }
        let it = state.iteration;
        let batch = batch_for_iteration(train, it, cfg)?;
        let lr = lr_at(it, cfg)?;
        let loss = train_step(&mut state, &batch, cfg)?;
        writeln!(log, "{it},{lr:?},{loss:?},{:.3}", started.elapsed().as_secs_f64())?;
        if let Some(every) = opts.progress_every {
            if state.iteration % every == 0 {
                eprintln!("iter {:>7}  lr {lr:.3e}  loss {loss:.5}", state.iteration);
            }
        }
        if state.iteration % cfg.checkpoint_every == 0 || state.iteration == cfg.iterations {
            log.flush()?;
            write_checkpoint(&mut state, cfg, &layout, val)?;
        }
    }
    log.flush()?;
    Ok(state)
}

/// Load the manifest(s) from disk and train. Priors are read only when the
/// fusion mode needs them.
pub fn run_training(
    manifest: &DatasetManifest,
    val_manifest: Option<&DatasetManifest>,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<TrainState, TrainError> {
    let loader = PngLoader::default();
    let with_prior = cfg.fusion_mode.uses_prior();
    let train = dataset::load_triplets(manifest, &loader, with_prior)?;
    let val = match val_manifest {
        Some(m) => dataset::load_triplets(m, &loader, with_prior)?,
        None => Vec::new(),
    };
    run_training_on(&train, &val, cfg, out_dir, opts)
}
