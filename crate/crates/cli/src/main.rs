use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use priorfuse::dataset::{self, load_manifest, DatasetManifest, PngLoader};
use priorfuse::fidelity::{self, DivergenceInputs};
use priorfuse::image::{load_png, resize_bilinear, save_png};
use priorfuse::metrics::{psnr, ConstantIqa, IqaProvider, MetricConfig};
use priorfuse::model::FusionMode;
use priorfuse::prior::{self, EchoProvider, HttpProvider, PriorClient, PriorProvider, PriorRequest, SyntheticPriorConfig};
use priorfuse::report::{self, BenchConfig, EvalReport, Method, TableFormat};
use priorfuse::train::{self, RunOptions, TrainConfig, TrainState};
use priorfuse::RandomSeed;

#[derive(Parser)]
#[command(name = "priorfuse", version, about = "Prior-guided image restoration: acquire priors, train, evaluate, report")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Prior cache directory.
    #[arg(long, global = true, default_value = ".priorfuse-cache")]
    cache: PathBuf,
    /// Training config as JSON; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manifest utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Fetch or synthesize a prior for every manifest entry.
    Acquire(AcquireArgs),
    /// Train a restoration model.
    Train(TrainArgs),
    /// Score one prediction directory against a manifest.
    Eval(EvalArgs),
    /// Fidelity checks of priors against their degraded inputs.
    Analyze(AnalyzeArgs),
    /// Score several methods over several manifests and write a report directory.
    Bench(BenchArgs),
    /// Render tables and plots from a per-image CSV or transcribed reference values.
    Report(ReportArgs),
    /// Restore every manifest entry with a trained checkpoint.
    Infer(InferArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Parse manifests and check that every referenced file exists.
    Validate { manifests: Vec<PathBuf> },
}

#[derive(Args)]
struct AcquireArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `echo` returns the input unchanged; any other name needs `--endpoint`.
    #[arg(long, default_value = "echo")]
    provider: String,
    #[arg(long)]
    endpoint: Option<String>,
    /// Synthesize misaligned priors from ground truth instead of calling a provider.
    #[arg(long)]
    offline_from_gt: bool,
    #[arg(long, default_value_t = 2)]
    max_in_flight: usize,
    #[arg(long)]
    requests_per_minute: Option<f64>,
    #[arg(long)]
    timeout_secs: Option<f64>,
    /// Write a copy of the manifest with `prior` paths filled in.
    #[arg(long)]
    write_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    iterations: Option<u64>,
    /// Stop early after this many iterations, leaving a resumable run.
    #[arg(long)]
    stop_after: Option<u64>,
    #[arg(long, default_value_t = 100)]
    progress_every: u64,
}

#[derive(Args)]
struct IqaArgs {
    /// Constant IQA score for every image, for dry runs without an IQA model.
    #[arg(long)]
    iqa_constant: Option<f64>,
}

impl IqaArgs {
    fn provider(&self) -> Option<ConstantIqa> {
        self.iqa_constant.map(ConstantIqa)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long, default_value = "prediction")]
    method: String,
    #[arg(long, value_delimiter = ',', default_value = "psnr,ssim")]
    metrics: Vec<String>,
    #[command(flatten)]
    iqa: IqaArgs,
    /// Aggregate CSV; per-image rows go to `<stem>.per_image.csv` beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    prior_dir: PathBuf,
    #[command(flatten)]
    iqa: IqaArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    /// `name=dir`, repeatable.
    #[arg(long = "method", required = true)]
    methods: Vec<String>,
    #[command(flatten)]
    iqa: IqaArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, conflicts_with = "transcribed")]
    per_image: Option<PathBuf>,
    /// CSV of reference values (`table,dataset,method,psnr,ssim,clip_iqa`).
    #[arg(long)]
    transcribed: Option<PathBuf>,
    /// Restrict transcribed values to one table number.
    #[arg(long)]
    table: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed.map(RandomSeed);
    match cli.command {
        Command::Dataset { command: DatasetCommand::Validate { manifests } } => validate(&manifests),
        Command::Acquire(a) => acquire(a, &cli.cache, seed),
        Command::Train(a) => train_cmd(a, cli.config.as_deref(), seed),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report_cmd(a),
        Command::Infer(a) => infer(a),
    }
}

fn load(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn validate(manifests: &[PathBuf]) -> Result<ExitCode> {
    if manifests.is_empty() {
        bail!("no manifests given");
    }
    let mut failed = false;
    for path in manifests {
        match load_manifest(path) {
            Ok(m) => println!("{}: ok ({} {:?} entries, {})", path.display(), m.entries.len(), m.split, m.name),
            Err(e) => {
                failed = true;
                println!("{}: {e}", path.display());
            }
        }
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn acquire(a: AcquireArgs, cache: &Path, seed: Option<RandomSeed>) -> Result<ExitCode> {
    let mut manifest = load(&a.manifest)?;
    if a.offline_from_gt {
        let dir = cache.join("offline");
        std::fs::create_dir_all(&dir)?;
        let base = seed.unwrap_or_default();
        for (i, e) in manifest.entries.iter_mut().enumerate() {
            let gt_path = e.gt.as_ref().with_context(|| format!("entry `{}` has no gt to synthesize from", e.id))?;
            let gt = load_png(gt_path, 3)?;
            let cfg = SyntheticPriorConfig { seed: base.derive("prior", i as u64), ..Default::default() };
            let prior = prior::synthesize_offline_prior(&gt, &cfg)?;
            let path = dir.join(format!("{}.png", e.id));
            save_png(&prior, &path)?;
            e.prior = Some(path);
        }
        println!("synthesized {} priors under {}", manifest.entries.len(), dir.display());
    } else {
        let provider: Arc<dyn PriorProvider> = match (a.provider.as_str(), &a.endpoint) {
            ("echo", None) => Arc::new(EchoProvider { name: "echo".into(), output_dims: None }),
            (name, Some(url)) => Arc::new(HttpProvider::new(name, url).with_api_key(std::env::var(prior::API_KEY_ENV).ok())),
            (name, None) => bail!("provider `{name}` needs --endpoint"),
        };
        let mut client = PriorClient::new(provider, cache).with_limits(a.max_in_flight, a.requests_per_minute);
        if let Some(t) = a.timeout_secs {
            client = client.with_timeout(Duration::from_secs_f64(t));
        }
        let (mut hits, mut calls) = (0, 0);
        for e in manifest.entries.iter_mut() {
            let req = PriorRequest::new(load_png(&e.degraded, 3)?, manifest.degradation, client.provider_name());
            let res = client.acquire(&req).with_context(|| format!("entry `{}`", e.id))?;
            if res.from_cache {
                hits += 1;
            } else {
                calls += 1;
            }
            e.prior = Some(client.cache_path(&req));
        }
        println!("{} priors: {calls} fetched, {hits} from cache", manifest.entries.len());
    }
    if let Some(out) = a.write_manifest {
        manifest.save(&out)?;
        println!("wrote {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn train_config(path: Option<&Path>, seed: Option<RandomSeed>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train_cmd(a: TrainArgs, config: Option<&Path>, seed: Option<RandomSeed>) -> Result<ExitCode> {
    let mut cfg = train_config(config, seed)?;
    if let Some(f) = a.fusion {
        cfg.fusion_mode = f;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    let manifest = load(&a.manifest)?;
    let val = a.val_manifest.as_deref().map(load).transpose()?;
    let opts = RunOptions { resume: a.resume, stop_after: a.stop_after, progress_every: Some(a.progress_every) };
    let state = train::run_training(&manifest, val.as_ref(), &cfg, &a.out, &opts)?;
    println!(
        "stopped at iteration {} of {}; best validation PSNR {}",
        state.iteration,
        cfg.iterations,
        state.best_val_psnr.map_or("n/a".to_string(), |p| format!("{p:.3} dB"))
    );
    Ok(ExitCode::SUCCESS)
}

fn report_missing(r: &EvalReport) -> ExitCode {
    let missing: Vec<_> = r.missing().collect();
    if missing.is_empty() {
        return ExitCode::SUCCESS;
    }
    for m in &missing {
        eprintln!("missing prediction: {} / {} / {}", m.method, m.dataset, m.id);
    }
    ExitCode::from(2)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let known = ["psnr", "ssim", "iqa"];
    if let Some(bad) = a.metrics.iter().find(|m| !known.contains(&m.as_str())) {
        bail!("unknown metric `{bad}` (expected psnr, ssim, iqa)");
    }
    let manifest = load(&a.manifest)?;
    let iqa = a.iqa.provider();
    let want_iqa = a.metrics.iter().any(|m| m == "iqa");
    if want_iqa && iqa.is_none() {
        eprintln!("warning: no IQA provider configured; the IQA column stays empty");
    }
    let cfg =
        BenchConfig { metrics: MetricConfig::default(), iqa: if want_iqa { iqa.as_ref().map(|p| p as &dyn IqaProvider) } else { None } };
    let methods = [Method { name: a.method, pred_dir: a.pred_dir }];
    let mut r = report::run_benchmark(std::slice::from_ref(&manifest), &methods, &cfg)?;
    for rec in &mut r.per_image {
        if !a.metrics.iter().any(|m| m == "psnr") {
            rec.psnr = None;
        }
        if !a.metrics.iter().any(|m| m == "ssim") {
            rec.ssim = None;
        }
    }
    let r = report::aggregate(r.per_image)?;
    std::fs::write(&a.out, report::render_table(&r, TableFormat::Csv))?;
    let per_image = a.out.with_file_name(format!(
        "{}.per_image.csv",
        a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into())
    ));
    std::fs::write(&per_image, report::per_image_csv(&r.per_image))?;
    print!("{}", report::render_table(&r, TableFormat::Markdown));
    Ok(report_missing(&r))
}

/// Provider output dims from the cache sidecar when present, else the file's own dims.
fn raw_dims(prior_path: &Path, prior: &priorfuse::ImageBuffer) -> (usize, usize) {
    let sidecar = prior_path.with_extension("json");
    std::fs::read_to_string(sidecar)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| {
            let d = v.get("raw_dims")?.as_array()?.clone();
            Some((d.first()?.as_u64()? as usize, d.get(1)?.as_u64()? as usize))
        })
        .unwrap_or((prior.height(), prior.width()))
}

fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let manifest = load(&a.manifest)?;
    let iqa = a.iqa.provider();
    let mc = MetricConfig::default();
    let mut csv = String::from("id,aspect_ratio_delta,shift_dy,shift_dx,shift_confidence,divergence_flag,notes\n");
    let mut missing = 0;
    for e in &manifest.entries {
        let mut candidates = vec![e.degraded.as_path()];
        candidates.extend(e.gt.as_deref());
        let Some(path) = report::find_prediction(&a.prior_dir, &e.id, &candidates) else {
            eprintln!("missing prior: {}", e.id);
            missing += 1;
            continue;
        };
        let degraded = load_png(&e.degraded, 3)?;
        let raw = load_png(&path, 3)?;
        let prior = resize_bilinear(&raw, degraded.height(), degraded.width())?;
        let mut div = DivergenceInputs::default();
        if let Some(gt) = e.gt.as_deref().map(|p| load_png(p, 3)).transpose()? {
            div.psnr_prior_vs_gt = Some(psnr(&prior, &gt, &mc)?);
            div.psnr_degraded_vs_gt = Some(psnr(&degraded, &gt, &mc)?);
        }
        if let Some(p) = &iqa {
            div.iqa_prior = priorfuse::metrics::iqa_score(&prior, p).ok();
            div.iqa_degraded = priorfuse::metrics::iqa_score(&degraded, p).ok();
        }
        let r = fidelity::analyze(&degraded, &prior, raw_dims(&path, &raw), div)?;
        let flag = r.divergence_flag.map(|f| f.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{:.6},{},{},{:.4},{flag},\"{}\"\n",
            e.id, r.aspect_ratio_delta, r.translation_estimate.0, r.translation_estimate.1, r.translation_confidence, r.notes
        ));
        if !r.notes.is_empty() {
            println!("{}: {}", e.id, r.notes);
        }
    }
    match a.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(if missing > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let manifests = a.manifests.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let methods = a
        .methods
        .iter()
        .map(|m| {
            let (name, dir) = m.split_once('=').with_context(|| format!("--method `{m}` is not name=dir"))?;
            Ok(Method { name: name.to_string(), pred_dir: PathBuf::from(dir) })
        })
        .collect::<Result<Vec<_>>>()?;
    let iqa = a.iqa.provider();
    let cfg = BenchConfig { metrics: MetricConfig::default(), iqa: iqa.as_ref().map(|p| p as &dyn IqaProvider) };
    let r = report::run_benchmark(&manifests, &methods, &cfg)?;
    for path in report::write_outputs(&r, &a.out)? {
        println!("wrote {}", path.display());
    }
    print!("{}", report::render_table(&r, TableFormat::Markdown));
    Ok(report_missing(&r))
}

fn report_cmd(a: ReportArgs) -> Result<ExitCode> {
    let r = match (&a.per_image, &a.transcribed) {
        (Some(p), None) => report::aggregate(report::parse_per_image_csv(&std::fs::read_to_string(p)?)?)?,
        (None, Some(p)) => {
            let rows = report::load_reference_rows(p, a.table.as_deref())?;
            EvalReport { rows, per_image: vec![] }
        }
        _ => bail!("give exactly one of --per-image or --transcribed"),
    };
    match &a.out {
        Some(dir) if a.per_image.is_some() => {
            for path in report::write_outputs(&r, dir)? {
                println!("wrote {}", path.display());
            }
        }
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("report.csv"), report::render_table(&r, TableFormat::Csv))?;
            std::fs::write(dir.join("report.md"), report::render_table(&r, TableFormat::Markdown))?;
        }
        None => {}
    }
    print!("{}", report::render_table(&r, TableFormat::Markdown));
    Ok(ExitCode::SUCCESS)
}

fn infer(a: InferArgs) -> Result<ExitCode> {
    let (state, cfg) = TrainState::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = cfg.model();
    let manifest = load(&a.manifest)?;
    let samples = dataset::load_triplets(&manifest, &PngLoader::default(), cfg.fusion_mode.uses_prior())?;
    std::fs::create_dir_all(&a.out)?;
    for s in &samples {
        let out = model.restore(&state.params, &s.degraded, s.prior.as_ref())?;
        save_png(&out, &a.out.join(format!("{}.png", s.id)))?;
    }
    println!("restored {} images with a {} model into {}", samples.len(), cfg.fusion_mode, a.out.display());
    Ok(ExitCode::SUCCESS)
}
