use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use priorfuse::backbone::BackboneSpec;
use priorfuse::dataset::{DatasetManifest, ManifestEntry, Split};
use priorfuse::image::save_png;
use priorfuse::train::TrainConfig;
use priorfuse::{AugmentationConfig, DegradationType, ImageBuffer};

fn priorfuse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priorfuse")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "status {:?}\nstdout:\n{stdout}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    stdout
}

fn image(seed: usize, size: usize, dark: bool) -> ImageBuffer {
    ImageBuffer::from_fn(size, size, 3, |y, x, c| {
        let v = (((x * 7 + y * 3 + c * 11 + seed * 5) % 29) as f32 / 29.0) * 0.6 + 0.2;
        if dark {
            v * v
        } else {
            v
        }
    })
    .unwrap()
}

/// Three 24x24 test-split entries with gt and degraded files.
fn dataset(root: &Path) -> PathBuf {
    for d in ["gt", "degraded"] {
        std::fs::create_dir_all(root.join(d)).unwrap();
    }
    let entries = (0..3)
        .map(|i| {
            let file = format!("im{i}.png");
            save_png(&image(i, 24, false), &root.join("gt").join(&file)).unwrap();
            save_png(&image(i, 24, true), &root.join("degraded").join(&file)).unwrap();
            ManifestEntry {
                id: format!("im{i}"),
                degraded: PathBuf::from("degraded").join(&file),
                gt: Some(PathBuf::from("gt").join(&file)),
                prior: None,
            }
        })
        .collect();
    let m = DatasetManifest { name: "tiny".into(), degradation: DegradationType::LowLight, split: Split::Test, entries };
    let path = root.join("tiny.jsonl");
    m.save(&path).unwrap();
    path
}

#[test]
fn validate_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path());
    assert!(ok(&priorfuse(&["dataset", "validate", m.to_str().unwrap()], dir.path())).contains("ok (3"));
    std::fs::remove_file(dir.path().join("gt/im1.png")).unwrap();
    let out = priorfuse(&["dataset", "validate", m.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("im1.png"));
}

#[test]
fn acquire_analyze_bench_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    dataset(root);

    let out = ok(&priorfuse(
        &["acquire", "--manifest", "tiny.jsonl", "--cache", "cache", "--provider", "echo", "--write-manifest", "echo.jsonl"],
        root,
    ));
    assert!(out.contains("3 fetched, 0 from cache"), "{out}");
    let again = ok(&priorfuse(&["acquire", "--manifest", "tiny.jsonl", "--cache", "cache"], root));
    assert!(again.contains("0 fetched, 3 from cache"), "{again}");
    ok(&priorfuse(&["dataset", "validate", "echo.jsonl"], root));

    ok(&priorfuse(
        &[
            "acquire",
            "--manifest",
            "tiny.jsonl",
            "--cache",
            "cache",
            "--offline-from-gt",
            "--seed",
            "3",
            "--write-manifest",
            "offline.jsonl",
        ],
        root,
    ));
    assert!(root.join("cache/offline/im0.png").is_file());

    let analysis = ok(&priorfuse(&["analyze", "--manifest", "tiny.jsonl", "--prior-dir", "degraded"], root));
    let rows: Vec<&str> = analysis.lines().filter(|l| l.starts_with("im")).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.contains(",0,0,")), "{analysis}");

    let bench = priorfuse(
        &[
            "bench",
            "--manifest",
            "tiny.jsonl",
            "--method",
            "gt=gt",
            "--method",
            "input=degraded",
            "--iqa-constant",
            "0.5",
            "--out",
            "bench",
        ],
        root,
    );
    let table = ok(&bench);
    assert!(table.contains("| gt | 100.00 | 1.000 | 0.500 |"), "{table}");
    for f in ["report.csv", "report.md", "per_image.csv", "plots/tiny.svg"] {
        assert!(root.join("bench").join(f).is_file(), "{f}");
    }

    let rerendered = ok(&priorfuse(&["report", "--per-image", "bench/per_image.csv"], root));
    assert_eq!(rerendered, std::fs::read_to_string(root.join("bench/report.md")).unwrap());

    let missing = priorfuse(&["bench", "--manifest", "tiny.jsonl", "--method", "none=nowhere", "--out", "bench2"], root);
    assert_eq!(missing.status.code(), Some(2));
    assert!(root.join("bench2/report.md").is_file());
}

#[test]
fn eval_writes_aggregate_and_per_image_csv() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    dataset(root);
    ok(&priorfuse(&["eval", "--manifest", "tiny.jsonl", "--pred-dir", "gt", "--metrics", "psnr", "--out", "scores.csv"], root));
    let agg = std::fs::read_to_string(root.join("scores.csv")).unwrap();
    assert!(agg.lines().nth(1).unwrap().starts_with("prediction,100.00,—,—"), "{agg}");
    assert_eq!(std::fs::read_to_string(root.join("scores.per_image.csv")).unwrap().lines().count(), 4);
    assert!(!priorfuse(&["eval", "--manifest", "tiny.jsonl", "--pred-dir", "gt", "--metrics", "lpips", "--out", "x.csv"], root)
        .status
        .success());
}

#[test]
fn transcribed_table_renders() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/transcribed_tables.csv");
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&priorfuse(&["report", "--transcribed", fixture.to_str().unwrap(), "--table", "2"], dir.path()));
    assert!(out.contains("| Ours | 30.53 |"), "{out}");
    assert!(!out.contains("O-Haze"));
}

#[test]
fn train_resume_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    dataset(root);
    ok(&priorfuse(
        &["acquire", "--manifest", "tiny.jsonl", "--cache", "cache", "--offline-from-gt", "--write-manifest", "train.jsonl"],
        root,
    ));
    // the synthetic set is a test split; training needs gt, which every entry has
    let cfg = TrainConfig {
        iterations: 4,
        checkpoint_every: 2,
        backbone: BackboneSpec::restormer_tiny(8),
        augment: AugmentationConfig { crop: 16, ..Default::default() },
        ..Default::default()
    };
    std::fs::write(root.join("cfg.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--config", "cfg.json", "--manifest", "train.jsonl", "--fusion", "concat", "--out", "run"];
        args.extend_from_slice(extra);
        ok(&priorfuse(&args, root))
    };
    assert!(train(&["--stop-after", "2"]).contains("iteration 2 of 4"));
    assert!(train(&["--resume"]).contains("iteration 4 of 4"));
    assert_eq!(std::fs::read_to_string(root.join("run/loss_log.csv")).unwrap().lines().count(), 5);

    ok(&priorfuse(&["infer", "--checkpoint", "run/latest.safetensors", "--manifest", "train.jsonl", "--out", "restored"], root));
    for i in 0..3 {
        assert!(root.join(format!("restored/im{i}.png")).is_file());
    }
    let bad = priorfuse(&["train", "--manifest", "train.jsonl", "--fusion", "sideways", "--out", "run2"], root);
    assert!(!bad.status.success());
}
