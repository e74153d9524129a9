mod common;

use std::path::{Path, PathBuf};

use priorfuse::dataset::{load_manifest, DatasetManifest, ManifestEntry, Split};
use priorfuse::degradation::DegradationType;
use priorfuse::fidelity::estimate_global_shift;
use priorfuse::image::save_png;
use priorfuse::metrics::{psnr, ConstantIqa, MetricConfig};
use priorfuse::prior::{synthesize_offline_prior, SimilarityWarp, SyntheticPriorConfig};
use priorfuse::report::{self, per_image_csv, run_benchmark, BenchConfig, Method, TableFormat};
use priorfuse::RandomSeed;

/// Writes gt/degraded pngs for `n` images and returns a manifest over them.
fn write_dataset(root: &Path, name: &str, split: Split, n: usize, size: usize) -> DatasetManifest {
    let seed = RandomSeed(21);
    for d in ["gt", "degraded"] {
        std::fs::create_dir_all(root.join(d)).unwrap();
    }
    let entries = (0..n as u64)
        .map(|i| {
            let gt = common::clean_image(seed, i, size);
            let degraded = common::degrade(&gt, seed, i, 2.0, 0.04);
            let file = format!("{name}_{i:02}.png");
            save_png(&gt, &root.join("gt").join(&file)).unwrap();
            save_png(&degraded, &root.join("degraded").join(&file)).unwrap();
            ManifestEntry {
                id: format!("{name}_{i:02}"),
                degraded: PathBuf::from("degraded").join(&file),
                gt: Some(PathBuf::from("gt").join(&file)),
                prior: None,
            }
        })
        .collect();
    let m = DatasetManifest { name: name.into(), degradation: DegradationType::Haze, split, entries };
    let path = root.join(format!("{name}_{split:?}.jsonl").to_lowercase());
    m.save(&path).unwrap();
    load_manifest(&path).unwrap()
}

#[test]
fn haze_layout_counts() {
    let dir = tempfile::tempdir().unwrap();
    let train = write_dataset(dir.path(), "haze-train", Split::Train, 40, 16);
    let test = write_dataset(dir.path(), "haze-test", Split::Test, 5, 16);
    assert_eq!((train.entries.len(), test.entries.len()), (40, 5));
    assert!(train.entries.iter().all(|e| e.degraded.is_absolute() && e.degraded.exists()));
}

#[test]
fn synthetic_translation_is_recovered_by_phase_correlation() {
    let gt = common::clean_image(RandomSeed(4), 0, 64);
    let still = SyntheticPriorConfig { max_translation: 0.0, max_scale_delta: 0.0, color_jitter: 0.0, seed: RandomSeed(4) };
    assert_eq!(synthesize_offline_prior(&gt, &still).unwrap(), gt);
    let shifted = SimilarityWarp::translation(5.0, 3.0).apply(&gt);
    let (dy, dx, conf) = estimate_global_shift(&gt, &shifted).unwrap();
    assert_eq!((dy, dx), (5, 3), "confidence {conf}");
}

fn bench_fixture(dir: &Path) -> (DatasetManifest, Vec<Method>) {
    let m = write_dataset(dir, "set", Split::Test, 5, 32);
    let methods = vec![
        Method { name: "gt".into(), pred_dir: dir.join("gt") },
        Method { name: "degraded".into(), pred_dir: dir.join("degraded") },
        Method { name: "empty".into(), pred_dir: dir.join("nothing-here") },
    ];
    (m, methods)
}

#[test]
fn benchmark_cardinality_and_reference_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (m, methods) = bench_fixture(dir.path());
    let iqa = ConstantIqa(0.5);
    let cfg = BenchConfig { iqa: Some(&iqa), ..Default::default() };
    let r = run_benchmark(std::slice::from_ref(&m), &methods, &cfg).unwrap();
    assert_eq!((r.rows.len(), r.per_image.len()), (3, 15));

    let gt_row = &r.rows[0];
    assert_eq!(gt_row.psnr, Some(MetricConfig::default().psnr_cap));
    assert_eq!(gt_row.ssim, Some(1.0));

    let mc = MetricConfig::default();
    for (rec, e) in r.per_image[5..10].iter().zip(&m.entries) {
        let d = priorfuse::image::load_png(&e.degraded, 3).unwrap();
        let g = priorfuse::image::load_png(e.gt.as_ref().unwrap(), 3).unwrap();
        assert_eq!(rec.psnr, Some(psnr(&d, &g, &mc).unwrap()));
        assert_eq!(rec.shift, Some((0, 0)));
        assert_eq!(rec.divergence_flag, Some(false));
    }

    assert_eq!(r.missing().count(), 5);
    assert!(r.rows[2].psnr.is_none() && r.rows[2].n_missing == 5);
    let md = report::render_table(&r, TableFormat::Markdown);
    assert!(md.lines().any(|l| l.starts_with("| empty | — | — | — |")), "{md}");
}

#[test]
fn aggregates_are_means_of_rows_and_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (m, methods) = bench_fixture(dir.path());
    let a = run_benchmark(std::slice::from_ref(&m), &methods[..2], &BenchConfig::default()).unwrap();
    let b = run_benchmark(std::slice::from_ref(&m), &methods[..2], &BenchConfig::default()).unwrap();
    assert_eq!(per_image_csv(&a.per_image), per_image_csv(&b.per_image));

    let reparsed = report::parse_per_image_csv(&per_image_csv(&a.per_image)).unwrap();
    let again = report::aggregate(reparsed).unwrap();
    for (x, y) in a.rows.iter().zip(&again.rows) {
        assert_eq!(x, y);
        let mean: f64 = a.per_image.iter().filter(|r| r.method == x.method).map(|r| r.psnr.unwrap()).sum::<f64>() / 5.0;
        assert!((x.psnr.unwrap() - mean).abs() < 1e-12);
    }

    let out = dir.path().join("out");
    let written = report::write_outputs(&a, &out).unwrap();
    assert_eq!(written.len(), 4);
    for f in ["report.csv", "report.md", "per_image.csv", "plots/set.svg"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn transcribed_fixture_renders() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/transcribed_tables.csv");
    let rows = report::load_reference_rows(&path, None).unwrap();
    assert_eq!(rows.len(), 18);
    let r = report::EvalReport { rows, per_image: vec![] };
    let md = report::render_table(&r, TableFormat::Markdown);
    let header: Vec<&str> = md.lines().next().unwrap().split(" | ").collect();
    assert_eq!(header.len(), 1 + 6 * 3);
    assert!(md.contains("| Ours | 22.08 | 0.801 | 0.566 | 29.19 |"), "{md}");
    assert!(md.contains("| GPT-Image | 13.13 | 0.133 | 0.757 |"), "{md}");
}
