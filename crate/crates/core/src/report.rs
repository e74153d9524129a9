//! Per-image evaluation records, per-(method, dataset) aggregates, table
//! rendering, benchmark runs over prediction directories, and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dataset::{DatasetManifest, ManifestEntry};
use crate::fidelity;
use crate::image::{self, resize_bilinear};
use crate::metrics::{self, IqaProvider, MetricConfig};

/// Placeholder for an absent value in rendered tables.
pub const ABSENT: &str = "—";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no records to aggregate")]
    Empty,
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Fidelity(#[from] fidelity::FidelityError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Metrics for one (method, dataset, image).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageRecord {
    pub method: String,
    pub dataset: String,
    pub id: String,
    /// False when the method produced no prediction for this image.
    pub present: bool,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub iqa: Option<f64>,
    pub aspect_ratio_delta: Option<f64>,
    pub shift: Option<(i64, i64)>,
    pub shift_confidence: Option<f64>,
    pub divergence_flag: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub dataset: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub iqa: Option<f64>,
    /// Images considered, including ones without a prediction.
    pub n_images: usize,
    pub n_missing: usize,
    /// Images contributing an IQA score.
    pub n_iqa: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<AggregateRow>,
    pub per_image: Vec<ImageRecord>,
}

impl EvalReport {
    pub fn missing(&self) -> impl Iterator<Item = &ImageRecord> {
        self.per_image.iter().filter(|r| !r.present)
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n) = (0.0, 0);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    ((n > 0).then(|| sum / n as f64), n)
}

/// Mean of each metric per (method, dataset), groups in first-seen order.
/// Absent values are skipped.
pub fn aggregate(per_image: Vec<ImageRecord>) -> Result<EvalReport, ReportError> {
    if per_image.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&ImageRecord>> = BTreeMap::new();
    for r in &per_image {
        let key = (r.method.clone(), r.dataset.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let (psnr, _) = mean(g.iter().map(|r| r.psnr));
            let (ssim, _) = mean(g.iter().map(|r| r.ssim));
            let (iqa, n_iqa) = mean(g.iter().map(|r| r.iqa));
            AggregateRow {
                method: key.0,
                dataset: key.1,
                psnr,
                ssim,
                iqa,
                n_images: g.len(),
                n_missing: g.iter().filter(|r| !r.present).count(),
                n_iqa,
            }
        })
        .collect();
    Ok(EvalReport { rows, per_image })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => ABSENT.to_string(),
    }
}

const METRIC_COLUMNS: [(&str, usize); 3] = [("PSNR↑", 2), ("SSIM↑", 3), ("CLIP-IQA↑", 3)];

/// Method rows by (dataset x metric) columns, in first-seen order.
pub fn render_table(report: &EvalReport, format: TableFormat) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let mut header = vec!["Method".to_string()];
    for d in &datasets {
        for (m, _) in METRIC_COLUMNS {
            header.push(format!("{d} {m}"));
        }
    }
    let mut lines: Vec<Vec<String>> = Vec::new();
    for m in &methods {
        let mut line = vec![m.to_string()];
        for d in &datasets {
            let row = report.rows.iter().find(|r| r.method == *m && r.dataset == *d);
            let vals = [row.and_then(|r| r.psnr), row.and_then(|r| r.ssim), row.and_then(|r| r.iqa)];
            for (v, (_, dec)) in vals.into_iter().zip(METRIC_COLUMNS) {
                line.push(cell(v, dec));
            }
        }
        lines.push(line);
    }
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            for l in std::iter::once(&header).chain(&lines) {
                out.push_str(&l.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}|", vec!["---"; header.len()].join("|"));
            for l in &lines {
                let _ = writeln!(out, "| {} |", l.join(" | "));
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

const PER_IMAGE_HEADER: &str =
    "method,dataset,id,present,psnr,ssim,iqa,aspect_ratio_delta,shift_dy,shift_dx,shift_confidence,divergence_flag";

fn opt<T: std::fmt::Debug>(v: Option<T>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Full-precision per-image CSV; absent values are empty fields.
pub fn per_image_csv(records: &[ImageRecord]) -> String {
    let mut out = format!("{PER_IMAGE_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.method),
            csv_field(&r.dataset),
            csv_field(&r.id),
            r.present,
            opt(r.psnr),
            opt(r.ssim),
            opt(r.iqa),
            opt(r.aspect_ratio_delta),
            opt(r.shift.map(|s| s.0)),
            opt(r.shift.map(|s| s.1)),
            opt(r.shift_confidence),
            opt(r.divergence_flag),
        );
    }
    out
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

pub fn parse_per_image_csv(text: &str) -> Result<Vec<ImageRecord>, ReportError> {
    let err = |line: usize, message: String| ReportError::Parse { path: format!("per_image.csv line {line}"), message };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f = split_csv_line(line);
        if f.len() != 12 {
            return Err(err(i + 1, format!("expected 12 fields, found {}", f.len())));
        }
        fn num<T: std::str::FromStr>(s: &str) -> Result<Option<T>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| format!("bad value `{s}`"))
            }
        }
        let parse = || -> Result<ImageRecord, String> {
            let dy: Option<i64> = num(&f[8])?;
            let dx: Option<i64> = num(&f[9])?;
            Ok(ImageRecord {
                method: f[0].clone(),
                dataset: f[1].clone(),
                id: f[2].clone(),
                present: f[3].parse().map_err(|_| format!("bad flag `{}`", f[3]))?,
                psnr: num(&f[4])?,
                ssim: num(&f[5])?,
                iqa: num(&f[6])?,
                aspect_ratio_delta: num(&f[7])?,
                shift: dy.zip(dx),
                shift_confidence: num(&f[10])?,
                divergence_flag: num(&f[11])?,
            })
        };
        out.push(parse().map_err(|m| err(i + 1, m))?);
    }
    Ok(out)
}

/// Aggregate rows from the transcribed-values fixture format
/// (`table,dataset,method,psnr,ssim,clip_iqa`, `#` comments), optionally
/// restricted to one table.
pub fn load_reference_rows(path: &Path, table: Option<&str>) -> Result<Vec<AggregateRow>, ReportError> {
    let text = std::fs::read_to_string(path)?;
    let err = |m: String| ReportError::Parse { path: path.display().to_string(), message: m };
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).skip(1) {
        let f = split_csv_line(line);
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields in `{line}`")));
        }
        if table.is_some_and(|t| t != f[0]) {
            continue;
        }
        let v = |s: &str| -> Result<Option<f64>, ReportError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err(format!("bad number `{s}`")))
            }
        };
        rows.push(AggregateRow {
            method: f[2].clone(),
            dataset: f[1].clone(),
            psnr: v(&f[3])?,
            ssim: v(&f[4])?,
            iqa: v(&f[5])?,
            n_images: 0,
            n_missing: 0,
            n_iqa: 0,
        });
    }
    Ok(rows)
}

/// A named directory of predictions.
#[derive(Debug, Clone)]
pub struct Method {
    pub name: String,
    pub pred_dir: PathBuf,
}

pub struct BenchConfig<'a> {
    pub metrics: MetricConfig,
    pub iqa: Option<&'a dyn IqaProvider>,
}

impl Default for BenchConfig<'_> {
    fn default() -> Self {
        Self { metrics: MetricConfig::default(), iqa: None }
    }
}

/// `<dir>/<id>.png`, else a file named like the entry's degraded or gt file.
pub fn find_prediction(dir: &Path, id: &str, candidates: &[&Path]) -> Option<PathBuf> {
    let direct = dir.join(format!("{id}.png"));
    if direct.is_file() {
        return Some(direct);
    }
    candidates.iter().filter_map(|p| p.file_name()).map(|n| dir.join(n)).find(|p| p.is_file())
}

fn evaluate_entry(method: &Method, dataset: &str, e: &ManifestEntry, cfg: &BenchConfig) -> Result<ImageRecord, ReportError> {
    let mut rec = ImageRecord { method: method.name.clone(), dataset: dataset.to_string(), id: e.id.clone(), ..Default::default() };
    let mut candidates = vec![e.degraded.as_path()];
    candidates.extend(e.gt.as_deref());
    let Some(path) = find_prediction(&method.pred_dir, &e.id, &candidates) else {
        return Ok(rec);
    };
    rec.present = true;
    let degraded = image::load_png(&e.degraded, 3)?;
    let raw = image::load_png(&path, 3)?;
    let pred = resize_bilinear(&raw, degraded.height(), degraded.width())?;
    rec.aspect_ratio_delta = Some(fidelity::aspect_ratio_drift((degraded.height(), degraded.width()), (raw.height(), raw.width())));
    let (dy, dx, conf) = fidelity::estimate_global_shift(&degraded, &pred)?;
    rec.shift = Some((dy, dx));
    rec.shift_confidence = Some(conf);
    let gt = e.gt.as_deref().map(|p| image::load_png(p, 3)).transpose()?;
    if let Some(gt) = &gt {
        rec.psnr = Some(metrics::psnr(&pred, gt, &cfg.metrics)?);
        rec.ssim = metrics::ssim(&pred, gt, &cfg.metrics).ok();
    }
    if let Some(iqa) = cfg.iqa {
        // an unavailable provider leaves the column absent
        rec.iqa = metrics::iqa_score(&pred, iqa).ok();
        if let (Some(gt), Some(p_iqa), Some(p_psnr)) = (&gt, rec.iqa, rec.psnr) {
            if let Ok(d_iqa) = metrics::iqa_score(&degraded, iqa) {
                let d_psnr = metrics::psnr(&degraded, gt, &cfg.metrics)?;
                rec.divergence_flag = Some(fidelity::divergence_flag(p_psnr, d_psnr, p_iqa, d_iqa));
            }
        }
    }
    Ok(rec)
}

/// Evaluate every method on every manifest entry, images in parallel.
/// Missing predictions yield records with `present = false` and no metrics.
pub fn run_benchmark(manifests: &[DatasetManifest], methods: &[Method], cfg: &BenchConfig) -> Result<EvalReport, ReportError> {
    let jobs: Vec<(&Method, &str, &ManifestEntry)> =
        methods.iter().flat_map(|m| manifests.iter().flat_map(move |d| d.entries.iter().map(move |e| (m, d.name.as_str(), e)))).collect();
    let records = jobs.par_iter().map(|(m, d, e)| evaluate_entry(m, d, e, cfg)).collect::<Result<Vec<_>, _>>()?;
    aggregate(records)
}

/// Grouped bar chart for one dataset: one panel per metric, one bar per method.
pub fn render_svg(report: &EvalReport, dataset: &str) -> String {
    let rows: Vec<&AggregateRow> = report.rows.iter().filter(|r| r.dataset == dataset).collect();
    let palette = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1"];
    let (panel_w, panel_h, top, left) = (220.0, 200.0, 40.0, 40.0);
    let width = left + 3.0 * (panel_w + 30.0);
    let height = top + panel_h + 40.0 + 18.0 * rows.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, xml_escape(dataset));
    let metrics: [(&str, fn(&AggregateRow) -> Option<f64>, usize); 3] =
        [("PSNR", |r| r.psnr, 2), ("SSIM", |r| r.ssim, 3), ("CLIP-IQA", |r| r.iqa, 3)];
    for (pi, (name, get, dec)) in metrics.iter().enumerate() {
        let x0 = left + pi as f64 * (panel_w + 30.0);
        let max = rows.iter().filter_map(|r| get(r)).fold(0.0f64, f64::max);
        let scale = if max > 0.0 { (panel_h - 20.0) / (max * 1.1) } else { 0.0 };
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">{name}</text>"#, top - 6.0);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, top + panel_h, x0 + panel_w, top + panel_h);
        let bar_w = panel_w / (rows.len().max(1) as f64 * 1.4);
        for (i, r) in rows.iter().enumerate() {
            let bx = x0 + 0.2 * bar_w + i as f64 * bar_w * 1.4;
            let color = palette[i % palette.len()];
            match get(r) {
                Some(v) => {
                    let bh = v * scale;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{bx:.1}" y="{:.1}" width="{bar_w:.1}" height="{bh:.1}" fill="{color}"/>"#,
                        top + panel_h - bh
                    );
                    let _ = writeln!(s, r#"<text x="{bx:.1}" y="{:.1}" font-size="9">{v:.dec$}</text>"#, top + panel_h - bh - 3.0);
                }
                None => {
                    let _ = writeln!(s, r#"<text x="{bx:.1}" y="{:.1}" font-size="9">{ABSENT}</text>"#, top + panel_h - 3.0);
                }
            }
        }
    }
    for (i, r) in rows.iter().enumerate() {
        let y = top + panel_h + 24.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{left}" y="{:.1}" width="12" height="12" fill="{}"/>"#, y - 10.0, palette[i % palette.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}">{}</text>"#, left + 18.0, xml_escape(&r.method));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn file_stem_for(dataset: &str) -> String {
    dataset.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Write `report.csv`, `report.md`, `per_image.csv` and `plots/<dataset>.svg`.
pub fn write_outputs(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(out_dir.join("plots"))?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, body: String| -> Result<(), ReportError> {
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put(out_dir.join("report.csv"), render_table(report, TableFormat::Csv))?;
    put(out_dir.join("report.md"), render_table(report, TableFormat::Markdown))?;
    put(out_dir.join("per_image.csv"), per_image_csv(&report.per_image))?;
    let mut datasets: Vec<&str> = report.rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.dedup();
    datasets.sort_unstable();
    datasets.dedup();
    for d in datasets {
        put(out_dir.join("plots").join(format!("{}.svg", file_stem_for(d))), render_svg(report, d))?;
    }
    Ok(written)
}
