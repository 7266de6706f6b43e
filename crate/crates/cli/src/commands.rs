//! The `train`, `enhance` and `evaluate` subcommands as library calls.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use semi_llie_core::backbone::Backbone;
use semi_llie_core::metrics::{self, Metric};

use crate::archive::load_backbone;
use crate::config::{read_config, render_config};
use crate::dataset::{scan_dataset, DiskSource};
use crate::error::{io_err, CliError, Result};
use crate::fit::{fit, FitOptions, FitSummary};
use crate::imageio::{is_image, load_image, save_image};

pub fn train(
    config: &Path,
    data: &Path,
    out_dir: &Path,
    resume: Option<PathBuf>,
    deterministic: bool,
) -> Result<FitSummary> {
    let cfg = read_config(config)?;
    let manifest = scan_dataset(data)?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    let (p, u, v, t) = manifest.counts();
    log::info!("dataset: {p} paired, {u} unpaired, {v} val, {t} test");
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (name, text) in [
        ("manifest.tsv", manifest.to_text()),
        ("config.txt", render_config(&cfg)),
    ] {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    let opts = FitOptions {
        out_dir: out_dir.to_path_buf(),
        resume,
        deterministic,
    };
    fit(&cfg, &DiskSource::new(manifest), &opts)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Enhance every image of `input` into `output` under the same file name.
/// Uses the teacher weights unless `student` is set.
pub fn enhance(ckpt: &Path, input: &Path, output: &Path, student: bool) -> Result<Vec<PathBuf>> {
    let model = load_backbone(ckpt, student)?;
    std::fs::create_dir_all(output).map_err(io_err(output))?;
    let mut written = Vec::new();
    for src in images_in(input)? {
        let img = load_image(&src)?;
        let out = model.enhance(&img)?;
        let dst = output.join(src.file_name().expect("listed files have names"));
        save_image(&dst, &out, 0)?;
        log::info!("{} -> {}", src.display(), dst.display());
        written.push(dst);
    }
    Ok(written)
}

/// Per-image scores plus per-split means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// `(split, image id, metric, value)`.
    pub rows: Vec<(String, String, Metric, f64)>,
}

impl EvalReport {
    pub fn means(&self) -> BTreeMap<(String, Metric), f64> {
        let mut acc: BTreeMap<(String, Metric), (f64, usize)> = BTreeMap::new();
        for (split, _, m, v) in &self.rows {
            let e = acc.entry((split.clone(), *m)).or_default();
            e.0 += v;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }

    /// `split/image<TAB>metric<TAB>value` lines, then a table of means.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (split, id, m, v) in &self.rows {
            writeln!(s, "{split}/{id}\t{}\t{v:.6}", m.name()).unwrap();
        }
        writeln!(s, "\n{:<10} {:<6} {:>12}", "split", "metric", "mean").unwrap();
        for ((split, m), v) in self.means() {
            writeln!(s, "{split:<10} {:<6} {v:>12.6}", m.name()).unwrap();
        }
        s
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out: Vec<Metric> = list
        .split(',')
        .map(str::parse)
        .collect::<semi_llie_core::Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

fn file_id(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Score the teacher on the `val` split (all metrics) and the `test`
/// split (metrics that need no ground truth).
pub fn evaluate_model(
    model: &Backbone<f32>,
    data: &Path,
    metrics: &[Metric],
) -> Result<EvalReport> {
    let manifest = scan_dataset(data)?;
    if manifest.val.is_empty() && manifest.test.is_empty() {
        return Err(CliError::Manifest(
            "no val or test images to evaluate".into(),
        ));
    }
    let mut report = EvalReport::default();
    for (low_path, gt_path) in &manifest.val {
        let low = load_image(low_path)?;
        let gt = load_image(gt_path)?;
        let out = model.enhance(&low)?;
        for &m in metrics {
            let reference = if m.needs_reference() { &gt } else { &low };
            let v = metrics::evaluate(m, reference, &out)?;
            report.rows.push(("val".into(), file_id(low_path), m, v));
        }
    }
    for low_path in &manifest.test {
        let low = load_image(low_path)?;
        let out = model.enhance(&low)?;
        for &m in metrics.iter().filter(|m| !m.needs_reference()) {
            let v = metrics::evaluate(m, &low, &out)?;
            report.rows.push(("test".into(), file_id(low_path), m, v));
        }
    }
    Ok(report)
}

pub fn evaluate(ckpt: &Path, data: &Path, metrics: &[Metric]) -> Result<EvalReport> {
    evaluate_model(&load_backbone(ckpt, false)?, data, metrics)
}
