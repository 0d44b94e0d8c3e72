//! Accuracy over all seen classes, run summaries, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{samples_to_matrix, Sample, TaskStream};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::trainer::MinModel;

const EVAL_CHUNK: usize = 512;
const EVAL_STREAM: u64 = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub task_index: usize,
    /// Fraction of correct predictions over the test sets of tasks `1..=t`.
    pub accuracy_seen: f64,
    pub per_class_accuracy: BTreeMap<usize, f64>,
    pub epoch_losses: Vec<f64>,
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub reports: Vec<SessionReport>,
    pub average_accuracy: f64,
    pub last_accuracy: f64,
    pub config_hash: String,
}

/// Test accuracy after session `upto` on the union of the first `upto`
/// test sets, using the mean noise path.
///
/// Strategies that pick a generator at random draw from a fixed evaluation
/// stream, so repeated calls agree and the model is never touched.
pub fn evaluate<T: Real>(
    model: &MinModel<T>,
    stream: &TaskStream,
    upto: usize,
) -> Result<SessionReport> {
    let mut rng = SeededRng::with_stream(model.spec.backbone_seed, EVAL_STREAM);
    evaluate_with(model, stream, upto, true, &mut rng)
}

/// Like [`evaluate`] but with sampled noise (`eval_mode = false`) when asked.
pub fn evaluate_with<T: Real>(
    model: &MinModel<T>,
    stream: &TaskStream,
    upto: usize,
    eval_mode: bool,
    rng: &mut SeededRng,
) -> Result<SessionReport> {
    if upto == 0 || upto > model.sessions_completed {
        return Err(Error::SessionOrder {
            expected: model.sessions_completed,
            found: upto,
        });
    }
    if upto > stream.num_tasks() {
        return Err(Error::InvalidParameter(format!(
            "stream has {} tasks, asked for {upto}",
            stream.num_tasks()
        )));
    }
    if model.classifier.num_classes() == 0 {
        return Err(Error::InvalidParameter("classifier has no classes".into()));
    }
    let samples: Vec<Sample> = stream.seen_test_samples(upto).cloned().collect();
    if samples.is_empty() {
        return Err(Error::EmptyInput("no test samples for the seen tasks"));
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let (x, labels) = samples_to_matrix::<T>(chunk);
        let z = model.features(&x, eval_mode, rng)?;
        let predicted = model.classifier.predict_classes(&z)?;
        for (&p, &l) in predicted.iter().zip(&labels) {
            let e = per_class.entry(l).or_default();
            e.1 += 1;
            if p == l {
                e.0 += 1;
                correct += 1;
            }
        }
    }
    let expected: usize = stream.tasks[..upto].iter().map(|t| t.test.len()).sum();
    assert_eq!(samples.len(), expected, "seen-sample count");
    Ok(SessionReport {
        task_index: upto,
        accuracy_seen: correct as f64 / samples.len() as f64,
        per_class_accuracy: per_class
            .into_iter()
            .map(|(c, (k, n))| (c, k as f64 / n as f64))
            .collect(),
        epoch_losses: Vec::new(),
        sample_count: samples.len(),
    })
}

pub fn summarize(
    reports: Vec<SessionReport>,
    config_hash: impl Into<String>,
) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no session reports"));
    }
    for (i, r) in reports.iter().enumerate() {
        if r.task_index != i + 1 {
            return Err(Error::SessionOrder {
                expected: i + 1,
                found: r.task_index,
            });
        }
    }
    let average_accuracy =
        reports.iter().map(|r| r.accuracy_seen).sum::<f64>() / reports.len() as f64;
    let last_accuracy = reports[reports.len() - 1].accuracy_seen;
    Ok(RunSummary {
        reports,
        average_accuracy,
        last_accuracy,
        config_hash: config_hash.into(),
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summary_csv(summary: &RunSummary) -> String {
    let mut out = String::from("task,accuracy_pct\n");
    for r in &summary.reports {
        let _ = writeln!(out, "{},{:.2}", r.task_index, 100.0 * r.accuracy_seen);
    }
    out
}

pub fn summary_json(summary: &RunSummary) -> Result<String> {
    serde_json::to_string_pretty(summary).map_err(|e| Error::Data(format!("json encoding: {e}")))
}

/// One labelled polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Static line chart, one polyline per series. Output depends only on the
/// arguments.
pub fn line_chart_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    note: &str,
) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (SVG_W - 2.0 * MARGIN);
    let sy = |y: f64| SVG_H - MARGIN - (y - y0) / (y1 - y0) * (SVG_H - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="500" viewBox="0 0 800 500">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="800" height="500" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="400" y="30" text-anchor="middle" font-size="16">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}" font-size="11">{}</text>"#,
            sx(v),
            SVG_H - MARGIN + 16.0,
            fmt_tick(v)
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#,
            MARGIN - 6.0,
            sy(v) + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="400" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        SVG_H - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="250" text-anchor="middle" font-size="13" transform="rotate(-90 18 250)">{}</text>"#,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            path.join(" "),
            escape(&s.label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{colour}">{}</text>"#,
            SVG_W - MARGIN - 150.0,
            MARGIN + 14.0 * k as f64,
            escape(&s.label)
        );
    }
    if !note.is_empty() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="490" font-size="9" fill="grey">{}</text>"#,
            MARGIN,
            escape(note)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Writes `accuracy.csv`, `summary.json` and `accuracy.svg` into `dir`.
pub fn emit(summary: &RunSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("accuracy.csv"), summary_csv(summary))?;
    fs::write(dir.join("summary.json"), summary_json(summary)?)?;
    let series = Series {
        label: "A_t".into(),
        points: summary
            .reports
            .iter()
            .map(|r| (r.task_index as f64, 100.0 * r.accuracy_seen))
            .collect(),
    };
    let svg = line_chart_svg(
        "Accuracy on seen classes",
        "session",
        "accuracy (%)",
        &[series],
        &format!("config {}", summary.config_hash),
    );
    fs::write(dir.join("accuracy.svg"), svg)?;
    Ok(())
}
