//! Result files written at the end of a run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::pipeline::{write_manifest, RunOutcome, ToyOutcome};
use crate::data::{fmt_f64, LabeledDataset};
use crate::error::{Error, Result};
use crate::uq::{level_tag, MetricsTable};

fn write(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// One `overall` row plus one row per domain (`b1`, `b2`, ...).
pub fn metrics_rows(name: &str, m: &MetricsTable, out: &mut String) {
    writeln!(out, "{name},overall,{},{},{}", m.n, fmt_f64(m.accuracy), opt(m.mse)).unwrap();
    for d in &m.domains {
        writeln!(out, "{name},b{},{},{},{}", d.domain, d.n, fmt_f64(d.accuracy), opt(d.mse)).unwrap();
    }
}

pub fn metrics_csv(outcome: &RunOutcome) -> String {
    let mut s = String::from("method,domain,n,accuracy,mse\n");
    for r in &outcome.results {
        metrics_rows(&r.method.to_string(), &r.metrics, &mut s);
    }
    for (g, m) in outcome.teacher_metrics.iter().enumerate() {
        metrics_rows(&format!("teacher_{}", g + 1), m, &mut s);
    }
    s
}

/// Exactly `|methods| × |levels|` rows.
pub fn coverage_csv(outcome: &RunOutcome) -> String {
    let mut s = String::from("method,level,coverage\n");
    for r in &outcome.results {
        for (level, rate) in &r.metrics.coverage {
            writeln!(s, "{},{},{}", r.method, level, fmt_f64(*rate)).unwrap();
        }
    }
    s
}

/// Test points with true probabilities, domain tags and every method's
/// mean deviance, one row per point.
fn test_points_csv(test: &LabeledDataset, outcome: &RunOutcome) -> String {
    let mut s = String::from("index");
    for j in 1..=test.n_features() {
        write!(s, ",x_{j}").unwrap();
    }
    s.push_str(",y,domain");
    for k in 1..=test.n_classes() {
        write!(s, ",p_true_{k}").unwrap();
    }
    for r in &outcome.results {
        write!(s, ",mean_deviance_{}", r.method).unwrap();
    }
    s.push('\n');
    for i in 0..test.len() {
        write!(s, "{i}").unwrap();
        for v in test.row(i) {
            write!(s, ",{}", fmt_f64(*v)).unwrap();
        }
        let dom = test.domain_tags().map(|t| t[i].to_string()).unwrap_or_default();
        write!(s, ",{},{}", test.labels()[i] + 1, dom).unwrap();
        match test.true_prob_row(i) {
            Some(p) => p.iter().for_each(|v| write!(s, ",{}", fmt_f64(*v)).unwrap()),
            None => (0..test.n_classes()).for_each(|_| s.push(',')),
        }
        for r in &outcome.results {
            write!(s, ",{}", fmt_f64(r.report.points[i].mean_deviance)).unwrap();
        }
        s.push('\n');
    }
    s
}

fn teacher_weights_csv(outcome: &RunOutcome) -> String {
    let set = &outcome.teachers.train_predictions;
    let train = &outcome.data.splits.train;
    let mut s = String::from("index");
    for j in 1..=train.n_features() {
        write!(s, ",x_{j}").unwrap();
    }
    for g in 1..=set.n_teachers() {
        write!(s, ",weight_{g}").unwrap();
    }
    s.push('\n');
    for i in 0..train.len() {
        write!(s, "{i}").unwrap();
        for v in train.row(i) {
            write!(s, ",{}", fmt_f64(*v)).unwrap();
        }
        for g in 0..set.n_teachers() {
            write!(s, ",{}", fmt_f64(set.weights()[[i, g]])).unwrap();
        }
        s.push('\n');
    }
    s
}

/// `metrics.csv`, `coverage.csv`, `uncertainty.csv` (primary method),
/// `uncertainty_<method>.csv`, `manifest.json` and `plotdata/`.
pub fn emit_results(outcome: &RunOutcome, out_dir: &Path) -> Result<()> {
    let test = &outcome.data.splits.test;
    write(&out_dir.join("metrics.csv"), metrics_csv(outcome))?;
    write(&out_dir.join("coverage.csv"), coverage_csv(outcome))?;
    let primary = outcome.primary();
    write(
        &out_dir.join("uncertainty.csv"),
        primary.report.to_csv_string(test.features().view()),
    )?;
    for r in &outcome.results {
        write(
            &out_dir.join(format!("uncertainty_{}.csv", r.method)),
            r.report.to_csv_string(test.features().view()),
        )?;
    }
    let plot = out_dir.join("plotdata");
    write(&plot.join("test_points.csv"), test_points_csv(test, outcome))?;
    write(&plot.join("teacher_weights.csv"), teacher_weights_csv(outcome))?;
    let mut cov = String::from("method,level,coverage\n");
    for r in &outcome.results {
        for (l, c) in &r.metrics.coverage {
            writeln!(cov, "{},{},{}", r.method, level_tag(*l), fmt_f64(*c)).unwrap();
        }
    }
    write(&plot.join("coverage_curve.csv"), cov)?;
    write_manifest(&outcome.manifest, out_dir)
}

pub fn emit_toy(outcome: &ToyOutcome, out_dir: &Path) -> Result<()> {
    let p = &outcome.problem.posterior;
    let mut s = String::from("quantity,estimate,analytic\n");
    writeln!(s, "weight_1,{},{}", fmt_f64(outcome.weight_estimate), fmt_f64(p.weights[0])).unwrap();
    writeln!(s, "mean,{},{}", fmt_f64(outcome.mean_estimate), fmt_f64(p.mean())).unwrap();
    writeln!(s, "samples,{},", outcome.chain.len()).unwrap();
    write(&out_dir.join("toy_summary.csv"), s)?;
    let mut h = String::from("center,empirical_density,analytic_density\n");
    for (c, e, a) in &outcome.histogram {
        writeln!(h, "{},{},{}", fmt_f64(*c), fmt_f64(*e), fmt_f64(*a)).unwrap();
    }
    write(&out_dir.join("plotdata").join("toy_histogram.csv"), h)?;
    write_manifest(&outcome.manifest, out_dir)
}
