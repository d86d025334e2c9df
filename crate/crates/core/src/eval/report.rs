use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalRecord;
use crate::selection::ConstraintKind;
use crate::sim::System;
use crate::uncertainty::{rank_by_uncertainty, Method};
use crate::{rng, Error, Result};

pub const DEFAULT_PERCENTILES: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 100.0];

/// Sample mean and standard error `s/√n` (zero for a single value).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn io_err(path: &Path, what: &str) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{what} {}", path.display());
    move |e| Error::io(context, e)
}

/// Streams records to `records.csv`, flushing after every batch.
pub struct RecordSink {
    writer: csv::Writer<fs::File>,
}

impl RecordSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(io_err(path, "creating"))?;
        Ok(Self {
            writer: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, records: &[EvalRecord]) -> Result<()> {
        for r in records {
            self.writer.serialize(r)?;
        }
        self.writer.flush().map_err(|e| Error::io("flushing records", e))
    }
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    RecordSink::create(path)?.write(records)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = fs::File::open(path).map_err(io_err(path, "opening"))?;
    let mut reader = csv::Reader::from_reader(file);
    let records = reader.deserialize().collect::<std::result::Result<Vec<EvalRecord>, _>>()?;
    if let Some(r) = records.iter().find(|r| !(r.rmse_selection >= 0.0 && r.rmse_target >= 0.0)) {
        return Err(Error::Validation(format!(
            "{}: record for patient {} has a negative or NaN rmse",
            path.display(),
            r.patient
        )));
    }
    Ok(records)
}

/// Aggregates over one (dataset, method, constraint, λ) cell. Patient
/// errors are averaged within each replicate; mean and standard error are
/// taken across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: System,
    pub method: Method,
    pub constraint: ConstraintKind,
    pub lambda: f64,
    pub replicates: usize,
    pub records: usize,
    pub rmse_selection_mean: f64,
    pub rmse_selection_stderr: f64,
    pub rmse_target_mean: f64,
    pub rmse_target_stderr: f64,
    pub mean_variance_mean: f64,
    pub mean_variance_stderr: f64,
}

type CellKey = (System, Method, ConstraintKind, u64);

fn cell_key(r: &EvalRecord) -> CellKey {
    (r.dataset, r.method, r.constraint, r.lambda.to_bits())
}

/// Groups items by key, keeping first-appearance order.
fn group_by<K: PartialEq, T>(items: &[T], key: impl Fn(&T) -> K) -> Vec<(K, Vec<&T>)> {
    let mut groups: Vec<(K, Vec<&T>)> = Vec::new();
    for item in items {
        let k = key(item);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(item),
            None => groups.push((k, vec![item])),
        }
    }
    groups
}

pub fn summarize(records: &[EvalRecord]) -> Vec<SummaryRow> {
    group_by(records, cell_key)
        .into_iter()
        .map(|((dataset, method, constraint, lambda), cell)| {
            let reps = group_by(&cell, |r| r.replicate);
            let per_rep = |f: fn(&EvalRecord) -> f64| -> (f64, f64) {
                let means: Vec<f64> = reps
                    .iter()
                    .map(|(_, rs)| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64)
                    .collect();
                mean_stderr(&means)
            };
            let (sel_m, sel_se) = per_rep(|r| r.rmse_selection);
            let (tgt_m, tgt_se) = per_rep(|r| r.rmse_target);
            let (var_m, var_se) = per_rep(|r| r.mean_variance);
            SummaryRow {
                dataset,
                method,
                constraint,
                lambda: f64::from_bits(lambda),
                replicates: reps.len(),
                records: cell.len(),
                rmse_selection_mean: sel_m,
                rmse_selection_stderr: sel_se,
                rmse_target_mean: tgt_m,
                rmse_target_stderr: tgt_se,
                mean_variance_mean: var_m,
                mean_variance_stderr: var_se,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path, "creating"))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path, "writing"))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Least-uncertain versus random subsets at one percentile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferralPoint {
    pub dataset: System,
    pub method: Method,
    pub constraint: ConstraintKind,
    pub lambda: f64,
    pub replicate: usize,
    pub percentile: f64,
    pub n: usize,
    pub least_uncertain: f64,
    pub random: f64,
}

/// For every (cell, replicate) ranks patients by mean horizon variance and
/// compares the mean `rmse_selection` of the least-uncertain `p`% with a
/// size-matched random subset drawn from `seed`.
pub fn deferral_curve(records: &[EvalRecord], percentiles: &[f64], seed: u64) -> Result<Vec<DeferralPoint>> {
    if let Some(p) = percentiles.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
        return Err(Error::invalid(format!("percentiles must lie in (0, 100], got {p}")));
    }
    let mut out = Vec::new();
    for ((dataset, method, constraint, lambda, replicate), group) in
        group_by(records, |r| (r.dataset, r.method, r.constraint, r.lambda.to_bits(), r.replicate))
    {
        let scores: Vec<f64> = group.iter().map(|r| r.mean_variance).collect();
        let ranking = rank_by_uncertainty(&scores)?;
        let mean_of = |idx: &[usize]| idx.iter().map(|&i| group[i].rmse_selection).sum::<f64>() / idx.len() as f64;
        for &p in percentiles {
            let mut r = rng::stream(seed, &[0xdefe, replicate as u64, p.to_bits()]);
            let least = ranking.least_uncertain(p);
            out.push(DeferralPoint {
                dataset,
                method,
                constraint,
                lambda: f64::from_bits(lambda),
                replicate,
                percentile: p,
                n: least.len(),
                least_uncertain: mean_of(&least),
                random: mean_of(&ranking.random_subset(p, &mut r)),
            });
        }
    }
    Ok(out)
}

pub fn write_deferral(path: &Path, points: &[DeferralPoint]) -> Result<()> {
    write_csv(path, points)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line plot of mean `rmse_selection` against λ with standard-error bars.
/// λ > 0 sits on a log axis; λ = 0 is pinned one decade left of the
/// smallest positive value.
pub fn curves_svg(rows: &[SummaryRow]) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 420.0, 70.0, 180.0, 30.0, 50.0);
    let positive: Vec<f64> = rows.iter().map(|r| r.lambda).filter(|&l| l > 0.0).collect();
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min).log10();
    let hi = positive.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10();
    let (lo, hi) = if positive.is_empty() { (0.0, 1.0) } else { (lo - 1.0, hi.max(lo)) };
    let xpos = |l: f64| {
        let v = if l > 0.0 { l.log10() } else { lo };
        let span = (hi - lo).max(1e-9);
        left + (v - lo) / span * (w - left - right)
    };
    let ymin = rows
        .iter()
        .map(|r| r.rmse_selection_mean - r.rmse_selection_stderr)
        .fold(f64::INFINITY, f64::min);
    let ymax = rows
        .iter()
        .map(|r| r.rmse_selection_mean + r.rmse_selection_stderr)
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = ((ymax - ymin) * 0.05).max(1e-12);
    let (ymin, ymax) = (ymin - pad, ymax + pad);
    let ypos = |v: f64| top + (ymax - v) / (ymax - ymin) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#
    );
    let mut lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    for l in &lambdas {
        let x = xpos(*l);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{y1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="10">{l}</text>"#,
            y1 + 4.0,
            y1 + 16.0
        );
    }
    for i in 0..=4 {
        let v = ymin + (ymax - ymin) * i as f64 / 4.0;
        let y = ypos(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{v:.4}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">uncertainty weight λ (log scale, 0 pinned left)</text>"#,
        (x0 + x1) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">mean rmse_selection</text>"#,
        (y0 + y1) / 2.0
    );
    for (i, (key, series)) in group_by(rows, |r| (r.dataset, r.method, r.constraint)).into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<&SummaryRow> = series;
        pts.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        let path: Vec<String> = pts
            .iter()
            .map(|r| format!("{:.1},{:.1}", xpos(r.lambda), ypos(r.rmse_selection_mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for r in &pts {
            let x = xpos(r.lambda);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                ypos(r.rmse_selection_mean - r.rmse_selection_stderr),
                ypos(r.rmse_selection_mean + r.rmse_selection_stderr),
                ypos(r.rmse_selection_mean)
            );
        }
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{} {} {}</text>"#,
            x1 + 12.0,
            x1 + 32.0,
            x1 + 38.0,
            ly + 4.0,
            key.0.name(),
            key.1,
            key.2
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_curves_svg(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    fs::write(path, curves_svg(rows)).map_err(io_err(path, "writing"))
}
