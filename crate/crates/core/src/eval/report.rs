//! CSV and SVG renderings of evaluation results.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BenchmarkResult, CalibrationReport, MATCHING_RULE};
use crate::error::{Error, Result};
use crate::prefs::Violation;

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::format("csv", e.to_string())
}

fn header_line() -> String {
    format!("# matching rule: {MATCHING_RULE}\n")
}

/// `results.csv`: a `#` line declaring the matching rule, then one row per
/// dataset.
pub fn results_csv(results: &[BenchmarkResult]) -> Result<Vec<u8>> {
    let mut out = header_line().into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r).map_err(csv_err)?;
    }
    out.extend(w.into_inner().map_err(csv_err)?);
    Ok(out)
}

/// Rows of a results file with their 1-based line numbers.
pub fn read_results_csv(path: &Path) -> Result<Vec<(usize, BenchmarkResult)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: BenchmarkResult = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::format(path.display().to_string(), format!("line {line}: {e}")))?;
        out.push((line, row));
    }
    Ok(out)
}

/// Range and identity checks: `average` is the mean of the two scenario
/// accuracies and `2·both + either` equals their sum, within `tolerance`.
pub fn validate_results(rows: &[(usize, BenchmarkResult)], tolerance: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for (line, r) in rows {
        let mut bad = |rule: String| out.push(Violation { line: *line, rule });
        for (name, v) in [
            ("llm_correct_acc", r.llm_correct_acc),
            ("llm_false_acc", r.llm_false_acc),
            ("average", r.average),
            ("both", r.both),
            ("either", r.either),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        let mean = (r.llm_correct_acc + r.llm_false_acc) / 2.0;
        if (r.average - mean).abs() > tolerance {
            bad(format!(
                "average {} differs from the scenario mean {mean}",
                r.average
            ));
        }
        let lhs = 2.0 * r.both + r.either;
        let rhs = r.llm_correct_acc + r.llm_false_acc;
        if (lhs - rhs).abs() > tolerance {
            bad(format!("2*both + either = {lhs} but llm_correct + llm_false = {rhs}"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub method: String,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
    pub count: usize,
}

/// `calibration.csv`: one row per (method, bin); empty bins have empty
/// confidence and accuracy cells.
pub fn calibration_csv(reports: &[(String, CalibrationReport)]) -> Result<Vec<u8>> {
    let mut out = header_line().into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    for (method, rep) in reports {
        for (bin, b) in rep.bins.iter().enumerate() {
            w.serialize(CalibrationRow {
                method: method.clone(),
                bin,
                lower: b.lower,
                upper: b.upper,
                midpoint: b.midpoint,
                mean_confidence: b.mean_confidence,
                accuracy: b.accuracy,
                count: b.count,
            })
            .map_err(csv_err)?;
        }
    }
    out.extend(w.into_inner().map_err(csv_err)?);
    Ok(out)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Reliability diagram: empirical accuracy against mean confidence per
/// non-empty bin for each method, with the identity diagonal dashed.
pub fn reliability_svg(reports: &[(String, CalibrationReport)], title: &str) -> String {
    let (w, h, m) = (480.0, 400.0, 50.0);
    let side = h - 2.0 * m;
    let px = |x: f64| m + x * side;
    let py = |y: f64| h - m - y * side;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", xml_escape(title));
    let _ = writeln!(s, "<desc>matching rule: {}</desc>", xml_escape(MATCHING_RULE));
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{side}" height="{side}" fill="none" stroke="black"/>"#
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{v:.1}</text>"#,
            px(v),
            h - m + 14.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.1}</text>"#,
            m - 4.0,
            py(v) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="5,4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">confidence</text>"#,
        m + side / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">accuracy</text>"#,
        m + side / 2.0,
        m + side / 2.0
    );
    for (i, (method, rep)) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = rep
            .bins
            .iter()
            .filter_map(|b| Some(format!("{:.1},{:.1}", px(b.mean_confidence?), py(b.accuracy?))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let auroc = rep.auroc.map_or("n/a".to_string(), |a| format!("{a:.3}"));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{} (ECE {:.3}, AUROC {auroc})</text>"#,
            px(0.03),
            py(0.97) + 14.0 * i as f64,
            xml_escape(method),
            rep.ece
        );
    }
    s.push_str("</svg>\n");
    s
}
