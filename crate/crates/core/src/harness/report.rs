//! Result files: JSONL records, the certified-accuracy CSV, and an SVG plot.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::eval::{AccuracyAtRadius, EvalRecord};

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}

/// Appends one JSON object per line to `path`.
pub fn append_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for item in items {
        let line = serde_json::to_string(item)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn table_csv(table: &[AccuracyAtRadius]) -> String {
    let mut out = String::from("radius,certified_accuracy\n");
    for row in table {
        let _ = writeln!(out, "{},{}", row.radius, row.accuracy);
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line plot of certified accuracy against radius, one polyline per series.
pub fn svg_plot(series: &[(String, Vec<AccuracyAtRadius>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let max_r = series
        .iter()
        .flat_map(|(_, t)| t.iter().map(|p| p.radius))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let sx = |r: f64| left + pw * r / max_r;
    let sy = |a: f64| top + ph * (1.0 - a);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let y = sy(a);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{a:.2}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    for i in 0..=4 {
        let r = max_r * i as f64 / 4.0;
        let x = sx(r);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{r:.2}</text>"#,
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">radius</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">certified accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (name, table)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = table
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.radius), sy(p.accuracy)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 + 16.0 * k as f64;
        let lx = left + pw - 150.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{ly:.2}">{}</text>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0,
            lx + 26.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Vec<AccuracyAtRadius> {
        vec![
            AccuracyAtRadius { radius: 0.0, accuracy: 0.9 },
            AccuracyAtRadius { radius: 0.5, accuracy: 0.4 },
        ]
    }

    #[test]
    fn records_round_trip_without_timing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let rec = EvalRecord {
            index: 0,
            label: 1,
            prediction: None,
            radius: 0.0,
            abstain: true,
            correct: false,
            counts: vec![3, 4],
            seconds: 1.5,
        };
        write_records(&path, std::slice::from_ref(&rec)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains("seconds") && text.contains("\"prediction\":null"));
        let back = read_records(&path).unwrap();
        assert_eq!(back[0], EvalRecord { seconds: 0.0, ..rec });
        fs::write(&path, "{\"index\":0}\n").unwrap();
        assert!(matches!(read_records(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_and_svg_shapes() {
        assert_eq!(table_csv(&table()), "radius,certified_accuracy\n0,0.9\n0.5,0.4\n");
        let svg = svg_plot(&[("a<b".into(), table())]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<polyline") && svg.contains("a&lt;b"));
    }
}
