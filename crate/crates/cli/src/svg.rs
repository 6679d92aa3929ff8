//! Numeric CSV tables and their SVG renderings.
//!
//! Rendering is pure string formatting with fixed precision, so equal tables
//! give byte-identical documents.

use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

/// Header plus rows of numbers; empty cells read back as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| {
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            }))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CliError::Other(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|cell| {
                    if cell.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        cell.parse::<f64>().map_err(|e| {
                            CliError::Format(format!(
                                "row {}: {cell:?} is not a number: {e}",
                                i + 2
                            ))
                        })
                    }
                })
                .collect::<Result<_, _>>()?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_csv()?).map_err(|e| CliError::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvgKind {
    /// One bar per row; the bar height is the last column.
    Histogram,
    /// Column 0 against column 1, rows with a NaN skipped.
    Line,
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str, y_range: (f64, f64)) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 2.0);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="{x0:.2}" y="{:.2}" text-anchor="end">{:.4}</text>"#,
        y0 + 4.0,
        y_range.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{x0:.2}" y="{:.2}" text-anchor="end">{:.4}</text>"#,
        y1 + 4.0,
        y_range.1
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Standalone SVG rendering of `table`. Empty tables are rejected.
pub fn emit_svg(table: &CsvTable, kind: SvgKind, title: &str) -> Result<String, CliError> {
    if table.rows.is_empty() || table.header.len() < 2 {
        return Err(CliError::Format(format!(
            "cannot plot {title}: empty table"
        )));
    }
    let plot_w = WIDTH - 1.5 * MARGIN;
    let plot_h = HEIGHT - 1.5 * MARGIN;
    let mut out = String::new();
    match kind {
        SvgKind::Histogram => {
            let last = table.header.len() - 1;
            let heights: Vec<f64> = table
                .column(last)
                .into_iter()
                .map(|h| if h.is_finite() { h } else { 0.0 })
                .collect();
            let top = heights
                .iter()
                .copied()
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE);
            header(
                &mut out,
                title,
                &table.header[0],
                &table.header[last],
                (0.0, top),
            );
            let bar_w = plot_w / heights.len() as f64;
            for (i, h) in heights.iter().enumerate() {
                let bh = plot_h * h.max(0.0) / top;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue" stroke="white"/>"#,
                    MARGIN + i as f64 * bar_w,
                    HEIGHT - MARGIN - bh,
                    bar_w,
                    bh
                );
            }
        }
        SvgKind::Line => {
            let pts: Vec<(f64, f64)> = table
                .rows
                .iter()
                .map(|r| (r[0], r[1]))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            if pts.is_empty() {
                return Err(CliError::Format(format!(
                    "cannot plot {title}: no finite points"
                )));
            }
            let (xl, xh) = span(pts.iter().map(|p| p.0));
            let (yl, yh) = span(pts.iter().map(|p| p.1));
            header(
                &mut out,
                title,
                &table.header[0],
                &table.header[1],
                (yl, yh),
            );
            let mut d = String::new();
            for (i, (x, y)) in pts.iter().enumerate() {
                let px = MARGIN + plot_w * (x - xl) / (xh - xl);
                let py = HEIGHT - MARGIN - plot_h * (y - yl) / (yh - yl);
                let _ = write!(d, "{}{px:.2} {py:.2}", if i == 0 { "M " } else { " L " });
            }
            let _ = writeln!(
                out,
                r#"<path d="{d}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_missing_cells() {
        let mut t = CsvTable::new(&["a", "b"]);
        t.push(vec![1.5, f64::NAN]);
        t.push(vec![-2.0, 3.0]);
        let back = CsvTable::parse(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back.header, t.header);
        assert!(back.rows[0][1].is_nan());
        assert_eq!(back.rows[1], vec![-2.0, 3.0]);
        assert!(CsvTable::parse("a,b\n1,x\n").is_err());
    }

    #[test]
    fn single_bar_histogram_has_one_bar() {
        let mut t = CsvTable::new(&["lo", "hi", "count"]);
        t.push(vec![0.0, 1.0, 7.0]);
        let svg = emit_svg(&t, SvgKind::Histogram, "h").unwrap();
        assert_eq!(svg.matches("fill=\"steelblue\"").count(), 1);
    }

    #[test]
    fn two_point_line_is_one_segment() {
        let mut t = CsvTable::new(&["x", "y"]);
        t.push(vec![0.0, 0.0]);
        t.push(vec![1.0, 2.0]);
        let svg = emit_svg(&t, SvgKind::Line, "l").unwrap();
        assert_eq!(svg.matches("<path").count(), 1);
        assert_eq!(svg.matches(" L ").count(), 1);
    }

    #[test]
    fn rendering_is_deterministic_and_rejects_empty() {
        let mut t = CsvTable::new(&["x", "y"]);
        t.push(vec![0.3, 1.0]);
        t.push(vec![0.7, f64::NAN]);
        assert_eq!(
            emit_svg(&t, SvgKind::Line, "t").unwrap(),
            emit_svg(&t.clone(), SvgKind::Line, "t").unwrap()
        );
        assert!(emit_svg(&CsvTable::new(&["x", "y"]), SvgKind::Line, "e").is_err());
        assert!(emit_svg(&CsvTable::new(&["x", "y"]), SvgKind::Histogram, "e").is_err());
    }
}
