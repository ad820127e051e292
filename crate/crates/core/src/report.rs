//! Metric tables, per-document records and SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Methods-by-cells matrix of metric values. Missing cells are `None` and
/// render as empty CSV fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub name: String,
    /// Header of the first CSV column.
    pub row_label: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl ReportTable {
    pub fn new(name: impl Into<String>, rows: Vec<String>, columns: Vec<String>) -> Self {
        let values = vec![vec![None; columns.len()]; rows.len()];
        Self {
            name: name.into(),
            row_label: "method".into(),
            rows,
            columns,
            values,
        }
    }

    pub fn with_row_label(mut self, label: impl Into<String>) -> Self {
        self.row_label = label.into();
        self
    }

    fn index(&self, row: &str, column: &str) -> Result<(usize, usize)> {
        let r = self.rows.iter().position(|x| x == row);
        let c = self.columns.iter().position(|x| x == column);
        match (r, c) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::contract(format!("table {}: no cell ({row}, {column})", self.name))),
        }
    }

    pub fn set(&mut self, row: &str, column: &str, value: f64) -> Result<()> {
        let (r, c) = self.index(row, column)?;
        self.values[r][c] = Some(value);
        Ok(())
    }

    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        self.index(row, column).ok().and_then(|(r, c)| self.values[r][c])
    }

    pub fn row(&self, row: &str) -> Option<&[Option<f64>]> {
        self.rows.iter().position(|x| x == row).map(|r| self.values[r].as_slice())
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().flatten().all(Option::is_some)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.row_label.clone();
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, vals) in self.rows.iter().zip(&self.values) {
            out.push_str(name);
            for v in vals {
                out.push(',');
                if let Some(v) = v {
                    write!(out, "{}", format_value(*v)).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(name: impl Into<String>, text: &str) -> Result<Self> {
        let name = name.into();
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut table = Self::new(name.clone(), Vec::new(), columns.clone())
            .with_row_label(headers.get(0).unwrap_or("method"));
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let row_name = record.get(0).unwrap_or_default().to_string();
            let mut vals = Vec::with_capacity(columns.len());
            for field in record.iter().skip(1) {
                let field = field.trim();
                vals.push(if field.is_empty() {
                    None
                } else {
                    Some(field.parse::<f64>().map_err(|e| Error::Ingestion {
                        row: i + 2,
                        message: format!("table {name}: {field:?}: {e}"),
                    })?)
                });
            }
            if vals.len() != columns.len() {
                return Err(Error::Ingestion {
                    row: i + 2,
                    message: format!("table {name}: expected {} values, got {}", columns.len(), vals.len()),
                });
            }
            table.rows.push(row_name);
            table.values.push(vals);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
        Self::from_csv(name, &text)
    }
}

/// Fixed six-decimal rendering so tables are byte-stable.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WithinCount {
    pub method: String,
    pub count: usize,
    pub total: usize,
}

impl std::fmt::Display for WithinCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.count, self.total)
    }
}

/// For each method, the number of cells where `|a - b| <= units`.
pub fn within_units_count(a: &ReportTable, b: &ReportTable, units: f64) -> Result<Vec<WithinCount>> {
    if a.rows != b.rows || a.columns != b.columns {
        return Err(Error::contract(format!(
            "within_units_count: tables {} and {} have different methods or cells",
            a.name, b.name
        )));
    }
    a.rows
        .iter()
        .zip(a.values.iter().zip(&b.values))
        .map(|(method, (ra, rb))| {
            let mut count = 0;
            for (col, (x, y)) in a.columns.iter().zip(ra.iter().zip(rb)) {
                match (x, y) {
                    (Some(x), Some(y)) => count += usize::from((x - y).abs() <= units),
                    _ => {
                        return Err(Error::contract(format!(
                            "within_units_count: missing value for ({method}, {col})"
                        )))
                    }
                }
            }
            Ok(WithinCount {
                method: method.clone(),
                count,
                total: a.columns.len(),
            })
        })
        .collect()
}

/// One per-document metric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub doc_id: String,
    pub model: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

pub fn records_to_csv(records: &[MetricRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["doc_id", "model", "method", "metric", "value"])?;
    for r in records {
        w.write_record([&r.doc_id, &r.model, &r.method, &r.metric, &r.value.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for r in reader.deserialize() {
        out.push(r?);
    }
    Ok(out)
}

/// Mean of `value` per `(method, model)` for one metric.
pub fn aggregate(records: &[MetricRecord], metric: &str) -> BTreeMap<(String, String), f64> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == metric) {
        let e = acc.entry((r.method.clone(), r.model.clone())).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart: one group per table row, one bar per column.
pub fn bar_chart_svg(table: &ReportTable, title: &str, y_max: f64) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (56.0, 16.0, 40.0, 64.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let groups = table.rows.len().max(1) as f64;
    let series = table.columns.len().max(1) as f64;
    let group_w = plot_w / groups;
    let bar_w = group_w * 0.8 / series;
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    )
    .unwrap();
    for t in 0..=4 {
        let v = y_max * t as f64 / 4.0;
        let y = top + plot_h - plot_h * t as f64 / 4.0;
        writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"##,
            w - right,
            left - 6.0,
            y + 4.0,
            trim_number(v)
        )
        .unwrap();
    }
    for (g, (name, vals)) in table.rows.iter().zip(&table.values).enumerate() {
        let gx = left + g as f64 * group_w + group_w * 0.1;
        for (k, v) in vals.iter().enumerate() {
            let Some(v) = v else { continue };
            let bh = (v / y_max).clamp(0.0, 1.0) * plot_h;
            writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {}</title></rect>"#,
                gx + k as f64 * bar_w,
                top + plot_h - bh,
                bar_w,
                bh,
                PALETTE[k % PALETTE.len()],
                escape(name),
                escape(&table.columns[k]),
                format_value(*v)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
            left + (g as f64 + 0.5) * group_w,
            top + plot_h + 16.0,
            escape(name)
        )
        .unwrap();
    }
    for (k, c) in table.columns.iter().enumerate() {
        let x = left + k as f64 * 150.0;
        let y = h - 18.0;
        writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            y - 9.0,
            PALETTE[k % PALETTE.len()],
            x + 14.0,
            escape(c)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn trim_number(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}
