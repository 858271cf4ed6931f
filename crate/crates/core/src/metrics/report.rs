use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Column order of every metrics CSV.
pub const CSV_HEADER: [&str; 5] = ["metric", "label", "x", "value", "std"];

/// One CSV line. `value` is text only for `meta` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub label: String,
    pub x: Option<f64>,
    pub value: String,
    pub std: Option<f64>,
}

/// Scalar and curve metrics of one evaluated volume.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    /// Dose level, provenance and other labels.
    pub meta: BTreeMap<String, String>,
    /// Per display window (or `raw_hu`).
    pub mse: Vec<(String, f64)>,
    /// Per window: mean and standard deviation over slices.
    pub ssim: Vec<(String, f64, f64)>,
    /// Radial NPS: (frequency 1/mm, HU²·mm²).
    pub nps: Vec<(f64, f64)>,
    /// Per insert: (frequency 1/mm, modulation).
    pub ttf: Vec<(String, Vec<(f64, f64)>)>,
    /// Per material: mean and standard deviation in HU.
    pub ct_number: Vec<(String, f64, f64)>,
}

fn num(v: f64) -> String {
    format!("{v}")
}

impl MetricsReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let row = |metric: &str, label: &str, x: Option<f64>, value: String, std: Option<f64>| ReportRow {
            metric: metric.into(),
            label: label.into(),
            x,
            value,
            std,
        };
        let mut out = Vec::new();
        for (k, v) in &self.meta {
            out.push(row("meta", k, None, v.clone(), None));
        }
        for (w, v) in &self.mse {
            out.push(row("mse", w, None, num(*v), None));
        }
        for (w, m, s) in &self.ssim {
            out.push(row("ssim", w, None, num(*m), Some(*s)));
        }
        for (f, v) in &self.nps {
            out.push(row("nps", "radial", Some(*f), num(*v), None));
        }
        for (name, curve) in &self.ttf {
            for (f, v) in curve {
                out.push(row("ttf", name, Some(*f), num(*v), None));
            }
        }
        for (m, mean, std) in &self.ct_number {
            out.push(row("ct_number", m, None, num(*mean), Some(*std)));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory csv");
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        for r in self.rows() {
            w.write_record([r.metric, r.label, opt(r.x), r.value, opt(r.std)]).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// Parses a CSV written by [`to_csv`](Self::to_csv); `source` names the
    /// input in error messages. Columns may appear in any order.
    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let schema = |message: String| Error::Format {
            path: source.into(),
            message,
        };
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| schema(e.to_string()))?.clone();
        let mut col = [0usize; 5];
        for (i, name) in CSV_HEADER.iter().enumerate() {
            col[i] = header
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| schema(format!("schema mismatch: missing column `{name}`")))?;
        }
        let mut rep = MetricsReport::default();
        let mut ttf: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| schema(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let get = |i: usize| rec.get(col[i]).unwrap_or("");
            let parse = |i: usize| -> Result<f64> {
                get(i)
                    .parse::<f64>()
                    .map_err(|_| schema(format!("line {line}: column `{}` is not a number: {:?}", CSV_HEADER[i], get(i))))
            };
            let label = get(1).to_string();
            match get(0) {
                "meta" => {
                    rep.meta.insert(label, get(3).to_string());
                }
                "mse" => rep.mse.push((label, parse(3)?)),
                "ssim" => rep.ssim.push((label, parse(3)?, parse(4)?)),
                "nps" => rep.nps.push((parse(2)?, parse(3)?)),
                "ttf" => {
                    let point = (parse(2)?, parse(3)?);
                    match ttf.iter_mut().find(|(k, _)| *k == label) {
                        Some((_, c)) => c.push(point),
                        None => ttf.push((label, vec![point])),
                    }
                }
                "ct_number" => rep.ct_number.push((label, parse(3)?, parse(4)?)),
                other => return Err(schema(format!("line {line}: unknown metric `{other}`"))),
            }
        }
        rep.ttf = ttf;
        Ok(rep)
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-300);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(if t.abs() < 1e-12 * span { 0.0 } else { t });
        t += step;
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static line chart with one polyline per series and a legend.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (720.0, 440.0);
    let (l, r, t, b) = (70.0, 170.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    y0 = y0.min(0.0);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, (l + w - r) / 2.0, esc(title));
    for tx in nice_ticks(x0, x1) {
        let x = px(tx);
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{t}" x2="{x:.1}" y2="{:.1}" stroke="#e5e5e5"/>"##, h - b);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, h - b + 16.0, tx);
    }
    for ty in nice_ticks(y0, y1) {
        let y = py(ty);
        let _ = writeln!(s, r##"<line x1="{l}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e5e5e5"/>"##, w - r);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 6.0, y + 4.0, ty);
    }
    let _ = writeln!(
        s,
        r#"<rect x="{l}" y="{t}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        w - l - r,
        h - t - b
    );
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (l + w - r) / 2.0, h - 12.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (t + h - b) / 2.0,
        (t + h - b) / 2.0,
        esc(y_label)
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = p
            .iter()
            .filter(|q| q.0.is_finite() && q.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#, coords.join(" "));
        let ly = t + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            w - r + 10.0,
            w - r + 30.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, w - r + 36.0, ly + 4.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}
