//! Standalone SVG line and bar charts from CSV files.
//!
//! The first column is the x axis (numeric for curves, labels for bars);
//! every other column is a series. For curves, columns whose name ends in
//! `_ref` are drawn as dashed horizontal reference lines at their first value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Curve,
    Bar,
}

impl FromStr for PlotKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curve" => Ok(Self::Curve),
            "bar" => Ok(Self::Bar),
            _ => bail!("unknown plot kind {s:?} (expected curve or bar)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub labels: Vec<String>,
    /// `columns[j][i]` is row `i` of series column `j + 1`.
    pub columns: Vec<Vec<f64>>,
}

/// Parses CSV text; row numbers in errors count the header as row 1.
pub fn parse_table(text: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()
        .context("row 1: unreadable header")?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.len() < 2 {
        bail!(
            "row 1: need an x column and at least one series, got {} columns",
            headers.len()
        );
    }
    let mut labels = Vec::new();
    let mut columns = vec![Vec::new(); headers.len() - 1];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| anyhow!("row {row}: {e}"))?;
        if rec.len() != headers.len() {
            bail!(
                "row {row}: expected {} fields, found {}",
                headers.len(),
                rec.len()
            );
        }
        labels.push(rec[0].trim().to_string());
        for (j, col) in columns.iter_mut().enumerate() {
            let field = rec[j + 1].trim();
            let v: f64 = field.parse().map_err(|_| {
                anyhow!(
                    "row {row}: column {:?} value {field:?} is not a number",
                    headers[j + 1]
                )
            })?;
            if !v.is_finite() {
                bail!("row {row}: column {:?} value is not finite", headers[j + 1]);
            }
            col.push(v);
        }
    }
    if labels.is_empty() {
        bail!("no data rows");
    }
    Ok(Table {
        headers,
        labels,
        columns,
    })
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64> + Clone, allow_log: bool) -> Self {
        let lo = values.clone().fold(f64::INFINITY, f64::min);
        let hi = values.fold(f64::NEG_INFINITY, f64::max);
        let log = allow_log && lo > 0.0 && hi / lo >= 20.0;
        let (lo, hi) = if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        if self.log {
            (v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let mut t = Vec::new();
            let mut p = 10f64.powf(self.lo.log10().floor());
            while p <= self.hi * 1.0001 {
                for m in [1.0, 2.0, 5.0] {
                    let v = p * m;
                    if v >= self.lo * 0.9999 && v <= self.hi * 1.0001 {
                        t.push(v);
                    }
                }
                p *= 10.0;
            }
            t
        } else {
            (0..=4)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0)
                .collect()
        }
    }
}

fn px(a: &Axis, v: f64) -> f64 {
    LEFT + a.frac(v) * (W - LEFT - RIGHT)
}

fn py(a: &Axis, v: f64) -> f64 {
    H - BOTTOM - a.frac(v) * (H - TOP - BOTTOM)
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>
<text x="{tx}" y="22" text-anchor="middle" font-size="15">{title}</text>
<g class="axes" stroke="black">
<line x1="{LEFT}" y1="{yb}" x2="{xr}" y2="{yb}"/>
<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{yb}"/>
</g>
<text x="{tx}" y="{xl}" text-anchor="middle">{xlabel}</text>
<text x="18" y="{ym}" text-anchor="middle" transform="rotate(-90 18 {ym})">{ylabel}</text>
"#,
        tx = (LEFT + W - RIGHT) / 2.0,
        yb = H - BOTTOM,
        xr = W - RIGHT,
        xl = H - 18.0,
        ym = (TOP + H - BOTTOM) / 2.0,
        title = esc(title),
        xlabel = esc(xlabel),
        ylabel = esc(ylabel),
    );
}

fn y_ticks(out: &mut String, y: &Axis) {
    for t in y.ticks() {
        let yy = py(y, t);
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{yy:.2}" x2="{LEFT}" y2="{yy:.2}" stroke="black"/>"#,
            LEFT - 5.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 8.0,
            yy + 4.0,
            fmt_tick(t)
        );
    }
}

fn legend(out: &mut String, entries: &[(String, &str, bool)]) {
    let _ = writeln!(out, r#"<g class="legend">"#);
    for (i, (name, color, dashed)) in entries.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = W - RIGHT + 15.0;
        let dash = if *dashed {
            r#" stroke-dasharray="5,3""#
        } else {
            ""
        };
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
            x + 24.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}">{}</text>"#,
            x + 30.0,
            y + 4.0,
            esc(name)
        );
    }
    let _ = writeln!(out, "</g>");
}

pub fn render(table: &Table, kind: PlotKind, title: &str) -> Result<String> {
    let mut out = String::new();
    let series = &table.headers[1..];
    match kind {
        PlotKind::Curve => {
            let xs: Vec<f64> = table
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    l.parse::<f64>()
                        .map_err(|_| anyhow!("row {}: x value {l:?} is not a number", i + 2))
                })
                .collect::<Result<_>>()?;
            let x = Axis::new(xs.iter().copied(), true);
            let y = Axis::new(table.columns.iter().flatten().copied().chain([0.0]), false);
            frame(&mut out, title, &table.headers[0], "value");
            y_ticks(&mut out, &y);
            for t in x.ticks() {
                let xx = px(&x, t);
                let _ = writeln!(
                    out,
                    r#"<line x1="{xx:.2}" y1="{}" x2="{xx:.2}" y2="{}" stroke="black"/>"#,
                    H - BOTTOM,
                    H - BOTTOM + 5.0
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{xx:.2}" y="{}" text-anchor="middle">{}</text>"#,
                    H - BOTTOM + 18.0,
                    fmt_tick(t)
                );
            }
            let mut entries = Vec::new();
            for (j, (name, col)) in series.iter().zip(&table.columns).enumerate() {
                let color = PALETTE[j % PALETTE.len()];
                if name.ends_with("_ref") {
                    let yy = py(&y, col[0]);
                    let _ = writeln!(
                        out,
                        r#"<line class="reference" x1="{LEFT}" y1="{yy:.2}" x2="{}" y2="{yy:.2}" stroke="{color}" stroke-width="1.5" stroke-dasharray="5,3"/>"#,
                        W - RIGHT
                    );
                    entries.push((name.clone(), color, true));
                } else {
                    let pts: Vec<String> = xs
                        .iter()
                        .zip(col)
                        .map(|(&a, &b)| format!("{:.2},{:.2}", px(&x, a), py(&y, b)))
                        .collect();
                    let _ = writeln!(
                        out,
                        r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                        pts.join(" ")
                    );
                    for (&a, &b) in xs.iter().zip(col) {
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                            px(&x, a),
                            py(&y, b)
                        );
                    }
                    entries.push((name.clone(), color, false));
                }
            }
            legend(&mut out, &entries);
        }
        PlotKind::Bar => {
            let y = Axis::new(table.columns.iter().flatten().copied().chain([0.0]), false);
            frame(&mut out, title, &table.headers[0], "value");
            y_ticks(&mut out, &y);
            let groups = table.labels.len() as f64;
            let group_w = (W - LEFT - RIGHT) / groups;
            let bar_w = group_w * 0.8 / series.len() as f64;
            for (i, label) in table.labels.iter().enumerate() {
                let gx = LEFT + group_w * i as f64;
                for (j, col) in table.columns.iter().enumerate() {
                    let (top, base) = (py(&y, col[i].max(0.0)), py(&y, col[i].min(0.0)));
                    let _ = writeln!(
                        out,
                        r#"<rect class="bar" x="{:.2}" y="{top:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"/>"#,
                        gx + group_w * 0.1 + bar_w * j as f64,
                        base - top,
                        PALETTE[j % PALETTE.len()]
                    );
                }
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                    gx + group_w / 2.0,
                    H - BOTTOM + 18.0,
                    esc(label)
                );
            }
            let entries: Vec<(String, &str, bool)> = series
                .iter()
                .enumerate()
                .map(|(j, n)| (n.clone(), PALETTE[j % PALETTE.len()], false))
                .collect();
            legend(&mut out, &entries);
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn plot_file(csv_in: &Path, svg_out: &Path, kind: PlotKind) -> Result<()> {
    let text = std::fs::read_to_string(csv_in).with_context(|| format!("{}", csv_in.display()))?;
    let table = parse_table(&text).with_context(|| format!("{}", csv_in.display()))?;
    let title = csv_in
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    std::fs::write(svg_out, render(&table, kind, &title)?)
        .with_context(|| format!("{}", svg_out.display()))
}
