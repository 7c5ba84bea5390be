//! Minimal pure-text SVG line plots with ± std bands. No renderer, no
//! external assets; one polyline per series plus an optional translucent
//! band polygon when a `<series>_std` column exists.

use std::fmt::Write as _;
use std::path::Path;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 800.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

#[derive(Debug, Clone)]
pub struct PlotSpec {
    /// Column for the x axis (e.g. `window_start`).
    pub x: String,
    /// Series stems: plots `<stem>_mean` (or `<stem>` when present) with a
    /// band from `<stem>_std`.
    pub series: Vec<String>,
    pub title: Option<String>,
}

#[derive(Debug)]
struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
}

fn parse_csv(text: &str) -> anyhow::Result<Table> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow::anyhow!("empty CSV"))?;
    let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            line.split(',')
                .map(|s| s.trim().parse::<f64>().ok())
                .collect(),
        );
    }
    Ok(Table { columns, rows })
}

impl Table {
    fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.get(idx).copied().flatten()).collect())
    }
}

/// Render a summary CSV to an SVG file.
pub fn plot_csv(csv_text: &str, spec: &PlotSpec, out: &Path) -> anyhow::Result<()> {
    anyhow::ensure!(!spec.series.is_empty(), "series list is empty");
    let table = parse_csv(csv_text)?;
    let xs = table
        .column(&spec.x)
        .ok_or_else(|| anyhow::anyhow!("missing x column {:?}", spec.x))?;

    struct Series {
        name: String,
        mean: Vec<Option<f64>>,
        std: Option<Vec<Option<f64>>>,
    }
    let mut series = Vec::new();
    for stem in &spec.series {
        let mean = table
            .column(stem)
            .or_else(|| table.column(&format!("{stem}_mean")))
            .ok_or_else(|| anyhow::anyhow!("missing series column {stem:?} (or {stem}_mean)"))?;
        series.push(Series {
            name: stem.clone(),
            mean,
            std: table.column(&format!("{stem}_std")),
        });
    }

    // Data ranges over the present values.
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (i, x) in xs.iter().enumerate() {
        let Some(x) = x else { continue };
        for s in &series {
            let Some(Some(m)) = s.mean.get(i) else { continue };
            let sd = s.std.as_ref().and_then(|v| v.get(i).copied().flatten()).unwrap_or(0.0);
            x_min = x_min.min(*x);
            x_max = x_max.max(*x);
            y_min = y_min.min(m - sd);
            y_max = y_max.max(m + sd);
        }
    }
    anyhow::ensure!(x_min.is_finite() && y_min.is_finite(), "no plottable points");
    if (y_max - y_min).abs() < 1e-300 {
        y_max = y_min + 1.0;
    }
    if (x_max - x_min).abs() < 1e-300 {
        x_max = x_min + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y_min) / (y_max - y_min) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )?;
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    if let Some(title) = &spec.title {
        writeln!(
            svg,
            r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>"#,
            W / 2.0
        )?;
    }
    // Axes.
    writeln!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    )?;
    for (frac, every) in [(0.0, true), (0.5, true), (1.0, true)] {
        if !every {
            continue;
        }
        let xv = x_min + frac * (x_max - x_min);
        let yv = y_min + frac * (y_max - y_min);
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{xv:.4}</text>"#,
            px(xv),
            H - MARGIN + 18.0
        )?;
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{yv:.4}</text>"#,
            MARGIN - 6.0,
            py(yv) + 4.0
        )?;
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        W / 2.0,
        H - 14.0,
        spec.x
    )?;

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<(f64, f64, f64)> = xs
            .iter()
            .enumerate()
            .filter_map(|(i, x)| {
                let x = (*x)?;
                let m = s.mean.get(i).copied().flatten()?;
                let sd = s.std.as_ref().and_then(|v| v.get(i).copied().flatten()).unwrap_or(0.0);
                Some((x, m, sd))
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        if points.iter().any(|p| p.2 > 0.0) {
            let mut band = String::new();
            for (x, m, sd) in &points {
                write!(band, "{:.2},{:.2} ", px(*x), py(m + sd))?;
            }
            for (x, m, sd) in points.iter().rev() {
                write!(band, "{:.2},{:.2} ", px(*x), py(m - sd))?;
            }
            writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" opacity="0.15" stroke="none"/>"#,
                band.trim()
            )?;
        }
        let mut line = String::new();
        for (x, m, _) in &points {
            write!(line, "{:.2},{:.2} ", px(*x), py(*m))?;
        }
        writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            line.trim()
        )?;
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            W - MARGIN + 6.0,
            MARGIN + 16.0 * si as f64,
            s.name
        )?;
    }
    writeln!(svg, "</svg>")?;
    std::fs::write(out, svg)?;
    Ok(())
}
