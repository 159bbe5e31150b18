//! Static SVG learning curves: one mean line per label with a ±std band
//! across seeds and the expert reference as a dashed horizontal line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{mean_std, read_metrics, MetricsFile};
use crate::error::{Error, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Curve for one label: `(step, mean, std)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(u64, f64, f64)>,
}

/// Groups metrics files by their `label` metadata (file stem otherwise)
/// and aggregates returns across files at each step.
pub fn curves(files: &[(String, MetricsFile)]) -> Result<(Vec<Curve>, Option<f64>)> {
    let mut groups: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut experts = Vec::new();
    for (stem, f) in files {
        if f.rows.is_empty() {
            return Err(Error::InsufficientData(format!("{stem}: metrics file has no rows")));
        }
        let label = f.meta.get("label").cloned().unwrap_or_else(|| stem.clone());
        let g = groups.entry(label).or_default();
        for r in &f.rows {
            g.entry(r.step).or_default().push(r.eval_return_mean);
        }
        if let Some(e) = f.meta.get("expert_reference").and_then(|v| v.parse::<f64>().ok()) {
            experts.push(e);
        }
    }
    let curves = groups
        .into_iter()
        .map(|(label, steps)| Curve {
            label,
            points: steps
                .into_iter()
                .map(|(s, v)| {
                    let (m, sd) = mean_std(&v);
                    (s, m, sd)
                })
                .collect(),
        })
        .collect();
    let expert = (!experts.is_empty()).then(|| mean_std(&experts).0);
    Ok((curves, expert))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(curves: &[Curve], expert: Option<f64>) -> String {
    let xmax = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let mut ylo = 0.0f64;
    let mut yhi = expert.unwrap_or(1.0);
    for c in curves {
        for &(_, m, s) in &c.points {
            ylo = ylo.min(m - s);
            yhi = yhi.max(m + s);
        }
    }
    if yhi - ylo < 1e-9 {
        yhi = ylo + 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + pw * x / xmax;
    let sy = |y: f64| TOP + ph * (1.0 - (y - ylo) / (yhi - ylo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = xmax * f;
        let yv = ylo + (yhi - ylo) * f;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.0}</text>"#,
            sx(xv),
            HEIGHT - BOTTOM + 18.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.1}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">environment steps</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">episode return</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    if let Some(e) = expert {
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="gray" stroke-dasharray="6 4"/>"#,
            LEFT + pw,
            y = sy(e)
        );
    }
    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let upper: Vec<String> = c
            .points
            .iter()
            .map(|&(x, m, sd)| format!("{:.2},{:.2}", sx(x as f64), sy(m + sd)))
            .collect();
        let lower: Vec<String> = c
            .points
            .iter()
            .rev()
            .map(|&(x, m, sd)| format!("{:.2},{:.2}", sx(x as f64), sy(m - sd)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = c
            .points
            .iter()
            .map(|&(x, m, _)| format!("{:.2},{:.2}", sx(x as f64), sy(m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = TOP + 16.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.2}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    if expert.is_some() {
        let ly = TOP + 16.0 + 18.0 * curves.len() as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.2}" y2="{ly}" stroke="gray" stroke-dasharray="6 4"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">expert</text>"#, lx + 26.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Reads metrics CSVs and writes the SVG.
pub fn plot<P: AsRef<Path>>(csv_paths: &[P], out_svg: impl AsRef<Path>) -> Result<()> {
    if csv_paths.is_empty() {
        return Err(Error::InsufficientData("plot needs at least one metrics CSV".into()));
    }
    let mut files = Vec::new();
    for p in csv_paths {
        let p = p.as_ref();
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        files.push((stem, read_metrics(p)?));
    }
    let (curves, expert) = curves(&files)?;
    let out = out_svg.as_ref();
    std::fs::write(out, render_svg(&curves, expert)).map_err(|e| Error::io(out, e))
}
