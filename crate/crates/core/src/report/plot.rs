//! Static SVG figures drawn from a finished run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use super::{artifact_err, io_err, CohortStatus, PipelineError, RunReport};
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlotSummary {
    /// Written files relative to the run directory.
    pub written: Vec<String>,
    /// Plots that could not be drawn, with the reason.
    pub notes: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct SummaryPoint {
    rank: usize,
    feature: String,
    #[allow(dead_code)]
    id: String,
    shap: f64,
    value: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub(crate) struct EmbeddingRow {
    #[allow(dead_code)]
    id: String,
    x: f64,
    y: f64,
    cluster: usize,
    label: u8,
    predicted_probability: f64,
    age: f64,
    sex: String,
}

const LOW: (f64, f64, f64) = (30.0, 136.0, 229.0);
const HIGH: (f64, f64, f64) = (255.0, 13.0, 87.0);
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn gradient(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(LOW.0, HIGH.0), mix(LOW.1, HIGH.1), mix(LOW.2, HIGH.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| artifact_err(path, e))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| artifact_err(path, e))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// SHAP summary: one horizontal strip per ranked input, rank 1 on top,
/// x = attribution, color = feature value between its 5th and 95th percentiles.
fn summary_svg(points: &[SummaryPoint], title: &str, seed: u64) -> String {
    let mut strips: BTreeMap<usize, (&str, Vec<&SummaryPoint>)> = BTreeMap::new();
    for p in points {
        strips.entry(p.rank).or_insert((&p.feature, Vec::new())).1.push(p);
    }
    let (left, right, top, row) = (260.0, 40.0, 50.0, 26.0);
    let width = 900.0;
    let height = top + row * strips.len() as f64 + 60.0;
    let (lo, hi) = points
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), p| (lo.min(p.shap), hi.max(p.shap)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let sx = |v: f64| left + (v - lo) / span * (width - left - right);
    let mut rng = rng_from(seed);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" font-size="15">{}</text>"#, width / 2.0 - 120.0, escape(title));
    let zero = sx(0.0);
    let bottom = top + row * strips.len() as f64;
    let _ = writeln!(
        svg,
        r##"<line x1="{zero:.2}" y1="{top}" x2="{zero:.2}" y2="{bottom}" stroke="#999"/>"##
    );
    for (i, (_, (name, pts))) in strips.iter().enumerate() {
        let cy = top + row * (i as f64 + 0.5);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 8.0,
            cy + 4.0,
            escape(name)
        );
        let mut values: Vec<f64> = pts.iter().map(|p| p.value).collect();
        values.sort_by(f64::total_cmp);
        let (vlo, vhi) = (percentile(&values, 0.05), percentile(&values, 0.95));
        for p in pts {
            let t = if vhi > vlo { (p.value - vlo) / (vhi - vlo) } else { 0.5 };
            let jitter: f64 = rng.gen_range(-0.4..0.4) * row;
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.8"/>"#,
                sx(p.shap),
                cy + jitter,
                gradient(t)
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">SHAP value (impact on predicted probability)</text>"#,
        (left + width - right) / 2.0,
        bottom + 30.0
    );
    for (v, anchor) in [(lo, "start"), (hi, "end")] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}">{v:.3}</text>"#,
            sx(v),
            bottom + 14.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{:.2}" fill="{}">low value</text><text x="{}" y="{:.2}" fill="{}">high value</text>"#,
        left,
        bottom + 50.0,
        gradient(0.0),
        left + 90.0,
        bottom + 50.0,
        gradient(1.0)
    );
    svg.push_str("</svg>\n");
    svg
}

enum Coloring<'a> {
    Categorical(Vec<String>),
    Continuous { values: Vec<f64>, lo: f64, hi: f64, label: &'a str },
}

fn scatter_svg(rows: &[EmbeddingRow], title: &str, coloring: &Coloring) -> String {
    let (size, pad) = (600.0, 50.0);
    let bounds = |f: fn(&EmbeddingRow) -> f64| {
        rows.iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let (xlo, xhi) = bounds(|r| r.x);
    let (ylo, yhi) = bounds(|r| r.y);
    let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let plot = size - 2.0 * pad;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{size}" font-family="sans-serif" font-size="12">"#,
        size + 160.0
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{pad}" y="28" font-size="15">{}</text>"#, escape(title));
    let _ = writeln!(
        svg,
        r##"<rect x="{pad}" y="{pad}" width="{plot}" height="{plot}" fill="none" stroke="#ccc"/>"##
    );
    let mut categories: Vec<String> = Vec::new();
    if let Coloring::Categorical(keys) = coloring {
        categories = keys.clone();
        categories.sort();
        categories.dedup();
    }
    for (i, r) in rows.iter().enumerate() {
        let fill = match coloring {
            Coloring::Categorical(keys) => {
                let c = categories.iter().position(|k| k == &keys[i]).unwrap_or(0);
                PALETTE[c % PALETTE.len()].to_string()
            }
            Coloring::Continuous { values, lo, hi, .. } => gradient(scale(values[i], *lo, *hi)),
        };
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{fill}" fill-opacity="0.8"/>"#,
            pad + scale(r.x, xlo, xhi) * plot,
            pad + (1.0 - scale(r.y, ylo, yhi)) * plot
        );
    }
    let lx = size - pad + 20.0;
    match coloring {
        Coloring::Categorical(_) => {
            for (c, key) in categories.iter().enumerate() {
                let y = pad + 18.0 * c as f64;
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{lx}" cy="{y}" r="5" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                    PALETTE[c % PALETTE.len()],
                    lx + 10.0,
                    y + 4.0,
                    escape(key)
                );
            }
        }
        Coloring::Continuous { lo, hi, label, .. } => {
            for s in 0..=10 {
                let t = s as f64 / 10.0;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{lx}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
                    pad + (1.0 - t) * 200.0,
                    200.0 / 10.0,
                    gradient(t)
                );
            }
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}">{hi:.2}</text><text x="{}" y="{}">{lo:.2}</text><text x="{lx}" y="{}">{}</text>"#,
                lx + 20.0,
                pad + 10.0,
                lx + 20.0,
                pad + 215.0,
                pad + 240.0,
                escape(label)
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">UMAP 1</text><text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">UMAP 2</text>"#,
        size / 2.0,
        size - 15.0,
        size / 2.0,
        size / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn write_svg(dir: &Path, name: &str, svg: &str) -> Result<(), PipelineError> {
    let path = dir.join(name);
    fs::write(&path, svg).map_err(io_err(&path))
}

/// Draws the SHAP summary and the five embedding scatters for every
/// completed cohort of the run in `run_dir`.
pub fn render_plots(run_dir: &Path) -> Result<PlotSummary, PipelineError> {
    let report = RunReport::load(run_dir)?;
    let mut summary = PlotSummary::default();
    for c in report.cohorts.iter().filter(|c| c.status == CohortStatus::Ok) {
        let name = c.cohort.as_str();
        let dir = run_dir.join(name);
        let seed = derive_seed(report.seed, &["plot", name]);

        let top = dir.join("shap_top.csv");
        if top.exists() {
            let points: Vec<SummaryPoint> = read_csv(&top)?;
            write_svg(&dir, "shap_summary.svg", &summary_svg(&points, &format!("SHAP summary: {name}"), seed))?;
            summary.written.push(format!("{name}/shap_summary.svg"));
        } else {
            summary.notes.push(format!("{name}: shap_top.csv missing, summary plot skipped"));
        }

        let emb = dir.join("embedding.csv");
        if !emb.exists() {
            summary.notes.push(format!("{name}: embedding.csv missing, scatter plots skipped"));
            continue;
        }
        let rows: Vec<EmbeddingRow> = read_csv(&emb)?;
        if rows.is_empty() {
            summary.notes.push(format!("{name}: empty embedding, scatter plots skipped"));
            continue;
        }
        let (age_lo, age_hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.age), b.max(r.age)));
        let panels = [
            (
                "label",
                Coloring::Categorical(
                    rows.iter()
                        .map(|r| if r.label == 1 { "T2D".into() } else { "control".into() })
                        .collect(),
                ),
            ),
            (
                "probability",
                Coloring::Continuous {
                    values: rows.iter().map(|r| r.predicted_probability).collect(),
                    lo: 0.0,
                    hi: 1.0,
                    label: "predicted probability",
                },
            ),
            (
                "age",
                Coloring::Continuous {
                    values: rows.iter().map(|r| r.age).collect(),
                    lo: age_lo,
                    hi: age_hi,
                    label: "age",
                },
            ),
            ("sex", Coloring::Categorical(rows.iter().map(|r| r.sex.clone()).collect())),
            (
                "cluster",
                Coloring::Categorical(rows.iter().map(|r| format!("cluster {}", r.cluster)).collect()),
            ),
        ];
        for (panel, coloring) in &panels {
            let file = format!("embedding_{panel}.svg");
            write_svg(&dir, &file, &scatter_svg(&rows, &format!("{name}: colored by {panel}"), coloring))?;
            summary.written.push(format!("{name}/{file}"));
        }
    }
    Ok(summary)
}
