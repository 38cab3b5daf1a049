//! Standalone SVG charts: one bar chart per table metric and one chart per
//! extent histogram.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::commands::UsageError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 120.0;

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// A labelled bar with an optional symmetric error bar.
#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub error: Option<f64>,
}

fn header(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    s
}

/// Y axis with five ticks from 0 to `top`.
fn y_axis(s: &mut String, top: f64, label: &str) {
    let bottom = HEIGHT - MARGIN_BOTTOM;
    writeln!(
        s,
        r#"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{bottom}" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{MARGIN_LEFT}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#,
        WIDTH - MARGIN_RIGHT
    )
    .unwrap();
    for i in 0..=4 {
        let v = top * i as f64 / 4.0;
        let y = bottom - (bottom - MARGIN_TOP) * i as f64 / 4.0;
        writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{MARGIN_LEFT}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 4.0,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            format_tick(v)
        )
        .unwrap();
    }
    let mid = (MARGIN_TOP + bottom) / 2.0;
    writeln!(
        s,
        r#"<text x="16" y="{mid}" text-anchor="middle" transform="rotate(-90 16 {mid})">{}</text>"#,
        escape(label)
    )
    .unwrap();
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 10.0 || v == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn nice_top(max: f64) -> f64 {
    if !(max > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(max.log10().floor());
    for step in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if step * mag >= max {
            return step * mag;
        }
    }
    10.0 * mag
}

pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let mut s = header(title);
    let max = bars
        .iter()
        .map(|b| b.value + b.error.unwrap_or(0.0))
        .fold(0.0f64, f64::max);
    let top = nice_top(max);
    y_axis(&mut s, top, y_label);
    let bottom = HEIGHT - MARGIN_BOTTOM;
    let plot_h = bottom - MARGIN_TOP;
    let slot = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / bars.len().max(1) as f64;
    for (i, b) in bars.iter().enumerate() {
        let x = MARGIN_LEFT + slot * i as f64 + slot * 0.15;
        let w = slot * 0.7;
        let h = (b.value / top).clamp(0.0, 1.0) * plot_h;
        writeln!(
            s,
            r##"<rect x="{x}" y="{}" width="{w}" height="{h}" fill="#4c72b0"><title>{}: {}</title></rect>"##,
            bottom - h,
            escape(&b.label),
            b.value
        )
        .unwrap();
        if let Some(e) = b.error {
            let cx = x + w / 2.0;
            let hi = bottom - ((b.value + e) / top).clamp(0.0, 1.0) * plot_h;
            let lo = bottom - ((b.value - e) / top).clamp(0.0, 1.0) * plot_h;
            writeln!(s, r#"<line x1="{cx}" y1="{hi}" x2="{cx}" y2="{lo}" stroke="black"/>"#).unwrap();
        }
        let lx = x + w / 2.0;
        let ly = bottom + 12.0;
        writeln!(
            s,
            r#"<text x="{lx}" y="{ly}" text-anchor="end" transform="rotate(-35 {lx} {ly})">{}</text>"#,
            escape(&b.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Histogram with bins `[left, left + width)`.
pub fn histogram_chart(title: &str, x_label: &str, lefts: &[f64], counts: &[usize], width: f64) -> String {
    let mut s = header(title);
    let top = nice_top(counts.iter().copied().max().unwrap_or(0) as f64);
    y_axis(&mut s, top, "scans");
    let bottom = HEIGHT - MARGIN_BOTTOM;
    let plot_h = bottom - MARGIN_TOP;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let (lo, hi) = match (lefts.first(), lefts.last()) {
        (Some(&a), Some(&b)) => (a, b + width),
        _ => (0.0, 1.0),
    };
    let scale = plot_w / (hi - lo);
    for (&left, &c) in lefts.iter().zip(counts) {
        let h = c as f64 / top * plot_h;
        writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{}" height="{h}" fill="#dd8452" stroke="white"><title>{left} mm: {c}</title></rect>"##,
            MARGIN_LEFT + (left - lo) * scale,
            bottom - h,
            width * scale
        )
        .unwrap();
    }
    for (i, v) in [lo, (lo + hi) / 2.0, hi].iter().enumerate() {
        let x = MARGIN_LEFT + plot_w * i as f64 / 2.0;
        writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            bottom + 16.0,
            format_tick(*v)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        bottom + 40.0,
        escape(x_label)
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn read_csv(path: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> anyhow::Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| UsageError(format!("column `{name}` missing")).into())
}

/// Metric columns of the results table, with their axis labels.
pub const TABLE_METRICS: [(&str, &str); 3] = [
    ("dice", "Dice"),
    ("surface_dice", "surface Dice"),
    ("hd95", "HD95 (mm)"),
];

fn table_charts(table: &Path, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let (header, rows) = read_csv(table)?;
    let arm = column(&header, "arm")?;
    let mut written = Vec::new();
    for (metric, label) in TABLE_METRICS {
        let mean = column(&header, &format!("{metric}_mean"))?;
        let std = column(&header, &format!("{metric}_std"))?;
        let bars: Vec<Bar> = rows
            .iter()
            .filter_map(|r| {
                let value = r[mean].parse::<f64>().ok()?;
                Some(Bar {
                    label: r[arm].clone(),
                    value,
                    error: r[std].parse::<f64>().ok(),
                })
            })
            .collect();
        let path = out.join(format!("{metric}.svg"));
        std::fs::write(&path, bar_chart(&format!("{label} per arm"), label, &bars))?;
        written.push(path);
    }
    Ok(written)
}

fn histogram_file(path: &Path, out: &Path) -> anyhow::Result<PathBuf> {
    let (header, rows) = read_csv(path)?;
    let left = column(&header, "bin_left_mm")?;
    let count = column(&header, "count")?;
    let lefts: Vec<f64> = rows.iter().map(|r| r[left].parse()).collect::<Result<_, _>>()?;
    let counts: Vec<usize> = rows.iter().map(|r| r[count].parse()).collect::<Result<_, _>>()?;
    let width = if lefts.len() > 1 { lefts[1] - lefts[0] } else { 1.0 };
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("histogram");
    let title = stem.replace('_', " ");
    let out_path = out.join(format!("{stem}.svg"));
    std::fs::write(
        &out_path,
        histogram_chart(&title, "distance above the hip landmark (mm)", &lefts, &counts, width),
    )?;
    Ok(out_path)
}

/// Charts everything plottable under `results`.
pub fn plot_results(results: &Path, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !results.is_dir() {
        return Err(UsageError(format!("results directory {} not found", results.display())).into());
    }
    let table = results.join("table1.csv");
    let mut histograms: Vec<PathBuf> = std::fs::read_dir(results)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("hist_") && n.ends_with(".csv"))
        })
        .collect();
    histograms.sort();
    if !table.is_file() && histograms.is_empty() {
        return Err(UsageError(format!("no results to plot in {}", results.display())).into());
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    if table.is_file() {
        written.extend(table_charts(&table, out)?);
    }
    for h in &histograms {
        written.push(histogram_file(h, out)?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b>&\"c'"), "a&lt;b&gt;&amp;&quot;c&apos;");
        assert_eq!(escape("basic_teacher+robust_student"), "basic_teacher+robust_student");
    }

    #[test]
    fn nice_top_rounds_up() {
        assert_eq!(nice_top(0.0), 1.0);
        assert_eq!(nice_top(0.87), 1.0);
        assert_eq!(nice_top(13.0), 20.0);
        assert_eq!(nice_top(7.0), 10.0);
        assert_eq!(nice_top(2.2), 2.5);
    }

    #[test]
    fn bar_chart_parses_as_xml() {
        let bars = vec![
            Bar {
                label: "a&b".into(),
                value: 0.8,
                error: Some(0.05),
            },
            Bar {
                label: "<c>".into(),
                value: 0.6,
                error: None,
            },
        ];
        let svg = bar_chart("Dice", "Dice", &bars);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let rects = doc.descendants().filter(|n| n.has_tag_name("rect")).count();
        assert_eq!(rects, 3);
    }

    #[test]
    fn histogram_chart_has_one_bar_per_bin() {
        let svg = histogram_chart("h", "mm", &[0.0, 2.5, 5.0], &[1, 0, 3], 2.5);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let rects = doc.descendants().filter(|n| n.has_tag_name("rect")).count();
        assert_eq!(rects, 1 + 3);
    }
}
