//! Static report: SVG charts, their data as CSV, and an index page.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use herbrec::error::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One named series of y values, x being the position.
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn frame(title: &str, y_max: f64, x_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, y + 4.0, fmt_tick(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0, escape(x_label));
    s
}

fn fmt_tick(v: f64) -> String {
    if v >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn y_range(series: &[Series]) -> f64 {
    let m = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Vertical bars, one per value of the single series.
pub fn bar_chart(title: &str, x_label: &str, series: &Series) -> String {
    let y_max = y_range(std::slice::from_ref(series));
    let mut s = frame(title, y_max, x_label);
    let n = series.values.len().max(1) as f64;
    let plot_w = WIDTH - 1.5 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let bw = plot_w / n;
    for (i, &v) in series.values.iter().enumerate() {
        let h = plot_h * v / y_max;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            MARGIN + i as f64 * bw,
            HEIGHT - MARGIN - h,
            (bw * 0.9).max(0.5),
            h,
            PALETTE[0]
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per series.
pub fn grouped_bar_chart(title: &str, categories: &[String], series: &[Series]) -> String {
    let y_max = y_range(series);
    let mut s = frame(title, y_max, "");
    let plot_w = WIDTH - 1.5 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let gw = plot_w / categories.len().max(1) as f64;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        for (j, ser) in series.iter().enumerate() {
            let v = ser.values.get(c).copied().unwrap_or(0.0);
            let h = plot_h * v / y_max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                MARGIN + c as f64 * gw + gw * 0.1 + j as f64 * bw,
                HEIGHT - MARGIN - h,
                bw,
                h,
                PALETTE[j % PALETTE.len()]
            );
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, MARGIN + (c as f64 + 0.5) * gw, HEIGHT - MARGIN + 14.0, escape(name));
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

/// Polylines sharing the x axis.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let y_max = y_range(series);
    let mut s = frame(title, y_max, x_label);
    let plot_w = WIDTH - 1.5 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let n = series.iter().map(|x| x.values.len()).max().unwrap_or(0);
    let step = if n > 1 { plot_w / (n - 1) as f64 } else { 0.0 };
    for (j, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", MARGIN + i as f64 * step, HEIGHT - MARGIN - plot_h * v.max(0.0) / y_max))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#, PALETTE[j % PALETTE.len()], pts.join(" "));
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String, series: &[Series]) {
    for (j, ser) in series.iter().enumerate() {
        let y = MARGIN + 14.0 * j as f64;
        let x = WIDTH - MARGIN * 3.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[j % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(&ser.name));
    }
}

/// Columns `index,<series names...>`.
pub fn series_csv(index_name: &str, index: &[String], series: &[Series]) -> String {
    let mut out = String::from(index_name);
    for s in series {
        let _ = write!(out, ",{}", s.name);
    }
    out.push('\n');
    for (i, label) in index.iter().enumerate() {
        out.push_str(label);
        for s in series {
            match s.values.get(i) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub struct Chart {
    pub stem: String,
    pub title: String,
    pub svg: String,
    pub csv: String,
}

/// Writes every chart and an `index.html` linking them, with `warnings` listed.
pub fn write_report(dir: &Path, charts: &[Chart], warnings: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: String, body: &str| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    let mut html = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>herbrec report</title></head><body>\n<h1>herbrec report</h1>\n");
    if !warnings.is_empty() {
        html.push_str("<h2>Warnings</h2><ul>\n");
        for w in warnings {
            let _ = writeln!(html, "<li>{}</li>", escape(w));
        }
        html.push_str("</ul>\n");
    }
    for c in charts {
        put(format!("{}.svg", c.stem), &c.svg)?;
        put(format!("{}.csv", c.stem), &c.csv)?;
        let _ = writeln!(html, "<h2>{}</h2>\n<img src=\"{}.svg\" alt=\"{}\"/>\n<p><a href=\"{}.csv\">data</a></p>", escape(&c.title), c.stem, escape(&c.title), c.stem);
    }
    html.push_str("</body></html>\n");
    put("index.html".into(), &html)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_pads_short_series() {
        let s = [Series { name: "a".into(), values: vec![1.0, 2.0] }, Series { name: "b".into(), values: vec![3.0] }];
        assert_eq!(series_csv("i", &["0".into(), "1".into()], &s), "i,a,b\n0,1,3\n1,2,\n");
    }

    #[test]
    fn charts_are_closed_svg() {
        let s = Series { name: "f".into(), values: vec![3.0, 1.0, 0.0] };
        for svg in [bar_chart("t", "x", &s), line_chart("t", "x", std::slice::from_ref(&s))] {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        }
        assert_eq!(bar_chart("t", "x", &s).matches("<rect").count(), 4);
    }
}
