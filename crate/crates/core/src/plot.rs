//! Small hand-written SVG bar charts.

use std::fmt::Write;

pub struct Series<'a> {
    pub name: &'a str,
    pub values: Vec<f64>,
}

const COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

/// Overlaid histogram with equal-width bins spanning `range`.
pub fn histogram_svg(title: &str, x_label: &str, range: (f64, f64), series: &[Series]) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (50.0, 20.0, 40.0, 45.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let bins = series.iter().map(|s| s.values.len()).max().unwrap_or(1).max(1);
    let peak = series.iter().flat_map(|s| s.values.iter().copied()).fold(0.0, f64::max).max(1e-12);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let bar_w = plot_w / bins as f64;
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        for (i, v) in s.values.iter().enumerate() {
            let bh = plot_h * v / peak;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.45" stroke="{color}"/>"#,
                left + i as f64 * bar_w,
                top + plot_h - bh,
                bar_w,
                bh
            );
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            w - right - 140.0,
            top + 4.0 + 16.0 * k as f64,
            w - right - 125.0,
            top + 13.0 + 16.0 * k as f64,
            escape(s.name)
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{y}" stroke="black"/>"#,
        y = top + plot_h,
        x2 = left + plot_w
    );
    for t in 0..=4 {
        let frac = t as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            left + frac * plot_w,
            top + plot_h + 15.0,
            range.0 + frac * (range.1 - range.0)
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + plot_w / 2.0, h - 8.0, escape(x_label));
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
