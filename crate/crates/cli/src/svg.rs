//! Minimal SVG charts. Output depends only on the data, so reruns are byte-identical.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn header(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" font-size="15" text-anchor="middle" font-family="sans-serif">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD / 2.0
    )
    .unwrap();
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart; with `log` both axes show natural logs of the data.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log: bool,
) -> String {
    let tf = |v: f64| if log { v.ln() } else { v };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .map(|&(x, y)| (tf(x), tf(y)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect()
        })
        .collect();
    let (x0, x1) = range(pts.iter().flatten().map(|p| p.0));
    let (y0, y1) = range(pts.iter().flatten().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 1.5 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = header(title);
    let tag = if log { "ln " } else { "" };
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{tag}{}</text>"#, W / 2.0, H - 14.0, escape(x_label)).unwrap();
    writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle" font-family="sans-serif">{tag}{}</text>"#, H / 2.0, H / 2.0, escape(y_label)).unwrap();
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        writeln!(s, r#"<text x="{}" y="{y:.2}" font-size="10" text-anchor="end" font-family="sans-serif">{v:.3}</text>"#, PAD - 4.0).unwrap();
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        writeln!(s, r#"<text x="{x:.2}" y="{}" font-size="10" text-anchor="middle" font-family="sans-serif">{v:.3}</text>"#, H - PAD + 14.0).unwrap();
    }
    for (i, (ser, p)) in series.iter().zip(&pts).enumerate() {
        let color = COLORS[i % COLORS.len()];
        if !p.is_empty() {
            let d: Vec<String> = p
                .iter()
                .enumerate()
                .map(|(j, &(x, y))| {
                    format!(
                        "{}{:.2} {:.2}",
                        if j == 0 { "M" } else { "L" },
                        sx(x),
                        sy(y)
                    )
                })
                .collect();
            writeln!(
                s,
                r#"<path d="{}" stroke="{color}" fill="none" stroke-width="2"/>"#,
                d.join(" ")
            )
            .unwrap();
        }
        for &(x, y) in p {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            )
            .unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}" font-size="11" fill="{color}" font-family="sans-serif">{}</text>"#, W - 1.5 * PAD, PAD + 14.0 * i as f64, escape(&ser.label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars in `[0, 1]`: one group per label, one bar per series name.
pub fn bar_chart(title: &str, groups: &[(String, Vec<(String, f64)>)]) -> String {
    let mut s = header(title);
    let n_groups = groups.len().max(1) as f64;
    let group_w = (W - 1.5 * PAD) / n_groups;
    for (g, (label, bars)) in groups.iter().enumerate() {
        let bar_w = group_w * 0.8 / bars.len().max(1) as f64;
        let gx = PAD + g as f64 * group_w + group_w * 0.1;
        for (b, (name, v)) in bars.iter().enumerate() {
            let h = v.clamp(0.0, 1.0) * (H - 2.0 * PAD);
            let x = gx + b as f64 * bar_w;
            let color = COLORS[b % COLORS.len()];
            writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{color}"/>"#,
                H - PAD - h,
                bar_w * 0.9
            )
            .unwrap();
            writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle" font-family="sans-serif">{} {v:.3}</text>"#, x + bar_w * 0.45, H - PAD - h - 4.0, escape(name)).unwrap();
        }
        writeln!(s, r#"<text x="{:.2}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#, gx + group_w * 0.4, H - PAD + 16.0, escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
