//! Minimal SVG bar and line charts.

use std::fmt::Write;

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const PANEL_H: f64 = 300.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Round `max` up to 1, 2 or 5 times a power of ten.
fn nice_ceiling(max: f64) -> f64 {
    if !(max > 0.0) || !max.is_finite() {
        return 1.0;
    }
    let p = 10f64.powf(max.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * p).find(|v| *v >= max).unwrap_or(10.0 * p)
}

fn label(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn header(out: &mut String, height: f64, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" viewBox="0 0 {W} {height}" font-family="sans-serif" font-size="12">"#
    );
    out.push('\n');
    let _ = writeln!(out, r#"<rect width="{W}" height="{height}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

/// Axes with horizontal grid lines for `[0, y_max]`; returns the y mapping.
fn axes(out: &mut String, top: f64, y_max: f64, x_label: &str, y_label: &str) -> impl Fn(f64) -> f64 {
    let bottom = top + PANEL_H - TOP - BOTTOM;
    let right = W - RIGHT;
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = bottom - (bottom - top) * i as f64 / 4.0;
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, label(v));
    }
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{top}" x2="{LEFT}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (LEFT + right) / 2.0,
        bottom + 36.0,
        escape(x_label)
    );
    let mid = (top + bottom) / 2.0;
    let _ = writeln!(
        out,
        r#"<text x="16" y="{mid:.2}" text-anchor="middle" transform="rotate(-90 16 {mid:.2})">{}</text>"#,
        escape(y_label)
    );
    move |v: f64| bottom - (bottom - top) * (v / y_max).clamp(0.0, 1.0)
}

fn legend(out: &mut String, top: f64, names: &[&str]) {
    let x = W - RIGHT + 16.0;
    for (i, name) in names.iter().enumerate() {
        let y = top + 18.0 * i as f64;
        let _ = writeln!(out, r#"<rect x="{x}" y="{:.2}" width="12" height="12" fill="{}"/>"#, y, color(i));
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}">{}</text>"#, x + 18.0, y + 10.0, escape(name));
    }
}

/// Grouped bars: one group per entry of `groups`, one bar per series.
pub fn bar_chart(title: &str, groups: &[String], series: &[(String, Vec<f64>)], x_label: &str, y_label: &str) -> String {
    let mut out = String::new();
    header(&mut out, PANEL_H, title);
    let y_max = nice_ceiling(series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0, f64::max));
    let y = axes(&mut out, TOP, y_max, x_label, y_label);
    let base = y(0.0);
    let span = (W - RIGHT - LEFT) / groups.len().max(1) as f64;
    let bar = span * 0.8 / series.len().max(1) as f64;
    for (gi, g) in groups.iter().enumerate() {
        let x0 = LEFT + span * gi as f64 + span * 0.1;
        for (si, (name, values)) in series.iter().enumerate() {
            let v = values.get(gi).copied().unwrap_or(0.0);
            let top = y(v);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{top:.2}" width="{bar:.2}" height="{:.2}" fill="{}"><title>{} {}: {}</title></rect>"#,
                x0 + bar * si as f64,
                base - top,
                color(si),
                escape(name),
                escape(g),
                label(v)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x0 + span * 0.4,
            base + 16.0,
            escape(g)
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, TOP, &names);
    out.push_str("</svg>\n");
    out
}

/// One panel of a line chart: a y-axis label and named `(x, y)` series.
pub struct Panel {
    pub y_label: String,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

/// Panels stacked vertically, sharing the x range and the legend.
pub fn line_chart(title: &str, x_label: &str, panels: &[Panel]) -> String {
    let mut out = String::new();
    let height = PANEL_H * panels.len().max(1) as f64;
    header(&mut out, height, title);
    let x_max = nice_ceiling(
        panels.iter().flat_map(|p| p.series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0))).fold(0.0, f64::max),
    );
    let x = |v: f64| LEFT + (W - RIGHT - LEFT) * (v / x_max).clamp(0.0, 1.0);
    for (pi, panel) in panels.iter().enumerate() {
        let top = TOP + PANEL_H * pi as f64;
        let y_max = nice_ceiling(panel.series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)).fold(0.0, f64::max));
        let y = axes(&mut out, top, y_max, x_label, &panel.y_label);
        for (si, (name, pts)) in panel.series.iter().enumerate() {
            let coords: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.2},{:.2}", x(a), y(b))).collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
                color(si),
                coords.join(" "),
                escape(name)
            );
        }
        let names: Vec<&str> = panel.series.iter().map(|(n, _)| n.as_str()).collect();
        legend(&mut out, top, &names);
    }
    out.push_str("</svg>\n");
    out
}
