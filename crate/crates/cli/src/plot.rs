//! Minimal SVG bar chart with error bars.

use std::fmt::Write;

pub struct Bar {
    pub label: String,
    /// In `[0, 1]`.
    pub mean: f64,
    pub ci95: f64,
}

const BAR: f64 = 60.0;
const GAP: f64 = 40.0;
const PLOT_H: f64 = 300.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Accuracies on a 0-100% axis, one bar per entry, whiskers at ±ci95.
pub fn render_bars(title: &str, bars: &[Bar]) -> String {
    let width = LEFT + GAP + bars.len() as f64 * (BAR + GAP);
    let height = TOP + PLOT_H + 90.0;
    let y = |v: f64| TOP + PLOT_H * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{x2}" y1="{yv:.1}" y2="{yv:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{pct}%</text>"##,
            x2 = width - GAP / 2.0,
            yv = y(v),
            tx = LEFT - 6.0,
            ty = y(v) + 4.0,
            pct = tick * 20
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" x2="{LEFT}" y1="{TOP}" y2="{}" stroke="black"/>"#,
        TOP + PLOT_H
    );
    for (i, b) in bars.iter().enumerate() {
        let x = LEFT + GAP + i as f64 * (BAR + GAP);
        let cx = x + BAR / 2.0;
        let _ = writeln!(
            s,
            r##"<rect class="bar" x="{x:.1}" y="{:.1}" width="{BAR}" height="{:.1}" fill="#4c72b0"/>"##,
            y(b.mean),
            TOP + PLOT_H - y(b.mean)
        );
        let (lo, hi) = (y(b.mean - b.ci95), y(b.mean + b.ci95));
        let _ = writeln!(
            s,
            r#"<g class="errorbar" stroke="black"><line x1="{cx:.1}" x2="{cx:.1}" y1="{lo:.1}" y2="{hi:.1}"/><line x1="{:.1}" x2="{:.1}" y1="{lo:.1}" y2="{lo:.1}"/><line x1="{:.1}" x2="{:.1}" y1="{hi:.1}" y2="{hi:.1}"/></g>"#,
            cx - 8.0,
            cx + 8.0,
            cx - 8.0,
            cx + 8.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#,
            hi - 6.0,
            100.0 * b.mean
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + PLOT_H + 18.0,
            escape(&b.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bar_and_whisker_per_entry() {
        let bars: Vec<Bar> = (0..3)
            .map(|i| Bar {
                label: format!("m{i} <x>"),
                mean: 0.2 * i as f64 + 0.3,
                ci95: 0.01,
            })
            .collect();
        let svg = render_bars("t", &bars);
        assert_eq!(svg.matches(r#"class="bar""#).count(), 3);
        assert_eq!(svg.matches(r#"class="errorbar""#).count(), 3);
        assert!(svg.contains("m1 &lt;x&gt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
