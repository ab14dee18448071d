//! Minimal SVG line chart: metric against NFE, one polyline per method.

use std::fmt::Write as _;

use pathdiff::metrics::NfeSweepReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// NFE on a log axis, metric on a linear axis.
pub fn sweep_svg(report: &NfeSweepReport, title: &str) -> String {
    let points: Vec<(usize, f64)> = report.rows.iter().map(|r| (r.nfe, r.metric)).collect();
    let (nmin, nmax) = points
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), &(n, _)| (lo.min(n), hi.max(n)));
    let ymax = points.iter().map(|p| p.1).fold(0.0f64, f64::max).max(1e-12) * 1.05;
    let lx = |n: usize| (n.max(1) as f64).ln();
    let span = (lx(nmax) - lx(nmin)).max(1e-9);
    let px = |n: usize| MARGIN + (lx(n) - lx(nmin)) / span * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - v / ymax * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let mut nfes: Vec<usize> = points.iter().map(|p| p.0).collect();
    nfes.sort_unstable();
    nfes.dedup();
    for n in nfes {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{n}</text>"#,
            px(n),
            y0 + 18.0
        );
    }
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            x0 - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">NFE</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(report.metric_kind.name())
    );
    for (i, label) in report.labels().iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = report
            .series(label)
            .iter()
            .map(|&(n, v)| format!("{:.1},{:.1}", px(n), py(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly:.1}" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
