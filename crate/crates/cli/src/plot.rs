//! Minimal SVG rendering of one video's scores over time.

use std::fmt::Write;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 260.0;
const MARGIN: f64 = 36.0;

pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
    pub color: &'a str,
    pub dashed: bool,
}

/// Line chart over `[0, 1]` with anomalous snippets of `gt` shaded.
pub fn render_svg(title: &str, series: &[Series<'_>], gt: Option<&[u8]>) -> String {
    let len = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(2);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let step = plot_w / (len - 1) as f64;
    let x = |t: usize| MARGIN + t as f64 * step;
    let y = |v: f64| MARGIN + (1.0 - v.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(gt) = gt {
        for (t, &g) in gt.iter().enumerate() {
            if g == 1 {
                let _ = writeln!(
                    svg,
                    r##"<rect x="{:.2}" y="{MARGIN}" width="{:.2}" height="{plot_h}" fill="#f4c7c3"/>"##,
                    x(t) - step / 2.0,
                    step
                );
            }
        }
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            MARGIN - 4.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{:.2}">{}</text>"#, MARGIN - 12.0, escape(title));
    for (i, s) in series.iter().enumerate() {
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .map(|(t, &v)| format!("{:.2},{:.2}", x(t), y(v)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"/>"#,
            s.color,
            points.join(" ")
        );
        let lx = MARGIN + 160.0 * i as f64;
        let ly = HEIGHT - 10.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}"{dash}/><text x="{:.1}" y="{ly}">{}</text>"#,
            ly - 4.0,
            lx + 18.0,
            ly - 4.0,
            s.color,
            lx + 22.0,
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
