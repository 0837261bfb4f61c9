//! Static three-panel SVG: normalized-diameter density, grain count and
//! mean grain size per frame, each source in its own color.

use std::fmt::Write as _;

use crate::commands::stats::SetStatistics;

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

struct Panel {
    x0: f64,
    title: &'static str,
    x_max: f64,
    y_max: f64,
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        self.x0 + MARGIN + x / self.x_max * (PANEL_W - 1.5 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        PANEL_H - MARGIN + 10.0 - y / self.y_max * (PANEL_H - 1.5 * MARGIN)
    }

    fn frame(&self, out: &mut String) {
        let (l, r) = (self.px(0.0), self.px(self.x_max));
        let (b, t) = (self.py(0.0), self.py(self.y_max));
        let _ = writeln!(
            out,
            r#"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            r - l,
            b - t
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#, l, t - 6.0, self.title);
        let _ = writeln!(out, r#"<text x="{r:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#, b + 14.0, fmt_tick(self.x_max));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{t:.1}" font-size="10" text-anchor="end">{}</text>"#, l - 4.0, fmt_tick(self.y_max));
    }

    fn line(&self, out: &mut String, xs: &[f64], ys: &[f64], color: &str, dashed: bool) {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| format!("{:.1},{:.1}", self.px(x), self.py(y)))
            .collect();
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            pts.join(" ")
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn nice_max(v: f64) -> f64 {
    if v > 0.0 && v.is_finite() {
        v * 1.05
    } else {
        1.0
    }
}

pub fn summary_svg(sets: &[&SetStatistics]) -> String {
    let frames = sets.iter().map(|s| s.summary.frames.len()).max().unwrap_or(1).max(2) as f64 - 1.0;
    let dens_max = sets.iter().flat_map(|s| s.summary.histogram.density.iter().copied()).fold(0.0, f64::max);
    let count_max = sets.iter().flat_map(|s| s.summary.frames.iter().map(|f| f.count.max)).fold(0.0, f64::max);
    let size_max = sets.iter().flat_map(|s| s.summary.frames.iter().map(|f| f.mean_size.max)).fold(0.0, f64::max);
    let panels = [
        Panel { x0: 0.0, title: "normalized diameter density", x_max: 3.0, y_max: nice_max(dens_max) },
        Panel { x0: PANEL_W, title: "grain count per frame", x_max: frames, y_max: nice_max(count_max) },
        Panel { x0: 2.0 * PANEL_W, title: "mean grain size per frame", x_max: frames, y_max: nice_max(size_max) },
    ];

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif">"#,
        3.0 * PANEL_W,
        PANEL_H + 20.0
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for p in &panels {
        p.frame(&mut out);
    }
    for (i, set) in sets.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let h = &set.summary.histogram;
        let centers: Vec<f64> = h.edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
        panels[0].line(&mut out, &centers, &h.density, color, false);

        let t: Vec<f64> = set.summary.frames.iter().map(|f| f.frame as f64).collect();
        let pick = |g: fn(&grain_core::grainstats::FrameSummary) -> f64| -> Vec<f64> {
            set.summary.frames.iter().map(g).collect()
        };
        panels[1].line(&mut out, &t, &pick(|f| f.count.mean), color, false);
        panels[1].line(&mut out, &t, &pick(|f| f.count.min), color, true);
        panels[1].line(&mut out, &t, &pick(|f| f.count.max), color, true);
        panels[2].line(&mut out, &t, &pick(|f| f.mean_size.mean), color, false);
        panels[2].line(&mut out, &t, &pick(|f| f.mean_size.min), color, true);
        panels[2].line(&mut out, &t, &pick(|f| f.mean_size.max), color, true);

        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{}</text>"#,
            3.0 * PANEL_W - 90.0,
            16.0 + 14.0 * i as f64,
            set.source
        );
    }
    out.push_str("</svg>\n");
    out
}
