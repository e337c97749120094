//! Dependency-free SVG rendering with a fixed viewport.
//!
//! The plot area spans `x ∈ [LEFT, WIDTH − RIGHT]` and
//! `y ∈ [TOP, HEIGHT − BOTTOM]` in pixels; data ranges map onto it affinely
//! with the y axis pointing up.

use std::fmt::Write;

use fastat_core::models::FilterDump;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
pub const LEFT: f64 = 60.0;
pub const RIGHT: f64 = 20.0;
pub const TOP: f64 = 30.0;
pub const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
    pub color: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; `None` fits the data.
    pub y_range: Option<(f64, f64)>,
    /// Category names for integer x positions (used by layer profiles).
    pub x_ticks: Option<Vec<String>>,
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Affine map from data coordinates to pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewport {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Viewport {
    pub fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    pub fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

impl Chart {
    pub fn viewport(&self) -> Viewport {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let x = span(pts().map(|p| p.0));
        let y = self.y_range.unwrap_or_else(|| span(pts().map(|p| p.1)));
        Viewport { x, y }
    }

    pub fn render(&self) -> String {
        let vp = self.viewport();
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
        let _ = writeln!(
            s,
            r#"<path d="M{x0:.2},{y0:.2} L{x0:.2},{y1:.2} L{x1:.2},{y1:.2}" fill="none" stroke="black"/>"#
        );
        match &self.x_ticks {
            Some(names) => {
                for (i, name) in names.iter().enumerate() {
                    self.x_tick(&mut s, vp.px(i as f64), name);
                }
            }
            None => {
                for k in 0..=4 {
                    let v = vp.x.0 + (vp.x.1 - vp.x.0) * k as f64 / 4.0;
                    self.x_tick(&mut s, vp.px(v), &fmt_tick(v));
                }
            }
        }
        for k in 0..=4 {
            let v = vp.y.0 + (vp.y.1 - vp.y.0) * k as f64 / 4.0;
            let y = vp.py(v);
            let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0);
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 8.0,
                y + 4.0,
                fmt_tick(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(&self.y_label)
        );
        for series in &self.series {
            if series.points.is_empty() {
                continue;
            }
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", vp.px(x), vp.py(y)))
                .collect();
            let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
                pts.join(" "),
                series.color
            );
        }
        for (i, series) in self.series.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * i as f64;
            let lx = x1 - 150.0;
            let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="1.5"{dash}/>"#,
                lx + 24.0,
                series.color
            );
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 30.0, y + 4.0, escape(&series.label));
        }
        s.push_str("</svg>\n");
        s
    }

    fn x_tick(&self, s: &mut String, x: f64, label: &str) {
        let y1 = HEIGHT - BOTTOM;
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, y1 + 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y1 + 18.0,
            escape(label)
        );
    }
}

fn fmt_tick(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r == r.trunc() {
        format!("{r:.0}")
    } else {
        format!("{r:.2}")
    }
}

pub fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grid of first-layer filters, one row per filter and one heat map per
/// input channel, each scaled to its own channel range (black = min).
pub fn render_filters(filters: &[FilterDump], cell: f64) -> String {
    let gap = cell * 2.0;
    let channels = filters.first().map(|f| f.shape[0]).unwrap_or(0);
    let (kh, kw) = filters.first().map(|f| (f.shape[1], f.shape[2])).unwrap_or((0, 0));
    let label_w = 140.0;
    let w = label_w + channels as f64 * (kw as f64 * cell + gap) + gap;
    let h = gap + filters.len() as f64 * (kh as f64 * cell + gap);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.2}" height="{h:.2}" viewBox="0 0 {w:.2} {h:.2}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w:.2}" height="{h:.2}" fill="white"/>"#);
    for (fi, f) in filters.iter().enumerate() {
        let top = gap + fi as f64 * (kh as f64 * cell + gap);
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.2}">{}</text>"#,
            top + kh as f64 * cell / 2.0 + 4.0,
            escape(&f.name)
        );
        for ch in 0..f.shape[0] {
            let left = label_w + ch as f64 * (kw as f64 * cell + gap);
            let (lo, hi) = (f.channel_min[ch], f.channel_max[ch]);
            for r in 0..f.shape[1] {
                for c in 0..f.shape[2] {
                    let v = f.values[(ch * f.shape[1] + r) * f.shape[2] + c];
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    let g = (t * 255.0).round().clamp(0.0, 255.0) as u8;
                    let _ = writeln!(
                        s,
                        r##"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="#{g:02x}{g:02x}{g:02x}"/>"##,
                        left + c as f64 * cell,
                        top + r as f64 * cell
                    );
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
