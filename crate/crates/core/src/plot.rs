//! Minimal SVG line charts with an optional log-scaled x axis.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;

const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.0e}")
    } else if (v - v.round()).abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=5).map(|i| lo + (hi - lo) * i as f64 / 5.0).collect()
}

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str, log_x: bool) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x,
            series: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, mut points: Vec<(f64, f64)>) {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.series.push(Series {
            name: name.into(),
            points,
        });
    }

    fn ranges(&self) -> Result<((f64, f64), (f64, f64))> {
        let pts: Vec<(f64, f64)> = self.series.iter().flat_map(|s| s.points.iter().copied()).collect();
        if pts.is_empty() {
            return Err(Error::InvalidArgument("chart has no points".into()));
        }
        if let Some(p) = pts.iter().find(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite chart point {p:?}")));
        }
        if self.log_x {
            if let Some(p) = pts.iter().find(|p| p.0 <= 0.0) {
                return Err(Error::InvalidArgument(format!("x = {} on a log axis", p.0)));
            }
        }
        let fx = |x: f64| if self.log_x { x.log10() } else { x };
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &pts {
            x0 = x0.min(fx(x));
            x1 = x1.max(fx(x));
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if self.log_x {
            x0 = x0.floor();
            x1 = x1.ceil().max(x0 + 1.0);
        } else if x1 == x0 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        let pad = if y1 > y0 { 0.05 * (y1 - y0) } else { 1.0 };
        Ok(((x0, x1), (y0 - pad, y1 + pad)))
    }

    pub fn render(&self) -> Result<String> {
        let ((x0, x1), (y0, y1)) = self.ranges()?;
        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| {
            let t = if self.log_x { x.log10() } else { x };
            MARGIN_LEFT + (t - x0) / (x1 - x0) * pw
        };
        let sy = |y: f64| MARGIN_TOP + (y1 - y) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );

        let x_ticks: Vec<(f64, String)> = if self.log_x {
            (x0 as i32..=x1 as i32)
                .map(|e| {
                    let v = 10f64.powi(e);
                    (v, fmt_tick(v))
                })
                .collect()
        } else {
            linear_ticks(x0, x1).into_iter().map(|v| (v, fmt_tick(v))).collect()
        };
        for (v, label) in x_ticks {
            let x = sx(v);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{bottom}" stroke="#dddddd"/><text x="{x:.2}" y="{ty}" text-anchor="middle">{label}</text>"##,
                top = MARGIN_TOP,
                bottom = MARGIN_TOP + ph,
                ty = MARGIN_TOP + ph + 18.0
            );
        }
        for v in linear_ticks(y0, y1) {
            let y = sy(v);
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#dddddd"/><text x="{tx}" y="{ly:.2}" text-anchor="end">{label}</text>"##,
                left = MARGIN_LEFT,
                right = MARGIN_LEFT + pw,
                tx = MARGIN_LEFT - 6.0,
                ly = y + 4.0,
                label = fmt_tick(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{cy}" text-anchor="middle" transform="rotate(-90 18 {cy})">{}</text>"#,
            escape(&self.y_label),
            cy = MARGIN_TOP + ph / 2.0
        );

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
                pts.join(" "),
                escape(&series.name)
            );
            for &(x, y) in &series.points {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    sx(x),
                    sy(y)
                );
            }
            let ly = MARGIN_TOP + 10.0 + 20.0 * i as f64;
            let lx = MARGIN_LEFT + pw + 15.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart() -> LineChart {
        let mut c = LineChart::new("budget <sweep> & more", "trainable parameters", "relative %", true);
        c.push("adapter", vec![(1e4, 80.0), (3e3, 70.0), (1e5, 95.0)]);
        c.push("prefix", vec![(2e3, 60.0), (5e4, 75.0)]);
        c
    }

    #[test]
    fn renders_valid_svg_with_one_polyline_per_series() {
        let svg = chart().render().unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let root = doc.root_element();
        assert_eq!(root.tag_name().name(), "svg");
        assert_eq!(root.attribute("width"), Some("800"));
        assert_eq!(root.attribute("height"), Some("500"));
        let polylines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(polylines.len(), 2);
        let first = polylines[0].attribute("points").unwrap();
        assert_eq!(first.split(' ').count(), 3);
        let xs: Vec<f64> = first.split(' ').map(|p| p.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn log_axis_rejects_non_positive_x() {
        let mut c = chart();
        c.push("bad", vec![(0.0, 1.0)]);
        assert!(c.render().is_err());
        assert!(LineChart::new("", "", "", false).render().is_err());
    }

    #[test]
    fn linear_axis_and_single_point() {
        let mut c = LineChart::new("t", "x", "y", false);
        c.push("one", vec![(3.0, 3.0)]);
        let svg = c.render().unwrap();
        roxmltree::Document::parse(&svg).unwrap();
    }
}
