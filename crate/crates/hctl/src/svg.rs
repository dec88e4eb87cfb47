//! Minimal SVG writer: rects, circles, lines, polylines and text, plus the
//! three chart shapes the tasks emit.

use std::fmt::Write;

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        let mut s = Self { width, height, body: String::new() };
        s.rect(0.0, 0.0, width, height, "white", "none");
        s
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" stroke="{stroke}"/>"#
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r}" fill="{fill}" fill-opacity="{opacity}"/>"#
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dashed: bool) {
        let dash = if dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"{dash}/>"#
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let mut p = String::new();
        for (x, y) in pts {
            let _ = write!(p, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="2"/>"#,
            p.trim_end()
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps data coordinates onto a plotting area with a margin for labels.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub left: f64,
    pub top: f64,
    pub w: f64,
    pub h: f64,
}

impl Frame {
    pub fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0) * self.w
    }

    pub fn py(&self, y: f64) -> f64 {
        self.top + (self.y1 - y) / (self.y1 - self.y0) * self.h
    }

    fn axes(&self, svg: &mut Svg, ticks: usize, xlabel: &str, ylabel: &str) {
        svg.rect(self.left, self.top, self.w, self.h, "none", "#444");
        for i in 0..=ticks {
            let f = i as f64 / ticks as f64;
            let (x, y) = (self.x0 + f * (self.x1 - self.x0), self.y0 + f * (self.y1 - self.y0));
            svg.text(self.px(x), self.top + self.h + 14.0, 10.0, "middle", &tick(x));
            svg.text(self.left - 4.0, self.py(y) + 3.0, 10.0, "end", &tick(y));
        }
        svg.text(self.left + self.w / 2.0, self.top + self.h + 30.0, 12.0, "middle", xlabel);
        svg.text(12.0, self.top + self.h / 2.0, 12.0, "middle", ylabel);
    }
}

fn tick(v: f64) -> String {
    if v.fract().abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// The toy sample cloud over `[-2, 2]²` with outlined squares and an
/// optional vertical constraint line.
pub fn scatter(
    title: &str,
    points: &[[f64; 2]],
    squares: &[([f64; 2], bool)],
    constraint_x: Option<f64>,
) -> String {
    let mut svg = Svg::new(420.0, 440.0);
    let f = Frame { x0: -2.5, x1: 2.5, y0: -2.5, y1: 2.5, left: 40.0, top: 30.0, w: 360.0, h: 360.0 };
    svg.text(220.0, 18.0, 14.0, "middle", title);
    for &(c, mode) in squares {
        let stroke = if mode { "#c0392b" } else { "#999" };
        svg.rect(f.px(c[0] - 0.5), f.py(c[1] + 0.5), f.w / 5.0, f.h / 5.0, "none", stroke);
    }
    for p in points {
        let (x, y) = (p[0].clamp(f.x0, f.x1), p[1].clamp(f.y0, f.y1));
        svg.circle(f.px(x), f.py(y), 1.2, "#1f4e79", 0.35);
    }
    if let Some(x) = constraint_x {
        svg.line(f.px(x), f.top, f.px(x), f.top + f.h, "#27ae60", true);
    }
    f.axes(&mut svg, 5, "x1", "x2");
    svg.finish()
}

pub struct Series {
    pub label: String,
    pub color: &'static str,
    /// `(x, mean, std)`.
    pub points: Vec<(f64, f64, f64)>,
}

/// Line chart with ±1 std whiskers and optional horizontal reference lines.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], references: &[(String, f64)]) -> String {
    let mut svg = Svg::new(560.0, 400.0);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let ys = series
        .iter()
        .flat_map(|s| s.points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]))
        .chain(references.iter().map(|r| r.1));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.08).max(1e-3);
    let f = Frame { x0, x1, y0: y0 - pad, y1: y1 + pad, left: 60.0, top: 30.0, w: 360.0, h: 320.0 };
    svg.text(280.0, 18.0, 14.0, "middle", title);
    for (i, (label, y)) in references.iter().enumerate() {
        svg.line(f.left, f.py(*y), f.left + f.w, f.py(*y), "#888", true);
        svg.text(f.left + f.w + 8.0, 60.0 + 16.0 * (series.len() + i) as f64, 11.0, "start", &format!("-- {label}"));
    }
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s.points.iter().map(|p| (f.px(p.0), f.py(p.1))).collect();
        svg.polyline(&pts, s.color);
        for p in &s.points {
            svg.line(f.px(p.0), f.py(p.1 - p.2), f.px(p.0), f.py(p.1 + p.2), s.color, false);
            svg.circle(f.px(p.0), f.py(p.1), 3.0, s.color, 1.0);
        }
        svg.rect(f.left + f.w + 8.0, 52.0 + 16.0 * i as f64, 10.0, 10.0, s.color, "none");
        svg.text(f.left + f.w + 22.0, 61.0 + 16.0 * i as f64, 11.0, "start", &s.label);
    }
    f.axes(&mut svg, 4, xlabel, ylabel);
    svg.finish()
}

/// Square heatmap of values in `[0, 1]`: 0 is white, 1 is black.
pub fn heatmap(title: &str, n: usize, value: impl Fn(usize, usize) -> f64) -> String {
    let cell = (320.0 / n.max(1) as f64).min(40.0);
    let side = cell * n as f64;
    let mut svg = Svg::new(side + 80.0, side + 70.0);
    svg.text((side + 80.0) / 2.0, 18.0, 14.0, "middle", title);
    for i in 0..n {
        for j in 0..n {
            let g = (255.0 * (1.0 - value(i, j).clamp(0.0, 1.0))).round() as u8;
            let fill = format!("#{g:02x}{g:02x}{g:02x}");
            svg.rect(40.0 + j as f64 * cell, 30.0 + i as f64 * cell, cell, cell, &fill, "none");
        }
        svg.text(34.0, 30.0 + (i as f64 + 0.6) * cell, 9.0, "end", &i.to_string());
        svg.text(40.0 + (i as f64 + 0.5) * cell, 42.0 + side, 9.0, "middle", &i.to_string());
    }
    svg.rect(40.0, 30.0, side, side, "none", "#444");
    svg.finish()
}
