//! Standalone SVG figures: a grid of line-plot or heatmap panels.
//!
//! Output depends only on the input data, so re-rendering is byte-identical.

use std::fmt::Write;

const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 280.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 14.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 44.0;
const TITLE_H: f64 = 36.0;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct LinePanel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug)]
pub struct HeatPanel {
    pub title: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `values[row][col]`; non-finite cells are drawn hatched grey.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum Panel {
    Line(LinePanel),
    Heat(HeatPanel),
}

#[derive(Clone, Debug)]
pub struct Figure {
    pub title: String,
    pub columns: usize,
    pub panels: Vec<Panel>,
    /// Embedded as a comment and in `<metadata>`.
    pub provenance: String,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Roughly five evenly spaced ticks covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 4.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|k| k as f64 * step).collect()
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-12 * lo.abs().max(1.0) {
        let d = lo.abs().max(1.0) * 0.05;
        return (lo - d, hi + d);
    }
    let d = (hi - lo) * 0.05;
    (lo - d, hi + d)
}

/// Perceptually ordered colour ramp, `t ∈ [0, 1]`.
fn ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] =
        [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let c = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

impl LinePanel {
    fn render(&self, out: &mut String, x0: f64, y0: f64) {
        let finite = || self.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (xl, xh) = finite().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (x, _)| (l.min(*x), h.max(*x)));
        let (yl, yh) = finite().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (_, y)| (l.min(*y), h.max(*y)));
        let (xl, xh) = padded(xl, xh);
        let (yl, yh) = padded(yl, yh);
        let (pw, ph) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
        let (ox, oy) = (x0 + MARGIN_L, y0 + MARGIN_T);
        let sx = |x: f64| ox + (x - xl) / (xh - xl) * pw;
        let sy = |y: f64| oy + ph - (y - yl) / (yh - yl) * ph;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" class="pt">{}</text>"#,
            num(x0 + PANEL_W / 2.0),
            num(y0 + 18.0),
            esc(&self.title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            num(ox),
            num(oy),
            num(pw),
            num(ph)
        );
        for t in ticks(xl, xh) {
            let _ = writeln!(
                out,
                r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" class="tk"/><text x="{0}" y="{3}" class="xt">{4}</text>"#,
                num(sx(t)),
                num(oy + ph),
                num(oy + ph + 4.0),
                num(oy + ph + 15.0),
                label(t)
            );
        }
        for t in ticks(yl, yh) {
            let _ = writeln!(
                out,
                r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" class="tk"/><text x="{3}" y="{4}" class="yt">{5}</text>"#,
                num(ox - 4.0),
                num(sy(t)),
                num(ox),
                num(ox - 6.0),
                num(sy(t) + 3.5),
                label(t)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" class="al">{}</text>"#,
            num(ox + pw / 2.0),
            num(oy + ph + 32.0),
            esc(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text transform="translate({},{}) rotate(-90)" class="al">{}</text>"#,
            num(x0 + 14.0),
            num(oy + ph / 2.0),
            esc(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let colour = PALETTE[i % PALETTE.len()];
            // Non-finite points split the line.
            let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
            for &(x, y) in &s.points {
                if x.is_finite() && y.is_finite() {
                    segments.last_mut().expect("non-empty").push((x, y));
                } else if !segments.last().expect("non-empty").is_empty() {
                    segments.push(Vec::new());
                }
            }
            for seg in segments.iter().filter(|s| !s.is_empty()) {
                let pts: Vec<String> = seg.iter().map(|&(x, y)| format!("{},{}", num(sx(x)), num(sy(y)))).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.6"/>"#,
                    pts.join(" ")
                );
                for &(x, y) in seg {
                    let _ = writeln!(out, r#"<circle cx="{}" cy="{}" r="2" fill="{colour}"/>"#, num(sx(x)), num(sy(y)));
                }
            }
            let ly = oy + 10.0 + 12.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{colour}" stroke-width="2"/><text x="{3}" y="{4}" class="lg">{5}</text>"#,
                num(ox + pw - 92.0),
                num(ly),
                num(ox + pw - 78.0),
                num(ox + pw - 74.0),
                num(ly + 3.5),
                esc(&s.name)
            );
        }
    }
}

impl HeatPanel {
    fn render(&self, out: &mut String, x0: f64, y0: f64) {
        let finite: Vec<f64> = self.values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let label_w = 96.0;
        let bar_w = 14.0;
        let (ox, oy) = (x0 + label_w, y0 + MARGIN_T);
        let pw = PANEL_W - label_w - MARGIN_R - bar_w - 40.0;
        let ph = PANEL_H - MARGIN_T - MARGIN_B;
        let nr = self.rows.len().max(1) as f64;
        let nc = self.cols.len().max(1) as f64;
        let (cw, chh) = (pw / nc, ph / nr);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" class="pt">{}</text>"#,
            num(x0 + PANEL_W / 2.0),
            num(y0 + 18.0),
            esc(&self.title)
        );
        let show_values = self.cols.len() <= 12 && self.rows.len() <= 16;
        for (r, row) in self.values.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let (x, y) = (ox + c as f64 * cw, oy + r as f64 * chh);
                let fill = if !v.is_finite() {
                    "url(#hatch)".to_string()
                } else if hi > lo {
                    ramp((v - lo) / (hi - lo))
                } else {
                    ramp(0.5)
                };
                let _ = writeln!(
                    out,
                    r##"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}" stroke="#fff" stroke-width="0.5"/>"##,
                    num(x),
                    num(y),
                    num(cw),
                    num(chh)
                );
                if show_values && v.is_finite() {
                    let dark = hi > lo && (v - lo) / (hi - lo) > 0.6;
                    let _ = writeln!(
                        out,
                        r#"<text x="{}" y="{}" class="cv{}">{}</text>"#,
                        num(x + cw / 2.0),
                        num(y + chh / 2.0 + 3.0),
                        if dark { " dk" } else { "" },
                        label(v)
                    );
                }
            }
        }
        for (r, name) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" class="yt">{}</text>"#,
                num(ox - 4.0),
                num(oy + (r as f64 + 0.5) * chh + 3.5),
                esc(name)
            );
        }
        let every = (self.cols.len() / 8).max(1);
        for (c, name) in self.cols.iter().enumerate().filter(|(c, _)| c % every == 0) {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" class="xt">{}</text>"#,
                num(ox + (c as f64 + 0.5) * cw),
                num(oy + ph + 14.0),
                esc(name)
            );
        }
        let bx = ox + pw + 10.0;
        for k in 0..20 {
            let t = 1.0 - k as f64 / 19.0;
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
                num(bx),
                num(oy + ph * k as f64 / 20.0),
                num(bar_w),
                num(ph / 20.0 + 0.5),
                ramp(t)
            );
        }
        if lo.is_finite() {
            let _ = writeln!(out, r#"<text x="{}" y="{}" class="lg">{}</text>"#, num(bx + bar_w + 3.0), num(oy + 8.0), label(hi));
            let _ = writeln!(out, r#"<text x="{}" y="{}" class="lg">{}</text>"#, num(bx + bar_w + 3.0), num(oy + ph), label(lo));
        }
    }
}

impl Figure {
    pub fn render(&self) -> String {
        let cols = self.columns.max(1);
        let rows = self.panels.len().div_ceil(cols).max(1);
        let (w, h) = (PANEL_W * cols as f64, TITLE_H + PANEL_H * rows as f64);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{1}" viewBox="0 0 {0} {1}" font-family="Helvetica, Arial, sans-serif">"#,
            num(w),
            num(h)
        );
        let _ = writeln!(out, "<!-- {} -->", esc(&self.provenance));
        let _ = writeln!(out, "<metadata>{}</metadata>", esc(&self.provenance));
        out.push_str(concat!(
            "<style>",
            ".ft{font-size:15px;font-weight:bold;text-anchor:middle}",
            ".pt{font-size:12px;font-weight:bold;text-anchor:middle}",
            ".xt{font-size:9px;text-anchor:middle}",
            ".yt{font-size:9px;text-anchor:end}",
            ".al{font-size:10px;text-anchor:middle}",
            ".lg{font-size:9px}",
            ".cv{font-size:8px;text-anchor:middle;fill:#fff}",
            ".cv.dk{fill:#000}",
            ".tk{stroke:#444}",
            "</style>\n",
            r##"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse"><rect width="6" height="6" fill="#bbb"/><path d="M0,6 L6,0" stroke="#777"/></pattern></defs>"##,
            "\n"
        ));
        let _ = writeln!(out, r##"<rect width="{}" height="{}" fill="#fff"/>"##, num(w), num(h));
        let _ = writeln!(out, r#"<text x="{}" y="22" class="ft">{}</text>"#, num(w / 2.0), esc(&self.title));
        for (i, p) in self.panels.iter().enumerate() {
            let (x0, y0) = (PANEL_W * (i % cols) as f64, TITLE_H + PANEL_H * (i / cols) as f64);
            match p {
                Panel::Line(l) => l.render(&mut out, x0, y0),
                Panel::Heat(hm) => hm.render(&mut out, x0, y0),
            }
        }
        out.push_str("</svg>\n");
        out
    }
}
