//! Ribbon report: ground-truth and predicted label ribbons stacked above a
//! REBA panel, written as one SVG file plus a CSV dump of the same data.

use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct RibbonReport {
    pub video: String,
    pub class_names: Vec<String>,
    pub gt_labels: Vec<usize>,
    pub pred_labels: Vec<usize>,
    pub gt_risk: Vec<f64>,
    pub pred_risk: Vec<f64>,
}

#[derive(Debug, PartialEq, Eq)]
pub struct TrackLengthMismatch;

impl std::fmt::Display for TrackLengthMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("report tracks differ in frame count")
    }
}

impl std::error::Error for TrackLengthMismatch {}

/// Fill color of class `id`: hues spaced by the golden angle.
pub fn class_color(id: usize) -> String {
    let hue = (id as f64 * 137.507_764) % 360.0;
    let (r, g, b) = hsl_to_rgb(hue, 0.65, 0.5);
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (u8, u8, u8) {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = l - c / 2.0;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let to = |v: f64| ((v + m) * 255.0).round() as u8;
    (to(r), to(g), to(b))
}

/// Runs of equal labels as `(start, end_exclusive, label)`.
pub fn label_runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.2 == l => r.1 = t + 1,
            _ => runs.push((t, t + 1, l)),
        }
    }
    runs
}

const WIDTH: f64 = 1000.0;
const LEFT: f64 = 70.0;
const RIBBON_H: f64 = 30.0;
const PLOT_H: f64 = 220.0;
const MAX_SCORE: f64 = 15.0;

impl RibbonReport {
    pub fn new(
        video: String,
        class_names: Vec<String>,
        gt_labels: Vec<usize>,
        pred_labels: Vec<usize>,
        gt_risk: Vec<f64>,
        pred_risk: Vec<f64>,
    ) -> Result<Self, TrackLengthMismatch> {
        let t = gt_labels.len();
        if pred_labels.len() != t || gt_risk.len() != t || pred_risk.len() != t {
            return Err(TrackLengthMismatch);
        }
        Ok(Self {
            video,
            class_names,
            gt_labels,
            pred_labels,
            gt_risk,
            pred_risk,
        })
    }

    pub fn frames(&self) -> usize {
        self.gt_labels.len()
    }

    fn name(&self, c: usize) -> String {
        self.class_names.get(c).cloned().unwrap_or_else(|| format!("class {c}"))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,gt_label,pred_label,gt_reba,pred_reba\n");
        for t in 0..self.frames() {
            let _ = writeln!(
                s,
                "{t},{},{},{},{}",
                self.gt_labels[t], self.pred_labels[t], self.gt_risk[t], self.pred_risk[t]
            );
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let t = self.frames().max(1) as f64;
        let dx = WIDTH / t;
        let x = |f: usize| LEFT + f as f64 * dx;
        let plot_top = 2.0 * RIBBON_H + 40.0;
        let y = |v: f64| plot_top + PLOT_H * (1.0 - v.clamp(0.0, MAX_SCORE) / MAX_SCORE);
        let mut classes: Vec<usize> = self.gt_labels.iter().chain(&self.pred_labels).copied().collect();
        classes.sort_unstable();
        classes.dedup();
        let legend_top = plot_top + PLOT_H + 30.0;
        let height = legend_top + 20.0 * classes.len().div_ceil(4) as f64 + 10.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" viewBox="0 0 {w} {height}" font-family="sans-serif" font-size="12">"#,
            w = LEFT + WIDTH + 20.0
        );
        let _ = writeln!(s, r#"<title>{}</title>"#, escape(&self.video));
        for (row, (name, labels)) in [("ground truth", &self.gt_labels), ("prediction", &self.pred_labels)]
            .into_iter()
            .enumerate()
        {
            let top = 10.0 + row as f64 * RIBBON_H;
            let _ = writeln!(s, r#"<g class="ribbon" data-track="{name}">"#);
            for (a, b, l) in label_runs(labels) {
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{top}" width="{:.3}" height="{RIBBON_H}" fill="{}" data-label="{l}" data-start="{a}" data-end="{b}"/>"#,
                    x(a),
                    (b - a) as f64 * dx,
                    class_color(l)
                );
            }
            let _ = writeln!(s, "</g>");
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                top + RIBBON_H / 2.0 + 4.0,
                if row == 0 { "GT" } else { "Pred" }
            );
        }
        // REBA axes
        let _ = writeln!(
            s,
            r##"<rect x="{LEFT}" y="{plot_top}" width="{WIDTH}" height="{PLOT_H}" fill="none" stroke="#888"/>"##
        );
        for v in [1.0, 4.0, 8.0, 11.0, 15.0] {
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" x2="{}" y1="{yy:.3}" y2="{yy:.3}" stroke="#ddd"/><text x="{}" y="{:.3}" text-anchor="end">{v}</text>"##,
                LEFT + WIDTH,
                LEFT - 6.0,
                y(v) + 4.0,
                yy = y(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">REBA</text>"#,
            plot_top + PLOT_H / 2.0,
            plot_top + PLOT_H / 2.0
        );
        let centre = |f: usize| x(f) + dx / 2.0;
        let gt_points: Vec<String> = self
            .gt_risk
            .iter()
            .enumerate()
            .map(|(f, v)| format!("{:.3},{:.3}", centre(f), y(*v)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline class="gt-reba" fill="none" stroke="#222" stroke-width="1.5" stroke-dasharray="4 3" points="{}"/>"##,
            gt_points.join(" ")
        );
        // predicted curve, one polyline per predicted-label run, joined to the next run
        for (a, b, l) in label_runs(&self.pred_labels) {
            let end = (b + 1).min(self.frames());
            let pts: Vec<String> = (a..end)
                .map(|f| format!("{:.3},{:.3}", centre(f), y(self.pred_risk[f])))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="pred-reba" fill="none" stroke="{}" stroke-width="2" data-label="{l}" points="{}"/>"#,
                class_color(l),
                pts.join(" ")
            );
        }
        for (i, c) in classes.iter().enumerate() {
            let lx = LEFT + (i % 4) as f64 * 240.0;
            let ly = legend_top + (i / 4) as f64 * 20.0;
            let _ = writeln!(
                s,
                r#"<rect x="{lx}" y="{ly}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                class_color(*c),
                lx + 16.0,
                ly + 10.0,
                escape(&self.name(*c))
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
