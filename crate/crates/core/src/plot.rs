//! Minimal self-contained SVG plots: lines, markers with error bars and
//! histograms, on linear axes with ticks, units and a legend.

use std::fmt::Write as _;
use std::path::Path;

use crate::odmr::{esr_contrast_model, EsrFit, EsrSpectrum};
use crate::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Line,
    Markers,
    /// Vertical bars; `x` holds bin left edges and the last edge is `x[n]`.
    Bars,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub kind: SeriesKind,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Symmetric vertical error bars for `Markers`.
    pub y_err: Option<Vec<f64>>,
}

impl Series {
    pub fn line(label: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self { label: label.into(), kind: SeriesKind::Line, x, y, y_err: None }
    }

    pub fn markers(label: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self { label: label.into(), kind: SeriesKind::Markers, x, y, y_err: None }
    }

    pub fn with_errors(mut self, err: Vec<f64>) -> Self {
        self.y_err = Some(err);
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

impl Plot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), series: Vec::new() }
    }

    pub fn with(mut self, series: Series) -> Self {
        self.series.push(series);
        self
    }

    fn data_range(&self) -> ((f64, f64), (f64, f64)) {
        let mut xr = (f64::INFINITY, f64::NEG_INFINITY);
        let mut yr = (f64::INFINITY, f64::NEG_INFINITY);
        let grow = |r: &mut (f64, f64), v: f64| {
            if v.is_finite() {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        };
        for s in &self.series {
            for (i, (&x, &y)) in s.x.iter().zip(&s.y).enumerate() {
                if !(x.is_finite() && y.is_finite()) {
                    continue;
                }
                grow(&mut xr, x);
                let e = s.y_err.as_ref().and_then(|e| e.get(i)).copied().filter(|e| e.is_finite()).unwrap_or(0.0);
                grow(&mut yr, y - e);
                grow(&mut yr, y + e);
            }
            if s.kind == SeriesKind::Bars {
                if let Some(&last) = s.x.get(s.y.len()) {
                    grow(&mut xr, last);
                }
                grow(&mut yr, 0.0);
            }
        }
        (pad_range(xr), pad_range(yr))
    }

    pub fn to_svg(&self) -> String {
        let ((x0, x1), (y0, y1)) = self.data_range();
        let xt = nice_ticks(x0, x1, 6);
        let yt = nice_ticks(y0, y1, 6);
        let (x0, x1) = (x0.min(xt[0]), x1.max(*xt.last().unwrap()));
        let (y0, y1) = (y0.min(yt[0]), y1.max(*yt.last().unwrap()));
        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_TOP + (y1 - y) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(&self.title));

        // Frame, grid and ticks.
        let _ = writeln!(s, r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for &t in &xt {
            let x = sx(t);
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{MARGIN_TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e0e0e0"/>"##, MARGIN_TOP + ph);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, MARGIN_TOP + ph + 16.0, fmt_tick(t));
        }
        for &t in &yt {
            let y = sy(t);
            let _ = writeln!(s, r##"<line x1="{MARGIN_LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##, MARGIN_LEFT + pw);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, MARGIN_LEFT - 6.0, y + 4.0, fmt_tick(t));
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, MARGIN_LEFT + pw / 2.0, HEIGHT - 18.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            MARGIN_TOP + ph / 2.0,
            MARGIN_TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<(f64, f64)> = series.x.iter().zip(&series.y).map(|(&x, &y)| (x, y)).collect();
            match series.kind {
                SeriesKind::Line => {
                    // Break the polyline at non-finite values.
                    for run in pts.split(|(x, y)| !(x.is_finite() && y.is_finite())) {
                        if run.len() < 2 {
                            continue;
                        }
                        let d: Vec<String> = run.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, d.join(" "));
                    }
                }
                SeriesKind::Markers => {
                    for (i, &(x, y)) in pts.iter().enumerate() {
                        if !(x.is_finite() && y.is_finite()) {
                            continue;
                        }
                        if let Some(e) = series.y_err.as_ref().and_then(|e| e.get(i)).filter(|e| e.is_finite()) {
                            let _ = writeln!(
                                s,
                                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}"/>"#,
                                sx(x),
                                sy(y - e),
                                sx(x),
                                sy(y + e)
                            );
                        }
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
                    }
                }
                SeriesKind::Bars => {
                    for (i, &y) in series.y.iter().enumerate() {
                        let (Some(&a), Some(&b)) = (series.x.get(i), series.x.get(i + 1)) else { continue };
                        let top = sy(y.max(0.0));
                        let _ = writeln!(
                            s,
                            r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.6" stroke="{color}"/>"#,
                            sx(a),
                            (sx(b) - sx(a)).max(0.0),
                            (sy(0.0) - top).max(0.0)
                        );
                    }
                }
            }
            let ly = MARGIN_TOP + 14.0 + 16.0 * k as f64;
            let lx = MARGIN_LEFT + pw - 180.0;
            let _ = writeln!(s, r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="8" fill="{color}"/>"#, ly - 8.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 18.0, escape(&series.label));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn pad_range((lo, hi): (f64, f64)) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1e-300) {
        let d = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        return (lo - d, hi + d);
    }
    let pad = 0.03 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Round tick positions (1, 2 or 5 × 10ᵏ) covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).floor() as i64;
    let last = (hi / step).ceil() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bin edges by the Freedman–Diaconis rule, width `2·IQR·n^(−1/3)`.
pub fn freedman_diaconis_edges(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Vec::new();
    }
    v.sort_by(f64::total_cmp);
    let (lo, hi) = (v[0], v[v.len() - 1]);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 < v.len() {
            v[i] * (1.0 - frac) + v[i + 1] * frac
        } else {
            v[i]
        }
    };
    let iqr = q(0.75) - q(0.25);
    let width = 2.0 * iqr / (v.len() as f64).cbrt();
    if !(width > 0.0) || hi <= lo {
        let half = if lo == 0.0 { 0.5 } else { 0.5 * lo.abs() };
        return vec![lo - half, hi + half];
    }
    let bins = ((hi - lo) / width).ceil().max(1.0) as usize;
    (0..=bins).map(|i| lo + i as f64 * width).collect()
}

/// Counts per bin for `edges`; the last bin is closed on the right.
pub fn histogram_counts(values: &[f64], edges: &[f64]) -> Vec<f64> {
    let nb = edges.len().saturating_sub(1);
    let mut counts = vec![0.0; nb];
    if nb == 0 {
        return counts;
    }
    for &v in values.iter().filter(|v| v.is_finite()) {
        if v < edges[0] || v > edges[nb] {
            continue;
        }
        let i = edges.partition_point(|e| *e <= v).saturating_sub(1).min(nb - 1);
        counts[i] += 1.0;
    }
    counts
}

pub fn histogram(title: &str, label: &str, x_label: &str, values: &[f64]) -> Plot {
    let edges = freedman_diaconis_edges(values);
    let counts = histogram_counts(values, &edges);
    Plot::new(title, x_label, "count").with(Series { label: label.into(), kind: SeriesKind::Bars, x: edges, y: counts, y_err: None })
}

/// Spectrum with error bars and, when given, the fitted model on a fine grid.
pub fn spectrum_plot(title: &str, spectrum: &EsrSpectrum, fit: Option<&EsrFit>) -> Plot {
    let f_mhz: Vec<f64> = spectrum.frequencies.iter().map(|f| f / 1e6).collect();
    let mut plot = Plot::new(title, "microwave frequency (MHz)", "lock-in contrast").with(
        Series::markers("measured", f_mhz.clone(), spectrum.contrast.clone()).with_errors(spectrum.contrast_sigma.clone()),
    );
    if let (Some(fit), Some(&a), Some(&b)) = (fit, spectrum.frequencies.first(), spectrum.frequencies.last()) {
        let n = 400;
        let xs: Vec<f64> = (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect();
        let ys = xs.iter().map(|&f| esr_contrast_model(f, &fit.params)).collect();
        plot = plot.with(Series::line("Lorentzian fit", xs.iter().map(|f| f / 1e6).collect(), ys));
    }
    plot
}

pub fn write_svg(plot: &Plot, path: &Path) -> Result<()> {
    std::fs::write(path, plot.to_svg()).map_err(|e| Error::Output(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_plot_has_axes() {
        let svg = Plot::new("empty", "x (µm)", "y (nT)").to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("x (µm)") && svg.contains("y (nT)"));
        assert!(svg.contains("<rect x=\"80\""));
    }

    #[test]
    fn ticks_are_round_and_cover() {
        let t = nice_ticks(0.13, 9.7, 6);
        assert_eq!(t.first(), Some(&0.0));
        assert!(*t.last().unwrap() >= 9.7);
        assert!((t[1] - t[0] - 2.0).abs() < 1e-12);
        let t = nice_ticks(-3.2e-8, 4.1e-8, 5);
        assert!(t[0] <= -3.2e-8 && *t.last().unwrap() >= 4.1e-8);
    }

    #[test]
    fn freedman_diaconis_width() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let edges = freedman_diaconis_edges(&v);
        // IQR = 499.5, n^(1/3) = 10 → width 99.9.
        assert!((edges[1] - edges[0] - 99.9).abs() < 1e-9);
        assert_eq!(edges.len(), 11);
        let counts = histogram_counts(&v, &edges);
        assert_eq!(counts.iter().sum::<f64>(), 1000.0);
        assert_eq!(counts[0], 100.0);
    }

    #[test]
    fn degenerate_histograms() {
        assert!(freedman_diaconis_edges(&[]).is_empty());
        let edges = freedman_diaconis_edges(&[2.0; 5]);
        assert_eq!(histogram_counts(&[2.0; 5], &edges), vec![5.0]);
        let svg = histogram("h", "x", "x (nm)", &[]).to_svg();
        assert!(svg.contains("</svg>"));
    }

    #[test]
    fn spectrum_overlay() {
        let grid = crate::odmr::frequency_grid(2.87e9, 40e6, 41);
        let spectrum = EsrSpectrum {
            contrast: grid.iter().map(|_| 0.0).collect(),
            contrast_sigma: vec![0.01; grid.len()],
            frequencies: grid,
            dwell_per_point: 1.0,
        };
        let plot = spectrum_plot("s", &spectrum, None);
        assert_eq!(plot.series.len(), 1);
        let svg = plot.to_svg();
        assert_eq!(svg.matches("<circle").count(), 41);
    }

    #[test]
    fn labels_are_escaped() {
        let svg = Plot::new("a < b & c", "x", "y").to_svg();
        assert!(svg.contains("a &lt; b &amp; c"));
    }
}
