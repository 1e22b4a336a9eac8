//! Deterministic SVG plots.
//!
//! Every renderer is a pure function of its inputs; coordinates are printed
//! with fixed precision so equal inputs give equal bytes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::io::ChainPath;
use crate::mixture::{GaussianMixture, NoiseLevel};
use crate::search::{Metric, SweepReport, SweepRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    /// Trajectories over the `(σ, x)` plane, on the smoothed density.
    #[default]
    TrajectoryFan,
    /// Smoothed density over the `(σ, x)` plane, or a 2-D batch histogram.
    DensityHeatmap,
    /// Terminal histogram against the analytic density.
    Histogram,
    /// Loss against `w`, full interval versus best interval.
    MetricCurve,
    /// Precision and recall against `w`.
    PrCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    #[serde(default)]
    pub kind: PlotKind,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    /// Histogram bins, or heatmap cells per axis.
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Range of the data axis; taken from the data when absent.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub x_range: Option<[f64; 2]>,
    /// Second axis of a 2-D heatmap.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub y_range: Option<[f64; 2]>,
    /// Logarithmic `σ` axis for trajectory plots.
    #[serde(default = "yes")]
    pub log_sigma: bool,
    /// Most trajectories drawn.
    #[serde(default = "default_chains")]
    pub max_chains: usize,
    /// Coordinate shown for multi-dimensional data.
    #[serde(default)]
    pub axis: usize,
}

fn default_width() -> u32 {
    720
}

fn default_height() -> u32 {
    420
}

fn default_bins() -> usize {
    60
}

fn default_chains() -> usize {
    64
}

fn yes() -> bool {
    true
}

impl Default for PlotSpec {
    fn default() -> Self {
        PlotSpec {
            kind: PlotKind::default(),
            width: default_width(),
            height: default_height(),
            bins: default_bins(),
            x_range: None,
            y_range: None,
            log_sigma: true,
            max_chains: default_chains(),
            axis: 0,
        }
    }
}

impl PlotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 100 || self.height < 100 || self.bins == 0 || self.max_chains == 0 {
            return Err(Error::input("plot width and height must be >= 100; bins and max_chains >= 1"));
        }
        for r in [self.x_range, self.y_range].into_iter().flatten() {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return Err(Error::input(format!("plot range must be finite and increasing, got {r:?}")));
            }
        }
        Ok(())
    }
}

const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;

/// Linear or logarithmic map from data to pixels.
#[derive(Debug, Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
    log: bool,
}

impl Scale {
    fn new(lo: f64, hi: f64, p0: f64, p1: f64, log: bool) -> Self {
        let (lo, hi) = if log { (lo.ln(), hi.ln()) } else { (lo, hi) };
        Scale { lo, hi, p0, p1, log }
    }

    fn at(&self, v: f64) -> f64 {
        let v = if self.log { v.ln() } else { v };
        self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.min(self.hi) / std::f64::consts::LN_10, self.lo.max(self.hi) / std::f64::consts::LN_10);
            ((a - 1e-9).ceil() as i32..=(b + 1e-9).floor() as i32).map(|e| 10f64.powi(e)).collect()
        } else {
            let (a, b) = (self.lo.min(self.hi), self.lo.max(self.hi));
            let raw = (b - a) / 5.0;
            let mag = 10f64.powf(raw.log10().floor());
            let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
            let first = (a / step).ceil() as i64;
            let last = (b / step).floor() as i64;
            (first..=last).map(|i| i as f64 * step).collect()
        }
    }
}

fn label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Svg {
    out: String,
    w: f64,
    h: f64,
}

impl Svg {
    fn new(width: u32, height: u32, title: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
        let (w, h) = (width as f64, height as f64);
        let _ = writeln!(
            out,
            r#"<defs><clipPath id="plot-area"><rect x="{MARGIN_L:.2}" y="{MARGIN_T:.2}" width="{:.2}" height="{:.2}"/></clipPath></defs>"#,
            w - MARGIN_L - MARGIN_R,
            h - MARGIN_T - MARGIN_B
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            width as f64 / 2.0,
            escape(title)
        );
        Svg {
            out,
            w: width as f64,
            h: height as f64,
        }
    }

    fn x_span(&self) -> (f64, f64) {
        (MARGIN_L, self.w - MARGIN_R)
    }

    fn y_span(&self) -> (f64, f64) {
        (self.h - MARGIN_B, MARGIN_T)
    }

    fn begin_clip(&mut self) {
        self.out.push_str("<g clip-path=\"url(#plot-area)\">\n");
    }

    fn end_clip(&mut self) {
        self.out.push_str("</g>\n");
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.out,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dash: bool) {
        if pts.len() < 2 {
            return;
        }
        let mut d = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            if i > 0 {
                d.push(' ');
            }
            let _ = write!(d, "{x:.2},{y:.2}");
        }
        let dash = if dash { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(
            self.out,
            r#"<polyline points="{d}" fill="none" stroke="{stroke}" stroke-width="{width:.2}"{dash}/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn axes(&mut self, xs: &Scale, ys: &Scale, xlabel: &str, ylabel: &str) {
        let (x0, x1) = self.x_span();
        let (y0, y1) = self.y_span();
        let _ = writeln!(
            self.out,
            r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y0 - y1
        );
        for t in xs.ticks() {
            let x = xs.at(t);
            self.polyline(&[(x, y0), (x, y0 + 4.0)], "black", 1.0, false);
            self.text(x, y0 + 16.0, "middle", &label(t));
        }
        for t in ys.ticks() {
            let y = ys.at(t);
            self.polyline(&[(x0 - 4.0, y), (x0, y)], "black", 1.0, false);
            self.text(x0 - 6.0, y + 4.0, "end", &label(t));
        }
        self.text((x0 + x1) / 2.0, self.h - 8.0, "middle", xlabel);
        let _ = writeln!(
            self.out,
            r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(ylabel)
        );
    }

    fn legend(&mut self, entries: &[(&str, &str, bool)]) {
        let (_, x1) = self.x_span();
        let (_, y1) = self.y_span();
        for (i, (name, color, dash)) in entries.iter().enumerate() {
            let y = y1 + 14.0 + 14.0 * i as f64;
            self.polyline(&[(x1 - 150.0, y - 4.0), (x1 - 125.0, y - 4.0)], color, 2.0, *dash);
            self.text(x1 - 120.0, y, "start", name);
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White to dark blue.
fn shade(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - 0.85 * t)).round() as u8;
    let g = (255.0 * (1.0 - 0.7 * t)).round() as u8;
    let b = (255.0 * (1.0 - 0.35 * t)).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn data_range(values: impl Iterator<Item = f64>) -> Option<[f64; 2]> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    Some([lo - pad, hi + pad])
}

/// Where `σ = 0` is drawn on a log axis: half the smallest positive level.
fn sigma_floor(paths: &[ChainPath]) -> f64 {
    paths
        .iter()
        .flat_map(|p| p.sigmas.iter().copied())
        .filter(|&s| s > 0.0)
        .fold(f64::INFINITY, f64::min)
        / 2.0
}

fn density_columns(svg: &mut Svg, xs: &Scale, ys: &Scale, density: &GaussianMixture, sigmas: &[f64], yr: [f64; 2], rows: usize) -> Result<()> {
    for win in sigmas.windows(2) {
        let (s0, s1) = (win[0], win[1]);
        let level = NoiseLevel::new((s0 * s1).sqrt().max(s1))?;
        let dy = (yr[1] - yr[0]) / rows as f64;
        let col: Vec<f64> = (0..rows)
            .map(|j| {
                let y = yr[0] + (j as f64 + 0.5) * dy;
                density.smoothed_density(&[y], level)
            })
            .collect::<Result<_>>()?;
        let peak = col.iter().copied().fold(0.0, f64::max);
        let (xa, xb) = (xs.at(s0), xs.at(s1));
        for (j, p) in col.iter().enumerate() {
            let t = if peak > 0.0 { p / peak } else { 0.0 };
            if t < 0.02 {
                continue;
            }
            let (ya, yb) = (ys.at(yr[0] + j as f64 * dy), ys.at(yr[0] + (j + 1) as f64 * dy));
            svg.rect(xa.min(xb), yb.min(ya), (xb - xa).abs() + 0.3, (ya - yb).abs() + 0.3, &shade(0.6 * t));
        }
    }
    Ok(())
}

fn sigma_scale(svg: &Svg, paths_sigmas: (f64, f64), log: bool) -> Scale {
    let (x0, x1) = svg.x_span();
    Scale::new(paths_sigmas.0, paths_sigmas.1, x0, x1, log)
}

/// Trajectories `x_axis(σ)` with σ decreasing to the right. Guided steps are
/// drawn in red. With `density`, the smoothed density of each level is
/// shaded behind them, normalized per column.
pub fn trajectory_fan(paths: &[ChainPath], density: Option<&GaussianMixture>, spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let paths = &paths[..paths.len().min(spec.max_chains)];
    if paths.is_empty() {
        return Err(Error::input("no trajectories to plot"));
    }
    let axis = spec.axis;
    if paths[0].states[0].len() <= axis {
        return Err(Error::input(format!("axis {axis} is outside the data dimension")));
    }
    if density.is_some_and(|d| d.dim() != 1) {
        return Err(Error::input("density backgrounds need one-dimensional data"));
    }
    let floor = sigma_floor(paths);
    let sig = |s: f64| if spec.log_sigma { s.max(floor) } else { s };
    let smax = paths.iter().map(|p| p.sigmas[0]).fold(0.0, f64::max);
    let smin = if spec.log_sigma { floor } else { 0.0 };
    // By default the vertical range follows the terminal samples, so early
    // trajectories enter the frame from outside.
    let yr = match spec.x_range {
        Some(r) => r,
        None => {
            let [mut lo, mut hi] =
                data_range(paths.iter().map(|p| p.states[p.states.len() - 1][axis])).expect("non-empty paths");
            // Keep every mode of the background in view, including dropped ones.
            for c in density.map(|d| d.components()).unwrap_or_default() {
                let sd = c.variance[0].sqrt();
                lo = lo.min(c.mean[0] - 2.0 * sd);
                hi = hi.max(c.mean[0] + 2.0 * sd);
            }
            let pad = 0.3 * (hi - lo).max(1.0);
            [lo - pad, hi + pad]
        }
    };
    let mut svg = Svg::new(spec.width, spec.height, "sample trajectories");
    let xs = sigma_scale(&svg, (smax, smin), spec.log_sigma);
    let (ya, yb) = svg.y_span();
    let ys = Scale::new(yr[0], yr[1], ya, yb, false);
    svg.begin_clip();
    if let Some(d) = density {
        let mut levels: Vec<f64> = paths[0].sigmas.iter().map(|&s| sig(s)).collect();
        levels.dedup();
        density_columns(&mut svg, &xs, &ys, d, &levels, yr, spec.bins.max(20))?;
    }
    for p in paths {
        let pts: Vec<(f64, f64)> = p
            .sigmas
            .iter()
            .zip(&p.states)
            .map(|(&s, x)| (xs.at(sig(s)), ys.at(x[axis])))
            .collect();
        let mut run: Vec<(f64, f64)> = vec![pts[0]];
        let mut guided = p.weights.first().is_some_and(|&w| w != 1.0);
        for a in 0..pts.len() - 1 {
            let g = p.weights.get(a).is_some_and(|&w| w != 1.0);
            if g != guided {
                svg.polyline(&run, if guided { "#c0392b" } else { "#222222" }, 0.8, false);
                run = vec![pts[a]];
                guided = g;
            }
            run.push(pts[a + 1]);
        }
        svg.polyline(&run, if guided { "#c0392b" } else { "#222222" }, 0.8, false);
    }
    svg.end_clip();
    svg.axes(&xs, &ys, "noise level σ", &format!("x{axis}"));
    svg.legend(&[("guided step", "#c0392b", false), ("unguided step", "#222222", false)]);
    Ok(svg.finish())
}

/// Smoothed density of a one-dimensional mixture over the `(σ, x)` plane.
pub fn density_plane(density: &GaussianMixture, sigmas: &[f64], spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    if density.dim() != 1 {
        return Err(Error::input("density planes need a one-dimensional mixture"));
    }
    let positive: Vec<f64> = sigmas.iter().copied().filter(|&s| s > 0.0).collect();
    if positive.len() < 2 {
        return Err(Error::input("need at least two positive noise levels"));
    }
    let (smax, smin) = (positive[0], *positive.last().expect("checked"));
    let yr = spec.x_range.unwrap_or_else(|| {
        let c = density.components();
        let lo = c.iter().map(|k| k.mean[0] - 3.0 * k.variance[0].sqrt()).fold(f64::INFINITY, f64::min);
        let hi = c.iter().map(|k| k.mean[0] + 3.0 * k.variance[0].sqrt()).fold(f64::NEG_INFINITY, f64::max);
        [lo, hi]
    });
    let mut svg = Svg::new(spec.width, spec.height, "smoothed density p(x; σ)");
    let xs = sigma_scale(&svg, (smax, smin), spec.log_sigma);
    let (ya, yb) = svg.y_span();
    let ys = Scale::new(yr[0], yr[1], ya, yb, false);
    density_columns(&mut svg, &xs, &ys, density, &positive, yr, spec.bins.max(20))?;
    svg.axes(&xs, &ys, "noise level σ", "x0");
    Ok(svg.finish())
}

/// Two-dimensional histogram of a batch, axes `axis` and `axis + 1`.
pub fn batch_heatmap(batch: &SampleBatch, spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let (a, b) = (spec.axis, spec.axis + 1);
    if batch.dim() <= b {
        return Err(Error::input("a batch heatmap needs two coordinates"));
    }
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let xr = spec.x_range.unwrap_or_else(|| data_range(batch.rows().map(|r| r[a])).expect("non-empty"));
    let yr = spec.y_range.unwrap_or_else(|| data_range(batch.rows().map(|r| r[b])).expect("non-empty"));
    let n = spec.bins;
    let mut counts = vec![0usize; n * n];
    for r in batch.rows() {
        let i = ((r[a] - xr[0]) / (xr[1] - xr[0]) * n as f64).floor();
        let j = ((r[b] - yr[0]) / (yr[1] - yr[0]) * n as f64).floor();
        if (0.0..n as f64).contains(&i) && (0.0..n as f64).contains(&j) {
            counts[j as usize * n + i as usize] += 1;
        }
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut svg = Svg::new(spec.width, spec.height, "sample density");
    let (x0, x1) = svg.x_span();
    let (y0, y1) = svg.y_span();
    let xs = Scale::new(xr[0], xr[1], x0, x1, false);
    let ys = Scale::new(yr[0], yr[1], y0, y1, false);
    let (cw, ch) = ((x1 - x0) / n as f64, (y0 - y1) / n as f64);
    for j in 0..n {
        for i in 0..n {
            let c = counts[j * n + i];
            if c > 0 {
                let t = (c as f64 / peak).sqrt();
                svg.rect(x0 + i as f64 * cw, y0 - (j + 1) as f64 * ch, cw + 0.3, ch + 0.3, &shade(t));
            }
        }
    }
    svg.axes(&xs, &ys, &format!("x{a}"), &format!("x{b}"));
    Ok(svg.finish())
}

/// Histogram normalized to unit area: `Σ width × height = 1` over the
/// samples inside the range.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityHistogram {
    pub edges: Vec<f64>,
    pub heights: Vec<f64>,
}

impl DensityHistogram {
    pub fn new(values: &[f64], bins: usize, range: [f64; 2]) -> Result<Self> {
        // Also rejects NaN bounds.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if bins == 0 || !(range[0] < range[1]) {
            return Err(Error::input("histogram needs bins >= 1 and an increasing range"));
        }
        let width = (range[1] - range[0]) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| range[0] + i as f64 * width).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            if v >= range[0] && v <= range[1] {
                let i = (((v - range[0]) / width) as usize).min(bins - 1);
                counts[i] += 1;
            }
        }
        let kept: usize = counts.iter().sum();
        if kept == 0 {
            return Err(Error::input("no samples inside the histogram range"));
        }
        let heights = counts
            .iter()
            .zip(edges.windows(2))
            .map(|(&c, e)| c as f64 / kept as f64 / (e[1] - e[0]))
            .collect();
        Ok(DensityHistogram { edges, heights })
    }

    pub fn area(&self) -> f64 {
        self.heights.iter().zip(self.edges.windows(2)).map(|(h, e)| h * (e[1] - e[0])).sum()
    }
}

/// Histogram of coordinate `spec.axis` with the analytic marginal density on top.
pub fn histogram(batch: &SampleBatch, density: Option<&GaussianMixture>, spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    if spec.axis >= batch.dim() {
        return Err(Error::input(format!("axis {} is outside the data dimension", spec.axis)));
    }
    let values = batch.axis(spec.axis);
    let range = spec.x_range.unwrap_or_else(|| data_range(values.iter().copied()).expect("non-empty"));
    let h = DensityHistogram::new(&values, spec.bins, range)?;
    let marginal = density.map(|d| marginal_of(d, spec.axis)).transpose()?;
    let curve: Vec<(f64, f64)> = match &marginal {
        Some(m) => (0..=400)
            .map(|i| {
                let x = range[0] + (range[1] - range[0]) * i as f64 / 400.0;
                m.smoothed_density(&[x], NoiseLevel::ZERO).map(|p| (x, p))
            })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let top = h.heights.iter().chain(curve.iter().map(|c| &c.1)).copied().fold(0.0, f64::max) * 1.05;
    let mut svg = Svg::new(spec.width, spec.height, "terminal samples");
    let (x0, x1) = svg.x_span();
    let (y0, y1) = svg.y_span();
    let xs = Scale::new(range[0], range[1], x0, x1, false);
    let ys = Scale::new(0.0, top.max(1e-12), y0, y1, false);
    for (ht, e) in h.heights.iter().zip(h.edges.windows(2)) {
        if *ht > 0.0 {
            let (xa, xb) = (xs.at(e[0]), xs.at(e[1]));
            svg.rect(xa, ys.at(*ht), xb - xa, y0 - ys.at(*ht), "#9ecae1");
        }
    }
    if !curve.is_empty() {
        let pts: Vec<(f64, f64)> = curve.iter().map(|&(x, p)| (xs.at(x), ys.at(p))).collect();
        svg.polyline(&pts, "#08306b", 1.5, false);
    }
    svg.axes(&xs, &ys, &format!("x{}", spec.axis), "density");
    if marginal.is_some() {
        svg.legend(&[("samples", "#9ecae1", false), ("exact density", "#08306b", false)]);
    }
    Ok(svg.finish())
}

fn marginal_of(mix: &GaussianMixture, axis: usize) -> Result<GaussianMixture> {
    if axis >= mix.dim() {
        return Err(Error::input("axis outside the mixture dimension"));
    }
    GaussianMixture::new(
        mix.components()
            .iter()
            .map(|c| crate::mixture::Component::new(c.weight, vec![c.mean[axis]], vec![c.variance[axis]]))
            .collect(),
    )
}

/// The two curves every sweep plot compares: standard guidance on the whole
/// schedule, and the best interval found at each `w`.
fn sweep_series(report: &SweepReport) -> (Vec<&SweepRow>, Vec<&SweepRow>) {
    let steps = report.sigmas.len() - 1;
    let mut ws: Vec<f64> = report.rows.iter().filter(|r| !r.interval.is_empty()).map(|r| r.w).collect();
    ws.sort_by(f64::total_cmp);
    ws.dedup();
    let full = ws
        .iter()
        .filter_map(|&w| report.row(&crate::search::Cell::new(w, 0, steps)).filter(|r| r.is_ok()))
        .collect();
    let best = ws.iter().filter_map(|&w| report.best_at_w(w)).collect();
    (full, best)
}

/// Label, colour, dashed, points.
type Series<'a> = (&'a str, &'a str, bool, Vec<(f64, f64)>);

fn curve_plot(title: &str, ylabel: &str, series: &[Series<'_>], baseline: Option<f64>, spec: &PlotSpec) -> Result<String> {
    let pts = series.iter().flat_map(|s| s.3.iter());
    let xr = spec
        .x_range
        .or_else(|| data_range(series.iter().flat_map(|s| s.3.iter().map(|p| p.0))))
        .ok_or_else(|| Error::input("nothing to plot"))?;
    let yr = spec
        .y_range
        .or_else(|| data_range(pts.map(|p| p.1).chain(baseline)))
        .expect("non-empty");
    let mut svg = Svg::new(spec.width, spec.height, title);
    let (x0, x1) = svg.x_span();
    let (y0, y1) = svg.y_span();
    let xs = Scale::new(xr[0], xr[1], x0, x1, false);
    let ys = Scale::new(yr[0], yr[1], y0, y1, false);
    if let Some(b) = baseline {
        svg.polyline(&[(x0, ys.at(b)), (x1, ys.at(b))], "#888888", 1.0, true);
    }
    for (_, color, dash, data) in series {
        let p: Vec<(f64, f64)> = data.iter().map(|&(x, y)| (xs.at(x), ys.at(y))).collect();
        svg.polyline(&p, color, 2.0, *dash);
    }
    svg.axes(&xs, &ys, "guidance weight w", ylabel);
    let mut legend: Vec<(&str, &str, bool)> = series.iter().map(|s| (s.0, s.1, s.2)).collect();
    if baseline.is_some() {
        legend.push(("no guidance", "#888888", true));
    }
    svg.legend(&legend);
    Ok(svg.finish())
}

/// The report's loss against `w`.
pub fn metric_curve(report: &SweepReport, spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let (full, best) = sweep_series(report);
    let xy = |rows: &[&SweepRow]| rows.iter().filter_map(|r| r.loss.map(|l| (r.w, l))).collect::<Vec<_>>();
    let series = [
        ("full interval", "#c0392b", false, xy(&full)),
        ("best interval", "#2166ac", false, xy(&best)),
    ];
    if series.iter().all(|s| s.3.is_empty()) {
        return Err(Error::input("the report has no successful guided rows"));
    }
    let baseline = report.row(&crate::search::Cell::baseline()).and_then(|r| r.loss);
    let name = match report.metric {
        Metric::Recall => "recall loss".to_string(),
        m => m.to_string(),
    };
    curve_plot(&format!("{name} against w"), &name, &series, baseline, spec)
}

/// Precision (dashed) and recall (solid) against `w`.
pub fn pr_curve(report: &SweepReport, spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let (full, best) = sweep_series(report);
    let pick = |rows: &[&SweepRow], f: fn(&crate::metrics::MetricsReport) -> Option<f64>| {
        rows.iter()
            .filter_map(|r| r.metrics.as_ref().and_then(f).map(|v| (r.w, v)))
            .collect::<Vec<_>>()
    };
    let series = [
        ("recall, full interval", "#c0392b", false, pick(&full, |m| m.recall)),
        ("precision, full interval", "#c0392b", true, pick(&full, |m| m.precision)),
        ("recall, best interval", "#2166ac", false, pick(&best, |m| m.recall)),
        ("precision, best interval", "#2166ac", true, pick(&best, |m| m.precision)),
    ];
    if series.iter().all(|s| s.3.is_empty()) {
        return Err(Error::input("the report has no precision/recall values"));
    }
    curve_plot("precision and recall against w", "value", &series, None, spec)
}
