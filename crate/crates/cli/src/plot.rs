//! Deterministic SVG rendering of embeddings and reliability diagrams.

use std::fmt::Write;

use repgeo::embed::EmbeddingPoints;
use repgeo::uq::ReliabilityBin;
use repgeo::ReferenceCoordinates;

use crate::error::CliError;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 640.0;
const MARGIN: f64 = 64.0;

const POSITIVE: &str = "#2a9d4a";
const NEGATIVE: &str = "#d1373f";
const NEUTRAL: &str = "#7f7f7f";
const UNMAPPED: &str = "#1f3b73";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValenceClass {
    Positive,
    Negative,
    Neutral,
}

impl ValenceClass {
    fn color(self) -> &'static str {
        match self {
            ValenceClass::Positive => POSITIVE,
            ValenceClass::Negative => NEGATIVE,
            ValenceClass::Neutral => NEUTRAL,
        }
    }
}

/// Valence sign of each reference label; values within 5% of the largest
/// magnitude count as neutral.
pub fn valence_classes(reference: &ReferenceCoordinates) -> Vec<(String, ValenceClass)> {
    let vmax = reference.coords.column(0).amax();
    reference
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let v = reference.coords[(i, 0)];
            let class = if v.abs() <= 0.05 * vmax {
                ValenceClass::Neutral
            } else if v > 0.0 {
                ValenceClass::Positive
            } else {
                ValenceClass::Negative
            };
            (l.clone(), class)
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="32" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

/// Maps `[lo, hi]` onto the plotting area along one axis.
fn axis(lo: f64, hi: f64, from: f64, to: f64) -> impl Fn(f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mid = if hi > lo { lo } else { lo - 0.5 };
    move |v| from + (v - mid) / span * (to - from)
}

/// Scatter of the first two embedding coordinates (rank-1 embeddings are
/// drawn on a horizontal line), one labeled marker per point.
pub fn scatter_svg(
    points: &EmbeddingPoints,
    reference: Option<&ReferenceCoordinates>,
    title: &str,
) -> String {
    let xy: Vec<(f64, f64)> = points
        .coords
        .iter()
        .map(|c| (c.first().copied().unwrap_or(0.0), c.get(1).copied().unwrap_or(0.0)))
        .collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        xy.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let sx = axis(x0, x1, MARGIN, WIDTH - MARGIN);
    let sy = axis(y0, y1, HEIGHT - MARGIN, MARGIN);
    let classes = reference.map(valence_classes);

    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{:.2}" height="{:.2}" fill="none" stroke="#cccccc"/>"##,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    for (label, &(x, y)) in points.labels.iter().zip(&xy) {
        let color = match &classes {
            Some(c) => c.iter().find(|(l, _)| l == label).map_or(UNMAPPED, |(_, k)| k.color()),
            None => UNMAPPED,
        };
        let (px, py) = (sx(x), if y1 > y0 { sy(y) } else { HEIGHT / 2.0 });
        let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="4" fill="{color}"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            px + 6.0,
            py - 6.0,
            escape(label)
        );
    }
    if classes.is_some() {
        let legend = [("positive", POSITIVE), ("negative", NEGATIVE), ("neutral", NEUTRAL), ("unmapped", UNMAPPED)];
        for (i, (name, color)) in legend.iter().enumerate() {
            let y = HEIGHT - 28.0;
            let x = MARGIN + 120.0 * i as f64;
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#, x);
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="11">{name}</text>"#, x + 8.0, y + 4.0);
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Reads the reliability CSV written by the UQ stage.
pub fn parse_reliability_csv(text: &str) -> Result<Vec<ReliabilityBin>, CliError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "bin_center,mean_prob,accuracy,count" {
        return Err(CliError::Malformed(format!("unexpected reliability header `{header}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || CliError::Malformed(format!("reliability line {}: `{line}`", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(ReliabilityBin {
                center: num(f[0])?,
                mean_prob: num(f[1])?,
                accuracy: num(f[2])?,
                count: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Bars of observed accuracy per bin, markers at mean predicted probability,
/// and the diagonal of perfect calibration.
pub fn reliability_svg(bins: &[ReliabilityBin], title: &str) -> String {
    let sx = axis(0.0, 1.0, MARGIN, WIDTH - MARGIN);
    let sy = axis(0.0, 1.0, HEIGHT - MARGIN, MARGIN);
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999999" stroke-dasharray="4 4"/>"##,
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(1.0)
    );
    let n_bins = bins.len().max(1);
    let width = (WIDTH - 2.0 * MARGIN) / n_bins as f64;
    for b in bins {
        let left = sx(b.center) - width / 2.0;
        let top = sy(b.accuracy);
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#4c78a8" fill-opacity="0.7" stroke="#2f4b6e"/>"##,
            left + 1.0,
            (width - 2.0).max(1.0),
            sy(0.0) - top
        );
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#e45756"/>"##,
            sx(b.mean_prob),
            sy(b.mean_prob)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="9" text-anchor="middle">{}</text>"#,
            sx(b.center),
            top - 4.0,
            b.count
        );
    }
    let _ = writeln!(
        out,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(0.0)
    );
    let _ = writeln!(
        out,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        sx(0.0),
        sy(0.0),
        sx(0.0),
        sy(1.0)
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{v:.1}</text>"#,
            sx(v),
            sy(0.0) + 16.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{v:.1}</text>"#,
            sx(0.0) - 6.0,
            sy(v) + 3.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">predicted probability</text>"#,
        WIDTH / 2.0,
        HEIGHT - 20.0
    );
    out.push_str("</svg>\n");
    out
}
