//! Standalone SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::MetricRow;
use crate::diffcore::Tensor;
use crate::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    LossCurve,
    ErrorVsNfe,
    Scatter2d,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss-curve" => Ok(PlotKind::LossCurve),
            "error-vs-nfe" => Ok(PlotKind::ErrorVsNfe),
            "scatter2d" => Ok(PlotKind::Scatter2d),
            other => Err(Error::invalid(format!(
                "unknown plot kind {other:?} (loss-curve, error-vs-nfe, scatter2d)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Metric prefix read by the error-vs-NFE chart; the row's step holds the
/// NFE and the suffix names the solver.
pub const ERROR_PREFIX: &str = "error/";

/// Groups metric rows into series: `loss*` metrics against step for loss
/// curves, `error/<solver>` metrics against NFE for the trade-off chart.
pub fn series_from_metrics(rows: &[MetricRow], kind: PlotKind) -> Result<Vec<Series>> {
    let runs: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.run_id.as_str()).collect();
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let label = match kind {
            PlotKind::LossCurve if r.metric.starts_with("loss") => r.metric.clone(),
            PlotKind::ErrorVsNfe => match r.metric.strip_prefix(ERROR_PREFIX) {
                Some(solver) => solver.to_string(),
                None => continue,
            },
            PlotKind::Scatter2d => {
                return Err(Error::invalid("scatter2d plots samples, not metric rows"));
            }
            _ => continue,
        };
        let label = if runs.len() > 1 {
            format!("{} {label}", r.run_id)
        } else {
            label
        };
        groups
            .entry(label)
            .or_default()
            .push((r.step as f64, r.value));
    }
    if groups.is_empty() {
        return Err(Error::invalid(format!(
            "no metric rows for a {kind:?} plot"
        )));
    }
    Ok(groups
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect())
}

/// One point per row of `[N, 2]` samples.
pub fn scatter_series(label: &str, samples: &Tensor) -> Result<Series> {
    if samples.rank() != 2 || samples.shape()[1] != 2 {
        return Err(Error::shape(
            "scatter2d",
            format!("expected [N, 2], got {:?}", samples.shape()),
        ));
    }
    Ok(Series {
        label: label.to_string(),
        points: (0..samples.rows())
            .map(|i| (samples.row(i)[0], samples.row(i)[1]))
            .collect(),
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.04 * (hi - lo);
        Axis {
            lo: lo - pad,
            hi: hi + pad,
            log,
        }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        (0..=4)
            .map(|i| {
                let u = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                if self.log {
                    10f64.powf(u)
                } else {
                    u
                }
            })
            .collect()
    }
}

/// Renders the chart with axes, tick labels and a legend. Every series
/// must hold at least one finite point.
pub fn render_svg(kind: PlotKind, title: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::invalid("plot has no series"));
    }
    for s in series {
        if s.points.is_empty() {
            return Err(Error::invalid(format!("series {:?} is empty", s.label)));
        }
        if s.points
            .iter()
            .any(|(x, y)| !x.is_finite() || !y.is_finite())
        {
            return Err(Error::NonFinite {
                what: format!("plot series {:?}", s.label),
            });
        }
    }
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let log_y = kind == PlotKind::ErrorVsNfe && pts().all(|p| p.1 > 0.0);
    let xa = Axis::fit(pts().map(|p| p.0), false);
    let ya = Axis::fit(pts().map(|p| p.1), log_y);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let px = |x: f64| LEFT + xa.frac(x) * pw;
    let py = |y: f64| TOP + (1.0 - ya.frac(y)) * ph;
    let (xlabel, ylabel) = match kind {
        PlotKind::LossCurve => ("step", "loss"),
        PlotKind::ErrorVsNfe => ("NFE", if log_y { "error (log scale)" } else { "error" }),
        PlotKind::Scatter2d => ("x", "y"),
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for (i, t) in xa.ticks().into_iter().enumerate() {
        let x = LEFT + pw * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#,
            TOP + ph,
            TOP + ph + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            tick_label(t)
        );
    }
    for (i, t) in ya.ticks().into_iter().enumerate() {
        let y = TOP + ph - ph * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#,
            LEFT - 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 8.0,
            y + 4.0,
            tick_label(t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{ylabel}</text>"#,
        TOP + ph / 2.0
    );

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<g class="series" data-label="{}">"#,
            escape(&s.label)
        );
        if kind == PlotKind::Scatter2d {
            for &(x, y) in &s.points {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{color}" fill-opacity="0.6"/>"#,
                    px(x),
                    py(y)
                );
            }
        } else {
            let coords: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                coords.join(" ")
            );
            if kind == PlotKind::ErrorVsNfe {
                for &(x, y) in &s.points {
                    let _ = writeln!(
                        svg,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                        px(x),
                        py(y)
                    );
                }
            }
        }
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = W - RIGHT + 14.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{}" width="12" height="12" fill="{color}"/>"#,
            ly - 9.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}">{}</text>"#,
            lx + 18.0,
            escape(&s.label)
        );
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
