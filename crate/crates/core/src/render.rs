//! SVG timelines: one lane per rank, rank 0 on top, time to the right.

use std::fmt::Write as _;

use crate::analysis::wavefront;
use crate::trace::{IntervalKind, Trace};

pub const COMPUTE_FILL: &str = "#d6ebf7";
pub const WAIT_FILL: &str = "#d62728";
pub const INJECTED_FILL: &str = "#08306b";

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    /// Width of the plot area in pixels.
    pub width: f64,
    pub lane_height: f64,
    /// Restrict the plot to `[start, end]` seconds.
    pub time_window: Option<(f64, f64)>,
    /// Restrict the plot to intervals of these steps.
    pub step_window: Option<(usize, usize)>,
    /// Overlay the wavefront of this step.
    pub wavefront_step: Option<usize>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            width: 1200.0,
            lane_height: 6.0,
            time_window: None,
            step_window: None,
            wavefront_step: None,
        }
    }
}

const MARGIN_LEFT: f64 = 48.0;
const MARGIN_TOP: f64 = 12.0;
const MARGIN_BOTTOM: f64 = 28.0;
const MARGIN_RIGHT: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub rank: usize,
    pub kind: IntervalKind,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Geometry of a rendered timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub t0: f64,
    pub t1: f64,
    pub rects: Vec<Rect>,
    /// y coordinates of the domain separators.
    pub separators: Vec<f64>,
    /// Wavefront polyline, one point per rank.
    pub wavefront: Vec<(f64, f64)>,
    pub width: f64,
    pub height: f64,
}

fn fill(kind: IntervalKind) -> &'static str {
    match kind {
        IntervalKind::Compute => COMPUTE_FILL,
        IntervalKind::Wait => WAIT_FILL,
        IntervalKind::IdleInjected => INJECTED_FILL,
    }
}

pub fn layout(trace: &Trace, opts: &RenderOptions) -> Layout {
    let in_steps = |s: usize| opts.step_window.is_none_or(|(a, b)| s >= a && s <= b);
    let (t0, t1) = opts.time_window.unwrap_or_else(|| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in trace.ranks.iter().flatten().filter(|i| in_steps(i.step)) {
            lo = lo.min(i.start);
            hi = hi.max(i.end);
        }
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    });
    let span = if t1 > t0 { t1 - t0 } else { 1.0 };
    let sx = opts.width / span;
    let x_of = |t: f64| MARGIN_LEFT + (t - t0) * sx;
    let lane = opts.lane_height;
    let mut rects = Vec::new();
    for (r, ivs) in trace.ranks.iter().enumerate() {
        for i in ivs {
            if !in_steps(i.step) || i.end <= i.start || i.end <= t0 || i.start >= t1 {
                continue;
            }
            let a = x_of(i.start.max(t0));
            let b = x_of(i.end.min(t1));
            rects.push(Rect {
                rank: r,
                kind: i.kind,
                x: a,
                y: MARGIN_TOP + r as f64 * lane,
                w: b - a,
                h: lane,
            });
        }
    }
    let separators = (1..trace.num_ranks())
        .filter(|&r| trace.rank_domain[r] != trace.rank_domain[r - 1])
        .map(|r| MARGIN_TOP + r as f64 * lane)
        .collect();
    let wavefront = opts
        .wavefront_step
        .and_then(|s| wavefront(trace, s).ok())
        .map(|w| {
            w.times
                .iter()
                .enumerate()
                .map(|(r, &t)| (x_of(t), MARGIN_TOP + (r as f64 + 0.5) * lane))
                .collect()
        })
        .unwrap_or_default();
    Layout {
        t0,
        t1,
        rects,
        separators,
        wavefront,
        width: MARGIN_LEFT + opts.width + MARGIN_RIGHT,
        height: MARGIN_TOP + trace.num_ranks() as f64 * lane + MARGIN_BOTTOM,
    }
}

/// Renders the timeline as a standalone SVG document.
pub fn render_timeline(trace: &Trace, opts: &RenderOptions) -> String {
    let l = layout(trace, opts);
    let mut s = String::new();
    let plot_bottom = l.height - MARGIN_BOTTOM;
    let x_end = MARGIN_LEFT + opts.width;
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.1}\" height=\"{:.1}\" viewBox=\"0 0 {:.1} {:.1}\" font-family=\"sans-serif\" font-size=\"10\">",
        l.width, l.height, l.width, l.height
    )
    .unwrap();
    writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{:.1}\" height=\"{:.1}\" fill=\"white\"/>", l.width, l.height).unwrap();
    writeln!(s, "<g shape-rendering=\"crispEdges\">").unwrap();
    for r in &l.rects {
        writeln!(
            s,
            "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>",
            r.x,
            r.y,
            r.w,
            r.h,
            fill(r.kind)
        )
        .unwrap();
    }
    writeln!(s, "</g>").unwrap();
    for y in &l.separators {
        writeln!(
            s,
            "<line x1=\"{MARGIN_LEFT:.1}\" y1=\"{y:.3}\" x2=\"{x_end:.1}\" y2=\"{y:.3}\" stroke=\"black\" stroke-width=\"0.8\" stroke-dasharray=\"2,2\"/>"
        )
        .unwrap();
    }
    if !l.wavefront.is_empty() {
        let pts: Vec<String> = l.wavefront.iter().map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
        writeln!(
            s,
            "<polyline class=\"wavefront\" points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>",
            pts.join(" ")
        )
        .unwrap();
    }
    // axes
    writeln!(
        s,
        "<line x1=\"{MARGIN_LEFT:.1}\" y1=\"{plot_bottom:.3}\" x2=\"{x_end:.1}\" y2=\"{plot_bottom:.3}\" stroke=\"black\"/>"
    )
    .unwrap();
    for k in 0..=5 {
        let t = l.t0 + (l.t1 - l.t0) * k as f64 / 5.0;
        let x = MARGIN_LEFT + opts.width * k as f64 / 5.0;
        writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            plot_bottom + 14.0,
            tick_label(t)
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"4\" y=\"{:.1}\">rank 0</text>",
        MARGIN_TOP + opts.lane_height
    )
    .unwrap();
    writeln!(s, "</svg>").unwrap();
    s
}

fn tick_label(t: f64) -> String {
    format!("{:.4} s", t)
}
