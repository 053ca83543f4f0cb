//! Observables extracted from traces: wavefronts and their slopes, idle-wave
//! edges, domain activity, and per-step time breakdown.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Boundary;
use crate::trace::{IntervalKind, Trace};

/// A wait counts as caused by an injection when it exceeds this multiple of
/// the median wait.
pub const EDGE_THRESHOLD_FACTOR: f64 = 3.0;
/// Smallest wait ever considered attributable, seconds.
pub const EDGE_THRESHOLD_FLOOR: f64 = 1e-9;
/// Differences below this many seconds count as flat when segmenting.
pub const FLAT_TOLERANCE: f64 = 1e-9;
/// Share of the run treated as the developed wave.
pub const DEVELOPED_FRACTION: f64 = 0.2;
/// Minimum steps of an iteration-breakdown window.
pub const MIN_BREAKDOWN_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("step {step} was not completed by rank {rank}")]
    IncompleteStep { rank: usize, step: usize },
    #[error("empty time window [{start}, {end}]")]
    EmptyWindow { start: f64, end: f64 },
    #[error("domain {0} has no ranks")]
    UnknownDomain(usize),
    #[error("window of {have} steps is shorter than the required {need}")]
    WindowTooShort { have: usize, need: usize },
    #[error("need at least 3 ranks, trace has {0}")]
    TooFewRanks(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavefrontProfile {
    pub step: usize,
    pub times: Vec<f64>,
    pub amplitude: f64,
}

/// Per-rank wall-clock completion of the compute phase of `step`.
pub fn wavefront(trace: &Trace, step: usize) -> Result<WavefrontProfile, AnalysisError> {
    let times = (0..trace.num_ranks())
        .map(|r| {
            trace
                .compute_end(r, step)
                .ok_or(AnalysisError::IncompleteStep { rank: r, step })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WavefrontProfile {
        step,
        amplitude: amplitude(&times),
        times,
    })
}

fn amplitude(times: &[f64]) -> f64 {
    let max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    if times.is_empty() {
        0.0
    } else {
        max - min
    }
}

/// Skew of `step` across ranks in seconds.
pub fn desync_metric(trace: &Trace, step: usize) -> Result<f64, AnalysisError> {
    wavefront(trace, step).map(|w| w.amplitude)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// First and last rank of the segment, inclusive.
    pub segment: (usize, usize),
    /// Ranks per second, signed.
    pub slope: f64,
    pub r: f64,
}

/// Least-squares line of `y` on `x`; returns (slope, correlation), or `None`
/// when either variable is constant.
pub fn least_squares(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Some((sxy / sxx, r))
}

/// Splits the profile at changes of monotonicity and fits rank against time
/// on each piece. A direction change must persist for two consecutive
/// non-flat ranks; a single-rank reversal is absorbed into the current
/// segment. Flat stretches split the profile and are dropped.
pub fn fit_slopes(profile: &WavefrontProfile) -> Vec<SlopeFit> {
    const FLAT: i8 = 2;
    let t = &profile.times;
    if t.len() < 3 {
        log::warn!("profile of {} ranks is too short to fit", t.len());
        return Vec::new();
    }
    let signs: Vec<i8> = t
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            if d > FLAT_TOLERANCE {
                1
            } else if d < -FLAT_TOLERANCE {
                -1
            } else {
                0
            }
        })
        .collect();
    // a flat stretch of at least three ranks is a segment of its own
    let mut signs = signs;
    let mut i = 0;
    while i < signs.len() {
        let j = signs[i..].iter().position(|&x| x != 0).map_or(signs.len(), |k| i + k);
        if j - i >= 2 {
            signs[i..j].fill(FLAT);
        }
        i = j + 1;
    }
    let mut bounds = vec![0usize];
    let mut cur = signs.iter().copied().find(|&s| s != 0).unwrap_or(0);
    for i in 0..signs.len() {
        let s = signs[i];
        if s == 0 || s == cur {
            continue;
        }
        // flat steps neither confirm nor break a new direction
        let persists = signs[i + 1..].iter().find(|&&n| n != 0) == Some(&s);
        if persists {
            bounds.push(i);
            cur = s;
        }
    }
    bounds.push(t.len() - 1);
    let mut fits = Vec::new();
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b + 1 - a < 3 {
            log::warn!("dropping segment {a}..={b}: fewer than 3 ranks");
            continue;
        }
        let x = &t[a..=b];
        let y: Vec<f64> = (a..=b).map(|r| r as f64).collect();
        match least_squares(x, &y) {
            Some((slope, r)) => fits.push(SlopeFit {
                segment: (a, b),
                slope,
                r,
            }),
            None => log::debug!("dropping segment {a}..={b}: no time spread"),
        }
    }
    fits
}

/// Single line fitted through the wavefront of `step` on the ranks of one
/// domain. `None` when the domain is synchronized at that step.
pub fn domain_slope(trace: &Trace, step: usize, domain: usize) -> Result<Option<SlopeFit>, AnalysisError> {
    let ranks: Vec<usize> = trace.ranks_on(domain).collect();
    if ranks.is_empty() {
        return Err(AnalysisError::UnknownDomain(domain));
    }
    let profile = wavefront(trace, step)?;
    let x: Vec<f64> = ranks.iter().map(|&r| profile.times[r]).collect();
    let y: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min);
    if ranks.len() < 3 || spread <= FLAT_TOLERANCE {
        return Ok(None);
    }
    Ok(least_squares(&x, &y).map(|(slope, r)| SlopeFit {
        segment: (ranks[0], ranks[ranks.len() - 1]),
        slope,
        r,
    }))
}

/// Per-rank idle-wave edge times relative to an injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEdge {
    pub rank: usize,
    /// Signed distance from the injected rank along the shorter way round.
    pub offset: isize,
    pub leading: f64,
    pub trailing: f64,
    /// Total attributable wait.
    pub wait: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeBranch {
    /// +1 toward higher ranks, -1 toward lower ranks.
    pub direction: i8,
    pub leading: SlopeFit,
    pub trailing: SlopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeVelocity {
    pub threshold: f64,
    pub edges: Vec<RankEdge>,
    pub branches: Vec<EdgeBranch>,
    /// Offset (toward higher ranks, modulo P) where the branches meet.
    pub meeting_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl EdgeVelocity {
    pub fn branch(&self, direction: i8) -> Option<&EdgeBranch> {
        self.branches.iter().find(|b| b.direction == direction)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Locates the idle wave started by an injection on `rank` at `step` and
/// fits its leading and trailing edges in each direction of travel.
pub fn edge_velocity(
    trace: &Trace,
    rank: usize,
    step: usize,
    boundary: Boundary,
) -> Result<EdgeVelocity, AnalysisError> {
    let p = trace.num_ranks();
    if p < 3 {
        return Err(AnalysisError::TooFewRanks(p));
    }
    let t0 = trace
        .step_start(rank, step)
        .ok_or(AnalysisError::IncompleteStep { rank, step })?;
    let waits: Vec<f64> = trace
        .ranks
        .iter()
        .flatten()
        .filter(|i| i.kind == IntervalKind::Wait)
        .map(|i| i.duration())
        .collect();
    let threshold = (EDGE_THRESHOLD_FACTOR * median(waits)).max(EDGE_THRESHOLD_FLOOR);

    let mut edges = Vec::new();
    for r in 0..p {
        if r == rank {
            continue;
        }
        let ivs = trace.intervals(r);
        let first = ivs.iter().position(|i| {
            i.kind == IntervalKind::Wait && i.start >= t0 && i.duration() > threshold
        });
        let Some(first) = first else { continue };
        let mut last = first;
        let mut wait = ivs[first].duration();
        for (k, i) in ivs.iter().enumerate().skip(first + 1) {
            if i.kind != IntervalKind::Wait {
                continue;
            }
            if i.duration() > threshold && i.step == ivs[last].step + 1 {
                last = k;
                wait += i.duration();
            } else {
                break;
            }
        }
        let up = (r + p - rank) % p;
        let offset = match boundary {
            Boundary::Periodic if up > p / 2 => up as isize - p as isize,
            Boundary::Periodic => up as isize,
            Boundary::Open => r as isize - rank as isize,
        };
        edges.push(RankEdge {
            rank: r,
            offset,
            leading: ivs[first].start,
            trailing: ivs[last].end,
            wait,
        });
    }
    if edges.is_empty() {
        return Ok(EdgeVelocity {
            threshold,
            edges,
            branches: Vec::new(),
            meeting_offset: None,
            diagnostic: Some(format!(
                "no wait above {threshold:.3e} s after the injection; the wave has decayed"
            )),
        });
    }

    let reach = (p - 1) / 2;
    let mut branches = Vec::new();
    for direction in [1i8, -1] {
        let sel: Vec<&RankEdge> = edges
            .iter()
            .filter(|e| {
                let o = e.offset * direction as isize;
                o >= 1 && o as usize <= reach
            })
            .collect();
        if sel.len() < 3 {
            continue;
        }
        let y: Vec<f64> = sel.iter().map(|e| e.offset as f64).collect();
        let lead: Vec<f64> = sel.iter().map(|e| e.leading).collect();
        let trail: Vec<f64> = sel.iter().map(|e| e.trailing).collect();
        let lo = sel.iter().map(|e| e.rank).min().expect("non-empty");
        let hi = sel.iter().map(|e| e.rank).max().expect("non-empty");
        let fit = |x: &[f64]| {
            least_squares(x, &y).map(|(slope, r)| SlopeFit {
                segment: (lo, hi),
                slope,
                r,
            })
        };
        if let (Some(leading), Some(trailing)) = (fit(&lead), fit(&trail)) {
            branches.push(EdgeBranch {
                direction,
                leading,
                trailing,
            });
        }
    }

    let latest = edges.iter().map(|e| e.leading).fold(f64::NEG_INFINITY, f64::max);
    let far: Vec<f64> = edges
        .iter()
        .filter(|e| latest - e.leading <= FLAT_TOLERANCE)
        .map(|e| ((e.rank + p - rank) % p) as f64)
        .collect();
    let meeting_offset = match boundary {
        Boundary::Periodic => Some(far.iter().sum::<f64>() / far.len() as f64),
        Boundary::Open => None,
    };
    Ok(EdgeVelocity {
        threshold,
        edges,
        branches,
        meeting_offset,
        diagnostic: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

/// Time-weighted statistics of how many ranks of `domain` are in a compute
/// interval during `[start, end]`.
pub fn activity_stats(
    trace: &Trace,
    domain: usize,
    window: (f64, f64),
) -> Result<ActivityStats, AnalysisError> {
    let (start, end) = window;
    if !(end > start) {
        return Err(AnalysisError::EmptyWindow { start, end });
    }
    let ranks: Vec<usize> = trace.ranks_on(domain).collect();
    if ranks.is_empty() {
        return Err(AnalysisError::UnknownDomain(domain));
    }
    let mut changes: Vec<(f64, i32)> = Vec::new();
    for &r in &ranks {
        for i in trace.intervals(r) {
            if i.kind != IntervalKind::Compute {
                continue;
            }
            let (a, b) = (i.start.max(start), i.end.min(end));
            if b > a {
                changes.push((a, 1));
                changes.push((b, -1));
            }
        }
    }
    changes.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut level = 0i32;
    let mut t = start;
    let mut area = 0.0;
    let (mut min, mut max) = (usize::MAX, 0usize);
    let mut k = 0;
    while k < changes.len() {
        let at = changes[k].0;
        if at > t {
            area += level as f64 * (at - t);
            min = min.min(level as usize);
            max = max.max(level as usize);
            t = at;
        }
        while k < changes.len() && changes[k].0 == at {
            level += changes[k].1;
            k += 1;
        }
    }
    if end > t {
        area += level as f64 * (end - t);
        min = min.min(level as usize);
        max = max.max(level as usize);
    }
    Ok(ActivityStats {
        mean: area / (end - start),
        min,
        max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationBreakdown {
    pub compute: f64,
    pub wait: f64,
    pub total: f64,
}

/// Mean compute, wait, and total seconds per step over all ranks for the
/// steps in `steps`.
pub fn iteration_breakdown(trace: &Trace, steps: Range<usize>) -> Result<IterationBreakdown, AnalysisError> {
    let have = steps.len();
    if have < MIN_BREAKDOWN_STEPS {
        return Err(AnalysisError::WindowTooShort {
            have,
            need: MIN_BREAKDOWN_STEPS,
        });
    }
    let (mut compute, mut wait, mut total) = (0.0, 0.0, 0.0);
    for r in 0..trace.num_ranks() {
        let ivs = trace.intervals(r);
        let lo = ivs.partition_point(|i| i.step < steps.start);
        let hi = ivs.partition_point(|i| i.step < steps.end);
        if hi == lo || ivs[hi - 1].step + 1 < steps.end {
            return Err(AnalysisError::IncompleteStep {
                rank: r,
                step: steps.end - 1,
            });
        }
        for i in &ivs[lo..hi] {
            match i.kind {
                IntervalKind::Compute => compute += i.duration(),
                IntervalKind::Wait => wait += i.duration(),
                IntervalKind::IdleInjected => {}
            }
        }
        total += ivs[hi - 1].end - ivs[lo].start;
    }
    let n = (trace.num_ranks() * have) as f64;
    Ok(IterationBreakdown {
        compute: compute / n,
        wait: wait / n,
        total: total / n,
    })
}

/// The last `DEVELOPED_FRACTION` of the steps (at least one).
pub fn developed_steps(steps: usize) -> Range<usize> {
    let n = ((steps as f64 * DEVELOPED_FRACTION).round() as usize).clamp(1, steps.max(1));
    steps - n..steps
}

/// Wall-clock window during which every rank works on one of `steps`; falls
/// back to the union when the ranks are skewed by more than the window.
pub fn time_window(trace: &Trace, steps: Range<usize>) -> Result<(f64, f64), AnalysisError> {
    let (mut lo_max, mut lo_min) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut hi_min, mut hi_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..trace.num_ranks() {
        let a = trace
            .step_start(r, steps.start)
            .ok_or(AnalysisError::IncompleteStep { rank: r, step: steps.start })?;
        let b = trace
            .step_end(r, steps.end - 1)
            .ok_or(AnalysisError::IncompleteStep { rank: r, step: steps.end - 1 })?;
        lo_max = lo_max.max(a);
        lo_min = lo_min.min(a);
        hi_min = hi_min.min(b);
        hi_max = hi_max.max(b);
    }
    if hi_min > lo_max {
        Ok((lo_max, hi_min))
    } else {
        Ok((lo_min, hi_max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainActivity {
    pub domain: usize,
    #[serde(flatten)]
    pub stats: ActivityStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesyncSample {
    pub step: usize,
    pub amplitude: f64,
}

/// Summary of one trace, written next to it by `run` and reproduced by
/// `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub ranks: usize,
    pub steps: usize,
    pub makespan: f64,
    pub developed_steps: (usize, usize),
    pub developed_window: (f64, f64),
    pub wavefront: WavefrontProfile,
    pub slopes: Vec<SlopeFit>,
    pub desync: Vec<DesyncSample>,
    pub activity: Vec<DomainActivity>,
    pub breakdown_initial: Option<IterationBreakdown>,
    pub breakdown_developed: Option<IterationBreakdown>,
    pub edges: Option<EdgeVelocity>,
}

/// Maximum number of points in the desync series of a report.
pub const DESYNC_SAMPLES: usize = 200;

/// Computes the standard report. `wavefront_step` defaults to the last step.
pub fn analyze(trace: &Trace, wavefront_step: Option<usize>) -> Result<AnalysisReport, AnalysisError> {
    let steps = trace.steps();
    if steps == 0 {
        return Err(AnalysisError::IncompleteStep { rank: 0, step: 0 });
    }
    let dev = developed_steps(steps);
    let window = time_window(trace, dev.clone())?;
    let wf = wavefront(trace, wavefront_step.unwrap_or(steps - 1))?;
    let slopes = if trace.num_ranks() >= 3 { fit_slopes(&wf) } else { Vec::new() };
    let stride = steps.div_ceil(DESYNC_SAMPLES).max(1);
    let desync = (0..steps)
        .step_by(stride)
        .chain(std::iter::once(steps - 1))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|s| desync_metric(trace, s).map(|amplitude| DesyncSample { step: s, amplitude }))
        .collect::<Result<Vec<_>, _>>()?;
    let activity = (0..trace.num_domains())
        .filter(|&d| trace.ranks_on(d).next().is_some())
        .map(|d| activity_stats(trace, d, window).map(|stats| DomainActivity { domain: d, stats }))
        .collect::<Result<Vec<_>, _>>()?;
    let head = steps.div_ceil(10).max(MIN_BREAKDOWN_STEPS).min(steps);
    let breakdown_initial = iteration_breakdown(trace, 0..head).ok();
    let breakdown_developed = iteration_breakdown(trace, dev.clone()).ok();
    let edges = match trace.config.as_ref() {
        Some(cfg) if cfg.inject.len() == 1 && trace.num_ranks() >= 3 => {
            let inj = &cfg.inject[0];
            Some(edge_velocity(trace, inj.rank, inj.step, cfg.comm.pattern.boundary)?)
        }
        _ => None,
    };
    Ok(AnalysisReport {
        ranks: trace.num_ranks(),
        steps,
        makespan: trace.makespan(),
        developed_steps: (dev.start, dev.end),
        developed_window: window,
        wavefront: wf,
        slopes,
        desync,
        activity,
        breakdown_initial,
        breakdown_developed,
        edges,
    })
}
