//! Per-rank timelines produced by the engine.

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Compute,
    Wait,
    IdleInjected,
}

impl IntervalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IntervalKind::Compute => "compute",
            IntervalKind::Wait => "wait",
            IntervalKind::IdleInjected => "idle_injected",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "compute" => Some(IntervalKind::Compute),
            "wait" => Some(IntervalKind::Wait),
            "idle_injected" => Some(IntervalKind::IdleInjected),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub kind: IntervalKind,
    pub step: usize,
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Simulation output: ordered intervals per rank plus the placement map and
/// the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub config: Option<SimConfig>,
    pub rank_domain: Vec<usize>,
    pub ranks: Vec<Vec<Interval>>,
}

impl Trace {
    pub fn new(rank_domain: Vec<usize>, ranks: Vec<Vec<Interval>>, config: Option<SimConfig>) -> Self {
        assert_eq!(rank_domain.len(), ranks.len(), "one domain entry per rank");
        Self {
            config,
            rank_domain,
            ranks,
        }
    }

    pub fn num_ranks(&self) -> usize {
        self.ranks.len()
    }

    pub fn num_domains(&self) -> usize {
        self.rank_domain.iter().max().map_or(0, |d| d + 1)
    }

    pub fn ranks_on(&self, domain: usize) -> impl Iterator<Item = usize> + '_ {
        self.rank_domain
            .iter()
            .enumerate()
            .filter(move |(_, &d)| d == domain)
            .map(|(r, _)| r)
    }

    pub fn intervals(&self, rank: usize) -> &[Interval] {
        &self.ranks[rank]
    }

    pub fn finish_time(&self, rank: usize) -> f64 {
        self.ranks[rank].last().map_or(0.0, |i| i.end)
    }

    pub fn makespan(&self) -> f64 {
        (0..self.num_ranks())
            .map(|r| self.finish_time(r))
            .fold(0.0, f64::max)
    }

    /// Number of steps every rank completed.
    pub fn steps(&self) -> usize {
        self.ranks
            .iter()
            .map(|iv| iv.last().map_or(0, |i| i.step + 1))
            .min()
            .unwrap_or(0)
    }

    /// End of the compute interval of `step` on `rank`.
    pub fn compute_end(&self, rank: usize, step: usize) -> Option<f64> {
        self.ranks[rank]
            .iter()
            .find(|i| i.step == step && i.kind == IntervalKind::Compute)
            .map(|i| i.end)
    }

    /// End of the last interval tagged `step` on `rank`, i.e. when the rank
    /// left that step.
    pub fn step_end(&self, rank: usize, step: usize) -> Option<f64> {
        self.ranks[rank]
            .iter()
            .rev()
            .find(|i| i.step == step)
            .map(|i| i.end)
    }

    /// Start of the first interval tagged `step` on `rank`.
    pub fn step_start(&self, rank: usize, step: usize) -> Option<f64> {
        self.ranks[rank].iter().find(|i| i.step == step).map(|i| i.start)
    }

    /// Checks the partition invariants: per rank, intervals start at 0, are
    /// gap-free and ordered, and step tags never decrease.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (r, ivs) in self.ranks.iter().enumerate() {
            let mut t = 0.0;
            let mut step = 0;
            for (k, i) in ivs.iter().enumerate() {
                if !(i.start.is_finite() && i.end.is_finite()) {
                    return Err(format!("rank {r} interval {k}: non-finite time"));
                }
                if i.start != t {
                    return Err(format!(
                        "rank {r} interval {k}: starts at {} but previous ended at {t}",
                        i.start
                    ));
                }
                if i.end < i.start {
                    return Err(format!("rank {r} interval {k}: negative length"));
                }
                if i.step < step {
                    return Err(format!("rank {r} interval {k}: step tag decreased"));
                }
                t = i.end;
                step = i.step;
            }
        }
        Ok(())
    }

    /// Same trace with every time shifted by `dt`.
    pub fn shifted(&self, dt: f64) -> Self {
        let mut out = self.clone();
        for i in out.ranks.iter_mut().flatten() {
            i.start += dt;
            i.end += dt;
        }
        out
    }

    /// Same trace with every time rounded to `digits` significant digits.
    pub fn quantized(&self, digits: usize) -> Self {
        let mut out = self.clone();
        for i in out.ranks.iter_mut().flatten() {
            i.start = round_sig(i.start, digits);
            i.end = round_sig(i.end, digits);
        }
        out
    }
}

/// Rounds through the decimal representation with `digits` significant
/// digits; matches what the exporters write.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x)
        .parse()
        .expect("formatted float parses")
}
