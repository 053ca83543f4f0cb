//! Processor-sharing bandwidth drain of one contention domain.

use std::collections::BTreeMap;

use crate::model::BandwidthCurve;

use super::{SimError, TIME_TOLERANCE};

/// Relative slack when deciding that a phase has drained its volume.
pub const DRAIN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Drainer {
    pub rank: usize,
    pub threads: usize,
    pub target: f64,
    pub remaining: f64,
}

impl Drainer {
    fn tolerance(&self) -> f64 {
        DRAIN_TOLERANCE * self.target
    }
}

/// Computing processes of one domain and the bandwidth they share.
#[derive(Debug, Clone)]
pub struct DomainDrainState {
    pub id: usize,
    curve: BandwidthCurve,
    pub last_update: f64,
    /// Sorted by rank.
    members: Vec<Drainer>,
    /// Transient memory traffic of intra-node messages, bytes/s, keyed by
    /// message id.
    comm_demand: BTreeMap<usize, f64>,
    /// Bumped on every change that invalidates completion projections.
    pub generation: u64,
}

impl DomainDrainState {
    pub fn new(id: usize, curve: BandwidthCurve) -> Self {
        Self {
            id,
            curve,
            last_update: 0.0,
            members: Vec::new(),
            comm_demand: BTreeMap::new(),
            generation: 0,
        }
    }

    /// Sum of thread counts of the computing processes.
    pub fn active_cores(&self) -> usize {
        self.members.iter().map(|m| m.threads).sum()
    }

    pub fn members(&self) -> &[Drainer] {
        &self.members
    }

    pub fn comm_demand(&self) -> f64 {
        self.comm_demand.values().sum()
    }

    /// Bandwidth available to the application: b(A), reduced when message
    /// traffic leaves less than that of the domain's peak.
    pub fn aggregate_rate(&self) -> f64 {
        let a = self.active_cores();
        if a == 0 {
            return 0.0;
        }
        let b = self.curve.at(a.min(self.curve.cores()));
        let left = (self.curve.peak() - self.comm_demand()).max(0.0);
        b.min(left)
    }

    /// Drain rate of a process with `threads` threads under the current
    /// activity.
    pub fn rate(&self, threads: usize) -> f64 {
        let a = self.active_cores();
        if a == 0 {
            return 0.0;
        }
        self.aggregate_rate() * threads as f64 / a as f64
    }

    /// Drains every member for the time since the last update.
    pub fn advance(&mut self, now: f64) -> Result<(), SimError> {
        let dt = now - self.last_update;
        if dt < 0.0 {
            return Err(SimError::Internal(format!(
                "domain {} advanced backwards from {} to {now}",
                self.id, self.last_update
            )));
        }
        if dt > 0.0 && !self.members.is_empty() {
            let agg = self.aggregate_rate();
            let a = self.active_cores() as f64;
            for m in &mut self.members {
                m.remaining -= agg * m.threads as f64 / a * dt;
                if m.remaining < -m.tolerance() {
                    return Err(SimError::Internal(format!(
                        "rank {} overdrained by {} bytes on domain {}",
                        m.rank, -m.remaining, self.id
                    )));
                }
            }
        }
        self.last_update = now;
        Ok(())
    }

    /// Adds a computing process. Call [`advance`](Self::advance) first.
    pub fn join(&mut self, rank: usize, threads: usize, bytes: f64) {
        let pos = self.members.partition_point(|m| m.rank < rank);
        debug_assert!(self.members.get(pos).is_none_or(|m| m.rank != rank));
        self.members.insert(
            pos,
            Drainer {
                rank,
                threads,
                target: bytes,
                remaining: bytes,
            },
        );
        self.generation += 1;
    }

    /// Removes and returns the members whose volume is drained (or would be
    /// within [`TIME_TOLERANCE`]), in rank order. Call
    /// [`advance`](Self::advance) first.
    pub fn take_finished(&mut self) -> Vec<Drainer> {
        let agg = self.aggregate_rate();
        let a = self.active_cores().max(1) as f64;
        let (done, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.members)
            .into_iter()
            .partition(|m| {
                let slack = agg * m.threads as f64 / a * TIME_TOLERANCE;
                m.remaining <= m.tolerance().max(slack)
            });
        self.members = keep;
        if !done.is_empty() {
            self.generation += 1;
        }
        done
    }

    pub fn add_demand(&mut self, message: usize, rate: f64) {
        *self.comm_demand.entry(message).or_insert(0.0) += rate;
        self.generation += 1;
    }

    pub fn remove_demand(&mut self, message: usize) {
        if self.comm_demand.remove(&message).is_some() {
            self.generation += 1;
        }
    }

    /// Earliest projected completion `(rank, time)` assuming the current
    /// activity persists; ties go to the lowest rank.
    pub fn next_completion(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for m in &self.members {
            let rate = self.rate(m.threads);
            if rate <= 0.0 {
                continue;
            }
            let t = self.last_update + m.remaining.max(0.0) / rate;
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((m.rank, t));
            }
        }
        best
    }
}
