//! Deterministic discrete-event engine.
//!
//! Every rank loops over `steps` iterations of compute, post the neighbor
//! exchange, and wait for it. Memory-bound compute phases drain their volume
//! from the rank's contention domain under processor sharing; core-bound
//! phases take a fixed time. All ranks start together at t = 0.

pub mod domain;
pub mod event;

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Experiment, SimConfig};
use crate::model::WorkloadKind;
use crate::mpi::{
    post_exchange, Direction, Matcher, Message, MessageRequest, NeighborPlan, Protocol, RequestState,
};
use crate::perturbation::{perturb_duration, InjectionSchedule, NoiseKind, PerturbationError};
use crate::trace::{Interval, IntervalKind, Trace};

use domain::DomainDrainState;
use event::{EventKind, EventQueue};

/// Slack used when comparing simulated times.
pub const TIME_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error("deadlock at t = {time} s; blocked: {}", describe_blocked(.blocked))]
    Deadlock { time: f64, blocked: Vec<BlockedRank> },
    #[error("internal consistency error: {0}")]
    Internal(String),
}

/// A rank that cannot make progress, with its unfinished requests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockedRank {
    pub rank: usize,
    pub step: usize,
    pub pending: Vec<String>,
}

fn describe_blocked(blocked: &[BlockedRank]) -> String {
    blocked
        .iter()
        .map(|b| format!("rank {} step {} waiting on [{}]", b.rank, b.step, b.pending.join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Computing,
    InCommWait,
    IdleInjected,
    Finished,
}

/// Volume drained by one compute phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseRecord {
    pub rank: usize,
    pub step: usize,
    pub target: f64,
    pub drained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageRecord {
    pub src: usize,
    pub dst: usize,
    pub step: usize,
    pub seq: u64,
    pub bytes: u64,
    pub protocol: Protocol,
    pub send_post: f64,
    pub recv_post: f64,
    pub start: f64,
    pub complete: f64,
}

/// Detailed bookkeeping of one run, for verification.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunLog {
    pub phases: Vec<PhaseRecord>,
    pub messages: Vec<MessageRecord>,
    /// Message bytes charged to each domain's memory traffic.
    pub membw_charged_bytes: Vec<f64>,
    pub events: u64,
}

/// A configured simulation, ready to run any number of times.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: Option<SimConfig>,
    exp: Experiment,
    plan: NeighborPlan,
}

impl Simulation {
    pub fn new(config: &SimConfig) -> Result<Self, SimError> {
        let config = config.normalized()?;
        let exp = config.experiment()?;
        let mut sim = Self::from_experiment(exp);
        sim.config = Some(config);
        Ok(sim)
    }

    pub fn from_experiment(exp: Experiment) -> Self {
        let plan = NeighborPlan::from_pattern(&exp.pattern, exp.ranks());
        Self {
            config: None,
            exp,
            plan,
        }
    }

    /// Replaces the neighbor plan derived from the pattern.
    pub fn with_plan(mut self, plan: NeighborPlan) -> Self {
        assert_eq!(plan.ranks(), self.exp.ranks(), "plan must cover every rank");
        self.plan = plan;
        self
    }

    pub fn experiment(&self) -> &Experiment {
        &self.exp
    }

    pub fn config(&self) -> Option<&SimConfig> {
        self.config.as_ref()
    }

    pub fn run(&self) -> Result<Trace, SimError> {
        Runner::new(self, false)?.run().map(|(t, _)| t)
    }

    /// Runs and also returns per-phase and per-message records.
    pub fn run_logged(&self) -> Result<(Trace, RunLog), SimError> {
        Runner::new(self, true)?.run()
    }
}

/// Simulates `config` and returns the trace.
pub fn run(config: &SimConfig) -> Result<Trace, SimError> {
    Simulation::new(config)?.run()
}

#[derive(Debug)]
struct Proc {
    phase: Phase,
    step: usize,
    domain: usize,
    threads: usize,
    phase_start: f64,
    pending: BTreeSet<usize>,
    intervals: Vec<Interval>,
}

/// Relay gate of one (rank, step) send group: data may only leave once every
/// receiver of the group has posted.
#[derive(Debug, Default)]
struct Gate {
    total: usize,
    matched: usize,
    waiting: Vec<usize>,
}

struct Runner<'a> {
    exp: &'a Experiment,
    plan: &'a NeighborPlan,
    config: Option<SimConfig>,
    schedule: InjectionSchedule,
    /// Per-rank drain rate in lockstep, for additive noise on volumes.
    lockstep_rate: Vec<f64>,
    queue: EventQueue,
    domains: Vec<DomainDrainState>,
    projected: Vec<Option<u64>>,
    procs: Vec<Proc>,
    requests: HashMap<usize, MessageRequest>,
    messages: HashMap<usize, Message>,
    next_message: usize,
    next_request: usize,
    matcher: Matcher,
    gates: HashMap<(usize, usize), Gate>,
    record: bool,
    log: RunLog,
    now: f64,
}

impl<'a> Runner<'a> {
    fn new(sim: &'a Simulation, record: bool) -> Result<Self, SimError> {
        let exp = &sim.exp;
        let ranks = exp.ranks();
        let schedule = InjectionSchedule::build(&exp.injections, ranks, exp.workload.steps, |r| {
            exp.lockstep_phase(r)
        })?;
        let lockstep_rate = (0..ranks)
            .map(|r| exp.workload.work_per_step() / exp.lockstep_phase(r))
            .collect();
        let domains: Vec<_> = exp
            .domains
            .iter()
            .map(|d| DomainDrainState::new(d.id, d.curve.clone()))
            .collect();
        let procs = exp
            .processes
            .iter()
            .map(|p| Proc {
                phase: Phase::Computing,
                step: 0,
                domain: p.domain,
                threads: p.threads,
                phase_start: 0.0,
                pending: BTreeSet::new(),
                intervals: Vec::with_capacity(3 * exp.workload.steps),
            })
            .collect();
        Ok(Self {
            exp,
            plan: &sim.plan,
            config: sim.config.clone(),
            schedule,
            lockstep_rate,
            queue: EventQueue::default(),
            projected: vec![None; domains.len()],
            log: RunLog {
                membw_charged_bytes: vec![0.0; domains.len()],
                ..RunLog::default()
            },
            domains,
            procs,
            requests: HashMap::new(),
            messages: HashMap::new(),
            next_message: 0,
            next_request: 0,
            matcher: Matcher::default(),
            gates: HashMap::new(),
            record,
            now: 0.0,
        })
    }

    fn run(mut self) -> Result<(Trace, RunLog), SimError> {
        for r in 0..self.procs.len() {
            self.begin_step(r, 0)?;
        }
        self.flush_projections();
        while let Some(ev) = self.queue.pop() {
            if ev.time < self.now - TIME_TOLERANCE {
                return Err(SimError::Internal(format!(
                    "event at {} popped after {}",
                    ev.time, self.now
                )));
            }
            self.now = self.now.max(ev.time);
            self.log.events += 1;
            match ev.kind {
                EventKind::InjectionStart => self.on_injection_start(ev.rank)?,
                EventKind::InjectionEnd => self.on_injection_end(ev.rank)?,
                EventKind::ComputeDone { generation } => self.on_compute_done(ev.rank, generation)?,
                EventKind::MessageReady { message } => self.on_message_ready(message)?,
                EventKind::RequestComplete => self.on_request_complete(ev.rank)?,
            }
            self.flush_projections();
        }
        let blocked: Vec<BlockedRank> = self
            .procs
            .iter()
            .enumerate()
            .filter(|(_, p)| p.phase != Phase::Finished)
            .map(|(rank, p)| BlockedRank {
                rank,
                step: p.step,
                pending: p.pending.iter().map(|id| self.describe_request(*id)).collect(),
            })
            .collect();
        if !blocked.is_empty() {
            return Err(SimError::Deadlock {
                time: self.now,
                blocked,
            });
        }
        let rank_domain = self.procs.iter().map(|p| p.domain).collect();
        let ranks = self.procs.into_iter().map(|p| p.intervals).collect();
        let trace = Trace::new(rank_domain, ranks, self.config);
        Ok((trace, self.log))
    }

    fn describe_request(&self, id: usize) -> String {
        match self.requests.get(&id) {
            Some(r) => match r.direction {
                Direction::Send => format!("send to {} (step {})", r.dst_rank, r.step),
                Direction::Recv => format!("recv from {} (step {})", r.src_rank, r.step),
            },
            None => format!("request {id}"),
        }
    }

    fn memory_bound(&self) -> bool {
        self.exp.workload.is_memory_bound()
    }

    fn flush_projections(&mut self) {
        for (d, dom) in self.domains.iter().enumerate() {
            if self.projected[d] == Some(dom.generation) {
                continue;
            }
            self.projected[d] = Some(dom.generation);
            if let Some((rank, t)) = dom.next_completion() {
                self.queue.push(
                    t.max(self.now),
                    EventKind::ComputeDone {
                        generation: dom.generation,
                    },
                    rank,
                );
            }
        }
    }

    fn begin_step(&mut self, r: usize, step: usize) -> Result<(), SimError> {
        let p = &mut self.procs[r];
        p.step = step;
        p.phase_start = self.now;
        if self.schedule.apply_injection(r, step).is_some() {
            p.phase = Phase::IdleInjected;
            self.queue.push(self.now, EventKind::InjectionStart, r);
            Ok(())
        } else {
            self.start_compute(r)
        }
    }

    fn on_injection_start(&mut self, r: usize) -> Result<(), SimError> {
        let step = self.procs[r].step;
        let secs = self
            .schedule
            .apply_injection(r, step)
            .ok_or_else(|| SimError::Internal(format!("no injection for rank {r} step {step}")))?;
        self.procs[r].phase_start = self.now;
        self.queue.push(self.now + secs, EventKind::InjectionEnd, r);
        Ok(())
    }

    fn on_injection_end(&mut self, r: usize) -> Result<(), SimError> {
        let now = self.now;
        let p = &mut self.procs[r];
        p.intervals.push(Interval {
            kind: IntervalKind::IdleInjected,
            step: p.step,
            start: p.phase_start,
            end: now,
        });
        self.start_compute(r)
    }

    fn start_compute(&mut self, r: usize) -> Result<(), SimError> {
        let now = self.now;
        let noise = self.exp.noise;
        let p = &mut self.procs[r];
        p.phase = Phase::Computing;
        p.phase_start = now;
        let step = p.step;
        match self.exp.workload.kind {
            WorkloadKind::MemoryBound { volume_bytes } => {
                let bytes = match noise.kind {
                    NoiseKind::Off => volume_bytes,
                    NoiseKind::LognormalMultiplicative => volume_bytes * noise.factor(r, step),
                    NoiseKind::ExponentialAdditive => {
                        volume_bytes + noise.additive(r, step) * self.lockstep_rate[r]
                    }
                };
                let (d, threads) = (p.domain, p.threads);
                let dom = &mut self.domains[d];
                dom.advance(now)?;
                dom.join(r, threads, bytes);
            }
            WorkloadKind::CoreBound { seconds } => {
                let dur = perturb_duration(seconds, &noise, r, step);
                if self.record {
                    self.log.phases.push(PhaseRecord {
                        rank: r,
                        step,
                        target: dur,
                        drained: dur,
                    });
                }
                self.queue
                    .push(now + dur, EventKind::ComputeDone { generation: 0 }, r);
            }
        }
        Ok(())
    }

    fn on_compute_done(&mut self, r: usize, generation: u64) -> Result<(), SimError> {
        if !self.memory_bound() {
            return self.finish_compute(r);
        }
        let d = self.procs[r].domain;
        if self.domains[d].generation != generation {
            return Ok(());
        }
        let dom = &mut self.domains[d];
        dom.advance(self.now)?;
        let done = dom.take_finished();
        if done.is_empty() {
            // rounding left the projected rank a hair short; project again
            dom.generation += 1;
            return Ok(());
        }
        for m in done {
            if self.record {
                self.log.phases.push(PhaseRecord {
                    rank: m.rank,
                    step: self.procs[m.rank].step,
                    target: m.target,
                    drained: m.target - m.remaining,
                });
            }
            self.finish_compute(m.rank)?;
        }
        Ok(())
    }

    fn finish_compute(&mut self, r: usize) -> Result<(), SimError> {
        let now = self.now;
        let p = &mut self.procs[r];
        if p.phase != Phase::Computing {
            return Err(SimError::Internal(format!("rank {r} finished a phase it was not computing")));
        }
        p.intervals.push(Interval {
            kind: IntervalKind::Compute,
            step: p.step,
            start: p.phase_start,
            end: now,
        });
        let step = p.step;
        let reqs = post_exchange(self.plan, &self.exp.pattern, r, step, now, &mut self.next_request);
        if reqs.is_empty() {
            return self.step_done(r);
        }
        let p = &mut self.procs[r];
        p.phase = Phase::InCommWait;
        p.phase_start = now;
        p.pending = reqs.iter().map(|q| q.id).collect();

        let sends: Vec<&MessageRequest> = reqs.iter().filter(|q| q.direction == Direction::Send).collect();
        if self.exp.pattern.sigma == 2 && !sends.is_empty() {
            self.gates.insert(
                (r, step),
                Gate {
                    total: sends.len(),
                    ..Gate::default()
                },
            );
        }
        for q in &reqs {
            self.requests.insert(q.id, q.clone());
        }
        for q in reqs {
            match q.direction {
                Direction::Recv => {
                    if let Some(msg) = self.matcher.post_recv(q.src_rank, r, q.id, now) {
                        self.on_match(msg, q.id, now)?;
                    }
                }
                Direction::Send => {
                    let msg = self.next_message;
                    self.next_message += 1;
                    let (seq, waiting) = self.matcher.post_send(r, q.dst_rank, msg);
                    self.messages.insert(
                        msg,
                        Message {
                            src: r,
                            dst: q.dst_rank,
                            step,
                            seq,
                            bytes: q.bytes,
                            protocol: q.protocol,
                            send_req: q.id,
                            recv_req: None,
                            send_post: now,
                            recv_post: None,
                            start: None,
                            done: None,
                        },
                    );
                    if q.protocol == Protocol::Eager {
                        if self.exp.pattern.sigma == 1 {
                            self.start_transfer(msg)?;
                        }
                        self.complete_request(q.id);
                    }
                    if let Some((rid, rpost)) = waiting {
                        self.on_match(msg, rid, rpost)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn on_match(&mut self, msg: usize, recv_req: usize, recv_post: f64) -> Result<(), SimError> {
        let m = self.messages.get_mut(&msg).expect("message exists");
        m.recv_req = Some(recv_req);
        m.recv_post = Some(recv_post);
        let (src, step, protocol, send_req) = (m.src, m.step, m.protocol, m.send_req);
        let transferred = m.start.is_some();
        let arrived = m.done.is_some();
        for id in [send_req, recv_req] {
            if let Some(q) = self.requests.get_mut(&id) {
                if q.state == RequestState::Posted {
                    q.state = RequestState::Matched;
                }
            }
        }
        if self.exp.pattern.sigma == 2 {
            let gate = self.gates.get_mut(&(src, step)).expect("gate exists");
            gate.matched += 1;
            gate.waiting.push(msg);
            if gate.matched == gate.total {
                let gate = self.gates.remove(&(src, step)).expect("gate exists");
                for m in gate.waiting {
                    self.start_transfer(m)?;
                }
            }
            return Ok(());
        }
        match protocol {
            Protocol::Rendezvous => self.start_transfer(msg)?,
            Protocol::Eager => {
                debug_assert!(transferred);
                if arrived {
                    self.complete_request(recv_req);
                    self.retire_message(msg);
                }
            }
        }
        Ok(())
    }

    fn start_transfer(&mut self, msg: usize) -> Result<(), SimError> {
        let now = self.now;
        let cost = self.exp.cost;
        let m = self.messages.get_mut(&msg).expect("message exists");
        m.start = Some(now);
        let dur = cost.transfer_time(m.bytes);
        let (src, dst, bytes) = (m.src, m.dst, m.bytes);
        for id in [Some(m.send_req), m.recv_req].into_iter().flatten() {
            if let Some(q) = self.requests.get_mut(&id) {
                if q.state != RequestState::Complete {
                    q.state = RequestState::Transferring;
                }
            }
        }
        if self.memory_bound() && cost.membw_charge > 0.0 && bytes > 0 && dur > 0.0 {
            let (ds, dd) = (self.procs[src].domain, self.procs[dst].domain);
            if self.exp.domains[ds].node == self.exp.domains[dd].node {
                let rate = cost.membw_charge * bytes as f64 / dur;
                for d in [ds, dd] {
                    self.domains[d].advance(now)?;
                    self.domains[d].add_demand(msg, rate);
                    self.log.membw_charged_bytes[d] += cost.membw_charge * bytes as f64;
                }
            }
        }
        self.queue.push(now + dur, EventKind::MessageReady { message: msg }, dst);
        Ok(())
    }

    fn on_message_ready(&mut self, msg: usize) -> Result<(), SimError> {
        let now = self.now;
        let m = self.messages.get_mut(&msg).expect("message exists");
        m.done = Some(now);
        let (src, dst, protocol, send_req, recv_req) = (m.src, m.dst, m.protocol, m.send_req, m.recv_req);
        for d in [self.procs[src].domain, self.procs[dst].domain] {
            if self.domains[d].comm_demand() > 0.0 {
                self.domains[d].advance(now)?;
                self.domains[d].remove_demand(msg);
            }
        }
        match protocol {
            Protocol::Rendezvous => {
                self.complete_request(send_req);
                self.complete_request(recv_req.expect("rendezvous transfers are matched"));
                self.retire_message(msg);
            }
            Protocol::Eager => {
                if let Some(rid) = recv_req {
                    self.complete_request(rid);
                    self.retire_message(msg);
                }
            }
        }
        Ok(())
    }

    fn retire_message(&mut self, msg: usize) {
        let m = self.messages.remove(&msg).expect("message exists");
        if self.record {
            let complete = match m.protocol {
                Protocol::Eager => self.now,
                Protocol::Rendezvous => m.done.expect("finished"),
            };
            self.log.messages.push(MessageRecord {
                src: m.src,
                dst: m.dst,
                step: m.step,
                seq: m.seq,
                bytes: m.bytes,
                protocol: m.protocol,
                send_post: m.send_post,
                recv_post: m.recv_post.expect("matched"),
                start: m.start.expect("started"),
                complete,
            });
        }
    }

    fn complete_request(&mut self, id: usize) {
        let Some(mut q) = self.requests.remove(&id) else {
            return;
        };
        q.state = RequestState::Complete;
        let owner = match q.direction {
            Direction::Send => q.src_rank,
            Direction::Recv => q.dst_rank,
        };
        let p = &mut self.procs[owner];
        p.pending.remove(&id);
        if p.pending.is_empty() && p.phase == Phase::InCommWait {
            self.queue.push(self.now, EventKind::RequestComplete, owner);
        }
    }

    fn on_request_complete(&mut self, r: usize) -> Result<(), SimError> {
        let now = self.now;
        let p = &mut self.procs[r];
        if p.phase != Phase::InCommWait || !p.pending.is_empty() {
            return Err(SimError::Internal(format!("rank {r} woke up with requests pending")));
        }
        p.intervals.push(Interval {
            kind: IntervalKind::Wait,
            step: p.step,
            start: p.phase_start,
            end: now,
        });
        self.step_done(r)
    }

    fn step_done(&mut self, r: usize) -> Result<(), SimError> {
        let next = self.procs[r].step + 1;
        if next == self.exp.workload.steps {
            self.procs[r].phase = Phase::Finished;
            Ok(())
        } else {
            self.begin_step(r, next)
        }
    }
}
