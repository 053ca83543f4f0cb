//! Nonblocking point-to-point semantics: neighbor plans, protocol
//! selection, Hockney costs, and FIFO message matching.
//!
//! Timing rules:
//! - eager: the send request completes at post; the data leaves at the
//!   sender's post (or when the sender's relay gate opens, see
//!   [`CommPattern::sigma`]) and arrives `alpha + bytes/beta` later; the
//!   receive completes at `max(receive post, arrival)`.
//! - rendezvous: the transfer starts at `max(send post, receive post)` and
//!   both requests complete `alpha + bytes/beta` later.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::{Boundary, CommPattern};

/// Hockney cost `alpha + bytes / beta` plus the intra-node memory charge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommCostModel {
    /// Seconds per message.
    pub latency: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Fraction of message bytes charged to each endpoint domain's memory
    /// traffic for intra-node transfers.
    pub membw_charge: f64,
}

impl Default for CommCostModel {
    fn default() -> Self {
        Self {
            latency: 0.0,
            bandwidth: 1.0e10,
            membw_charge: 0.0,
        }
    }
}

impl CommCostModel {
    pub fn transfer_time(&self, bytes: u64) -> f64 {
        self.latency + bytes as f64 / self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Eager,
    Rendezvous,
}

pub fn select_protocol(bytes: u64, eager_threshold: u64) -> Protocol {
    if bytes < eager_threshold {
        Protocol::Eager
    } else {
        Protocol::Rendezvous
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Send,
    Recv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Posted,
    Matched,
    Transferring,
    Complete,
}

/// One side of a point-to-point message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRequest {
    pub id: usize,
    pub direction: Direction,
    pub src_rank: usize,
    pub dst_rank: usize,
    pub step: usize,
    pub bytes: u64,
    pub protocol: Protocol,
    pub posted_at: f64,
    pub state: RequestState,
}

/// Partners of every rank, per step: whom it sends to and whom it receives
/// from, in posting order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborPlan {
    sends: Vec<Vec<usize>>,
    recvs: Vec<Vec<usize>>,
}

impl NeighborPlan {
    pub fn from_pattern(pattern: &CommPattern, ranks: usize) -> Self {
        let mut sends = vec![Vec::new(); ranks];
        let mut recvs = vec![Vec::new(); ranks];
        let wrap = |r: usize, off: isize| -> Option<usize> {
            let t = r as isize + off;
            match pattern.boundary {
                Boundary::Open => (0..ranks as isize).contains(&t).then_some(t as usize),
                Boundary::Periodic => Some(t.rem_euclid(ranks as isize) as usize),
            }
        };
        for r in 0..ranks {
            let offsets = pattern
                .distances_up
                .iter()
                .map(|&u| u as isize)
                .chain(pattern.distances_down.iter().map(|&d| -(d as isize)));
            for off in offsets {
                if let Some(dst) = wrap(r, off) {
                    if dst != r {
                        sends[r].push(dst);
                    }
                }
                if let Some(src) = wrap(r, -off) {
                    if src != r {
                        recvs[r].push(src);
                    }
                }
            }
        }
        Self { sends, recvs }
    }

    /// Builds a plan from explicit lists; used to model broken patterns.
    pub fn from_lists(sends: Vec<Vec<usize>>, recvs: Vec<Vec<usize>>) -> Self {
        assert_eq!(sends.len(), recvs.len(), "one list per rank");
        Self { sends, recvs }
    }

    pub fn ranks(&self) -> usize {
        self.sends.len()
    }

    pub fn sends(&self, rank: usize) -> &[usize] {
        &self.sends[rank]
    }

    pub fn recvs(&self, rank: usize) -> &[usize] {
        &self.recvs[rank]
    }

    /// Distinct ranks `rank` exchanges data with, sorted.
    pub fn partners(&self, rank: usize) -> Vec<usize> {
        let mut p: Vec<usize> = self.sends[rank]
            .iter()
            .chain(self.recvs[rank].iter())
            .copied()
            .collect();
        p.sort_unstable();
        p.dedup();
        p
    }
}

/// Creates the send and receive requests `rank` posts after computing
/// `step`. Ids are taken from `next_id`.
pub fn post_exchange(
    plan: &NeighborPlan,
    pattern: &CommPattern,
    rank: usize,
    step: usize,
    now: f64,
    next_id: &mut usize,
) -> Vec<MessageRequest> {
    let protocol = select_protocol(pattern.message_bytes, pattern.eager_threshold);
    let mut out = Vec::with_capacity(plan.sends(rank).len() + plan.recvs(rank).len());
    let mut make = |direction, src_rank, dst_rank| {
        let id = *next_id;
        *next_id += 1;
        MessageRequest {
            id,
            direction,
            src_rank,
            dst_rank,
            step,
            bytes: pattern.message_bytes,
            protocol,
            posted_at: now,
            state: RequestState::Posted,
        }
    };
    for &src in plan.recvs(rank) {
        out.push(make(Direction::Recv, src, rank));
    }
    for &dst in plan.sends(rank) {
        out.push(make(Direction::Send, rank, dst));
    }
    out
}

/// Completion time of a single send/receive pair, given both post times and
/// the time the sender may start moving data (`gate >= send_post`).
/// Returns `(send_complete, recv_complete, transfer_start)`.
pub fn pair_completion(
    protocol: Protocol,
    send_post: f64,
    recv_post: f64,
    gate: f64,
    cost: &CommCostModel,
    bytes: u64,
) -> (f64, f64, f64) {
    let t = cost.transfer_time(bytes);
    match protocol {
        Protocol::Eager => {
            let depart = gate.max(send_post);
            (send_post, recv_post.max(depart + t), depart)
        }
        Protocol::Rendezvous => {
            let start = send_post.max(recv_post).max(gate);
            (start + t, start + t, start)
        }
    }
}

/// Time at which `rank` leaves its waitall, given for each request the post
/// time of the matching partner request. Every pair is treated as
/// independent (no relay gating).
pub fn complete_waitall(
    requests: &[MessageRequest],
    partner_post: impl Fn(&MessageRequest) -> f64,
    cost: &CommCostModel,
) -> f64 {
    requests
        .iter()
        .map(|r| {
            let other = partner_post(r);
            let (send_post, recv_post) = match r.direction {
                Direction::Send => (r.posted_at, other),
                Direction::Recv => (other, r.posted_at),
            };
            let (s, rv, _) = pair_completion(r.protocol, send_post, recv_post, send_post, cost, r.bytes);
            match r.direction {
                Direction::Send => s,
                Direction::Recv => rv,
            }
        })
        .fold(requests.first().map_or(0.0, |r| r.posted_at), f64::max)
}

/// A send matched (or waiting to be matched) with a receive.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Message {
    pub src: usize,
    pub dst: usize,
    pub step: usize,
    /// Position of this message in the FIFO order of its (src, dst) pair.
    pub seq: u64,
    pub bytes: u64,
    pub protocol: Protocol,
    pub send_req: usize,
    pub recv_req: Option<usize>,
    pub send_post: f64,
    pub recv_post: Option<f64>,
    /// When data started moving.
    pub start: Option<f64>,
    pub done: Option<f64>,
}

/// FIFO matching state per ordered (src, dst) pair.
#[derive(Debug, Default)]
pub(crate) struct Matcher {
    pairs: HashMap<(usize, usize), PairQueue>,
}

#[derive(Debug, Default)]
struct PairQueue {
    sends_posted: u64,
    /// Messages whose send is posted but not yet matched.
    unmatched_sends: VecDeque<usize>,
    /// Receive requests without a send yet, with their post times.
    unmatched_recvs: VecDeque<(usize, f64)>,
}

impl Matcher {
    /// Registers a send. Returns the message's pair sequence number and, if
    /// a receive was already waiting, that receive `(request id, post time)`.
    pub fn post_send(&mut self, src: usize, dst: usize, msg: usize) -> (u64, Option<(usize, f64)>) {
        let q = self.pairs.entry((src, dst)).or_default();
        let seq = q.sends_posted;
        q.sends_posted += 1;
        match q.unmatched_recvs.pop_front() {
            Some(r) => (seq, Some(r)),
            None => {
                q.unmatched_sends.push_back(msg);
                (seq, None)
            }
        }
    }

    /// Registers a receive. Returns the oldest unmatched message of the pair,
    /// if any.
    pub fn post_recv(&mut self, src: usize, dst: usize, req: usize, now: f64) -> Option<usize> {
        let q = self.pairs.entry((src, dst)).or_default();
        match q.unmatched_sends.pop_front() {
            Some(m) => Some(m),
            None => {
                q.unmatched_recvs.push_back((req, now));
                None
            }
        }
    }
}
