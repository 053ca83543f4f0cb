//! Totally ordered event queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    InjectionEnd,
    /// A message transfer finished (data arrived).
    MessageReady { message: usize },
    /// All requests of the rank's waitall are complete.
    RequestComplete,
    /// Projected end of a compute phase. Memory-bound projections carry the
    /// domain generation they were computed under.
    ComputeDone { generation: u64 },
    InjectionStart,
}

impl EventKind {
    /// Tie-break priority at equal time: releases before blocks.
    pub fn priority(self) -> u8 {
        match self {
            EventKind::InjectionEnd => 0,
            EventKind::MessageReady { .. } => 1,
            EventKind::RequestComplete => 2,
            EventKind::ComputeDone { .. } => 3,
            EventKind::InjectionStart => 4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub rank: usize,
    pub seq: u64,
}

impl Event {
    fn key(&self) -> (u8, usize, u64) {
        (self.kind.priority(), self.rank, self.seq)
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.key().cmp(&other.key()))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

/// Min-queue of events with a monotone sequence counter.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<std::cmp::Reverse<Event>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind, rank: usize) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(std::cmp::Reverse(Event {
            time,
            kind,
            rank,
            seq,
        }));
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|r| r.0)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}
