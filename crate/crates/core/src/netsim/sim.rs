use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::time::{SimDuration, SimTime};

struct Entry<E> {
    at: SimTime,
    seq: u64,
    cause: Option<u64>,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// One executed event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: u64,
    pub cause: Option<u64>,
    pub scheduled_at: SimTime,
    pub fire_at: SimTime,
}

#[derive(Debug)]
pub struct Fired<E> {
    pub seq: u64,
    pub at: SimTime,
    pub event: E,
}

/// Event queue executing in `(fire_at, seq)` order.
pub struct Simulator<E> {
    now: SimTime,
    next_seq: u64,
    current: Option<(u64, SimTime)>,
    queue: BinaryHeap<Reverse<Entry<E>>>,
    scheduled_at: std::collections::BTreeMap<u64, SimTime>,
    trace: Vec<TraceRecord>,
}

impl<E> Default for Simulator<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Simulator<E> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            current: None,
            queue: BinaryHeap::new(),
            scheduled_at: Default::default(),
            trace: Vec::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Schedules `event` at `at`, which must not lie in the past.
    pub fn schedule(&mut self, at: SimTime, event: E) -> u64 {
        assert!(
            at >= self.now,
            "event scheduled in the past: {at} < {}",
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.scheduled_at.insert(seq, self.now);
        self.queue.push(Reverse(Entry {
            at,
            seq,
            cause: self.current.map(|(s, _)| s),
            event,
        }));
        seq
    }

    pub fn schedule_in(&mut self, delay: SimDuration, event: E) -> u64 {
        self.schedule(self.now + delay, event)
    }

    pub fn pop(&mut self) -> Option<Fired<E>> {
        let Reverse(entry) = self.queue.pop()?;
        self.now = entry.at;
        self.current = Some((entry.seq, entry.at));
        let scheduled_at = self.scheduled_at.remove(&entry.seq).unwrap_or(entry.at);
        self.trace.push(TraceRecord {
            seq: entry.seq,
            cause: entry.cause,
            scheduled_at,
            fire_at: entry.at,
        });
        Some(Fired {
            seq: entry.seq,
            at: entry.at,
            event: entry.event,
        })
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_then_seq() {
        let mut s = Simulator::new();
        s.schedule(SimTime::from_nanos(5), "late");
        s.schedule(SimTime::from_nanos(1), "a");
        s.schedule(SimTime::from_nanos(1), "b");
        let order: Vec<&str> = std::iter::from_fn(|| s.pop().map(|f| f.event)).collect();
        assert_eq!(order, ["a", "b", "late"]);
    }

    #[test]
    fn trace_records_causes() {
        let mut s = Simulator::new();
        s.schedule(SimTime::from_nanos(1), 0);
        let first = s.pop().unwrap();
        s.schedule_in(SimDuration::from_nanos(3), 1);
        let second = s.pop().unwrap();
        assert_eq!(second.at, SimTime::from_nanos(4));
        assert_eq!(s.trace()[1].cause, Some(first.seq));
    }

    #[test]
    #[should_panic]
    fn past_scheduling_panics() {
        let mut s = Simulator::new();
        s.schedule(SimTime::from_nanos(10), ());
        s.pop();
        s.schedule(SimTime::from_nanos(3), ());
    }
}
