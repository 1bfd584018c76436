//! Bounded single-consumer queue whose producers never wait.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overflow {
    #[default]
    DropOldest,
    DropNewest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Queued,
    /// The item was queued and the oldest one evicted.
    EvictedOldest,
    /// The queue was full and the new item was discarded.
    Rejected,
    Closed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueCounters {
    pub offered: u64,
    pub popped: u64,
    pub dropped: u64,
    pub queued: u64,
}

struct State<T> {
    items: VecDeque<T>,
    counters: QueueCounters,
}

pub struct BoundedQueue<T> {
    state: Mutex<State<T>>,
    capacity: usize,
    overflow: Overflow,
    notify: Notify,
    closed: AtomicBool,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize, overflow: Overflow) -> Self {
        assert!(capacity >= 1, "queue capacity must be at least 1");
        Self {
            state: Mutex::new(State {
                items: VecDeque::with_capacity(capacity.min(1024)),
                counters: QueueCounters::default(),
            }),
            capacity,
            overflow,
            notify: Notify::new(),
            closed: AtomicBool::new(false),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&self, item: T) -> PushOutcome {
        if self.is_closed() {
            return PushOutcome::Closed;
        }
        let outcome = {
            let mut state = self.state.lock();
            state.counters.offered += 1;
            if state.items.len() < self.capacity {
                state.items.push_back(item);
                PushOutcome::Queued
            } else {
                state.counters.dropped += 1;
                match self.overflow {
                    Overflow::DropOldest => {
                        state.items.pop_front();
                        state.items.push_back(item);
                        PushOutcome::EvictedOldest
                    }
                    Overflow::DropNewest => PushOutcome::Rejected,
                }
            }
        };
        self.notify.notify_one();
        outcome
    }

    pub fn try_pop(&self) -> Option<T> {
        let mut state = self.state.lock();
        let item = state.items.pop_front();
        if item.is_some() {
            state.counters.popped += 1;
        }
        item
    }

    /// Waits for the next item; `None` once closed and drained.
    pub async fn pop(&self) -> Option<T> {
        loop {
            let notified = self.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(item) = self.try_pop() {
                return Some(item);
            }
            if self.is_closed() {
                return None;
            }
            notified.await;
        }
    }

    /// Pops up to `max` items without waiting.
    pub fn drain_up_to(&self, max: usize, out: &mut Vec<T>) {
        let mut state = self.state.lock();
        let n = max.min(state.items.len());
        out.extend(state.items.drain(..n));
        state.counters.popped += n as u64;
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.notify.notify_waiters();
        self.notify.notify_one();
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.state.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counters(&self) -> QueueCounters {
        let state = self.state.lock();
        QueueCounters {
            queued: state.items.len() as u64,
            ..state.counters
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_oldest_keeps_newest() {
        let q = BoundedQueue::new(2, Overflow::DropOldest);
        for i in 1..=5 {
            q.push(i);
        }
        assert_eq!(q.try_pop(), Some(4));
        assert_eq!(q.try_pop(), Some(5));
        assert_eq!(q.try_pop(), None);
        let c = q.counters();
        assert_eq!((c.offered, c.popped, c.dropped, c.queued), (5, 2, 3, 0));
    }

    #[test]
    fn drop_newest_keeps_oldest() {
        let q = BoundedQueue::new(2, Overflow::DropNewest);
        for i in 1..=5 {
            q.push(i);
        }
        assert_eq!(q.try_pop(), Some(1));
        assert_eq!(q.try_pop(), Some(2));
        assert_eq!(q.counters().dropped, 3);
    }

    #[tokio::test]
    async fn pop_wakes_on_push_and_close() {
        let q = std::sync::Arc::new(BoundedQueue::new(4, Overflow::DropOldest));
        let consumer = {
            let q = q.clone();
            tokio::spawn(async move {
                let mut got = Vec::new();
                while let Some(x) = q.pop().await {
                    got.push(x);
                }
                got
            })
        };
        tokio::task::yield_now().await;
        q.push(1);
        q.push(2);
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
        q.close();
        assert_eq!(consumer.await.unwrap(), vec![1, 2]);
    }
}
