use std::collections::VecDeque;

use rand::Rng;

use super::ActionList;
use crate::symbolic::{GroundAtom, SymbolicState};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: SymbolicState,
    pub action: GroundAtom,
    pub reward: f64,
    pub next: SymbolicState,
    /// The episode ended in a goal state; truncation is not terminal.
    pub terminal: bool,
    /// Candidate actions in `next`.
    pub next_actions: ActionList,
}

/// Bounded FIFO with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}
