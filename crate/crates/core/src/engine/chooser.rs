//! Scheduling policies: what happens at the next tick.

use indexmap::IndexSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Address, AddressMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Step(usize),
    Evict(Address),
}

/// What the scheduler can see when choosing.
#[derive(Debug)]
pub struct ChoiceView<'a> {
    pub tick: u64,
    /// Threads that can take a step, ascending.
    pub runnable: &'a [usize],
    /// Dirty, unpinned lines.
    pub evictable: &'a IndexSet<Address>,
    pub map: AddressMap,
    /// Per-thread simulated cycle clocks.
    pub clocks: &'a [u64],
}

pub trait Chooser {
    /// Called only when at least one thread is runnable.
    fn choose(&mut self, view: &ChoiceView<'_>) -> Action;

    /// Whether a `Step` runs the thread up to its next visible operation.
    fn macro_steps(&self) -> bool {
        false
    }
}

/// Uniform thread choice; evicts a uniformly chosen dirty line with the
/// given probability per tick.
#[derive(Debug, Clone)]
pub struct RandomChooser {
    rng: ChaCha8Rng,
    eviction_rate: f64,
}

impl RandomChooser {
    pub fn new(seed: u64, eviction_rate: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            eviction_rate,
        }
    }
}

fn maybe_evict(rng: &mut ChaCha8Rng, rate: f64, view: &ChoiceView<'_>) -> Option<Action> {
    if rate > 0.0 && !view.evictable.is_empty() && rng.gen_bool(rate) {
        let i = rng.gen_range(0..view.evictable.len());
        return Some(Action::Evict(view.evictable[i]));
    }
    None
}

impl Chooser for RandomChooser {
    fn choose(&mut self, view: &ChoiceView<'_>) -> Action {
        if let Some(a) = maybe_evict(&mut self.rng, self.eviction_rate, view) {
            return a;
        }
        Action::Step(view.runnable[self.rng.gen_range(0..view.runnable.len())])
    }
}

/// Steps the runnable thread with the smallest cycle clock, ties broken at
/// random. Used for latency and throughput measurements.
#[derive(Debug, Clone)]
pub struct TimedChooser {
    rng: ChaCha8Rng,
    eviction_rate: f64,
}

impl TimedChooser {
    pub fn new(seed: u64, eviction_rate: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            eviction_rate,
        }
    }
}

impl Chooser for TimedChooser {
    fn choose(&mut self, view: &ChoiceView<'_>) -> Action {
        if let Some(a) = maybe_evict(&mut self.rng, self.eviction_rate, view) {
            return a;
        }
        let min = view
            .runnable
            .iter()
            .map(|&t| view.clocks[t])
            .min()
            .expect("at least one runnable thread");
        let ties: Vec<usize> = view
            .runnable
            .iter()
            .copied()
            .filter(|&t| view.clocks[t] == min)
            .collect();
        Action::Step(ties[self.rng.gen_range(0..ties.len())])
    }
}

/// Stateless depth-first enumeration of scheduler choices.
///
/// Each run follows the recorded choice prefix and takes the first option
/// at every new decision; [`DfsChooser::advance`] then moves to the next
/// unexplored branch. Forced moves are not decisions. Branching stops after
/// `max_depth` decisions, and at most `max_evictions` evictions of home
/// lines are offered per run.
#[derive(Debug, Clone)]
pub struct DfsChooser {
    path: Vec<(usize, usize)>,
    pos: usize,
    evictions: usize,
    max_depth: usize,
    max_evictions: usize,
}

impl DfsChooser {
    pub fn new(max_depth: usize, max_evictions: usize) -> Self {
        Self {
            path: Vec::new(),
            pos: 0,
            evictions: 0,
            max_depth,
            max_evictions,
        }
    }

    /// Moves to the next branch; `false` once the tree is exhausted.
    pub fn advance(&mut self) -> bool {
        self.pos = 0;
        self.evictions = 0;
        while let Some(last) = self.path.last_mut() {
            if last.0 + 1 < last.1 {
                last.0 += 1;
                return true;
            }
            self.path.pop();
        }
        false
    }

    pub fn depth(&self) -> usize {
        self.path.len()
    }
}

impl Chooser for DfsChooser {
    fn choose(&mut self, view: &ChoiceView<'_>) -> Action {
        if self.pos >= self.max_depth {
            return Action::Step(view.runnable[0]);
        }
        let mut options: Vec<Action> = view.runnable.iter().map(|&t| Action::Step(t)).collect();
        if self.evictions < self.max_evictions {
            let mut lines: Vec<Address> = view
                .evictable
                .iter()
                .copied()
                .filter(|a| view.map.is_home(*a))
                .collect();
            lines.sort();
            options.extend(lines.into_iter().map(Action::Evict));
        }
        if options.len() == 1 {
            return options[0];
        }
        let index = if self.pos < self.path.len() {
            debug_assert_eq!(self.path[self.pos].1, options.len(), "replay diverged");
            self.path[self.pos].0
        } else {
            self.path.push((0, options.len()));
            0
        };
        self.pos += 1;
        let action = options[index.min(options.len() - 1)];
        if matches!(action, Action::Evict(_)) {
            self.evictions += 1;
        }
        action
    }

    fn macro_steps(&self) -> bool {
        true
    }
}
