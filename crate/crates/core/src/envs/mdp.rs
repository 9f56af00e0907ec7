use std::collections::{HashMap, VecDeque};

use super::{Dynamics, EnvError};
use crate::symbolic::{GroundAtom, SymbolicState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    Training,
    Evaluation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub next: usize,
    pub probability: f64,
    pub reward: f64,
}

/// A finite MDP with transitions stored row-compressed: the outcomes of
/// action `a` in state `s` are `outcomes[start[s·A + a] .. start[s·A + a + 1]]`.
#[derive(Clone, Debug)]
pub struct EnumeratedMdp<S> {
    pub states: Vec<S>,
    pub actions: Vec<GroundAtom>,
    pub start: Vec<usize>,
    pub outcomes: Vec<Transition>,
    pub terminal: Vec<bool>,
    pub initial: usize,
    pub gamma: f64,
    pub horizon: Option<usize>,
}

impl<S> EnumeratedMdp<S> {
    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn transitions(&self, s: usize, a: usize) -> &[Transition] {
        let i = s * self.actions.len() + a;
        &self.outcomes[self.start[i]..self.start[i + 1]]
    }

    pub fn q_values(&self, values: &[f64], s: usize) -> Vec<f64> {
        (0..self.actions.len())
            .map(|a| {
                self.transitions(s, a)
                    .iter()
                    .map(|t| t.probability * (t.reward + self.gamma * values[t.next]))
                    .sum()
            })
            .collect()
    }

    /// Checks that every non-terminal row is a distribution over valid indices.
    pub fn validate(&self) -> Result<(), String> {
        for s in 0..self.states.len() {
            for a in 0..self.actions.len() {
                let row = self.transitions(s, a);
                if self.terminal[s] {
                    if !row.is_empty() {
                        return Err(format!("terminal state {s} has transitions"));
                    }
                    continue;
                }
                let total: f64 = row.iter().map(|t| t.probability).sum();
                if (total - 1.0).abs() > 1e-12 || row.iter().any(|t| t.next >= self.states.len()) {
                    return Err(format!("row ({s}, {a}) is not a distribution"));
                }
            }
        }
        Ok(())
    }
}

/// Exhaustive state enumeration.
///
/// Uses the dynamics' own state list when it provides one, otherwise
/// breadth-first expansion from the initial state. Terminal states are not
/// expanded.
pub fn enumerate<D: Dynamics>(dynamics: &D, kind: RewardKind, cap: usize) -> Result<EnumeratedMdp<D::State>, EnvError> {
    let root = dynamics.initial();
    let actions = dynamics.actions(&root);
    let mut index: HashMap<D::State, usize> = HashMap::new();
    let mut states = Vec::new();
    let mut queue = VecDeque::new();
    let seed = dynamics.all_states().unwrap_or_else(|| vec![root.clone()]);
    for s in seed.into_iter().chain([root.clone()]) {
        if !index.contains_key(&s) {
            index.insert(s.clone(), states.len());
            queue.push_back(states.len());
            states.push(s);
        }
    }
    if states.len() > cap {
        return Err(EnvError::Capacity { cap });
    }
    let mut rows: Vec<Vec<Vec<Transition>>> = Vec::new();
    let mut terminal: Vec<bool> = vec![false; states.len()];
    let mut expanded = vec![false; states.len()];
    while let Some(s) = queue.pop_front() {
        if expanded[s] || terminal[s] {
            continue;
        }
        expanded[s] = true;
        let state = states[s].clone();
        let mut per_action = Vec::with_capacity(actions.len());
        for a in &actions {
            let mut row = Vec::new();
            for o in dynamics.outcomes(&state, a)? {
                let next = match index.get(&o.next) {
                    Some(&i) => i,
                    None => {
                        if states.len() >= cap {
                            return Err(EnvError::Capacity { cap });
                        }
                        let i = states.len();
                        index.insert(o.next.clone(), i);
                        states.push(o.next);
                        terminal.push(false);
                        expanded.push(false);
                        queue.push_back(i);
                        i
                    }
                };
                if o.terminal {
                    terminal[next] = true;
                }
                let reward = match kind {
                    RewardKind::Training => o.reward,
                    RewardKind::Evaluation => o.score,
                };
                row.push(Transition {
                    next,
                    probability: o.probability,
                    reward,
                });
            }
            per_action.push(row);
        }
        if rows.len() <= s {
            rows.resize_with(s + 1, Vec::new);
        }
        rows[s] = per_action;
    }
    rows.resize_with(states.len(), Vec::new);
    let mut start = Vec::with_capacity(states.len() * actions.len() + 1);
    let mut outcomes = Vec::new();
    start.push(0);
    for (s, per_action) in rows.into_iter().enumerate() {
        for a in 0..actions.len() {
            if !terminal[s] {
                if let Some(row) = per_action.get(a) {
                    outcomes.extend_from_slice(row);
                }
            }
            start.push(outcomes.len());
        }
    }
    Ok(EnumeratedMdp {
        initial: index[&root],
        states,
        actions,
        start,
        outcomes,
        terminal,
        gamma: 1.0,
        horizon: Some(dynamics.horizon()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub values: Vec<f64>,
    pub initial: f64,
    pub backups: usize,
}

/// Bellman optimality backups.
///
/// With a horizon exactly that many backups are applied (the finite-horizon
/// optimum); otherwise backups repeat until the sup-norm change falls below
/// `tolerance`, which requires `γ < 1`.
pub fn value_iteration<S>(mdp: &EnumeratedMdp<S>, tolerance: f64) -> Result<ValueTable, EnvError> {
    if mdp.horizon.is_none() && mdp.gamma >= 1.0 {
        return Err(EnvError::Config("undiscounted value iteration needs a horizon".into()));
    }
    let n = mdp.states.len();
    let mut values = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut backups = 0;
    loop {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            next[s] = if mdp.terminal[s] {
                0.0
            } else {
                mdp.q_values(&values, s).into_iter().fold(f64::NEG_INFINITY, f64::max)
            };
            delta = delta.max((next[s] - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        backups += 1;
        match mdp.horizon {
            Some(h) if backups >= h => break,
            None if delta < tolerance => break,
            _ => {}
        }
    }
    Ok(ValueTable {
        initial: values[mdp.initial],
        values,
        backups,
    })
}

/// Greedy policy with respect to value-iteration values, keyed by encoded
/// state. Ties go to the lowest action index.
#[derive(Clone, Debug)]
pub struct OptimalPolicy {
    index: HashMap<SymbolicState, usize>,
    q: Vec<Vec<f64>>,
    actions: Vec<GroundAtom>,
    pub value: f64,
}

impl OptimalPolicy {
    pub fn solve<D: Dynamics>(dynamics: &D, kind: RewardKind) -> Result<Self, EnvError> {
        let mdp = enumerate(dynamics, kind, super::STATE_CAP)?;
        let table = value_iteration(&mdp, 1e-12)?;
        let index = mdp
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| (dynamics.encode(s), i))
            .collect();
        let q = (0..mdp.state_count()).map(|s| mdp.q_values(&table.values, s)).collect();
        Ok(Self {
            index,
            q,
            actions: mdp.actions,
            value: table.initial,
        })
    }

    pub fn act(&self, state: &SymbolicState) -> Option<GroundAtom> {
        let q = &self.q[*self.index.get(state)?];
        let mut best = 0;
        for (i, &v) in q.iter().enumerate() {
            if v > q[best] {
                best = i;
            }
        }
        self.actions.get(best).copied()
    }
}
