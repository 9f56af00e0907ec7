use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::double_q_target;
use super::{dedup, select, ActionList, ActionMode, EpisodeSummary, NsrlModel, PolicyError, ReplayBuffer, Transition};
use crate::envs::Environment;
use crate::numerics::{Adam, AdamConfig, ParamSet, Tape, Tensor};
use crate::symbolic::SymbolicState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub steps: u64,
    pub buffer: usize,
    pub batch: usize,
    pub sync_every: u64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `steps` over which ε decays linearly.
    pub epsilon_fraction: f64,
    /// Environment steps per gradient step.
    pub train_every: u64,
    /// Transitions collected before the first gradient step.
    pub learning_starts: usize,
    /// Multiplies rewards before they are stored.
    pub reward_scale: f64,
    pub optimizer: AdamConfig,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            buffer: 100_000,
            batch: 64,
            sync_every: 1000,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.4,
            train_every: 1,
            learning_starts: 1000,
            reward_scale: 1.0,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
struct Live {
    state: SymbolicState,
    actions: ActionList,
    summary: EpisodeSummary,
}

/// Double-Q learner with uniform replay and a periodically synced target
/// network. Target values are cached per state between syncs.
#[derive(Clone, Debug)]
pub struct DqnTrainer {
    pub config: DqnConfig,
    pub optimizer: Adam,
    pub target: ParamSet,
    pub steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub last_loss: f64,
    replay: ReplayBuffer,
    target_cache: HashMap<SymbolicState, Rc<[f64]>>,
    live: Option<Live>,
}

impl DqnTrainer {
    pub fn new(config: DqnConfig, params: &ParamSet) -> Self {
        Self {
            optimizer: Adam::new(config.optimizer, params),
            target: params.clone(),
            replay: ReplayBuffer::new(config.buffer),
            config,
            steps: 0,
            episodes: 0,
            updates: 0,
            last_loss: 0.0,
            target_cache: HashMap::new(),
            live: None,
        }
    }

    pub fn epsilon(&self) -> f64 {
        let c = &self.config;
        let span = (c.epsilon_fraction * c.steps as f64).max(1.0);
        let frac = (self.steps as f64 / span).min(1.0);
        c.epsilon_start + frac * (c.epsilon_end - c.epsilon_start)
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    /// One environment step, plus a gradient step and target sync when due.
    /// Returns the summary of an episode that ended on this step.
    pub fn step<E: Environment>(
        &mut self,
        model: &NsrlModel,
        params: &mut ParamSet,
        env: &mut E,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<EpisodeSummary>, PolicyError> {
        let live = match self.live.take() {
            Some(l) => l,
            None => {
                let state = env.reset(rng);
                Live {
                    state,
                    actions: Arc::from(env.actions()),
                    summary: EpisodeSummary {
                        reward: 0.0,
                        score: 0.0,
                        length: 0,
                    },
                }
            }
        };
        let mask = env.action_mask();
        let q = model.q_values(params, &live.state, &live.actions)?;
        let a = live.actions[select(&q, mask.as_deref(), ActionMode::Greedy { epsilon: self.epsilon() }, rng)?];
        let out = env.step(&a, rng)?;
        let Live {
            state,
            actions,
            mut summary,
        } = live;
        summary.reward += out.reward;
        summary.score += out.score;
        summary.length += 1;
        self.replay.push(Transition {
            state,
            action: a,
            reward: out.reward * self.config.reward_scale,
            next: out.state.clone(),
            terminal: out.terminal,
            next_actions: actions.clone(),
        });
        self.steps += 1;
        if self.steps % self.config.train_every.max(1) == 0
            && self.replay.len() >= self.config.learning_starts.max(self.config.batch)
        {
            self.train(model, params, rng)?;
        }
        if self.steps % self.config.sync_every.max(1) == 0 {
            self.target = params.clone();
            self.target_cache.clear();
        }
        if out.done() {
            self.episodes += 1;
            Ok(Some(summary))
        } else {
            self.live = Some(Live {
                state: out.state,
                actions,
                summary,
            });
            Ok(None)
        }
    }

    fn target_rows(&mut self, model: &NsrlModel, states: &[&SymbolicState]) -> Result<Vec<Rc<[f64]>>, PolicyError> {
        let missing: Vec<&SymbolicState> = {
            let (unique, _) = dedup(states.iter().copied());
            unique.into_iter().filter(|s| !self.target_cache.contains_key(*s)).collect()
        };
        if !missing.is_empty() {
            let eval = model.evaluate(&self.target, &missing)?;
            for (r, s) in missing.iter().enumerate() {
                self.target_cache.insert((*s).clone(), Rc::from(eval.q.row_slice(r)));
            }
        }
        Ok(states.iter().map(|s| self.target_cache[*s].clone()).collect())
    }

    fn train(&mut self, model: &NsrlModel, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<(), PolicyError> {
        let batch: Vec<Transition> = self
            .replay
            .sample(self.config.batch, rng)
            .into_iter()
            .cloned()
            .collect();
        let nexts: Vec<&SymbolicState> = batch.iter().map(|t| &t.next).collect();
        let target_rows = self.target_rows(model, &nexts)?;
        let (unique, rows) = dedup(batch.iter().map(|t| &t.state).chain(nexts.iter().copied()));
        let n = batch.len();
        let width = model.q_width();
        let grads;
        {
            let mut tape = Tape::new(params);
            let out = model.forward_states(&mut tape, &unique)?;
            let qv = tape.value(out.q).clone();
            let mut idx = Vec::with_capacity(n);
            let mut targets = Vec::with_capacity(n);
            for (k, t) in batch.iter().enumerate() {
                idx.push(rows[k] * width + model.action_column(&t.action)?);
                let cols = model.action_columns(&t.next_actions)?;
                let online: Vec<f64> = cols.iter().map(|&c| qv.get(rows[n + k], c)).collect();
                let target: Vec<f64> = cols.iter().map(|&c| target_rows[k][c]).collect();
                targets.push(double_q_target(t.reward, t.terminal, self.config.gamma, &online, &target));
            }
            let q = tape.gather(out.q, Rc::from(idx))?;
            let y = tape.constant(Tensor::row(targets));
            let diff = tape.sub(q, y)?;
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            self.last_loss = tape.value(loss).get(0, 0);
            grads = tape.backward(loss)?;
        }
        self.optimizer.step(params, &grads);
        self.updates += 1;
        Ok(())
    }
}
