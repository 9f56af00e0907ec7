//! State-action values from reasoning output, action selection, and the
//! value-based and policy-gradient trainers.

mod dqn;
mod losses;
mod ppo;
mod replay;

use std::collections::HashMap;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionConfig, AttentionModel, AttentionOutput};
use crate::envs::EnvError;
use crate::numerics::{Activation, Mlp, MlpSpec, ParamSet, Tape, Tensor, TensorError, Var};
use crate::reasoning::{kappa_on_tape, ReasoningError};
use crate::symbolic::{GroundAtom, PredicateId, SymbolicState, Vocabulary};

pub use dqn::{DqnConfig, DqnTrainer};
pub use losses::{
    double_q_target, double_q_targets, gae, normalize, ppo_objective, q_loss, q_loss_on_tape, td_loss, PpoDiagnostics, PpoLossConfig,
    PpoSample,
};
pub use ppo::{PpoConfig, PpoTrainer, PpoUpdate};
pub use replay::{ReplayBuffer, Transition};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no candidate actions")]
    NoActions,
    #[error("empty batch")]
    EmptyBatch,
    #[error("`{0}` is not an action atom of this model")]
    UnknownAction(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub attention: AttentionConfig,
    pub head_hidden: usize,
    /// Hidden width of the critic; no critic when `None`.
    pub critic_hidden: Option<usize>,
}

impl PolicyConfig {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            attention: AttentionConfig::new(vocab.predicate_count(), vocab.entity_count()),
            head_hidden: 64,
            critic_hidden: None,
        }
    }

    pub fn with_critic(mut self, hidden: usize) -> Self {
        self.critic_hidden = Some(hidden);
        self
    }
}

/// Attention, per-action-predicate heads, and an optional critic.
#[derive(Clone, Debug, PartialEq)]
pub struct NsrlModel {
    pub config: PolicyConfig,
    pub attention: AttentionModel,
    pub action_predicates: Vec<PredicateId>,
    pub heads: Vec<Mlp>,
    pub critic: Option<Mlp>,
}

/// Tape handles from a batched forward pass over `B` states.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub attention: AttentionOutput,
    /// `B × |X|²`.
    pub kappa: Var,
    /// `B × (|P_a|·|X|²)`: head `a`, entry `(x, y)` is column `a·|X|² + x·|X| + y`.
    pub q: Var,
    /// `B × 1`, when the model has a critic.
    pub value: Option<Var>,
    pub batch: usize,
}

/// Plain values from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub q: Tensor,
    pub values: Option<Vec<f64>>,
}

/// Predicate matrices of a batch as `(B·N) × |X|²`, state-major.
pub fn stack_states(states: &[&SymbolicState]) -> Result<Tensor, PolicyError> {
    let first = states.first().ok_or(PolicyError::EmptyBatch)?;
    let (x, n) = (first.entity_count(), first.predicate_count());
    let mut data = Vec::with_capacity(states.len() * n * x * x);
    for s in states {
        if (s.entity_count(), s.predicate_count()) != (x, n) {
            return Err(PolicyError::Config("states in a batch must share a vocabulary".into()));
        }
        data.extend(s.values());
    }
    Ok(Tensor::matrix(states.len() * n, x * x, data)?)
}

/// Distinct states of a batch and, for each input, its row among them.
pub fn dedup<'a>(states: impl IntoIterator<Item = &'a SymbolicState>) -> (Vec<&'a SymbolicState>, Vec<usize>) {
    let mut index: HashMap<&SymbolicState, usize> = HashMap::new();
    let mut unique = Vec::new();
    let rows = states
        .into_iter()
        .map(|s| {
            *index.entry(s).or_insert_with(|| {
                unique.push(s);
                unique.len() - 1
            })
        })
        .collect();
    (unique, rows)
}

impl NsrlModel {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        vocab: &Vocabulary,
        config: PolicyConfig,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let (x, n) = (vocab.entity_count(), vocab.predicate_count());
        if config.attention.entities != x || config.attention.predicates != n {
            return Err(PolicyError::Config(format!(
                "attention sized for {} entities and {} predicates, vocabulary has {x} and {n}",
                config.attention.entities, config.attention.predicates
            )));
        }
        let action_predicates = vocab.action_predicates();
        if action_predicates.is_empty() {
            return Err(PolicyError::Config("vocabulary has no action predicate".into()));
        }
        let attention = AttentionModel::register(params, config.attention.clone(), rng)?;
        let d = x * x;
        let mut heads = Vec::with_capacity(action_predicates.len());
        for &p in &action_predicates {
            let spec = MlpSpec::new(vec![d, config.head_hidden, d], Activation::Relu, Activation::Identity)?;
            let name = &vocab.predicate_info(p).name;
            heads.push(Mlp::register(params, &format!("head.{name}"), spec, rng));
        }
        let critic = match config.critic_hidden {
            Some(h) => {
                let spec = MlpSpec::new(vec![n * d, h, 1], Activation::Relu, Activation::Identity)?;
                Some(Mlp::register(params, "critic", spec, rng))
            }
            None => None,
        };
        Ok(Self {
            config,
            attention,
            action_predicates,
            heads,
            critic,
        })
    }

    pub fn entities(&self) -> usize {
        self.config.attention.entities
    }

    pub fn predicates(&self) -> usize {
        self.config.attention.predicates
    }

    /// Width of a Q row.
    pub fn q_width(&self) -> usize {
        self.heads.len() * self.entities() * self.entities()
    }

    /// Column of an action atom in a Q row.
    pub fn action_column(&self, atom: &GroundAtom) -> Result<usize, PolicyError> {
        let x = self.entities();
        let head = self
            .action_predicates
            .iter()
            .position(|&p| p == atom.predicate)
            .filter(|_| atom.subject.0 < x && atom.object.0 < x)
            .ok_or_else(|| PolicyError::UnknownAction(format!("{atom:?}")))?;
        Ok(head * x * x + atom.subject.0 * x + atom.object.0)
    }

    pub fn action_columns(&self, atoms: &[GroundAtom]) -> Result<Vec<usize>, PolicyError> {
        atoms.iter().map(|a| self.action_column(a)).collect()
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mats: Var) -> Result<ModelOutput, PolicyError> {
        let attention = self.attention.forward(tape, mats)?;
        let kappa = kappa_on_tape(tape, mats, &attention.phi, attention.psi, self.entities())?;
        let outs = self
            .heads
            .iter()
            .map(|h| h.forward(tape, kappa))
            .collect::<Result<Vec<_>, _>>()?;
        let q = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let batch = attention.batch;
        let value = match &self.critic {
            Some(c) => {
                let d = self.entities() * self.entities();
                let flat = tape.reshape(mats, batch, self.predicates() * d)?;
                Some(c.forward(tape, flat)?)
            }
            None => None,
        };
        Ok(ModelOutput {
            attention,
            kappa,
            q,
            value,
            batch,
        })
    }

    pub fn forward_states(&self, tape: &mut Tape<'_>, states: &[&SymbolicState]) -> Result<ModelOutput, PolicyError> {
        let mats = tape.constant(stack_states(states)?);
        self.forward(tape, mats)
    }

    pub fn evaluate(&self, params: &ParamSet, states: &[&SymbolicState]) -> Result<Evaluation, PolicyError> {
        let mut tape = Tape::new(params);
        let out = self.forward_states(&mut tape, states)?;
        Ok(Evaluation {
            q: tape.value(out.q).clone(),
            values: out.value.map(|v| tape.value(v).data().to_vec()),
        })
    }

    /// Q for each listed action atom in `state`.
    pub fn q_values(&self, params: &ParamSet, state: &SymbolicState, actions: &[GroundAtom]) -> Result<Vec<f64>, PolicyError> {
        let cols = self.action_columns(actions)?;
        let eval = self.evaluate(params, &[state])?;
        Ok(cols.iter().map(|&c| eval.q.get(0, c)).collect())
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        state: &SymbolicState,
        actions: &[GroundAtom],
        mask: Option<&[bool]>,
        mode: ActionMode,
        rng: &mut R,
    ) -> Result<GroundAtom, PolicyError> {
        let q = self.q_values(params, state, actions)?;
        Ok(actions[select(&q, mask, mode, rng)?])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionMode {
    Greedy { epsilon: f64 },
    Softmax,
}

fn allowed(mask: Option<&[bool]>, i: usize) -> bool {
    mask.map_or(true, |m| m[i])
}

/// Softmax over the allowed entries; masked entries get probability 0.
pub fn softmax(q: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let max = (0..q.len())
        .filter(|&i| allowed(mask, i))
        .map(|i| q[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = (0..q.len())
        .map(|i| if allowed(mask, i) { (q[i] - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Index of the largest allowed entry; ties go to the lowest index.
pub fn argmax(q: &[f64], mask: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in (0..q.len()).filter(|&i| allowed(mask, i)) {
        if best.map_or(true, |b| q[i] > q[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn select<R: Rng + ?Sized>(q: &[f64], mask: Option<&[bool]>, mode: ActionMode, rng: &mut R) -> Result<usize, PolicyError> {
    if let Some(m) = mask {
        if m.len() != q.len() {
            return Err(PolicyError::Config(format!("mask has {} entries for {} actions", m.len(), q.len())));
        }
    }
    let best = argmax(q, mask).ok_or(PolicyError::NoActions)?;
    match mode {
        ActionMode::Greedy { epsilon } => {
            if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                let open: Vec<usize> = (0..q.len()).filter(|&i| allowed(mask, i)).collect();
                Ok(open[rng.gen_range(0..open.len())])
            } else {
                Ok(best)
            }
        }
        ActionMode::Softmax => {
            let p = softmax(q, mask);
            let dist = WeightedIndex::new(&p).map_err(|e| PolicyError::Config(e.to_string()))?;
            Ok(dist.sample(rng))
        }
    }
}

/// Candidate action atoms shared between transitions of one episode.
pub type ActionList = Arc<[GroundAtom]>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    /// Sum of training rewards.
    pub reward: f64,
    /// Sum of evaluation scores.
    pub score: f64,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub episodes: Vec<EpisodeSummary>,
}

impl EvalSummary {
    pub fn from_episodes(episodes: Vec<EpisodeSummary>) -> Self {
        let n = episodes.len().max(1) as f64;
        let mean = episodes.iter().map(|e| e.score).sum::<f64>() / n;
        let var = episodes.iter().map(|e| (e.score - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            episodes,
        }
    }
}

/// Runs `episodes` evaluation episodes, stepping all `envs` in lockstep with
/// one batched forward pass per step.
pub fn evaluate_policy<E: crate::envs::Environment>(
    model: &NsrlModel,
    params: &ParamSet,
    envs: &mut [E],
    episodes: usize,
    mode: ActionMode,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<EvalSummary, PolicyError> {
    if episodes == 0 {
        return Err(PolicyError::Config("evaluation needs at least one episode".into()));
    }
    if envs.is_empty() {
        return Err(PolicyError::Config("no environments".into()));
    }
    let mut done = Vec::with_capacity(episodes);
    while done.len() < episodes {
        let wave = (episodes - done.len()).min(envs.len());
        let envs = &mut envs[..wave];
        let mut states: Vec<SymbolicState> = envs.iter_mut().map(|e| e.reset(rng)).collect();
        let mut totals = vec![EpisodeSummary { reward: 0.0, score: 0.0, length: 0 }; wave];
        let mut live: Vec<usize> = (0..wave).collect();
        while !live.is_empty() {
            let batch: Vec<&SymbolicState> = live.iter().map(|&i| &states[i]).collect();
            let eval = model.evaluate(params, &batch)?;
            let mut still = Vec::with_capacity(live.len());
            for (row, &i) in live.iter().enumerate() {
                let env = &mut envs[i];
                let cols = model.action_columns(env.actions())?;
                let q: Vec<f64> = cols.iter().map(|&c| eval.q.get(row, c)).collect();
                let mask = env.action_mask();
                let a = env.actions()[select(&q, mask.as_deref(), mode, rng)?];
                let out = env.step(&a, rng)?;
                totals[i].reward += out.reward;
                totals[i].score += out.score;
                totals[i].length += 1;
                let finished = out.done();
                states[i] = out.state;
                if !finished {
                    still.push(i);
                }
            }
            live = still;
        }
        done.extend(totals);
    }
    Ok(EvalSummary::from_episodes(done))
}
