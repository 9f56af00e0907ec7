use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{argmax, dedup, NsrlModel, PolicyError, Transition};
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::symbolic::SymbolicState;

/// Double-Q target: the online values pick the next action, the target
/// values score it. Terminal transitions do not bootstrap.
pub fn double_q_target(reward: f64, terminal: bool, gamma: f64, online_next: &[f64], target_next: &[f64]) -> f64 {
    if terminal {
        return reward;
    }
    match argmax(online_next, None) {
        Some(a) => reward + gamma * target_next[a],
        None => reward,
    }
}

/// Mean squared TD error.
pub fn td_loss(predicted: &[f64], targets: &[f64]) -> f64 {
    let n = predicted.len().max(1) as f64;
    predicted.iter().zip(targets).map(|(q, y)| (y - q).powi(2)).sum::<f64>() / n
}

/// Q values for the candidate actions of many states, one forward pass per
/// distinct state.
fn candidate_q(model: &NsrlModel, params: &ParamSet, states: &[&SymbolicState], actions: &[&[crate::symbolic::GroundAtom]]) -> Result<Vec<Vec<f64>>, PolicyError> {
    let (unique, rows) = dedup(states.iter().copied());
    let eval = model.evaluate(params, &unique)?;
    rows.iter()
        .zip(actions)
        .map(|(&r, acts)| Ok(model.action_columns(acts)?.iter().map(|&c| eval.q.get(r, c)).collect()))
        .collect()
}

/// Double-Q targets for a batch.
pub fn double_q_targets(
    model: &NsrlModel,
    online: &ParamSet,
    target: &ParamSet,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<f64>, PolicyError> {
    let live: Vec<&Transition> = batch.iter().copied().filter(|t| !t.terminal).collect();
    let states: Vec<&SymbolicState> = live.iter().map(|t| &t.next).collect();
    let actions: Vec<&[_]> = live.iter().map(|t| &t.next_actions[..]).collect();
    let (on, tg) = if live.is_empty() {
        (vec![], vec![])
    } else {
        (candidate_q(model, online, &states, &actions)?, candidate_q(model, target, &states, &actions)?)
    };
    let mut k = 0;
    Ok(batch
        .iter()
        .map(|t| {
            if t.terminal {
                t.reward
            } else {
                k += 1;
                double_q_target(t.reward, false, gamma, &on[k - 1], &tg[k - 1])
            }
        })
        .collect())
}

/// Mean squared error between `Q(s, a)` and fixed targets, recorded on a
/// tape.
pub fn q_loss_on_tape(model: &NsrlModel, tape: &mut Tape<'_>, batch: &[&Transition], targets: &[f64]) -> Result<Var, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let (unique, rows) = dedup(batch.iter().map(|t| &t.state));
    let out = model.forward_states(tape, &unique)?;
    let width = model.q_width();
    let idx = batch
        .iter()
        .zip(&rows)
        .map(|(t, &r)| Ok(r * width + model.action_column(&t.action)?))
        .collect::<Result<Vec<_>, PolicyError>>()?;
    let q = tape.gather(out.q, Rc::from(idx))?;
    let y = tape.constant(Tensor::row(targets.to_vec()));
    let diff = tape.sub(q, y)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Double-Q loss of a batch under `online` parameters.
pub fn q_loss(model: &NsrlModel, online: &ParamSet, target: &ParamSet, batch: &[&Transition], gamma: f64) -> Result<f64, PolicyError> {
    let targets = double_q_targets(model, online, target, batch, gamma)?;
    let mut tape = Tape::new(online);
    let loss = q_loss_on_tape(model, &mut tape, batch, &targets)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Generalized advantage estimates and returns for one trajectory fragment.
///
/// `bootstrap` is the value of the state after the last step: 0 when the
/// fragment ended in a terminal state, the critic's estimate when it was cut
/// off.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to mean 0 and standard deviation 1; leaves constant
/// input centred.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in values.iter_mut() {
        *v = if std > 1e-12 { (*v - mean) / std } else { *v - mean };
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoLossConfig {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for PpoLossConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

/// One decision of a rollout, addressed into a batched forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoSample {
    /// Row of the forward pass holding the state.
    pub row: usize,
    /// Q-row columns of the candidate actions.
    pub candidates: Rc<[usize]>,
    /// Position of the taken action among the candidates.
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Clipped surrogate plus weighted value error minus weighted entropy, with
/// the policy a softmax over each sample's candidate Q values.
pub fn ppo_objective(
    tape: &mut Tape<'_>,
    q: Var,
    value: Option<Var>,
    samples: &[PpoSample],
    config: &PpoLossConfig,
) -> Result<(Var, PpoDiagnostics), PolicyError> {
    if samples.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let width = tape.value(q).cols();
    let m = samples.len();
    let mut idx = Vec::new();
    let mut segs = Vec::with_capacity(m);
    let mut chosen = Vec::with_capacity(m);
    for s in samples {
        if s.candidates.is_empty() || s.action >= s.candidates.len() {
            return Err(PolicyError::NoActions);
        }
        chosen.push(idx.len() + s.action);
        idx.extend(s.candidates.iter().map(|&c| s.row * width + c));
        segs.push(s.candidates.len());
    }
    let segs: Rc<[usize]> = Rc::from(segs);
    let logits = tape.gather(q, Rc::from(idx))?;
    let logp = tape.segment_log_softmax(logits, segs.clone())?;
    let taken = tape.gather(logp, Rc::from(chosen))?;
    let old = tape.constant(Tensor::row(samples.iter().map(|s| s.old_log_prob).collect()));
    let log_ratio = tape.sub(taken, old)?;
    let ratio = tape.exp(log_ratio);
    let adv = tape.constant(Tensor::row(samples.iter().map(|s| s.advantage).collect()));
    let surr1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
    let surr2 = tape.mul(clipped, adv)?;
    let surr = tape.minimum(surr1, surr2)?;
    let mean_surr = tape.mean(surr);
    let policy_loss = tape.scale(mean_surr, -1.0);

    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp)?;
    let neg_entropy = tape.segment_sum(plogp, segs)?;
    let mean_neg_entropy = tape.mean(neg_entropy);
    let entropy_term = tape.scale(mean_neg_entropy, config.entropy_coef);
    let mut loss = tape.add(policy_loss, entropy_term)?;

    let mut value_loss = 0.0;
    if let Some(v) = value {
        let picked = tape.gather(v, Rc::from(samples.iter().map(|s| s.row).collect::<Vec<_>>()))?;
        let rets = tape.constant(Tensor::row(samples.iter().map(|s| s.ret).collect()));
        let diff = tape.sub(picked, rets)?;
        let sq = tape.square(diff);
        let mse = tape.mean(sq);
        value_loss = tape.value(mse).get(0, 0);
        let term = tape.scale(mse, config.value_coef);
        loss = tape.add(loss, term)?;
    }

    let ratios = tape.value(ratio).data();
    let log_ratios = tape.value(log_ratio).data();
    let diagnostics = PpoDiagnostics {
        loss: tape.value(loss).get(0, 0),
        policy_loss: tape.value(policy_loss).get(0, 0),
        value_loss,
        entropy: -tape.value(mean_neg_entropy).get(0, 0),
        mean_ratio: ratios.iter().sum::<f64>() / m as f64,
        clip_fraction: ratios.iter().filter(|r| (*r - 1.0).abs() > config.clip).count() as f64 / m as f64,
        approx_kl: -log_ratios.iter().sum::<f64>() / m as f64,
    };
    Ok((loss, diagnostics))
}
