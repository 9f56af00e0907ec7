use std::rc::Rc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{gae, normalize, ppo_objective, PpoDiagnostics, PpoLossConfig, PpoSample};
use super::{dedup, select, softmax, ActionMode, EpisodeSummary, NsrlModel, PolicyError};
use crate::envs::Environment;
use crate::numerics::{Adam, AdamConfig, ParamSet, Tape};
use crate::symbolic::SymbolicState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub batch_episodes: usize,
    pub epochs: usize,
    /// Decisions per gradient step.
    pub minibatch: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub loss: PpoLossConfig,
    pub optimizer: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            batch_episodes: 32,
            epochs: 4,
            minibatch: 64,
            gamma: 1.0,
            lambda: 0.95,
            loss: PpoLossConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
struct Decision {
    state: SymbolicState,
    candidates: Rc<[usize]>,
    action: usize,
    log_prob: f64,
    value: f64,
    reward: f64,
}

/// One collected episode.
#[derive(Clone, Debug)]
struct Rollout {
    decisions: Vec<Decision>,
    /// Value of the state after the last decision, 0 when terminal.
    bootstrap: f64,
    summary: EpisodeSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoUpdate {
    pub episodes: Vec<EpisodeSummary>,
    pub decisions: usize,
    pub gradient_steps: usize,
    /// Averaged over all gradient steps of the update.
    pub diagnostics: PpoDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoTrainer {
    pub config: PpoConfig,
    pub optimizer: Adam,
    pub episodes: u64,
    pub steps: u64,
}

impl PpoTrainer {
    pub fn new(config: PpoConfig, params: &ParamSet) -> Self {
        Self {
            optimizer: Adam::new(config.optimizer, params),
            config,
            episodes: 0,
            steps: 0,
        }
    }

    /// Runs `episodes` episodes with the softmax policy, all of `envs` in
    /// lockstep.
    fn collect<E: Environment>(
        &self,
        model: &NsrlModel,
        params: &ParamSet,
        envs: &mut [E],
        episodes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Rollout>, PolicyError> {
        let mut out = Vec::with_capacity(episodes);
        while out.len() < episodes {
            let wave = (episodes - out.len()).min(envs.len());
            let envs = &mut envs[..wave];
            let mut states: Vec<SymbolicState> = envs.iter_mut().map(|e| e.reset(rng)).collect();
            let mut rollouts: Vec<Rollout> = (0..wave)
                .map(|_| Rollout {
                    decisions: Vec::new(),
                    bootstrap: 0.0,
                    summary: EpisodeSummary {
                        reward: 0.0,
                        score: 0.0,
                        length: 0,
                    },
                })
                .collect();
            let mut live: Vec<usize> = (0..wave).collect();
            let mut cut: Vec<usize> = Vec::new();
            while !live.is_empty() {
                let batch: Vec<&SymbolicState> = live.iter().map(|&i| &states[i]).collect();
                let eval = model.evaluate(params, &batch)?;
                let mut still = Vec::with_capacity(live.len());
                for (row, &i) in live.iter().enumerate() {
                    let env = &mut envs[i];
                    let mask = env.action_mask();
                    let open: Vec<usize> = (0..env.actions().len())
                        .filter(|&k| mask.as_ref().map_or(true, |m| m[k]))
                        .collect();
                    let cols: Rc<[usize]> = open
                        .iter()
                        .map(|&k| model.action_column(&env.actions()[k]))
                        .collect::<Result<Vec<_>, _>>()?
                        .into();
                    let q: Vec<f64> = cols.iter().map(|&c| eval.q.get(row, c)).collect();
                    let pick = select(&q, None, ActionMode::Softmax, rng)?;
                    let log_prob = softmax(&q, None)[pick].ln();
                    let atom = env.actions()[open[pick]];
                    let step = env.step(&atom, rng)?;
                    let r = &mut rollouts[i];
                    r.decisions.push(Decision {
                        state: std::mem::replace(&mut states[i], step.state.clone()),
                        candidates: cols,
                        action: pick,
                        log_prob,
                        value: eval.values.as_ref().map_or(0.0, |v| v[row]),
                        reward: step.reward,
                    });
                    r.summary.reward += step.reward;
                    r.summary.score += step.score;
                    r.summary.length += 1;
                    if step.truncated {
                        cut.push(i);
                    } else if !step.terminal {
                        still.push(i);
                    }
                }
                live = still;
            }
            if model.critic.is_some() && !cut.is_empty() {
                let finals: Vec<&SymbolicState> = cut.iter().map(|&i| &states[i]).collect();
                let values = model.evaluate(params, &finals)?.values.expect("critic");
                for (&i, v) in cut.iter().zip(values) {
                    rollouts[i].bootstrap = v;
                }
            }
            out.extend(rollouts);
        }
        Ok(out)
    }

    /// One gradient step on a minibatch of decisions.
    fn step(
        &mut self,
        model: &NsrlModel,
        params: &mut ParamSet,
        decisions: &[&Decision],
        advantages: &[f64],
        returns: &[f64],
    ) -> Result<PpoDiagnostics, PolicyError> {
        let (unique, rows) = dedup(decisions.iter().map(|d| &d.state));
        let samples: Vec<PpoSample> = decisions
            .iter()
            .enumerate()
            .map(|(k, d)| PpoSample {
                row: rows[k],
                candidates: d.candidates.clone(),
                action: d.action,
                old_log_prob: d.log_prob,
                advantage: advantages[k],
                ret: returns[k],
            })
            .collect();
        let grads;
        let diagnostics;
        {
            let mut tape = Tape::new(params);
            let out = model.forward_states(&mut tape, &unique)?;
            let (loss, diag) = ppo_objective(&mut tape, out.q, out.value, &samples, &self.config.loss)?;
            grads = tape.backward(loss)?;
            diagnostics = diag;
        }
        self.optimizer.step(params, &grads);
        Ok(diagnostics)
    }

    /// Collects one batch of episodes and applies the clipped update.
    pub fn iteration<E: Environment>(
        &mut self,
        model: &NsrlModel,
        params: &mut ParamSet,
        envs: &mut [E],
        rng: &mut ChaCha8Rng,
    ) -> Result<PpoUpdate, PolicyError> {
        if envs.is_empty() {
            return Err(PolicyError::Config("no environments".into()));
        }
        if self.config.batch_episodes == 0 || self.config.minibatch == 0 {
            return Err(PolicyError::Config("batch sizes must be positive".into()));
        }
        let rollouts = self.collect(model, params, envs, self.config.batch_episodes, rng)?;
        let mut decisions: Vec<&Decision> = Vec::new();
        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        for r in &rollouts {
            let rewards: Vec<f64> = r.decisions.iter().map(|d| d.reward).collect();
            let values: Vec<f64> = r.decisions.iter().map(|d| d.value).collect();
            let (adv, ret) = gae(&rewards, &values, r.bootstrap, self.config.gamma, self.config.lambda);
            decisions.extend(r.decisions.iter());
            advantages.extend(adv);
            returns.extend(ret);
        }
        normalize(&mut advantages);
        let mut order: Vec<usize> = (0..decisions.len()).collect();
        let mut total = PpoDiagnostics::default();
        let mut steps = 0;
        for _ in 0..self.config.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.config.minibatch) {
                let ds: Vec<&Decision> = chunk.iter().map(|&k| decisions[k]).collect();
                let adv: Vec<f64> = chunk.iter().map(|&k| advantages[k]).collect();
                let ret: Vec<f64> = chunk.iter().map(|&k| returns[k]).collect();
                let d = self.step(model, params, &ds, &adv, &ret)?;
                total.loss += d.loss;
                total.policy_loss += d.policy_loss;
                total.value_loss += d.value_loss;
                total.entropy += d.entropy;
                total.mean_ratio += d.mean_ratio;
                total.clip_fraction += d.clip_fraction;
                total.approx_kl += d.approx_kl;
                steps += 1;
            }
        }
        if steps > 0 {
            let n = steps as f64;
            for v in [
                &mut total.loss,
                &mut total.policy_loss,
                &mut total.value_loss,
                &mut total.entropy,
                &mut total.mean_ratio,
                &mut total.clip_fraction,
                &mut total.approx_kl,
            ] {
                *v /= n;
            }
        }
        let episodes: Vec<EpisodeSummary> = rollouts.iter().map(|r| r.summary.clone()).collect();
        self.episodes += episodes.len() as u64;
        self.steps += decisions.len() as u64;
        Ok(PpoUpdate {
            decisions: decisions.len(),
            episodes,
            gradient_steps: steps,
            diagnostics: total,
        })
    }
}
