use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub momentum: f64,
    pub rms_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            rms_decay: 0.999,
            eps: 1e-8,
        }
    }
}

/// Momentum plus per-parameter RMS scaling with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn from_parts(config: AdamConfig, steps: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Self {
        Self {
            config,
            steps,
            first,
            second,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        let AdamConfig {
            lr,
            momentum,
            rms_decay,
            eps,
        } = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - momentum.powi(t);
        let c2 = 1.0 - rms_decay.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = momentum * m[j] + (1.0 - momentum) * g[j];
                v[j] = rms_decay * v[j] + (1.0 - rms_decay) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                p[j] -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::row(vec![0.3, -1.2]));
        let before = params.clone();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            &params,
        );
        let grads = {
            let mut tape = Tape::new(&params);
            let w = tape.param(id);
            let sq = tape.square(w);
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        opt.step(&mut params, &grads);
        assert_eq!(params, before);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::row(vec![2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &params,
        );
        for _ in 0..500 {
            let grads = {
                let mut tape = Tape::new(&params);
                let w = tape.param(id);
                let sq = tape.square(w);
                let loss = tape.sum(sq);
                tape.backward(loss).unwrap()
            };
            opt.step(&mut params, &grads);
        }
        assert!(params.get(id).data()[0].abs() < 1e-2);
    }
}
