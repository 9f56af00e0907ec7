//! Soft multi-hop composition of predicate matrices.
//!
//! Each step mixes the predicate matrices with a distribution over
//! predicates; the path matrix of length `t` is the ordered product of the
//! first `t` mixed matrices, and κ weights those products by a distribution
//! over path lengths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Tape, Tensor, TensorError, Var};
use crate::symbolic::{EntityId, PredicateId, SymbolicState, VocabularyError};

/// Distributions must sum to one within this bound.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasoningError {
    #[error("expected {expected} weights, got {got}")]
    Length { expected: usize, got: usize },
    #[error("{which} is not a distribution (sum {sum}, min {min})")]
    NotDistribution { which: String, sum: f64, min: f64 },
    #[error("at least one reasoning step is required")]
    NoSteps,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
}

/// `phi[t]` is the predicate distribution for hop `t + 1`; `psi[t]` is the
/// weight of paths of length `t + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub phi: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
}

fn check_distribution(which: impl FnOnce() -> String, w: &[f64]) -> Result<(), ReasoningError> {
    let sum: f64 = w.iter().sum();
    let min = w.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min >= 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(ReasoningError::NotDistribution {
            which: which(),
            sum,
            min,
        });
    }
    Ok(())
}

impl AttentionWeights {
    pub fn steps(&self) -> usize {
        self.psi.len()
    }

    pub fn predicates(&self) -> usize {
        self.phi.first().map_or(0, Vec::len)
    }

    /// Structural checks only; see [`AttentionWeights::validate`] for the
    /// normalization invariants.
    pub fn check_shape(&self, predicates: usize) -> Result<(), ReasoningError> {
        if self.psi.is_empty() {
            return Err(ReasoningError::NoSteps);
        }
        if self.phi.len() != self.psi.len() {
            return Err(ReasoningError::Length {
                expected: self.psi.len(),
                got: self.phi.len(),
            });
        }
        for row in &self.phi {
            if row.len() != predicates {
                return Err(ReasoningError::Length {
                    expected: predicates,
                    got: row.len(),
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self, predicates: usize) -> Result<(), ReasoningError> {
        self.check_shape(predicates)?;
        for (t, row) in self.phi.iter().enumerate() {
            check_distribution(|| format!("s_phi step {}", t + 1), row)?;
        }
        check_distribution(|| "s_psi".to_string(), &self.psi)
    }

    /// All mass on one chain: `chain[t]` is selected at hop `t + 1` and the
    /// path length is `chain.len()`. Hops past the chain stay on `chain[0]`.
    pub fn one_hot(chain: &[PredicateId], predicates: usize, steps: usize) -> Self {
        assert!(!chain.is_empty() && chain.len() <= steps, "chain length must be in 1..=steps");
        let phi = (0..steps)
            .map(|t| {
                let mut row = vec![0.0; predicates];
                row[chain.get(t).unwrap_or(&chain[0]).0] = 1.0;
                row
            })
            .collect();
        let mut psi = vec![0.0; steps];
        psi[chain.len() - 1] = 1.0;
        Self { phi, psi }
    }
}

/// `M^(t) = Σ_k w_k M_k`.
pub fn mix_step(weights: &[f64], state: &SymbolicState) -> Result<Tensor, ReasoningError> {
    let n = state.predicate_count();
    if weights.len() != n {
        return Err(ReasoningError::Length {
            expected: n,
            got: weights.len(),
        });
    }
    let x = state.entity_count();
    let mut out = Tensor::zeros(x, x);
    let values: Vec<f64> = state.values().collect();
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let m = &values[k * x * x..(k + 1) * x * x];
        out.data_mut().iter_mut().zip(m).for_each(|(o, v)| *o += w * v);
    }
    Ok(out)
}

/// One hop along the path, propagating a row vector: `v^(t)ᵀ = v^(t−1)ᵀ M^(t)`.
///
/// Starting from `v_x`, entry `j` of the result after `t` hops is the
/// weighted number of length-`t` paths from `x` to `x_j`.
pub fn hop(m: &Tensor, v: &[f64]) -> Result<Vec<f64>, ReasoningError> {
    let (r, c) = m.dims();
    if v.len() != r {
        return Err(ReasoningError::Length {
            expected: r,
            got: v.len(),
        });
    }
    let mut out = vec![0.0; c];
    for (i, &vi) in v.iter().enumerate() {
        if vi != 0.0 {
            out.iter_mut().zip(m.row_slice(i)).for_each(|(o, mij)| *o += vi * mij);
        }
    }
    Ok(out)
}

/// `κ = Σ_{t'} s_ψ^(t') · M^(1) M^(2) ⋯ M^(t')`, one matrix product per hop.
pub fn kappa(weights: &AttentionWeights, state: &SymbolicState) -> Result<Tensor, ReasoningError> {
    let mats: Vec<Tensor> = (0..state.predicate_count()).map(|k| state.matrix(PredicateId(k))).collect();
    kappa_from_matrices(weights, &mats)
}

/// [`kappa`] over arbitrary real square relation matrices.
pub fn kappa_from_matrices(weights: &AttentionWeights, mats: &[Tensor]) -> Result<Tensor, ReasoningError> {
    weights.check_shape(mats.len())?;
    let x = mats[0].rows();
    let mut kappa = Tensor::zeros(x, x);
    let mut path: Option<Tensor> = None;
    for (phi, &psi) in weights.phi.iter().zip(&weights.psi) {
        let mut m = Tensor::zeros(x, x);
        for (mk, &w) in mats.iter().zip(phi) {
            if mk.dims() != (x, x) {
                return Err(TensorError::mismatch("kappa", &mats[0], mk).into());
            }
            m.data_mut().iter_mut().zip(mk.data()).for_each(|(o, v)| *o += w * v);
        }
        let next = match path {
            None => m,
            Some(p) => p.matmul(&m)?,
        };
        kappa.data_mut().iter_mut().zip(next.data()).for_each(|(k, p)| *k += psi * p);
        path = Some(next);
    }
    Ok(kappa)
}

/// `v_xᵀ κ v_{x'}`.
pub fn score(x: EntityId, y: EntityId, kappa: &Tensor) -> Result<f64, ReasoningError> {
    let (r, c) = kappa.dims();
    for (id, len) in [(x, r), (y, c)] {
        if id.0 >= len {
            return Err(VocabularyError::EntityOutOfRange { id: id.0, len }.into());
        }
    }
    Ok(kappa.get(x.0, y.0))
}

/// Batched κ on a tape.
///
/// `mats` holds the predicate matrices of `B` states as `(B·N) × |X|²`
/// (state-major); `phi[t]` is `B × N` and `psi` is `B × T`. Returns κ for
/// every state as `B × |X|²`.
pub fn kappa_on_tape(
    tape: &mut Tape<'_>,
    mats: Var,
    phi: &[Var],
    psi: Var,
    entities: usize,
) -> Result<Var, ReasoningError> {
    if phi.is_empty() {
        return Err(ReasoningError::NoSteps);
    }
    let steps = tape.value(psi).cols();
    if steps != phi.len() {
        return Err(ReasoningError::Length {
            expected: steps,
            got: phi.len(),
        });
    }
    let mut kappa: Option<Var> = None;
    let mut path: Option<Var> = None;
    for (t, &w) in phi.iter().enumerate() {
        let m = tape.group_combine(w, mats)?;
        let next = match path {
            None => m,
            Some(p) => tape.batched_matmul(p, m, entities)?,
        };
        let weight = tape.slice_cols(psi, t, 1)?;
        let term = tape.mul_col(next, weight)?;
        kappa = Some(match kappa {
            None => term,
            Some(k) => tape.add(k, term)?,
        });
        path = Some(next);
    }
    Ok(kappa.expect("at least one step"))
}
