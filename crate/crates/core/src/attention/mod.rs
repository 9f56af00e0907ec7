//! Hierarchical attention over predicates (per reasoning step) and over
//! path lengths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    mhdpa, Activation, AttentionGroups, MhdpaLayer, Mlp, MlpSpec, ParamId, ParamSet, Tape, Tensor,
    TensorError, Var,
};
use crate::reasoning::AttentionWeights;
use crate::symbolic::FlatState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Maximum reasoning steps `T`.
    pub steps: usize,
    /// Stacked attention blocks per step.
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width.
    pub hidden: usize,
    pub predicates: usize,
    pub entities: usize,
}

impl AttentionConfig {
    pub fn new(predicates: usize, entities: usize) -> Self {
        Self {
            steps: 4,
            layers: 2,
            heads: 4,
            hidden: 64,
            predicates,
            entities,
        }
    }

    /// Width of each predicate row, `|X|²`; also the model width.
    pub fn width(&self) -> usize {
        self.entities * self.entities
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: &str| Err(TensorError::Configuration(m.to_string()));
        if self.steps == 0 {
            return bad("reasoning steps must be at least 1");
        }
        if self.layers == 0 {
            return bad("attention needs at least one layer per step");
        }
        if self.predicates == 0 || self.entities == 0 || self.hidden == 0 {
            return bad("attention dimensions must be positive");
        }
        if self.heads == 0 || self.width() % self.heads != 0 {
            return Err(TensorError::Configuration(format!(
                "width {} does not split into {} heads",
                self.width(),
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModel {
    pub config: AttentionConfig,
    /// `steps[t][l]` is block `l` of reasoning step `t + 1`; each block adds
    /// its output to its input.
    pub steps: Vec<Vec<MhdpaLayer>>,
    /// Keys for the path attention, from pooled step embeddings.
    pub path_keys: Mlp,
    /// The single learned query row of the path attention.
    pub path_query: ParamId,
}

/// Tape handles produced by a batched forward pass over `B` states.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `phi[t]` is `B × N`.
    pub phi: Vec<Var>,
    /// `B × T`.
    pub psi: Var,
    /// `V^(0) … V^(T)`, each `(B·N) × |X|²`.
    pub values: Vec<Var>,
    pub batch: usize,
}

impl AttentionModel {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        config.validate()?;
        let d = config.width();
        let mut steps = Vec::with_capacity(config.steps);
        for t in 0..config.steps {
            let mut blocks = Vec::with_capacity(config.layers);
            for l in 0..config.layers {
                let prefix = format!("attn.step{}.layer{l}", t + 1);
                blocks.push(MhdpaLayer::register(params, &prefix, d, config.hidden, d, config.heads, rng)?);
            }
            steps.push(blocks);
        }
        let spec = MlpSpec::new(vec![d, config.hidden, d], Activation::Relu, Activation::Identity)?;
        let path_keys = Mlp::register(params, "attn.path.ff", spec, rng);
        let path_query = params.add_uniform("attn.path.query", 1, d, d, rng);
        Ok(Self {
            config,
            steps,
            path_keys,
            path_query,
        })
    }

    /// Per-step predicate attention. `mats` is `(B·N) × |X|²`, state-major.
    pub fn predicate_attention(
        &self,
        tape: &mut Tape<'_>,
        mats: Var,
    ) -> Result<(Vec<Var>, Vec<Var>), TensorError> {
        let n = self.config.predicates;
        let (rows, cols) = tape.value(mats).dims();
        if cols != self.config.width() || rows == 0 || rows % n != 0 {
            return Err(TensorError::Configuration(format!(
                "expected (B·{n}) × {} predicate rows, got {rows} × {cols}",
                self.config.width()
            )));
        }
        let groups = AttentionGroups {
            groups: rows / n,
            q_rows: n,
            kv_rows: n,
        };
        let mut values = vec![mats];
        let mut phi = Vec::with_capacity(self.config.steps);
        for blocks in &self.steps {
            let mut x = *values.last().expect("non-empty");
            let mut attention = None;
            for block in blocks {
                let (a, out) = block.forward(tape, x, groups)?;
                attention = Some(a);
                x = tape.add(x, out)?;
            }
            let col_mean = tape.group_mean_rows(attention.expect("at least one layer"), n)?;
            phi.push(tape.row_normalize(col_mean));
            values.push(x);
        }
        Ok((phi, values))
    }

    /// Path-length attention over `V^(0) … V^(T)`; returns `B × T`.
    pub fn path_attention(&self, tape: &mut Tape<'_>, values: &[Var]) -> Result<Var, TensorError> {
        let t = self.config.steps;
        if values.len() != t + 1 {
            return Err(TensorError::Configuration(format!(
                "path attention expects {} value matrices, got {}",
                t + 1,
                values.len()
            )));
        }
        let n = self.config.predicates;
        let pooled = values
            .iter()
            .map(|&v| tape.group_mean_rows(v, n))
            .collect::<Result<Vec<_>, _>>()?;
        let batch = tape.value(pooled[0]).rows();
        let stacked = tape.stack_groups(&pooled)?;
        let keys = self.path_keys.forward(tape, stacked)?;
        let q = tape.param(self.path_query);
        let q = tape.repeat_rows(q, batch)?;
        let groups = AttentionGroups {
            groups: batch,
            q_rows: 1,
            kv_rows: t + 1,
        };
        let (attention, _) = mhdpa(tape, q, keys, keys, self.config.heads, groups)?;
        let lengths = tape.slice_cols(attention, 1, t)?;
        Ok(tape.row_normalize(lengths))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mats: Var) -> Result<AttentionOutput, TensorError> {
        let (phi, values) = self.predicate_attention(tape, mats)?;
        let psi = self.path_attention(tape, &values)?;
        let batch = tape.value(psi).rows();
        Ok(AttentionOutput {
            phi,
            psi,
            values,
            batch,
        })
    }

    /// Attention weights for a single state, without recording gradients.
    pub fn weights(&self, params: &ParamSet, flat: &FlatState) -> Result<AttentionWeights, TensorError> {
        let mut tape = Tape::new(params);
        let mats = tape.constant(flat.tensor().clone());
        let out = self.forward(&mut tape, mats)?;
        Ok(read_weights(&tape, &out).pop().expect("one state"))
    }
}

/// Extracts plain per-state weights from a forward pass.
pub fn read_weights(tape: &Tape<'_>, out: &AttentionOutput) -> Vec<AttentionWeights> {
    let psi: &Tensor = tape.value(out.psi);
    (0..out.batch)
        .map(|b| AttentionWeights {
            phi: out.phi.iter().map(|&p| tape.value(p).row_slice(b).to_vec()).collect(),
            psi: psi.row_slice(b).to_vec(),
        })
        .collect()
}
