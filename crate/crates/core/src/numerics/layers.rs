use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamSet, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Shape of a multi-layer perceptron: `widths[0]` is the input width and
/// each following entry adds one affine layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self, TensorError> {
        if widths.len() < 2 {
            return Err(TensorError::Configuration(
                "an MLP needs an input width and at least one layer".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(TensorError::Configuration("MLP widths must be positive".into()));
        }
        Ok(Self {
            widths,
            hidden,
            output,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Affine map `x W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_uniform(format!("{prefix}.w"), input, output, input, rng);
        let bias = params.add_uniform(format!("{prefix}.b"), 1, output, input, rng);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(params, &format!("{prefix}.l{i}"), w[0], w[1], rng))
            .collect();
        Self { spec, layers }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, TensorError> {
        let width = tape.value(x).cols();
        if width != self.spec.input_width() {
            return Err(TensorError::DimensionMismatch {
                op: "mlp_forward",
                left: tape.value(x).shape().to_vec(),
                right: vec![self.spec.input_width()],
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            let act = if i == last { self.spec.output } else { self.spec.hidden };
            if act == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// How query and key/value rows are partitioned into independent
/// attention problems (one per batched state).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGroups {
    pub groups: usize,
    pub q_rows: usize,
    pub kv_rows: usize,
}

impl AttentionGroups {
    pub fn single(q_rows: usize, kv_rows: usize) -> Self {
        Self {
            groups: 1,
            q_rows,
            kv_rows,
        }
    }
}

/// Multi-head scaled dot-product attention.
///
/// Returns the head-averaged attention weights and the concatenated
/// per-head outputs (before any output projection). Scores are scaled by
/// `1/sqrt(d_head)`.
pub fn mhdpa(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    groups: AttentionGroups,
) -> Result<(Var, Var), TensorError> {
    let d = tape.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Configuration(format!(
            "feature width {d} does not split into {heads} heads"
        )));
    }
    if tape.value(k).cols() != d {
        return Err(TensorError::DimensionMismatch {
            op: "mhdpa",
            left: tape.value(q).shape().to_vec(),
            right: tape.value(k).shape().to_vec(),
        });
    }
    let dv = tape.value(v).cols();
    if dv % heads != 0 {
        return Err(TensorError::Configuration(format!(
            "value width {dv} does not split into {heads} heads"
        )));
    }
    if tape.value(v).rows() != tape.value(k).rows() {
        return Err(TensorError::DimensionMismatch {
            op: "mhdpa",
            left: tape.value(k).shape().to_vec(),
            right: tape.value(v).shape().to_vec(),
        });
    }
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let AttentionGroups {
        groups,
        q_rows,
        kv_rows,
    } = groups;
    let mut attn_sum: Option<Var> = None;
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dvh, dvh)?,
            )
        };
        let scores = tape.group_scores(qh, kh, groups, q_rows, kv_rows, scale)?;
        let attn = tape.softmax_rows(scores);
        outputs.push(tape.group_mix(attn, vh, groups, q_rows, kv_rows)?);
        attn_sum = Some(match attn_sum {
            None => attn,
            Some(acc) => tape.add(acc, attn)?,
        });
    }
    let attn_sum = attn_sum.expect("at least one head");
    let attention = if heads == 1 {
        attn_sum
    } else {
        tape.scale(attn_sum, 1.0 / heads as f64)
    };
    let output = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    Ok((attention, output))
}

/// One attention block: a feed-forward producing queries, keys and values
/// from its input, multi-head attention, and a linear output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MhdpaLayer {
    pub qkv: Mlp,
    pub proj: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MhdpaLayer {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::Configuration(format!(
                "attention width {width} does not split into {heads} heads"
            )));
        }
        let spec = MlpSpec::new(vec![input, hidden, 3 * width], Activation::Relu, Activation::Identity)?;
        let qkv = Mlp::register(params, &format!("{prefix}.ff"), spec, rng);
        let proj = Linear::register(params, &format!("{prefix}.proj"), width, width, rng);
        Ok(Self {
            qkv,
            proj,
            heads,
            width,
        })
    }

    /// Returns `(head-mean attention, projected output)`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        groups: AttentionGroups,
    ) -> Result<(Var, Var), TensorError> {
        let h = self.qkv.forward(tape, x)?;
        let w = self.width;
        let q = tape.slice_cols(h, 0, w)?;
        let k = tape.slice_cols(h, w, w)?;
        let v = tape.slice_cols(h, 2 * w, w)?;
        let (attention, cat) = mhdpa(tape, q, k, v, self.heads, groups)?;
        let out = self.proj.forward(tape, cat)?;
        Ok((attention, out))
    }
}
