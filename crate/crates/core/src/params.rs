//! Learnable parameter blocks shared by every compressor stage.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result, SpaError};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Coarse grouping of parameters, used for gradient reports and freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Queries,
    Attention,
    Ffn,
    LayerNorm,
    TimeEncoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Queries,
        ParamGroup::Attention,
        ParamGroup::Ffn,
        ParamGroup::LayerNorm,
        ParamGroup::TimeEncoder,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Queries => "queries",
            ParamGroup::Attention => "attention",
            ParamGroup::Ffn => "ffn",
            ParamGroup::LayerNorm => "layer_norm",
            ParamGroup::TimeEncoder => "time_encoder",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = SpaError;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| SpaError::InvalidInput(format!("unknown parameter group `{s}`")))
    }
}

/// Read and write access to every named tensor of a parameter block.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform entries in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..=bound)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<T: Scalar = f64> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    /// Unit scale, zero shift.
    pub fn new(d: usize) -> Self {
        Self {
            scale: Tensor::full(vec![d], T::one()),
            shift: Tensor::zeros(vec![d]),
        }
    }

    pub fn apply(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let g = tape.param(&join(prefix, "scale"), ParamGroup::LayerNorm, &self.scale)?;
        let b = tape.param(&join(prefix, "shift"), ParamGroup::LayerNorm, &self.shift)?;
        tape.layer_norm(x, g, b)
    }
}

impl<T: Scalar> Parameters<T> for LayerNormParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor<T>)) {
        f(&join(prefix, "scale"), ParamGroup::LayerNorm, &self.scale);
        f(&join(prefix, "shift"), ParamGroup::LayerNorm, &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor<T>)) {
        f(&join(prefix, "scale"), ParamGroup::LayerNorm, &mut self.scale);
        f(&join(prefix, "shift"), ParamGroup::LayerNorm, &mut self.shift);
    }
}

/// Query/key/value/output projections of a multi-head attention block.
///
/// Weights are `[D, D]` and applied as `x W + b`; heads split the projected
/// features into contiguous `D / heads` slices.
#[derive(Clone, Debug)]
pub struct AttentionParams<T: Scalar = f64> {
    pub heads: usize,
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub output: Tensor<T>,
    pub query_bias: Option<Tensor<T>>,
    pub key_bias: Option<Tensor<T>>,
    pub value_bias: Option<Tensor<T>>,
    pub output_bias: Option<Tensor<T>>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(d: usize, heads: usize, bias: bool, init: &mut Initializer) -> Result<Self> {
        if d == 0 || heads == 0 || !d.is_multiple_of(heads) {
            return Err(SpaError::Config(format!(
                "model dim {d} must be a positive multiple of head count {heads}"
            )));
        }
        let mut weight = || init.uniform(vec![d, d], d);
        let (query, key, value, output) = (weight(), weight(), weight(), weight());
        let mut bias_vec = || bias.then(|| init.uniform(vec![d], d));
        Ok(Self {
            heads,
            query,
            key,
            value,
            output,
            query_bias: bias_vec(),
            key_bias: bias_vec(),
            value_bias: bias_vec(),
            output_bias: bias_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.query.shape()[0]
    }

    /// Zeroes the output projection so the block contributes nothing.
    pub fn zero_output(&mut self) {
        self.output = Tensor::zeros(self.output.shape().to_vec());
        if let Some(b) = &mut self.output_bias {
            *b = Tensor::zeros(b.shape().to_vec());
        }
    }

    fn named(&self) -> [(&'static str, Option<&Tensor<T>>); 8] {
        [
            ("query", Some(&self.query)),
            ("key", Some(&self.key)),
            ("value", Some(&self.value)),
            ("output", Some(&self.output)),
            ("query_bias", self.query_bias.as_ref()),
            ("key_bias", self.key_bias.as_ref()),
            ("value_bias", self.value_bias.as_ref()),
            ("output_bias", self.output_bias.as_ref()),
        ]
    }

    /// Attention of `queries: [B, Lq, D]` over `context: [B, Lk, D]`.
    /// Returns the block output and the attention-core node, whose cached
    /// softmax weights can be read back from the tape.
    pub fn apply_with_core(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        queries: Var,
        context: Var,
    ) -> Result<(Var, Var)> {
        let d = self.dim();
        for v in [queries, context] {
            let shape = tape.value(v)?.shape();
            if shape.len() != 3 || shape[2] != d {
                return Err(shape_err(
                    "attention",
                    format!("expected [B, L, {d}] input, got {shape:?}"),
                ));
            }
        }
        let mut bound = [None; 8];
        for (slot, (name, tensor)) in bound.iter_mut().zip(self.named()) {
            if let Some(t) = tensor {
                *slot = Some(tape.param(&join(prefix, name), ParamGroup::Attention, t)?);
            }
        }
        let [wq, wk, wv, wo, bq, bk, bv, bo] = bound;
        let q = tape.linear(queries, wq.unwrap(), bq)?;
        let k = tape.linear(context, wk.unwrap(), bk)?;
        let v = tape.linear(context, wv.unwrap(), bv)?;
        let core = tape.attention(q, k, v, self.heads)?;
        let out = tape.linear(core, wo.unwrap(), bo)?;
        Ok((out, core))
    }

    pub fn apply(&self, tape: &mut Tape<T>, prefix: &str, queries: Var, context: Var) -> Result<Var> {
        self.apply_with_core(tape, prefix, queries, context)
            .map(|(out, _)| out)
    }
}

impl<T: Scalar> Parameters<T> for AttentionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor<T>)) {
        for (name, tensor) in self.named() {
            if let Some(t) = tensor {
                f(&join(prefix, name), ParamGroup::Attention, t);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor<T>)) {
        let slots: [(&str, Option<&mut Tensor<T>>); 8] = [
            ("query", Some(&mut self.query)),
            ("key", Some(&mut self.key)),
            ("value", Some(&mut self.value)),
            ("output", Some(&mut self.output)),
            ("query_bias", self.query_bias.as_mut()),
            ("key_bias", self.key_bias.as_mut()),
            ("value_bias", self.value_bias.as_mut()),
            ("output_bias", self.output_bias.as_mut()),
        ];
        for (name, tensor) in slots {
            if let Some(t) = tensor {
                f(&join(prefix, name), ParamGroup::Attention, t);
            }
        }
    }
}

/// Position-wise feed-forward block: affine, GELU, affine.
#[derive(Clone, Debug)]
pub struct FfnParams<T: Scalar = f64> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> FfnParams<T> {
    pub fn new(d: usize, hidden: usize, init: &mut Initializer) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(SpaError::Config(format!(
                "feed-forward dims must be positive (d = {d}, hidden = {hidden})"
            )));
        }
        Ok(Self {
            w1: init.uniform(vec![d, hidden], d),
            b1: init.uniform(vec![hidden], d),
            w2: init.uniform(vec![hidden, d], hidden),
            b2: init.uniform(vec![d], hidden),
        })
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    /// Zeroes the second affine layer so the block outputs zeros.
    pub fn zero_output(&mut self) {
        self.w2 = Tensor::zeros(self.w2.shape().to_vec());
        self.b2 = Tensor::zeros(self.b2.shape().to_vec());
    }

    pub fn apply(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let w1 = tape.param(&join(prefix, "w1"), ParamGroup::Ffn, &self.w1)?;
        let b1 = tape.param(&join(prefix, "b1"), ParamGroup::Ffn, &self.b1)?;
        let w2 = tape.param(&join(prefix, "w2"), ParamGroup::Ffn, &self.w2)?;
        let b2 = tape.param(&join(prefix, "b2"), ParamGroup::Ffn, &self.b2)?;
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.gelu(h)?;
        tape.linear(h, w2, Some(b2))
    }
}

impl<T: Scalar> Parameters<T> for FfnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor<T>)) {
        f(&join(prefix, "w1"), ParamGroup::Ffn, &self.w1);
        f(&join(prefix, "b1"), ParamGroup::Ffn, &self.b1);
        f(&join(prefix, "w2"), ParamGroup::Ffn, &self.w2);
        f(&join(prefix, "b2"), ParamGroup::Ffn, &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor<T>)) {
        f(&join(prefix, "w1"), ParamGroup::Ffn, &mut self.w1);
        f(&join(prefix, "b1"), ParamGroup::Ffn, &mut self.b1);
        f(&join(prefix, "w2"), ParamGroup::Ffn, &mut self.w2);
        f(&join(prefix, "b2"), ParamGroup::Ffn, &mut self.b2);
    }
}
