//! Reverse-mode differentiation over the dense kernels.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with
//! the cached state each backward rule needs. Parameters are registered by
//! name so gradients can be mapped back onto model tensors, and whole
//! parameter groups can be frozen (recorded as constants).

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Result, SpaError};
use crate::kernels::{self, LayerNormCache};
use crate::params::ParamGroup;
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op<T: Scalar> {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: LayerNormCache<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Tensor<T>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    RepeatInterleave {
        x: usize,
        times: usize,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A named parameter registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamBinding {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
    pub frozen: bool,
}

pub struct Tape<T: Scalar = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<ParamBinding>,
    param_lookup: HashMap<String, usize>,
    frozen: BTreeSet<ParamGroup>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// A tape on which the listed parameter groups are recorded as constants.
    pub fn with_frozen(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        let mut tape = Self::new();
        tape.frozen = groups.into_iter().collect();
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &[ParamBinding] {
        &self.params
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(SpaError::UnrecordedNode { node: v.index });
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn requires(&self, indices: &[usize]) -> bool {
        indices.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Softmax weights cached by an attention node.
    pub fn attention_weights(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.check(v)?;
        match &self.nodes[i].op {
            Op::Attention { probs, .. } => Ok(probs),
            _ => Err(SpaError::InvalidInput(format!(
                "node {i} is not an attention node"
            ))),
        }
    }

    /// Records an input that carries no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        value.ensure_finite()?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Records a differentiable input that is not a named model parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        value.ensure_finite()?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Registers a named parameter, or returns the existing handle if this
    /// name was already bound on the tape.
    pub fn param(&mut self, name: &str, group: ParamGroup, value: &Tensor<T>) -> Result<Var> {
        if let Some(&slot) = self.param_lookup.get(name) {
            return Ok(self.params[slot].var);
        }
        value.ensure_finite()?;
        let frozen = self.frozen.contains(&group);
        let var = self.push(value.clone(), Op::Leaf, !frozen);
        self.param_lookup.insert(name.to_string(), self.params.len());
        self.params.push(ParamBinding {
            name: name.to_string(),
            group,
            var,
            frozen,
        });
        Ok(var)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let value = kernels::linear(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|b| &self.nodes[b].value),
        )?;
        let mut deps = vec![xi, wi];
        deps.extend(bi);
        let rg = self.requires(&deps);
        Ok(self.push(value, Op::Linear { x: xi, w: wi, b: bi }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (value, cache) = kernels::layer_norm(
            &self.nodes[xi].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
        )?;
        let rg = self.requires(&[xi, gi, bi]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                cache,
            },
            rg,
        ))
    }

    /// Multi-head attention core over projected `q`, `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qi, ki, vi) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (value, probs) = kernels::attention(
            &self.nodes[qi].value,
            &self.nodes[ki].value,
            &self.nodes[vi].value,
            heads,
        )?;
        let rg = self.requires(&[qi, ki, vi]);
        Ok(self.push(
            value,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                heads,
                probs,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(f);
        let rg = self.requires(&[xi]);
        Ok(self.push(value, op(xi), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::gelu, Op::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v: T| v.tanh(), Op::Tanh)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ai].value.zip_with(name, &self.nodes[bi].value, f)?;
        let rg = self.requires(&[ai, bi]);
        Ok(self.push(value, op(ai, bi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let inputs = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = Tensor::concat(&refs, axis)?;
        let rg = self.requires(&inputs);
        Ok(self.push(value, Op::Concat { inputs, axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.slice(axis, start, len)?;
        let rg = self.requires(&[xi]);
        Ok(self.push(value, Op::Slice { x: xi, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.reshape(shape.to_vec())?;
        let rg = self.requires(&[xi]);
        Ok(self.push(value, Op::Reshape(xi), rg))
    }

    /// Output row `g * times + i` along axis 0 is input row `g`.
    pub fn repeat_interleave(&mut self, x: Var, times: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.repeat_interleave(times)?;
        let rg = self.requires(&[xi]);
        Ok(self.push(value, Op::RepeatInterleave { x: xi, times }, rg))
    }

    /// Selects rows of a `[V, D]` table, producing `[indices.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let t = &self.nodes[ti].value;
        if t.rank() != 2 {
            return Err(shape_err("gather_rows", format!("table {:?}", t.shape())));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &r in indices {
            if r >= rows {
                return Err(shape_err(
                    "gather_rows",
                    format!("row {r} out of range for {rows} rows"),
                ));
            }
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.requires(&[ti]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table: ti,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates `upstream` (the gradient of some scalar with respect to
    /// `output`) back through every recorded operation.
    pub fn backward(&self, output: Var, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let out = self.check(output)?;
        if upstream.shape() != self.nodes[out].value.shape() {
            return Err(shape_err(
                "backward",
                format!(
                    "upstream {:?} for output {:?}",
                    upstream.shape(),
                    self.nodes[out].value.shape()
                ),
            ));
        }
        upstream.ensure_finite()?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(upstream.clone());

        for i in (0..=out).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let lg = kernels::linear_backward(val(*x), val(*w), g);
                self.accumulate(grads, *x, lg.input);
                self.accumulate(grads, *w, lg.weight);
                if let Some(b) = b {
                    self.accumulate(grads, *b, lg.bias);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let lg = kernels::layer_norm_backward(g, val(*gamma), cache);
                self.accumulate(grads, *x, lg.input);
                self.accumulate(grads, *gamma, lg.scale);
                self.accumulate(grads, *beta, lg.shift);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let ag = kernels::attention_backward(val(*q), val(*k), val(*v), probs, *heads, g);
                self.accumulate(grads, *q, ag.query);
                self.accumulate(grads, *k, ag.key);
                self.accumulate(grads, *v, ag.value);
            }
            Op::Gelu(x) => {
                let dx = val(*x)
                    .zip_with("gelu", g, |xv, gv| gv * kernels::gelu_grad(xv))
                    .expect("shape recorded");
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .zip_with("sigmoid", g, |y, gv| gv * y * (T::one() - y))
                    .expect("shape recorded");
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = node
                    .value
                    .zip_with("tanh", g, |y, gv| gv * (T::one() - y * y))
                    .expect("shape recorded");
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g.zip_with("mul", val(*b), |gv, bv| gv * bv).expect("shape recorded");
                let db = g.zip_with("mul", val(*a), |gv, av| gv * av).expect("shape recorded");
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &j in inputs {
                    let len = val(j).shape()[*axis];
                    let piece = g.slice(*axis, offset, len).expect("shape recorded");
                    self.accumulate(grads, j, piece);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                dx.slice_add_assign(*axis, *start, g);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.reshape(val(*x).shape().to_vec()).expect("shape recorded");
                self.accumulate(grads, *x, dx);
            }
            Op::RepeatInterleave { x, times } => {
                let src = val(*x);
                let outer = src.shape()[0];
                let inner = src.len().checked_div(outer).unwrap_or(0);
                let mut dx = Tensor::zeros(src.shape().to_vec());
                for o in 0..outer {
                    for r in 0..*times {
                        let from = &g.data()[(o * times + r) * inner..][..inner];
                        for (d, &s) in dx.data_mut()[o * inner..][..inner].iter_mut().zip(from) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { table, indices } => {
                let t = val(*table);
                let d = t.shape()[1];
                let mut dt = Tensor::zeros(t.shape().to_vec());
                for (k, &r) in indices.iter().enumerate() {
                    let from = &g.data()[k * d..(k + 1) * d];
                    for (dst, &s) in dt.data_mut()[r * d..(r + 1) * d].iter_mut().zip(from) {
                        *dst += s;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T: Scalar = f64> {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<ParamBinding>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded node. Nodes the output does not
    /// depend on get an all-zero gradient; constants are an error.
    pub fn get(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(SpaError::UnrecordedNode { node: v.index });
        }
        if !self.requires[v.index] {
            return Err(SpaError::NotDifferentiable { node: v.index });
        }
        Ok(self.grads[v.index]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index].clone())))
    }

    /// Parameter bindings of the tape, in registration order.
    pub fn bindings(&self) -> &[ParamBinding] {
        &self.params
    }

    /// Gradient of every non-frozen named parameter.
    pub fn named(&self) -> HashMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| (p.name.clone(), self.get(p.var).expect("bound parameter")))
            .collect()
    }
}
