//! Gated recurrent timestamp encoder.
//!
//! A time in seconds is rendered as a decimal string with one fractional
//! digit (`"83.5"`). Each character is embedded and fed left to right into a
//! GRU cell; the final hidden state is the timestamp embedding.

use crate::error::{Result, SpaError};
use crate::params::{join, Initializer, ParamGroup, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Digits `0..=9` plus the decimal point.
pub const ALPHABET_SIZE: usize = 11;
const DECIMAL_POINT: usize = 10;
/// Exclusive upper bound on encodable times.
pub const MAX_SECONDS: f64 = 1e6;

/// Character tokens of a timestamp.
pub fn timestamp_tokens(t: f64) -> Result<Vec<usize>> {
    if !t.is_finite() || !(0.0..MAX_SECONDS).contains(&t) {
        return Err(SpaError::InvalidInput(format!(
            "timestamp {t} outside [0, {MAX_SECONDS})"
        )));
    }
    Ok(format!("{t:.1}")
        .bytes()
        .map(|b| match b {
            b'.' => DECIMAL_POINT,
            d => (d - b'0') as usize,
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct TimeEncoderParams<T: Scalar = f64> {
    /// `[ALPHABET_SIZE, D]`
    pub embedding: Tensor<T>,
    pub input_update: Tensor<T>,
    pub input_reset: Tensor<T>,
    pub input_candidate: Tensor<T>,
    pub hidden_update: Tensor<T>,
    pub hidden_reset: Tensor<T>,
    pub hidden_candidate: Tensor<T>,
    pub bias_update: Tensor<T>,
    pub bias_reset: Tensor<T>,
    pub bias_candidate: Tensor<T>,
    pub bias_hidden_candidate: Tensor<T>,
}

impl<T: Scalar> TimeEncoderParams<T> {
    pub fn new(d: usize, init: &mut Initializer) -> Result<Self> {
        if d == 0 {
            return Err(SpaError::Config("time encoder dim must be positive".into()));
        }
        let mut m = || init.uniform(vec![d, d], d);
        let (input_update, input_reset, input_candidate) = (m(), m(), m());
        let (hidden_update, hidden_reset, hidden_candidate) = (m(), m(), m());
        let mut v = || init.uniform(vec![d], d);
        let (bias_update, bias_reset, bias_candidate, bias_hidden_candidate) = (v(), v(), v(), v());
        Ok(Self {
            embedding: init.uniform(vec![ALPHABET_SIZE, d], 1),
            input_update,
            input_reset,
            input_candidate,
            hidden_update,
            hidden_reset,
            hidden_candidate,
            bias_update,
            bias_reset,
            bias_candidate,
            bias_hidden_candidate,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.shape()[1]
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 11] {
        [
            ("embedding", &self.embedding),
            ("input_update", &self.input_update),
            ("input_reset", &self.input_reset),
            ("input_candidate", &self.input_candidate),
            ("hidden_update", &self.hidden_update),
            ("hidden_reset", &self.hidden_reset),
            ("hidden_candidate", &self.hidden_candidate),
            ("bias_update", &self.bias_update),
            ("bias_reset", &self.bias_reset),
            ("bias_candidate", &self.bias_candidate),
            ("bias_hidden_candidate", &self.bias_hidden_candidate),
        ]
    }

    /// Records the encoding of `t` and returns the `[D]` embedding.
    pub fn apply(&self, tape: &mut Tape<T>, prefix: &str, t: f64) -> Result<Var> {
        let tokens = timestamp_tokens(t)?;
        let d = self.dim();
        let mut p = Vec::with_capacity(11);
        for (name, tensor) in self.named() {
            p.push(tape.param(&join(prefix, name), ParamGroup::TimeEncoder, tensor)?);
        }
        let [emb, wz, wr, wn, uz, ur, un, bz, br, bn, bhn] = p[..] else {
            unreachable!("eleven parameters")
        };

        let x = tape.gather_rows(emb, &tokens)?;
        let xz = tape.linear(x, wz, Some(bz))?;
        let xr = tape.linear(x, wr, Some(br))?;
        let xn = tape.linear(x, wn, Some(bn))?;
        let mut h = tape.constant(Tensor::zeros(vec![1, d]))?;
        for step in 0..tokens.len() {
            let hz = tape.linear(h, uz, None)?;
            let hr = tape.linear(h, ur, None)?;
            let hn = tape.linear(h, un, Some(bhn))?;
            let sz = tape.slice(xz, 0, step, 1)?;
            let sr = tape.slice(xr, 0, step, 1)?;
            let sn = tape.slice(xn, 0, step, 1)?;
            let z = tape.add(sz, hz)?;
            let z = tape.sigmoid(z)?;
            let r = tape.add(sr, hr)?;
            let r = tape.sigmoid(r)?;
            let gated = tape.mul(r, hn)?;
            let n = tape.add(sn, gated)?;
            let n = tape.tanh(n)?;
            // h' = (1 - z) n + z h = n + z (h - n)
            let diff = tape.sub(h, n)?;
            let kept = tape.mul(z, diff)?;
            h = tape.add(n, kept)?;
        }
        tape.reshape(h, &[d])
    }
}

impl<T: Scalar> Parameters<T> for TimeEncoderParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor<T>)) {
        for (name, t) in self.named() {
            f(&join(prefix, name), ParamGroup::TimeEncoder, t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor<T>)) {
        let slots: [(&str, &mut Tensor<T>); 11] = [
            ("embedding", &mut self.embedding),
            ("input_update", &mut self.input_update),
            ("input_reset", &mut self.input_reset),
            ("input_candidate", &mut self.input_candidate),
            ("hidden_update", &mut self.hidden_update),
            ("hidden_reset", &mut self.hidden_reset),
            ("hidden_candidate", &mut self.hidden_candidate),
            ("bias_update", &mut self.bias_update),
            ("bias_reset", &mut self.bias_reset),
            ("bias_candidate", &mut self.bias_candidate),
            ("bias_hidden_candidate", &mut self.bias_hidden_candidate),
        ];
        for (name, t) in slots {
            f(&join(prefix, name), ParamGroup::TimeEncoder, t);
        }
    }
}

/// Timestamp embedding `[D]` of `t` seconds.
pub fn encode_timestamp<T: Scalar>(t: f64, p: &TimeEncoderParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = p.apply(&mut tape, "time", t)?;
    Ok(tape.value(v)?.clone())
}
