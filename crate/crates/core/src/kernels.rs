//! Dense numeric kernels with their analytic backward passes.
//!
//! Activations are viewed as `[rows, last_dim]` matrices wherever the leading
//! axes carry no structure. Every loop runs in a fixed order, so results are
//! bit-identical across runs.

use crate::error::{shape_err, Result, SpaError};
use crate::tensor::{Scalar, Tensor};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEFF: f64 = 0.044_715;

/// `out[m, n] += a[m, k] * b[k, n]`
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[k, n] += a[m, k]^T * b[m, n]`
fn gemm_at_b_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m, k] += a[m, n] * b[k, n]^T`
fn gemm_a_bt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// Plain 2-D matrix product `[m, k] x [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    gemm_acc(a.data(), b.data(), m, k, n, out.data_mut());
    Ok(out)
}

fn check_linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<()> {
    if w.rank() != 2 || x.last_dim() != w.shape()[0] || x.rank() == 0 {
        return Err(shape_err(
            "linear",
            format!("input {:?} against weight {:?}", x.shape(), w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [w.shape()[1]] {
            return Err(shape_err(
                "linear",
                format!("bias {:?} for weight {:?}", b.shape(), w.shape()),
            ));
        }
    }
    Ok(())
}

/// Affine map over the last axis: `y = x W + b` with `W: [in, out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    check_linear(x, w, b)?;
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let mut out = Tensor::zeros(shape);
    if let Some(b) = b {
        for row in out.data_mut().chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_acc(x.data(), w.data(), rows, din, dout, out.data_mut());
    Ok(out)
}

pub struct LinearGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> LinearGrads<T> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let mut dx = Tensor::zeros(x.shape().to_vec());
    gemm_a_bt_acc(dy.data(), w.data(), rows, dout, din, dx.data_mut());
    let mut dw = Tensor::zeros(vec![din, dout]);
    gemm_at_b_acc(x.data(), dy.data(), rows, din, dout, dw.data_mut());
    let mut db = Tensor::zeros(vec![dout]);
    for row in dy.data().chunks(dout.max(1)) {
        for (acc, &g) in db.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    LinearGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Cached state of a layer-norm forward pass.
pub struct LayerNormCache<T: Scalar> {
    /// Normalized input before scale and shift.
    pub normalized: Tensor<T>,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<T>,
}

/// Layer normalization over the last axis with learned scale and shift.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.last_dim();
    if x.rank() == 0 || d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err(
            "layer_norm",
            format!(
                "input {:?}, scale {:?}, shift {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let eps = T::lit(LAYER_NORM_EPS);
    let dn = T::lit(d as f64);
    let mut normalized = Tensor::zeros(x.shape().to_vec());
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut inv_std = Vec::with_capacity(x.rows());
    for ((row, nrow), orow) in x
        .data()
        .chunks(d)
        .zip(normalized.data_mut().chunks_mut(d))
        .zip(out.data_mut().chunks_mut(d))
    {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        for k in 0..d {
            nrow[k] = (row[k] - mean) * r;
            orow[k] = nrow[k] * gamma.data()[k] + beta.data()[k];
        }
        inv_std.push(r);
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

pub struct LayerNormGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &LayerNormCache<T>,
) -> LayerNormGrads<T> {
    let d = gamma.len();
    let dn = T::lit(d as f64);
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![d]);
    let mut dbeta = Tensor::zeros(vec![d]);
    let mut dxhat = vec![T::zero(); d];
    for (r, ((grow, nrow), xrow)) in dy
        .data()
        .chunks(d)
        .zip(cache.normalized.data().chunks(d))
        .zip(dx.data_mut().chunks_mut(d))
        .enumerate()
    {
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for k in 0..d {
            dgamma.data_mut()[k] += grow[k] * nrow[k];
            dbeta.data_mut()[k] += grow[k];
            dxhat[k] = grow[k] * gamma.data()[k];
            mean_g += dxhat[k];
            mean_gx += dxhat[k] * nrow[k];
        }
        mean_g = mean_g / dn;
        mean_gx = mean_gx / dn;
        let inv = cache.inv_std[r];
        for k in 0..d {
            xrow[k] = inv * (dxhat[k] - mean_g - nrow[k] * mean_gx);
        }
    }
    LayerNormGrads {
        input: dx,
        scale: dgamma,
        shift: dbeta,
    }
}

fn check_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(usize, usize, usize, usize)> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return Err(shape_err(
            "attention",
            format!("expected rank-3 q/k/v, got {:?} {:?} {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let (g, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let lk = k.shape()[1];
    if k.shape() != v.shape() || k.shape()[0] != g || k.shape()[2] != d {
        return Err(shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(shape_err(
            "attention",
            format!("model dim {d} not divisible by {heads} heads"),
        ));
    }
    if lk == 0 {
        return Err(SpaError::EmptyContext { op: "attention" });
    }
    Ok((g, lq, lk, d))
}

/// Multi-head scaled dot-product attention over already-projected inputs.
///
/// `q: [G, Lq, D]`, `k`, `v: [G, Lk, D]`. Heads split the last axis into
/// contiguous `D / heads` slices. Returns the attended values `[G, Lq, D]`
/// and the softmax weights `[G, heads, Lq, Lk]`. No mask is applied.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (g, lq, lk, d) = check_attention(q, k, v, heads)?;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Tensor::zeros(vec![g, lq, d]);
    let mut probs = Tensor::zeros(vec![g, heads, lq, lk]);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut scores = vec![T::zero(); lk];
    for b in 0..g {
        for h in 0..heads {
            for i in 0..lq {
                let qrow = &qd[(b * lq + i) * d + h * dh..][..dh];
                let mut max = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = &kd[(b * lk + j) * d + h * dh..][..dh];
                    let mut acc = T::zero();
                    for (&x, &y) in qrow.iter().zip(krow) {
                        acc += x * y;
                    }
                    *s = acc * scale;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let prow = &mut probs.data_mut()[((b * heads + h) * lq + i) * lk..][..lk];
                for (p, &s) in prow.iter_mut().zip(&scores) {
                    *p = s / total;
                }
                let orow = &mut out.data_mut()[(b * lq + i) * d + h * dh..][..dh];
                for (j, &p) in scores.iter().enumerate() {
                    let w = p / total;
                    let vrow = &vd[(b * lk + j) * d + h * dh..][..dh];
                    for (o, &val) in orow.iter_mut().zip(vrow) {
                        *o += w * val;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

pub struct AttentionGrads<T: Scalar> {
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    heads: usize,
    dout: &Tensor<T>,
) -> AttentionGrads<T> {
    let (g, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let lk = k.shape()[1];
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut dv = Tensor::zeros(v.shape().to_vec());
    let mut dp = vec![T::zero(); lk];
    for b in 0..g {
        for h in 0..heads {
            for i in 0..lq {
                let prow = &probs.data()[((b * heads + h) * lq + i) * lk..][..lk];
                let go = &dout.data()[(b * lq + i) * d + h * dh..][..dh];
                // dP = dO V^T and dV += P^T dO
                let mut weighted = T::zero();
                for j in 0..lk {
                    let vrow = &v.data()[(b * lk + j) * d + h * dh..][..dh];
                    let mut acc = T::zero();
                    for (&x, &y) in go.iter().zip(vrow) {
                        acc += x * y;
                    }
                    dp[j] = acc;
                    weighted += acc * prow[j];
                    let dvrow = &mut dv.data_mut()[(b * lk + j) * d + h * dh..][..dh];
                    for (dst, &x) in dvrow.iter_mut().zip(go) {
                        *dst += prow[j] * x;
                    }
                }
                // softmax Jacobian, then the scaled dot products
                let qrow: Vec<T> = q.data()[(b * lq + i) * d + h * dh..][..dh].to_vec();
                for j in 0..lk {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &k.data()[(b * lk + j) * d + h * dh..][..dh];
                    let dqrow = &mut dq.data_mut()[(b * lq + i) * d + h * dh..][..dh];
                    for (dst, &x) in dqrow.iter_mut().zip(krow) {
                        *dst += ds * x;
                    }
                    let dkrow = &mut dk.data_mut()[(b * lk + j) * d + h * dh..][..dh];
                    for (dst, &x) in dkrow.iter_mut().zip(&qrow) {
                        *dst += ds * x;
                    }
                }
            }
        }
    }
    AttentionGrads {
        query: dq,
        key: dk,
        value: dv,
    }
}

/// Tanh-form GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(GELU_COEFF) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let a = T::lit(GELU_COEFF);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
