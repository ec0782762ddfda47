//! Scalar-loop reference implementations shared by the integration tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` row matrices and indexes
//! parameter tensors by hand, so it shares no arithmetic with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spa_core::compressor::{EventParams, FusionParams, SceneParams};
use spa_core::{AttentionParams, EventMode, FfnParams, LayerNormParams, Tensor, TimeEncoderParams};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

/// Rows of the last axis.
pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let d = t.last_dim();
    if d == 0 {
        return Vec::new();
    }
    t.data().chunks(d).map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), m.iter().flatten().copied().collect()).unwrap()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len(), "row width");
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn cat(parts: &[&Mat]) -> Mat {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, p: &LayerNormParams<f64>) -> Mat {
    let (g, b) = (p.scale.data(), p.shift.data());
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= n;
            let mut var = 0.0;
            for v in row {
                var += (v - mean) * (v - mean);
            }
            var /= n;
            let denom = (var + 1e-5).sqrt();
            (0..row.len()).map(|k| (row[k] - mean) / denom * g[k] + b[k]).collect()
        })
        .collect()
}

/// `y = x W + b` with `W` stored `[in, out]`.
pub fn affine(x: &Mat, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Mat {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|j| {
                    let mut acc = b.map_or(0.0, |b| b.data()[j]);
                    for i in 0..din {
                        acc += row[i] * w.data()[i * dout + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax weights per head: `[head][query][key]`.
pub fn attention_weights(q_in: &Mat, ctx: &Mat, p: &AttentionParams<f64>) -> Vec<Mat> {
    let q = affine(q_in, &p.query, p.query_bias.as_ref());
    let k = affine(ctx, &p.key, p.key_bias.as_ref());
    let d = p.query.shape()[0];
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..p.heads)
        .map(|h| {
            q.iter()
                .map(|qi| {
                    let scores: Vec<f64> = k
                        .iter()
                        .map(|kj| {
                            let mut s = 0.0;
                            for c in h * dh..(h + 1) * dh {
                                s += qi[c] * kj[c];
                            }
                            s * scale
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in &scores {
                        z += (s - m).exp();
                    }
                    scores.iter().map(|s| (s - m).exp() / z).collect()
                })
                .collect()
        })
        .collect()
}

pub fn attention(q_in: &Mat, ctx: &Mat, p: &AttentionParams<f64>) -> Mat {
    let weights = attention_weights(q_in, ctx, p);
    let v = affine(ctx, &p.value, p.value_bias.as_ref());
    let d = p.query.shape()[0];
    let dh = d / p.heads;
    let mut mixed = vec![vec![0.0; d]; q_in.len()];
    for h in 0..p.heads {
        for i in 0..q_in.len() {
            for (j, vj) in v.iter().enumerate() {
                for c in h * dh..(h + 1) * dh {
                    mixed[i][c] += weights[h][i][j] * vj[c];
                }
            }
        }
    }
    affine(&mixed, &p.output, p.output_bias.as_ref())
}

pub fn ffn(x: &Mat, p: &FfnParams<f64>) -> Mat {
    let h = affine(x, &p.w1, Some(&p.b1));
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    affine(&h, &p.w2, Some(&p.b2))
}

/// `(A_fused, V_f)` for one batch element; `frames` holds raw `V_i`.
pub fn fusion(a: &Mat, frames: &[Mat], p: &FusionParams<f64>) -> (Mat, Mat) {
    let mut vf = Mat::new();
    for v in frames {
        vf.extend(layer_norm(v, &p.vision_norm));
    }
    if a.is_empty() {
        return (Mat::new(), vf);
    }
    let a_bar = layer_norm(a, &p.asr_norm);
    let a_prime = add(&a_bar, &attention(&a_bar, &vf, &p.attention));
    let fused = add(&a_prime, &ffn(&layer_norm(&a_prime, &p.ffn_norm), &p.ffn));
    (fused, vf)
}

pub fn scene(a_fused: &Mat, vf: &Mat, p: &SceneParams<f64>) -> Mat {
    let m = cat(&[a_fused, vf]);
    let mut h = layer_norm(&to_mat(&p.queries), &p.query_norm);
    for layer in &p.layers {
        h = add(&h, &attention(&layer_norm(&h, &layer.attention_norm), &m, &layer.attention));
        h = add(&h, &ffn(&layer_norm(&h, &layer.ffn_norm), &layer.ffn));
    }
    h
}

/// Event tokens of every frame, in frame order.
pub fn events(a_fused: &Mat, scene: &Mat, frames: &[Mat], p: &EventParams<f64>, mode: EventMode) -> Vec<Mat> {
    frames
        .iter()
        .map(|v| {
            let mut ctx = cat(&[a_fused, scene]);
            if mode == EventMode::FrameConditioned {
                ctx.extend(layer_norm(v, &p.frame_norm));
            }
            let mut h = layer_norm(&to_mat(&p.queries), &p.query_norm);
            for layer in &p.layers {
                let n = layer_norm(&h, &layer.self_norm);
                h = add(&h, &attention(&n, &n, &layer.self_attention));
                h = add(&h, &attention(&layer_norm(&h, &layer.cross_norm), &ctx, &layer.cross_attention));
                h = add(&h, &ffn(&layer_norm(&h, &layer.ffn_norm), &layer.ffn));
            }
            h
        })
        .collect()
}

/// GRU over the characters of `t` printed with one decimal place.
pub fn time_encoding(t: f64, p: &TimeEncoderParams<f64>) -> Vec<f64> {
    let d = p.embedding.shape()[1];
    let mut h = vec![0.0; d];
    for ch in format!("{t:.1}").chars() {
        let token = if ch == '.' { 10 } else { ch.to_digit(10).unwrap() as usize };
        let x = vec![p.embedding.data()[token * d..(token + 1) * d].to_vec()];
        let hm = vec![h.clone()];
        let xz = affine(&x, &p.input_update, Some(&p.bias_update));
        let xr = affine(&x, &p.input_reset, Some(&p.bias_reset));
        let xn = affine(&x, &p.input_candidate, Some(&p.bias_candidate));
        let hz = affine(&hm, &p.hidden_update, None);
        let hr = affine(&hm, &p.hidden_reset, None);
        let hn = affine(&hm, &p.hidden_candidate, Some(&p.bias_hidden_candidate));
        h = (0..d)
            .map(|k| {
                let z = sigmoid(xz[0][k] + hz[0][k]);
                let r = sigmoid(xr[0][k] + hr[0][k]);
                let n = (xn[0][k] + r * hn[0][k]).tanh();
                (1.0 - z) * n + z * h[k]
            })
            .collect();
    }
    h
}

/// Random attention block with every projection and bias filled in.
pub fn random_attention(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionParams<f64> {
    let mut init = spa_core::params::Initializer::new(rng.random());
    AttentionParams::new(d, heads, true, &mut init).unwrap()
}

pub fn random_ffn(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> FfnParams<f64> {
    let mut init = spa_core::params::Initializer::new(rng.random());
    FfnParams::new(d, hidden, &mut init).unwrap()
}

/// Layer norm with non-trivial scale and shift.
pub fn random_layer_norm(rng: &mut ChaCha8Rng, d: usize) -> LayerNormParams<f64> {
    LayerNormParams {
        scale: random_tensor(rng, &[d]),
        shift: random_tensor(rng, &[d]),
    }
}
