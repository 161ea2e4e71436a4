//! Clip-level decoding: each frame's tokens are mean-pooled to one vector,
//! a small bidirectional transformer mixes the pooled frames, and a linear
//! classifier scores the clip.

use crate::attention::{scaled_dot_attention, TokenGrid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gelu, layer_norm, matmul, MacCounter, Stage, Tensor, LN_EPS};
use crate::weights::DecoderWeights;

/// Mean-pools each frame's token grid into a row of a `[frames, C]` matrix.
pub fn pool_frames<T: Scalar>(frames: &[TokenGrid<T>]) -> Result<Tensor<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::dim("pool_frames", "no frames to pool".to_string()))?;
    let c = first.channels();
    let mut out = Vec::with_capacity(frames.len() * c);
    for g in frames {
        if !g.same_shape(first) {
            return Err(Error::ShapeMismatch {
                op: "pool_frames",
                lhs: vec![first.rows(), first.cols(), first.channels()],
                rhs: vec![g.rows(), g.cols(), g.channels()],
            });
        }
        let inv = T::from_f64(1.0 / g.tokens() as f64);
        for j in 0..c {
            let mut acc = T::ZERO;
            for tok in 0..g.tokens() {
                acc += g.data()[tok * c + j];
            }
            out.push(acc * inv);
        }
    }
    Tensor::from_vec(&[frames.len(), c], out)
}

fn add_bias<T: Scalar>(m: &mut Tensor<T>, b: &Tensor<T>) {
    let c = b.len();
    let bd = b.data();
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        *v += bd[i % c];
    }
}

/// Runs the decoder over per-frame feature grids and returns class logits.
pub fn decode<T: Scalar>(
    frames: &[TokenGrid<T>],
    w: &DecoderWeights<T>,
    heads: usize,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let mut x = pool_frames(frames)?;
    let (t, c) = x.dims2("decode")?;
    let _scope = counter.scope(Stage::Decoder);

    if let Some(pos) = &w.temporal_pos {
        let (max_frames, pc) = pos.dims2("decode")?;
        if pc != c {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: vec![pc],
                rhs: vec![c],
            });
        }
        if t > max_frames {
            return Err(Error::config(format!(
                "{t} frames exceed the {max_frames}-row temporal position table; raise max_frames"
            )));
        }
        let pd = pos.data();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += pd[i];
        }
    }

    for layer in &w.layers {
        let normed = layer_norm(&x, &layer.ln1.gamma, &layer.ln1.beta, LN_EPS, counter)?;
        let q = matmul(&normed, &layer.query, counter)?;
        let k = matmul(&normed, &layer.key, counter)?;
        let v = matmul(&normed, &layer.value, counter)?;
        let att = scaled_dot_attention(&q, &k, &v, heads, counter)?;
        let att = matmul(&att, &layer.out, counter)?;
        for (a, b) in x.data_mut().iter_mut().zip(att.data()) {
            *a += *b;
        }

        let normed = layer_norm(&x, &layer.ln2.gamma, &layer.ln2.beta, LN_EPS, counter)?;
        let mut hidden = matmul(&normed, &layer.mlp.w1, counter)?;
        add_bias(&mut hidden, &layer.mlp.b1);
        let hidden = gelu(&hidden, counter);
        let mut out = matmul(&hidden, &layer.mlp.w2, counter)?;
        add_bias(&mut out, &layer.mlp.b2);
        for (a, b) in x.data_mut().iter_mut().zip(out.data()) {
            *a += *b;
        }
    }

    let inv = T::from_f64(1.0 / t as f64);
    let mut clip = Tensor::<T>::zeros(&[1, c]);
    for i in 0..t {
        for j in 0..c {
            let v = clip.data()[j] + x.data()[i * c + j] * inv;
            clip.data_mut()[j] = v;
        }
    }
    let logits = matmul(&clip, &w.classifier, counter)?;
    logits.reshaped(&[w.classifier.shape()[1]])
}
