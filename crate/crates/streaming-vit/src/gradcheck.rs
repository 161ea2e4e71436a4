//! Analytic reverse-mode gradients for one streaming layer, and a checker
//! that sweeps every coordinate against central finite differences.
//!
//! The layer differentiated here is exactly the one the encoder runs:
//! pre-norm spatial attention, push of the frame's keys/values into the
//! memory, plane-factorized temporal reads, gated fusion, pre-norm MLP.
//! Stored memory is detached by contract, so the backward pass has two
//! honesties:
//!
//! * `honor_stop_gradient = true` reports zero for every memory entry and
//!   blocks the temporal read path from flowing into the current frame's
//!   key/value producers (the checker then differentiates a forward whose
//!   pushed keys/values are frozen constants);
//! * `honor_stop_gradient = false` differentiates the plain mathematical
//!   function, memory entries included.
//!
//! Only global spatial attention and offset-free memory reads are covered.

use crate::attention::{memory_push, AttentionWeights, MemoryPool, TokenGrid};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{
    gelu, gelu_derivative, layer_norm, matmul, softmax_rows, transpose2, MacCounter, Tensor,
    LN_EPS,
};
use crate::weights::{LayerWeights, LnParams, MlpParams};

fn dis() -> MacCounter {
    MacCounter::disabled()
}

fn head_cols<T: Scalar>(m: &Tensor<T>, head: usize, dim: usize) -> Tensor<T> {
    let (n, c) = m.dims2("head_cols").expect("rank 2");
    Tensor::from_fn(&[n, dim], |i| m.data()[(i / dim) * c + head * dim + i % dim])
}

fn add_head_cols<T: Scalar>(m: &mut Tensor<T>, part: &Tensor<T>, head: usize, dim: usize) {
    let (n, c) = m.dims2("add_head_cols").expect("rank 2");
    for i in 0..n {
        for j in 0..dim {
            m.data_mut()[i * c + head * dim + j] += part.data()[i * dim + j];
        }
    }
}

fn colsum<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (n, c) = m.dims2("colsum").expect("rank 2");
    Tensor::from_fn(&[c], |j| {
        let mut acc = T::ZERO;
        for i in 0..n {
            acc += m.data()[i * c + j];
        }
        acc
    })
}

fn add_into<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += *b;
    }
}

/// dS for S -> A = row softmax(S): `dS = A (dA - rowdot(dA, A))`.
fn softmax_backward<T: Scalar>(a: &Tensor<T>, da: &Tensor<T>) -> Tensor<T> {
    let (n, c) = a.dims2("softmax_backward").expect("rank 2");
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let mut dot = T::ZERO;
        for j in 0..c {
            dot += da.data()[i * c + j] * a.data()[i * c + j];
        }
        for j in 0..c {
            let v = a.data()[i * c + j] * (da.data()[i * c + j] - dot);
            out.data_mut()[i * c + j] = v;
        }
    }
    out
}

struct MhaCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: Vec<Tensor<T>>,
    heads: usize,
}

fn mha_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, MhaCache<T>)> {
    let (n_q, c) = q.dims2("mha_forward")?;
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut out = Tensor::zeros(&[n_q, c]);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_cols(q, h, d);
        let kh = head_cols(k, h, d);
        let vh = head_cols(v, h, d);
        let logits = matmul(&qh, &transpose2(&kh)?, &dis())?.map(|x| x * scale);
        let a = softmax_rows(&logits, &dis())?;
        let oh = matmul(&a, &vh, &dis())?;
        add_head_cols(&mut out, &oh, h, d);
        attn.push(a);
    }
    Ok((out, MhaCache { q: q.clone(), k: k.clone(), v: v.clone(), attn, heads }))
}

fn mha_backward<T: Scalar>(
    cache: &MhaCache<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n_q, c) = cache.q.dims2("mha_backward")?;
    let (n_k, _) = cache.k.dims2("mha_backward")?;
    let d = c / cache.heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut dq = Tensor::zeros(&[n_q, c]);
    let mut dk = Tensor::zeros(&[n_k, c]);
    let mut dv = Tensor::zeros(&[n_k, c]);
    for h in 0..cache.heads {
        let a = &cache.attn[h];
        let doh = head_cols(dout, h, d);
        let vh = head_cols(&cache.v, h, d);
        let da = matmul(&doh, &transpose2(&vh)?, &dis())?;
        let dvh = matmul(&transpose2(a)?, &doh, &dis())?;
        let ds = softmax_backward(a, &da);
        let kh = head_cols(&cache.k, h, d);
        let qh = head_cols(&cache.q, h, d);
        let dqh = matmul(&ds, &kh, &dis())?.map(|x| x * scale);
        let dkh = matmul(&transpose2(&ds)?, &qh, &dis())?.map(|x| x * scale);
        add_head_cols(&mut dq, &dqh, h, d);
        add_head_cols(&mut dk, &dkh, h, d);
        add_head_cols(&mut dv, &dvh, h, d);
    }
    Ok((dq, dk, dv))
}

struct LnCache<T> {
    xhat: Tensor<T>,
    inv_sigma: Vec<T>,
    gamma: Tensor<T>,
}

fn ln_forward<T: Scalar>(x: &Tensor<T>, p: &LnParams<T>) -> Result<(Tensor<T>, LnCache<T>)> {
    let out = layer_norm(x, &p.gamma, &p.beta, LN_EPS, &dis())?;
    let (n, c) = x.dims2("ln_forward")?;
    let inv_c = T::from_f64(1.0 / c as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = Tensor::zeros(&[n, c]);
    let mut inv_sigma = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x.data()[i * c..(i + 1) * c];
        let mut mean = T::ZERO;
        for v in row {
            mean += *v;
        }
        mean = mean * inv_c;
        let mut var = T::ZERO;
        for v in row {
            let d = *v - mean;
            var += d * d;
        }
        var = var * inv_c;
        let inv = T::ONE / (var + eps).sqrt();
        inv_sigma.push(inv);
        for j in 0..c {
            xhat.data_mut()[i * c + j] = (row[j] - mean) * inv;
        }
    }
    Ok((out, LnCache { xhat, inv_sigma, gamma: p.gamma.clone() }))
}

fn ln_backward<T: Scalar>(
    cache: &LnCache<T>,
    dn: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = dn.dims2("ln_backward").expect("rank 2");
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut dx = Tensor::zeros(&[n, c]);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for i in 0..n {
        let mut m1 = T::ZERO;
        let mut m2 = T::ZERO;
        for j in 0..c {
            let dxh = dn.data()[i * c + j] * cache.gamma.data()[j];
            let xh = cache.xhat.data()[i * c + j];
            m1 += dxh;
            m2 += dxh * xh;
        }
        m1 = m1 * inv_c;
        m2 = m2 * inv_c;
        for j in 0..c {
            let dxh = dn.data()[i * c + j] * cache.gamma.data()[j];
            let xh = cache.xhat.data()[i * c + j];
            dx.data_mut()[i * c + j] = cache.inv_sigma[i] * (dxh - m1 - xh * m2);
            let dg = dgamma.data()[j] + dn.data()[i * c + j] * xh;
            dgamma.data_mut()[j] = dg;
            let db = dbeta.data()[j] + dn.data()[i * c + j];
            dbeta.data_mut()[j] = db;
        }
    }
    (dx, dgamma, dbeta)
}

fn gather_grid_row<T: Scalar>(m: &Tensor<T>, cols: usize, y: usize) -> Tensor<T> {
    let (_, c) = m.dims2("gather_grid_row").expect("rank 2");
    Tensor::from_fn(&[cols, c], |i| m.data()[(y * cols + i / c) * c + i % c])
}

fn gather_grid_col<T: Scalar>(m: &Tensor<T>, rows: usize, cols: usize, x: usize) -> Tensor<T> {
    let (_, c) = m.dims2("gather_grid_col").expect("rank 2");
    Tensor::from_fn(&[rows, c], |i| m.data()[((i / c) * cols + x) * c + i % c])
}

fn plane_concat<T: Scalar>(
    pool: &MemoryPool<T>,
    fixed: usize,
    along_rows: bool,
    take_keys: bool,
) -> Tensor<T> {
    let first = pool.entry(0);
    let c = first.keys.channels();
    let span = if along_rows { first.keys.cols() } else { first.keys.rows() };
    let mut out = Vec::with_capacity(pool.len() * span * c);
    for e in pool.entries() {
        let g = if take_keys { &e.keys } else { &e.values };
        for i in 0..span {
            let tok = if along_rows { g.token(fixed, i) } else { g.token(i, fixed) };
            out.extend_from_slice(tok);
        }
    }
    Tensor::from_vec(&[pool.len() * span, c], out).unwrap()
}

struct Cache<T> {
    rows: usize,
    cols: usize,
    ln1: LnCache<T>,
    n1: Tensor<T>,
    spatial: MhaCache<T>,
    att: Tensor<T>,
    o: Tensor<T>,
    pool2: MemoryPool<T>,
    row_mha: Vec<MhaCache<T>>,
    col_mha: Vec<MhaCache<T>>,
    row_att: Tensor<T>,
    col_att: Tensor<T>,
    p_r: Tensor<T>,
    p_c: Tensor<T>,
    ln2: LnCache<T>,
    n2: Tensor<T>,
    h_pre: Tensor<T>,
    g_act: Tensor<T>,
    z: TokenGrid<T>,
}

fn forward_cached<T: Scalar>(
    x: &TokenGrid<T>,
    pool: &MemoryPool<T>,
    lw: &LayerWeights<T>,
    frame_index: usize,
    frozen_push: Option<(&TokenGrid<T>, &TokenGrid<T>)>,
) -> Result<Cache<T>> {
    if lw.attn.memory_pos.is_some() {
        return Err(Error::config(
            "the gradient checker covers offset-free memory reads only",
        ));
    }
    let w = &lw.attn;
    let (rows, cols) = (x.rows(), x.cols());
    let xm = x.to_matrix();
    let (n1, ln1) = ln_forward(&xm, &lw.ln1)?;
    let q = matmul(&n1, &w.query, &dis())?;
    let k = matmul(&n1, &w.key, &dis())?;
    let v = matmul(&n1, &w.value, &dis())?;
    let (att, spatial) = mha_forward(&q, &k, &v, w.heads)?;
    let o = matmul(&att, &w.out, &dis())?;

    let k_grid = TokenGrid::from_matrix(rows, cols, &k)?;
    let v_grid = TokenGrid::from_matrix(rows, cols, &v)?;
    let pool2 = match frozen_push {
        Some((fk, fv)) => memory_push(pool, frame_index, fk, fv)?,
        None => memory_push(pool, frame_index, &k_grid, &v_grid)?,
    };

    let tq = matmul(&o, &w.temporal_query, &dis())?;
    let c = x.channels();
    let mut row_att = Tensor::zeros(&[rows * cols, c]);
    let mut row_mha = Vec::with_capacity(rows);
    for y in 0..rows {
        let qy = gather_grid_row(&tq, cols, y);
        let ky = plane_concat(&pool2, y, true, true);
        let vy = plane_concat(&pool2, y, true, false);
        let (oy, cache) = mha_forward(&qy, &ky, &vy, w.heads)?;
        for xx in 0..cols {
            for j in 0..c {
                row_att.data_mut()[(y * cols + xx) * c + j] = oy.data()[xx * c + j];
            }
        }
        row_mha.push(cache);
    }
    let mut col_att = Tensor::zeros(&[rows * cols, c]);
    let mut col_mha = Vec::with_capacity(cols);
    for xx in 0..cols {
        let qx = gather_grid_col(&tq, rows, cols, xx);
        let kx = plane_concat(&pool2, xx, false, true);
        let vx = plane_concat(&pool2, xx, false, false);
        let (ox, cache) = mha_forward(&qx, &kx, &vx, w.heads)?;
        for y in 0..rows {
            for j in 0..c {
                col_att.data_mut()[(y * cols + xx) * c + j] = ox.data()[y * c + j];
            }
        }
        col_mha.push(cache);
    }

    let p_r = matmul(&row_att, &w.row_out, &dis())?;
    let p_c = matmul(&col_att, &w.col_out, &dis())?;
    let mut fused = o.clone();
    for (gate, branch) in [(&w.row_gate, &p_r), (&w.col_gate, &p_c)] {
        for i in 0..rows * cols {
            for j in 0..c {
                let v = fused.data()[i * c + j] + gate.data()[j] * branch.data()[i * c + j];
                fused.data_mut()[i * c + j] = v;
            }
        }
    }
    let mut y = xm.clone();
    add_into(&mut y, &fused);

    let (n2, ln2) = ln_forward(&y, &lw.ln2)?;
    let mut h_pre = matmul(&n2, &lw.mlp.w1, &dis())?;
    let b1 = lw.mlp.b1.data();
    for (i, v) in h_pre.data_mut().iter_mut().enumerate() {
        *v += b1[i % b1.len()];
    }
    let g_act = gelu(&h_pre, &dis());
    let mut m = matmul(&g_act, &lw.mlp.w2, &dis())?;
    let b2 = lw.mlp.b2.data();
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        *v += b2[i % b2.len()];
    }
    let mut zm = y.clone();
    add_into(&mut zm, &m);
    let z = TokenGrid::from_matrix(rows, cols, &zm)?;

    Ok(Cache {
        rows,
        cols,
        ln1,
        n1,
        spatial,
        att,
        o,
        pool2,
        row_mha,
        col_mha,
        row_att,
        col_att,
        p_r,
        p_c,
        ln2,
        n2,
        h_pre,
        g_act,
        z,
    })
}

/// Forward pass of one streaming layer, optionally with the memory push
/// pinned to externally supplied keys/values.
pub fn layer_output<T: Scalar>(
    x: &TokenGrid<T>,
    pool: &MemoryPool<T>,
    lw: &LayerWeights<T>,
    frame_index: usize,
    frozen_push: Option<(&TokenGrid<T>, &TokenGrid<T>)>,
) -> Result<TokenGrid<T>> {
    Ok(forward_cached(x, pool, lw, frame_index, frozen_push)?.z)
}

/// Gradients of `<upstream, layer(x)>` with respect to the input, every
/// weight of the layer, and each memory entry.
#[derive(Clone, Debug)]
pub struct LayerGradients<T> {
    pub x: TokenGrid<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub out: Tensor<T>,
    pub temporal_query: Tensor<T>,
    pub row_out: Tensor<T>,
    pub col_out: Tensor<T>,
    pub row_gate: Tensor<T>,
    pub col_gate: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    /// One `(d_keys, d_values)` pair per entry of the input pool.
    pub memory: Vec<(TokenGrid<T>, TokenGrid<T>)>,
    /// The forward output the loss was taken against.
    pub output: TokenGrid<T>,
}

pub fn layer_backward<T: Scalar>(
    x: &TokenGrid<T>,
    pool: &MemoryPool<T>,
    lw: &LayerWeights<T>,
    upstream: &TokenGrid<T>,
    frame_index: usize,
    honor_stop_gradient: bool,
) -> Result<LayerGradients<T>> {
    if !upstream.same_shape(x) {
        return Err(Error::ShapeMismatch {
            op: "layer_backward",
            lhs: vec![upstream.rows(), upstream.cols(), upstream.channels()],
            rhs: vec![x.rows(), x.cols(), x.channels()],
        });
    }
    let cache = forward_cached(x, pool, lw, frame_index, None)?;
    let w = &lw.attn;
    let (rows, cols, c) = (cache.rows, cache.cols, x.channels());

    let dz = upstream.to_matrix();
    let mut dy = dz.clone();
    let dm = &dz;

    let dw2 = matmul(&transpose2(&cache.g_act)?, dm, &dis())?;
    let db2 = colsum(dm);
    let dg = matmul(dm, &transpose2(&lw.mlp.w2)?, &dis())?;
    let mut dh = dg;
    for (a, b) in dh.data_mut().iter_mut().zip(cache.h_pre.data()) {
        *a = *a * gelu_derivative(*b);
    }
    let dw1 = matmul(&transpose2(&cache.n2)?, &dh, &dis())?;
    let db1 = colsum(&dh);
    let dn2 = matmul(&dh, &transpose2(&lw.mlp.w1)?, &dis())?;
    let (dy_ln, dg2, dbt2) = ln_backward(&cache.ln2, &dn2);
    add_into(&mut dy, &dy_ln);

    let mut dx = dy.clone();
    let dfused = &dy;

    let mut d_o = dfused.clone();
    let mut d_row_gate = Tensor::zeros(&[c]);
    let mut d_col_gate = Tensor::zeros(&[c]);
    let mut dp_r = Tensor::zeros(&[rows * cols, c]);
    let mut dp_c = Tensor::zeros(&[rows * cols, c]);
    for i in 0..rows * cols {
        for j in 0..c {
            let df = dfused.data()[i * c + j];
            let gr = d_row_gate.data()[j] + df * cache.p_r.data()[i * c + j];
            d_row_gate.data_mut()[j] = gr;
            let gc = d_col_gate.data()[j] + df * cache.p_c.data()[i * c + j];
            d_col_gate.data_mut()[j] = gc;
            dp_r.data_mut()[i * c + j] = df * w.row_gate.data()[j];
            dp_c.data_mut()[i * c + j] = df * w.col_gate.data()[j];
        }
    }

    let d_row_out = matmul(&transpose2(&cache.row_att)?, &dp_r, &dis())?;
    let d_row_att = matmul(&dp_r, &transpose2(&w.row_out)?, &dis())?;
    let d_col_out = matmul(&transpose2(&cache.col_att)?, &dp_c, &dis())?;
    let d_col_att = matmul(&dp_c, &transpose2(&w.col_out)?, &dis())?;

    let mut dtq = Tensor::zeros(&[rows * cols, c]);
    let n_mem = cache.pool2.len();
    let mut dmem_k: Vec<TokenGrid<T>> = (0..n_mem).map(|_| TokenGrid::zeros(rows, cols, c)).collect();
    let mut dmem_v: Vec<TokenGrid<T>> = (0..n_mem).map(|_| TokenGrid::zeros(rows, cols, c)).collect();

    for y in 0..rows {
        let doy = gather_grid_row(&d_row_att, cols, y);
        let (dqy, dky, dvy) = mha_backward(&cache.row_mha[y], &doy)?;
        for xx in 0..cols {
            for j in 0..c {
                let v = dtq.data()[(y * cols + xx) * c + j] + dqy.data()[xx * c + j];
                dtq.data_mut()[(y * cols + xx) * c + j] = v;
            }
        }
        for s in 0..n_mem {
            for xx in 0..cols {
                for j in 0..c {
                    let add = dky.data()[(s * cols + xx) * c + j];
                    let cur = dmem_k[s].get(y, xx, j);
                    dmem_k[s].set(y, xx, j, cur + add);
                    let addv = dvy.data()[(s * cols + xx) * c + j];
                    let curv = dmem_v[s].get(y, xx, j);
                    dmem_v[s].set(y, xx, j, curv + addv);
                }
            }
        }
    }
    for xx in 0..cols {
        let dox = gather_grid_col(&d_col_att, rows, cols, xx);
        let (dqx, dkx, dvx) = mha_backward(&cache.col_mha[xx], &dox)?;
        for y in 0..rows {
            for j in 0..c {
                let v = dtq.data()[(y * cols + xx) * c + j] + dqx.data()[y * c + j];
                dtq.data_mut()[(y * cols + xx) * c + j] = v;
            }
        }
        for s in 0..n_mem {
            for y in 0..rows {
                for j in 0..c {
                    let add = dkx.data()[(s * rows + y) * c + j];
                    let cur = dmem_k[s].get(y, xx, j);
                    dmem_k[s].set(y, xx, j, cur + add);
                    let addv = dvx.data()[(s * rows + y) * c + j];
                    let curv = dmem_v[s].get(y, xx, j);
                    dmem_v[s].set(y, xx, j, curv + addv);
                }
            }
        }
    }

    let d_temporal_query = matmul(&transpose2(&cache.o)?, &dtq, &dis())?;
    add_into(&mut d_o, &matmul(&dtq, &transpose2(&w.temporal_query)?, &dis())?);

    let d_out = matmul(&transpose2(&cache.att)?, &d_o, &dis())?;
    let datt = matmul(&d_o, &transpose2(&w.out)?, &dis())?;
    let (dq, mut dk, mut dv) = mha_backward(&cache.spatial, &datt)?;

    // The frame's own push is the last pool entry; its read gradient flows
    // back into the key/value projections only when the stop-gradient is
    // being ignored.
    if !honor_stop_gradient {
        add_into(&mut dk, &dmem_k[n_mem - 1].to_matrix());
        add_into(&mut dv, &dmem_v[n_mem - 1].to_matrix());
    }

    let d_query = matmul(&transpose2(&cache.n1)?, &dq, &dis())?;
    let d_key = matmul(&transpose2(&cache.n1)?, &dk, &dis())?;
    let d_value = matmul(&transpose2(&cache.n1)?, &dv, &dis())?;
    let mut dn1 = matmul(&dq, &transpose2(&w.query)?, &dis())?;
    add_into(&mut dn1, &matmul(&dk, &transpose2(&w.key)?, &dis())?);
    add_into(&mut dn1, &matmul(&dv, &transpose2(&w.value)?, &dis())?);
    let (dx_ln, dg1, dbt1) = ln_backward(&cache.ln1, &dn1);
    add_into(&mut dx, &dx_ln);

    // Map surviving pool2 entries back to input pool entries; evicted
    // entries were never read, their gradient is zero.
    let dropped = pool.len() + 1 - n_mem;
    let memory: Vec<(TokenGrid<T>, TokenGrid<T>)> = (0..pool.len())
        .map(|i| {
            if honor_stop_gradient || i < dropped {
                (TokenGrid::zeros(rows, cols, c), TokenGrid::zeros(rows, cols, c))
            } else {
                (dmem_k[i - dropped].clone(), dmem_v[i - dropped].clone())
            }
        })
        .collect();

    Ok(LayerGradients {
        x: TokenGrid::from_matrix(rows, cols, &dx)?,
        ln1_gamma: dg1,
        ln1_beta: dbt1,
        query: d_query,
        key: d_key,
        value: d_value,
        out: d_out,
        temporal_query: d_temporal_query,
        row_out: d_row_out,
        col_out: d_col_out,
        row_gate: d_row_gate,
        col_gate: d_col_gate,
        ln2_gamma: dg2,
        ln2_beta: dbt2,
        mlp_w1: dw1,
        mlp_b1: db1,
        mlp_w2: dw2,
        mlp_b2: db2,
        memory,
        output: cache.z,
    })
}

/// Geometry and sweep settings for one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub heads: usize,
    pub memory_frames: usize,
    pub capacity: Option<usize>,
    pub seed: u64,
    pub honor_stop_gradient: bool,
    pub step: f64,
}

impl GradCheckOptions {
    /// A layer small enough that every coordinate can be swept.
    pub fn micro(seed: u64, honor_stop_gradient: bool) -> GradCheckOptions {
        GradCheckOptions {
            rows: 2,
            cols: 3,
            channels: 6,
            heads: 2,
            memory_frames: 2,
            capacity: None,
            seed,
            honor_stop_gradient,
            step: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: usize,
    pub max_rel: f64,
    pub worst_site: String,
    pub honor_stop_gradient: bool,
}

struct Theta {
    rows: usize,
    cols: usize,
    channels: usize,
    heads: usize,
    memory_frames: usize,
    values: Vec<f64>,
    sites: Vec<(String, usize)>,
}

impl Theta {
    fn push(&mut self, name: &str, data: &[f64]) {
        self.sites.push((name.to_string(), data.len()));
        self.values.extend_from_slice(data);
    }

    fn site_of(&self, mut idx: usize) -> String {
        for (name, len) in &self.sites {
            if idx < *len {
                return format!("{name}[{idx}]");
            }
            idx -= len;
        }
        "?".to_string()
    }

    fn unpack(&self) -> (TokenGrid<f64>, LayerWeights<f64>, Vec<(TokenGrid<f64>, TokenGrid<f64>)>) {
        let (rows, cols, c) = (self.rows, self.cols, self.channels);
        let n = rows * cols;
        let mut cur = 0usize;
        let mut take = |len: usize| {
            let s = self.values[cur..cur + len].to_vec();
            cur += len;
            s
        };
        let grid = |v: Vec<f64>| TokenGrid::new(rows, cols, c, v).unwrap();
        let mat = |v: Vec<f64>, r: usize, cc: usize| Tensor::from_vec(&[r, cc], v).unwrap();
        let vecp = |v: Vec<f64>| Tensor::from_vec(&[v.len()], v).unwrap();

        let x = grid(take(n * c));
        let ln1 = LnParams { gamma: vecp(take(c)), beta: vecp(take(c)) };
        let query = mat(take(c * c), c, c);
        let key = mat(take(c * c), c, c);
        let value = mat(take(c * c), c, c);
        let out = mat(take(c * c), c, c);
        let temporal_query = mat(take(c * c), c, c);
        let row_out = mat(take(c * c), c, c);
        let col_out = mat(take(c * c), c, c);
        let row_gate = vecp(take(c));
        let col_gate = vecp(take(c));
        let ln2 = LnParams { gamma: vecp(take(c)), beta: vecp(take(c)) };
        let w1 = mat(take(c * 4 * c), c, 4 * c);
        let b1 = vecp(take(4 * c));
        let w2 = mat(take(4 * c * c), 4 * c, c);
        let b2 = vecp(take(c));
        let memory: Vec<(TokenGrid<f64>, TokenGrid<f64>)> = (0..self.memory_frames)
            .map(|_| (grid(take(n * c)), grid(take(n * c))))
            .collect();

        let lw = LayerWeights {
            ln1,
            attn: AttentionWeights {
                heads: self.heads,
                query,
                key,
                value,
                out,
                temporal_query,
                row_out,
                col_out,
                row_gate,
                col_gate,
                memory_pos: None,
            },
            ln2,
            mlp: MlpParams { w1, b1, w2, b2 },
        };
        (x, lw, memory)
    }
}

fn build_theta(opts: &GradCheckOptions) -> (Theta, TokenGrid<f64>) {
    let mut rng = Rng::seed_from(opts.seed);
    let (rows, cols, c) = (opts.rows, opts.cols, opts.channels);
    let n = rows * cols;
    let mut theta = Theta {
        rows,
        cols,
        channels: c,
        heads: opts.heads,
        memory_frames: opts.memory_frames,
        values: Vec::new(),
        sites: Vec::new(),
    };
    let draw = |rng: &mut Rng, len: usize, b: f64| -> Vec<f64> {
        (0..len).map(|_| rng.uniform_in(-b, b)).collect()
    };
    let mb = (1.0 / c as f64).sqrt();
    let x = draw(&mut rng, n * c, 1.0);
    theta.push("x", &x);
    theta.push("ln1_gamma", &(0..c).map(|_| rng.uniform_in(0.5, 1.5)).collect::<Vec<_>>());
    theta.push("ln1_beta", &draw(&mut rng, c, 0.2));
    for name in ["query", "key", "value", "out", "temporal_query", "row_out", "col_out"] {
        let m = draw(&mut rng, c * c, mb);
        theta.push(name, &m);
    }
    theta.push("row_gate", &draw(&mut rng, c, 0.5));
    theta.push("col_gate", &draw(&mut rng, c, 0.5));
    theta.push("ln2_gamma", &(0..c).map(|_| rng.uniform_in(0.5, 1.5)).collect::<Vec<_>>());
    theta.push("ln2_beta", &draw(&mut rng, c, 0.2));
    theta.push("mlp_w1", &draw(&mut rng, c * 4 * c, mb));
    theta.push("mlp_b1", &draw(&mut rng, 4 * c, 0.1));
    theta.push("mlp_w2", &draw(&mut rng, 4 * c * c, (1.0 / (4.0 * c as f64)).sqrt()));
    theta.push("mlp_b2", &draw(&mut rng, c, 0.1));
    for s in 0..opts.memory_frames {
        let k = draw(&mut rng, n * c, 1.0);
        theta.push(&format!("memory_keys[{s}]"), &k);
        let v = draw(&mut rng, n * c, 1.0);
        theta.push(&format!("memory_values[{s}]"), &v);
    }
    let upstream = TokenGrid::new(rows, cols, c, draw(&mut rng, n * c, 1.0)).unwrap();
    (theta, upstream)
}

fn flatten_gradients(g: &LayerGradients<f64>, total_memory_frames: usize) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(g.x.data());
    out.extend_from_slice(g.ln1_gamma.data());
    out.extend_from_slice(g.ln1_beta.data());
    for t in [&g.query, &g.key, &g.value, &g.out, &g.temporal_query, &g.row_out, &g.col_out] {
        out.extend_from_slice(t.data());
    }
    out.extend_from_slice(g.row_gate.data());
    out.extend_from_slice(g.col_gate.data());
    out.extend_from_slice(g.ln2_gamma.data());
    out.extend_from_slice(g.ln2_beta.data());
    out.extend_from_slice(g.mlp_w1.data());
    out.extend_from_slice(g.mlp_b1.data());
    out.extend_from_slice(g.mlp_w2.data());
    out.extend_from_slice(g.mlp_b2.data());
    // Frames that a bounded pool evicted before the layer ran were never
    // read; their gradient is zero and they sit ahead of the survivors.
    let evicted = total_memory_frames - g.memory.len();
    let per_grid = g.x.data().len();
    out.extend(std::iter::repeat(0.0).take(2 * per_grid * evicted));
    for (k, v) in &g.memory {
        out.extend_from_slice(k.data());
        out.extend_from_slice(v.data());
    }
    out
}

fn pool_from_entries(
    entries: &[(TokenGrid<f64>, TokenGrid<f64>)],
    capacity: Option<usize>,
) -> Result<MemoryPool<f64>> {
    let mut pool = MemoryPool::new(capacity)?;
    for (t, (k, v)) in entries.iter().enumerate() {
        pool = memory_push(&pool, t, k, v)?;
    }
    Ok(pool)
}

fn loss_at(
    theta: &Theta,
    capacity: Option<usize>,
    upstream: &TokenGrid<f64>,
    frozen: Option<&(TokenGrid<f64>, TokenGrid<f64>)>,
) -> Result<f64> {
    let (x, lw, memory) = theta.unpack();
    let pool = pool_from_entries(&memory, capacity)?;
    let frozen_refs = frozen.map(|(k, v)| (k, v));
    let z = layer_output(&x, &pool, &lw, memory.len(), frozen_refs)?;
    Ok(z
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Sweeps every coordinate of a randomly built layer, comparing analytic
/// gradients against central finite differences of the matching forward.
pub fn run_gradcheck(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.channels % opts.heads != 0 {
        return Err(Error::dim(
            "run_gradcheck",
            format!("{} channels do not split into {} heads", opts.channels, opts.heads),
        ));
    }
    if opts.memory_frames == 0 {
        return Err(Error::dim("run_gradcheck", "need at least one memory frame".to_string()));
    }
    let (mut theta, upstream) = build_theta(opts);
    let (x, lw, memory) = theta.unpack();
    let pool = pool_from_entries(&memory, opts.capacity)?;
    let frame_index = memory.len();

    let grads = layer_backward(&x, &pool, &lw, &upstream, frame_index, opts.honor_stop_gradient)?;
    if opts.honor_stop_gradient {
        for (k, v) in &grads.memory {
            let flat = k.data().iter().chain(v.data());
            if flat.into_iter().any(|g| *g != 0.0) {
                return Err(Error::config(
                    "stop-gradient mode produced nonzero memory gradients".to_string(),
                ));
            }
        }
    }
    let analytic = flatten_gradients(&grads, opts.memory_frames);

    // In stop-gradient mode the finite differences must see the pushed
    // keys/values as constants, pinned at their base values.
    let frozen_base: Option<(TokenGrid<f64>, TokenGrid<f64>)> = if opts.honor_stop_gradient {
        let cache = forward_cached(&x, &pool, &lw, frame_index, None)?;
        let last = cache.pool2.entry(cache.pool2.len() - 1);
        Some((last.keys.clone(), last.values.clone()))
    } else {
        None
    };

    let mem_coords = opts.memory_frames * 2 * opts.rows * opts.cols * opts.channels;
    let sweep_len = if opts.honor_stop_gradient {
        theta.values.len() - mem_coords
    } else {
        theta.values.len()
    };

    let h = opts.step;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for i in 0..sweep_len {
        let base = theta.values[i];
        theta.values[i] = base + h;
        let up = loss_at(&theta, opts.capacity, &upstream, frozen_base.as_ref())?;
        theta.values[i] = base - h;
        let down = loss_at(&theta, opts.capacity, &upstream, frozen_base.as_ref())?;
        theta.values[i] = base;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = theta.site_of(i);
        }
    }
    Ok(GradCheckReport {
        coords: sweep_len,
        max_rel,
        worst_site: worst,
        honor_stop_gradient: opts.honor_stop_gradient,
    })
}
