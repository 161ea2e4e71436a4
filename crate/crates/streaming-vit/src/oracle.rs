//! Dense reference model.
//!
//! [`clip_forward`] processes a whole clip at once: it materializes every
//! frame's keys and values at every layer and lets each frame attend over
//! whichever frames the temporal mask admits. No FIFO state is kept, the
//! set of admitted frames is recomputed from the mask on every read, and
//! the attention structure is spelled out here rather than borrowed from
//! the streaming path; only the arithmetic kernels are shared. A correct
//! streaming encoder must reproduce this model's output bit for bit under
//! the causal mask.
//!
//! [`image_vit_forward`] is the per-frame baseline with no temporal path
//! at all, and [`joint_attention`] is the unfactored space-time attention
//! that the two plane attentions replace.

use crate::attention::{MemoryPool, TokenGrid};
use crate::config::{ModelConfig, TaskMode};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, conv2d_transpose, gelu, layer_norm, matmul, softmax_rows, MacCounter, Stage, Tensor,
    LN_EPS,
};
use crate::weights::{LayerWeights, ModelWeights, ResBlockParams};

/// Which frames a frame may read during temporal attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMask {
    /// Frame `t` reads frame `s` iff `s <= t` and `s` is within the memory
    /// capacity, i.e. `t - M < s`. This is what streaming realizes.
    Causal,
    /// Every frame reads every frame; capacity is ignored.
    Bidirectional,
}

#[derive(Clone, Debug)]
pub struct ClipFeatures<T> {
    pub frames: Vec<TokenGrid<T>>,
    /// Per-frame pyramids in frame mode.
    pub pyramids: Option<Vec<FeaturePyramid<T>>>,
}

fn norm_grid<T: Scalar>(
    g: &TokenGrid<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    let m = layer_norm(&g.to_matrix(), gamma, beta, LN_EPS, counter)?;
    TokenGrid::from_matrix(g.rows(), g.cols(), &m)
}

/// Multi-head attention written out head by head. Matches the streaming
/// arithmetic exactly: per head, logits then a post-matmul scale, softmax,
/// aggregation.
fn heads_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let (n_q, c) = q.dims2("heads_attention")?;
    let (n_k, _) = k.dims2("heads_attention")?;
    if n_k == 0 {
        return Err(Error::EmptyMemory);
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim(
            "heads_attention",
            format!("{c} channels do not split into {heads} heads"),
        ));
    }
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut out = vec![T::ZERO; n_q * c];
    for h in 0..heads {
        let take = |m: &Tensor<T>, rows: usize| {
            Tensor::from_fn(&[rows, d], |i| m.data()[(i / d) * c + h * d + i % d])
        };
        let qh = take(q, n_q);
        let kh_t = Tensor::from_fn(&[d, n_k], |i| k.data()[(i % n_k) * c + h * d + i / n_k]);
        let vh = take(v, n_k);
        let logits = matmul(&qh, &kh_t, counter)?.map(|x| x * scale);
        let weights = softmax_rows(&logits, counter)?;
        let oh = matmul(&weights, &vh, counter)?;
        for i in 0..n_q {
            out[i * c + h * d..i * c + (h + 1) * d]
                .copy_from_slice(&oh.data()[i * d..(i + 1) * d]);
        }
    }
    Tensor::from_vec(&[n_q, c], out)
}

/// Patch embedding built by scattering image pixels into the patch matrix.
fn embed_frame<T: Scalar>(
    frame: &Tensor<T>,
    config: &ModelConfig,
    weights: &ModelWeights<T>,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    let (ch, h, w) = frame.dims3("clip_forward")?;
    if ch != 3 || h != config.image_h || w != config.image_w {
        return Err(Error::dim(
            "clip_forward",
            format!("frame is {ch}x{h}x{w}, model wants 3x{}x{}", config.image_h, config.image_w),
        ));
    }
    let _scope = counter.scope(Stage::PatchEmbed);
    let p = config.patch;
    let (rows, cols) = (config.grid_rows(), config.grid_cols());
    let dim = 3 * p * p;
    let mut patches = Tensor::<T>::zeros(&[rows * cols, dim]);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let token = (y / p) * cols + x / p;
                let slot = (c * p + y % p) * p + x % p;
                patches.data_mut()[token * dim + slot] = frame.data()[(c * h + y) * w + x];
            }
        }
    }
    let mut tokens = matmul(&patches, &weights.patch_proj, counter)?;
    let pd = weights.pos_embed.data();
    for (i, v) in tokens.data_mut().iter_mut().enumerate() {
        *v += pd[i];
    }
    TokenGrid::from_matrix(rows, cols, &tokens)
}

fn admitted_frames(t: usize, total: usize, mask: TemporalMask, capacity: Option<usize>) -> Vec<usize> {
    match mask {
        TemporalMask::Bidirectional => (0..total).collect(),
        TemporalMask::Causal => {
            let lo = match capacity {
                Some(m) => (t + 1).saturating_sub(m),
                None => 0,
            };
            (lo..=t).collect()
        }
    }
}

/// Concatenates one grid row (or column) from each admitted frame, oldest
/// first.
fn plane_keys<T: Scalar>(
    grids: &[TokenGrid<T>],
    admitted: &[usize],
    fixed: usize,
    along_rows: bool,
    key_offsets: Option<(&Tensor<T>, usize)>,
) -> Tensor<T> {
    let g0 = &grids[admitted[0]];
    let c = g0.channels();
    let span = if along_rows { g0.cols() } else { g0.rows() };
    let mut out = Vec::with_capacity(admitted.len() * span * c);
    for &s in admitted {
        let g = &grids[s];
        for i in 0..span {
            let tok = if along_rows { g.token(fixed, i) } else { g.token(i, fixed) };
            match key_offsets {
                Some((embed, t)) => {
                    let row = embed.row(t - s);
                    out.extend(tok.iter().zip(row).map(|(a, b)| *a + *b));
                }
                None => out.extend_from_slice(tok),
            }
        }
    }
    Tensor::from_vec(&[admitted.len() * span, c], out).unwrap()
}

struct LayerBatch<T> {
    spatial: Vec<TokenGrid<T>>,
    keys: Vec<TokenGrid<T>>,
    values: Vec<TokenGrid<T>>,
}

fn spatial_pass<T: Scalar>(
    z: &[TokenGrid<T>],
    lw: &LayerWeights<T>,
    counter: &MacCounter,
) -> Result<LayerBatch<T>> {
    let mut batch = LayerBatch { spatial: Vec::new(), keys: Vec::new(), values: Vec::new() };
    for g in z {
        let normed = norm_grid(g, &lw.ln1.gamma, &lw.ln1.beta, counter)?;
        let _scope = counter.scope(Stage::SpatialAttention);
        let nm = normed.to_matrix();
        let q = matmul(&nm, &lw.attn.query, counter)?;
        let k = matmul(&nm, &lw.attn.key, counter)?;
        let v = matmul(&nm, &lw.attn.value, counter)?;
        let att = heads_attention(&q, &k, &v, lw.attn.heads, counter)?;
        let o = matmul(&att, &lw.attn.out, counter)?;
        batch.spatial.push(TokenGrid::from_matrix(g.rows(), g.cols(), &o)?);
        batch.keys.push(TokenGrid::from_matrix(g.rows(), g.cols(), &k)?);
        batch.values.push(TokenGrid::from_matrix(g.rows(), g.cols(), &v)?);
    }
    Ok(batch)
}

fn temporal_pass<T: Scalar>(
    t: usize,
    batch: &LayerBatch<T>,
    lw: &LayerWeights<T>,
    mask: TemporalMask,
    capacity: Option<usize>,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    let spatial = &batch.spatial[t];
    let (rows, cols, c) = (spatial.rows(), spatial.cols(), spatial.channels());
    let admitted = admitted_frames(t, batch.spatial.len(), mask, capacity);
    let offsets = match (&lw.attn.memory_pos, mask) {
        (Some(_), TemporalMask::Bidirectional) => {
            return Err(Error::config(
                "memory position offsets are causal; use the causal mask",
            ))
        }
        (Some(embed), TemporalMask::Causal) => Some((embed, t)),
        (None, _) => None,
    };

    let scope = counter.scope(Stage::TemporalProj);
    let tq = matmul(&spatial.to_matrix(), &lw.attn.temporal_query, counter)?;
    let tq = TokenGrid::from_matrix(rows, cols, &tq)?;
    drop(scope);

    let scope = counter.scope(Stage::TemporalCore);
    let tqm = tq.to_matrix();
    let mut row_att = TokenGrid::zeros(rows, cols, c);
    for y in 0..rows {
        let q = Tensor::from_fn(&[cols, c], |i| tqm.data()[(y * cols + i / c) * c + i % c]);
        let k = plane_keys(&batch.keys, &admitted, y, true, offsets);
        let v = plane_keys(&batch.values, &admitted, y, true, None);
        let o = heads_attention(&q, &k, &v, lw.attn.heads, counter)?;
        for x in 0..cols {
            let dst = (y * cols + x) * c;
            row_att.data_mut()[dst..dst + c].copy_from_slice(&o.data()[x * c..(x + 1) * c]);
        }
    }
    let mut col_att = TokenGrid::zeros(rows, cols, c);
    for x in 0..cols {
        let q = Tensor::from_fn(&[rows, c], |i| tqm.data()[((i / c) * cols + x) * c + i % c]);
        let k = plane_keys(&batch.keys, &admitted, x, false, offsets);
        let v = plane_keys(&batch.values, &admitted, x, false, None);
        let o = heads_attention(&q, &k, &v, lw.attn.heads, counter)?;
        for y in 0..rows {
            let dst = (y * cols + x) * c;
            col_att.data_mut()[dst..dst + c].copy_from_slice(&o.data()[y * c..(y + 1) * c]);
        }
    }
    drop(scope);

    let _scope = counter.scope(Stage::TemporalProj);
    let row_proj = matmul(&row_att.to_matrix(), &lw.attn.row_out, counter)?;
    let col_proj = matmul(&col_att.to_matrix(), &lw.attn.col_out, counter)?;
    let mut fused = spatial.clone();
    for (gate, branch) in [(&lw.attn.row_gate, &row_proj), (&lw.attn.col_gate, &col_proj)] {
        let gd = gate.data();
        for tok in 0..rows * cols {
            for j in 0..c {
                let v = fused.get(tok / cols, tok % cols, j) + gd[j] * branch.data()[tok * c + j];
                fused.set(tok / cols, tok % cols, j, v);
            }
        }
        counter.add_macs((rows * cols * c) as u64);
    }
    Ok(fused)
}

fn mlp_pass<T: Scalar>(
    y: &TokenGrid<T>,
    lw: &LayerWeights<T>,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    let normed = norm_grid(y, &lw.ln2.gamma, &lw.ln2.beta, counter)?;
    let _scope = counter.scope(Stage::Mlp);
    let mut hidden = matmul(&normed.to_matrix(), &lw.mlp.w1, counter)?;
    let b1 = lw.mlp.b1.data();
    for (i, v) in hidden.data_mut().iter_mut().enumerate() {
        *v += b1[i % b1.len()];
    }
    let hidden = gelu(&hidden, counter);
    let mut out = matmul(&hidden, &lw.mlp.w2, counter)?;
    let b2 = lw.mlp.b2.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b2[i % b2.len()];
    }
    let mut z = y.clone();
    for (a, b) in z.data_mut().iter_mut().zip(out.data()) {
        *a += *b;
    }
    Ok(z)
}

fn refine<T: Scalar>(
    g: &TokenGrid<T>,
    p: &ResBlockParams<T>,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    let _scope = counter.scope(Stage::ResNet);
    let to_image = |g: &TokenGrid<T>| {
        let (rows, cols, ch) = (g.rows(), g.cols(), g.channels());
        Tensor::from_fn(&[ch, rows, cols], |i| {
            g.get((i / cols) % rows, i % cols, i / (rows * cols))
        })
    };
    let norm_image = |img: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>| -> Result<Tensor<T>> {
        let (ch, rows, cols) = img.dims3("refine")?;
        let tokens = Tensor::from_fn(&[rows * cols, ch], |i| {
            img.data()[(i % ch) * rows * cols + i / ch]
        });
        let normed = layer_norm(&tokens, gamma, beta, LN_EPS, counter)?;
        Ok(Tensor::from_fn(&[ch, rows, cols], |i| {
            normed.data()[(i % (rows * cols)) * ch + i / (rows * cols)]
        }))
    };
    let img = to_image(g);
    let t = norm_image(&img, &p.norm1.gamma, &p.norm1.beta)?;
    let t = conv2d(&t, &p.conv1, 1, 1, counter)?;
    let t = norm_image(&t, &p.norm2.gamma, &p.norm2.beta)?;
    let t = gelu(&t, counter);
    let t = conv2d(&t, &p.conv2, 1, 1, counter)?;
    let (ch, rows, cols) = t.dims3("refine")?;
    let mut out = g.clone();
    for c in 0..ch {
        for y in 0..rows {
            for x in 0..cols {
                let v = out.get(y, x, c) + t.data()[(c * rows + y) * cols + x];
                out.set(y, x, c, v);
            }
        }
    }
    Ok(out)
}

fn pyramid_of<T: Scalar>(
    g: &TokenGrid<T>,
    w: &ModelWeights<T>,
    counter: &MacCounter,
) -> Result<FeaturePyramid<T>> {
    let _scope = counter.scope(Stage::Adaptor);
    let (rows, cols, ch) = (g.rows(), g.cols(), g.channels());
    let img = Tensor::from_fn(&[ch, rows, cols], |i| {
        g.get((i / cols) % rows, i % cols, i / (rows * cols))
    });
    Ok(FeaturePyramid {
        levels: vec![
            conv2d_transpose(&img, &w.adaptor.up4, 4, counter)?,
            conv2d_transpose(&img, &w.adaptor.up2, 2, counter)?,
            conv2d(&img, &w.adaptor.keep, 1, 0, counter)?,
            conv2d(&img, &w.adaptor.down2, 2, 0, counter)?,
        ],
    })
}

/// Runs the dense reference model over a whole clip.
///
/// Only global spatial attention is supported here; windowed configurations
/// must be compared through the streaming path.
pub fn clip_forward<T: Scalar>(
    frames: &[Tensor<T>],
    config: &ModelConfig,
    weights: &ModelWeights<T>,
    mask: TemporalMask,
    counter: &MacCounter,
) -> Result<ClipFeatures<T>> {
    config.validate()?;
    if config.window.is_some() {
        return Err(Error::config(
            "the dense reference implements global spatial attention only; unset window",
        ));
    }
    if frames.is_empty() {
        return Err(Error::dim("clip_forward", "empty clip".to_string()));
    }
    let mut z = frames
        .iter()
        .map(|f| embed_frame(f, config, weights, counter))
        .collect::<Result<Vec<_>>>()?;

    let per_stage = config.layers_per_stage();
    for (l, lw) in weights.layers.iter().enumerate() {
        let batch = spatial_pass(&z, lw, counter)?;
        let mut next = Vec::with_capacity(z.len());
        for t in 0..z.len() {
            let fused = temporal_pass(t, &batch, lw, mask, config.memory_capacity, counter)?;
            let mut y = z[t].clone();
            for (a, b) in y.data_mut().iter_mut().zip(fused.data()) {
                *a += *b;
            }
            next.push(mlp_pass(&y, lw, counter)?);
        }
        z = next;
        if config.mode == TaskMode::Frame && (l + 1) % per_stage == 0 {
            let stage = l / per_stage;
            z = z
                .iter()
                .map(|g| refine(g, &weights.resnet[stage], counter))
                .collect::<Result<Vec<_>>>()?;
        }
    }

    let pyramids = match config.mode {
        TaskMode::Frame => Some(
            z.iter()
                .map(|g| pyramid_of(g, weights, counter))
                .collect::<Result<Vec<_>>>()?,
        ),
        TaskMode::Sequence => None,
    };
    Ok(ClipFeatures { frames: z, pyramids })
}

/// Per-frame baseline: the same network with the temporal path removed
/// entirely. Windowed spatial attention is spelled out here with its own
/// tiling.
pub fn image_vit_forward<T: Scalar>(
    frame: &Tensor<T>,
    config: &ModelConfig,
    weights: &ModelWeights<T>,
    counter: &MacCounter,
) -> Result<crate::encoder::FrameFeatures<T>> {
    config.validate()?;
    let mut z = embed_frame(frame, config, weights, counter)?;
    let per_stage = config.layers_per_stage();
    for (l, lw) in weights.layers.iter().enumerate() {
        let normed = norm_grid(&z, &lw.ln1.gamma, &lw.ln1.beta, counter)?;
        let scope = counter.scope(Stage::SpatialAttention);
        let nm = normed.to_matrix();
        let q = matmul(&nm, &lw.attn.query, counter)?;
        let k = matmul(&nm, &lw.attn.key, counter)?;
        let v = matmul(&nm, &lw.attn.value, counter)?;
        let (rows, cols, c) = (z.rows(), z.cols(), z.channels());
        let side = config.window.unwrap_or(rows.max(cols));
        let mut att = Tensor::<T>::zeros(&[rows * cols, c]);
        for ty in (0..rows).step_by(side) {
            for tx in (0..cols).step_by(side) {
                let mut idx = Vec::new();
                for y in ty..(ty + side).min(rows) {
                    for x in tx..(tx + side).min(cols) {
                        idx.push(y * cols + x);
                    }
                }
                let pick = |m: &Tensor<T>| {
                    Tensor::from_fn(&[idx.len(), c], |i| m.data()[idx[i / c] * c + i % c])
                };
                let o = heads_attention(&pick(&q), &pick(&k), &pick(&v), lw.attn.heads, counter)?;
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        att.data_mut()[i * c + j] = o.data()[row * c + j];
                    }
                }
            }
        }
        let o = matmul(&att, &lw.attn.out, counter)?;
        drop(scope);
        let mut y = z.clone();
        for (a, b) in y.data_mut().iter_mut().zip(o.data()) {
            *a += *b;
        }
        z = mlp_pass(&y, lw, counter)?;
        if config.mode == TaskMode::Frame && (l + 1) % per_stage == 0 {
            z = refine(&z, &weights.resnet[l / per_stage], counter)?;
        }
    }
    let pyramid = match config.mode {
        TaskMode::Frame => Some(pyramid_of(&z, weights, counter)?),
        TaskMode::Sequence => None,
    };
    Ok(crate::encoder::FrameFeatures { tokens: z, pyramid })
}

/// Unfactored space-time attention: every query token attends over every
/// token of every remembered frame at once. Kept as the cost baseline the
/// plane factorization is measured against.
pub fn joint_attention<T: Scalar>(
    q: &TokenGrid<T>,
    pool: &MemoryPool<T>,
    heads: usize,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    if pool.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let _scope = counter.scope(Stage::TemporalCore);
    let c = q.channels();
    let n_k = pool.len() * pool.entry(0).keys.tokens();
    let mut keys = Vec::with_capacity(n_k * c);
    let mut values = Vec::with_capacity(n_k * c);
    for e in pool.entries() {
        keys.extend_from_slice(e.keys.data());
        values.extend_from_slice(e.values.data());
    }
    let k = Tensor::from_vec(&[n_k, c], keys)?;
    let v = Tensor::from_vec(&[n_k, c], values)?;
    let o = heads_attention(&q.to_matrix(), &k, &v, heads, counter)?;
    TokenGrid::from_matrix(q.rows(), q.cols(), &o)
}
