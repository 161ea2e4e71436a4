//! Spatial self-attention and streaming temporal cross-attention.
//!
//! Per frame, tokens first attend spatially (optionally inside square
//! windows). The frame's full-grid keys and values are pushed into a FIFO
//! [`MemoryPool`] shared with past frames, including the current one, and a
//! temporal query derived from the spatial output then reads the pool
//! through two axis-aligned planes:
//!
//! * row plane: each token attends to every memory token in the same grid
//!   row, across all remembered frames;
//! * column plane: the same along its grid column.
//!
//! Factoring the joint space-time neighborhood into these two planes cuts
//! the logit work per frame from `N^2 * T` to `N * (rows + cols) * T` for
//! an `N = rows * cols` grid. Both plane outputs are projected and folded
//! into the spatial output through per-channel gates that start near zero,
//! so an untrained model behaves like its image-only counterpart.
//!
//! Stored memory is a value copy and gradients are never propagated into
//! it; the gradient checker models that explicitly.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, softmax_rows, transpose2, MacCounter, Stage, Tensor};

/// Tokens laid out as a `rows x cols` grid with `channels` values each,
/// row-major, channels innermost.
#[derive(Clone, Debug)]
pub struct TokenGrid<T> {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(rows: usize, cols: usize, channels: usize, data: Vec<T>) -> Result<TokenGrid<T>> {
        if data.len() != rows * cols * channels {
            return Err(Error::dim(
                "TokenGrid::new",
                format!(
                    "{rows}x{cols}x{channels} wants {} values, got {}",
                    rows * cols * channels,
                    data.len()
                ),
            ));
        }
        Ok(TokenGrid { rows, cols, channels, data })
    }

    pub fn zeros(rows: usize, cols: usize, channels: usize) -> TokenGrid<T> {
        TokenGrid {
            rows,
            cols,
            channels,
            data: vec![T::ZERO; rows * cols * channels],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn token(&self, y: usize, x: usize) -> &[T] {
        let base = (y * self.cols + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.cols + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.cols + x) * self.channels + c] = v;
    }

    /// The same data viewed as a `[tokens, channels]` matrix.
    pub fn to_matrix(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.tokens(), self.channels], self.data.clone()).unwrap()
    }

    pub fn from_matrix(rows: usize, cols: usize, m: &Tensor<T>) -> Result<TokenGrid<T>> {
        let (n, c) = m.dims2("TokenGrid::from_matrix")?;
        if n != rows * cols {
            return Err(Error::dim(
                "TokenGrid::from_matrix",
                format!("matrix has {n} rows, grid wants {rows}x{cols}"),
            ));
        }
        TokenGrid::new(rows, cols, c, m.data().to_vec())
    }

    pub fn same_shape(&self, other: &TokenGrid<T>) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.channels == other.channels
    }

    pub fn bits_eq(&self, other: &TokenGrid<T>) -> bool {
        self.same_shape(other)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn max_abs_diff(&self, other: &TokenGrid<T>) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched grids");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Weights of one attention layer: the spatial projections, the temporal
/// query and per-plane output projections, and the fusion gates.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T> {
    pub heads: usize,
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub out: Tensor<T>,
    /// Builds plane queries from the projected spatial output.
    pub temporal_query: Tensor<T>,
    pub row_out: Tensor<T>,
    pub col_out: Tensor<T>,
    /// Per-channel fusion gates, `[C]`.
    pub row_gate: Tensor<T>,
    pub col_gate: Tensor<T>,
    /// Optional per-offset embedding added to memory keys at read time,
    /// `[max_frames, C]`; row 0 is the current frame.
    pub memory_pos: Option<Tensor<T>>,
}

#[derive(Debug)]
pub struct MemoryEntry<T> {
    pub frame_index: usize,
    pub keys: TokenGrid<T>,
    pub values: TokenGrid<T>,
}

/// FIFO key/value memory of the most recent frames, one pool per layer.
///
/// A pool is an immutable value: pushing builds a new pool that shares the
/// surviving entries. Entries are value copies of what was pushed, and the
/// pool is always detached — no gradient flows into stored tensors.
#[derive(Clone, Debug)]
pub struct MemoryPool<T> {
    capacity: Option<usize>,
    entries: Vec<Arc<MemoryEntry<T>>>,
}

impl<T: Scalar> MemoryPool<T> {
    pub fn new(capacity: Option<usize>) -> Result<MemoryPool<T>> {
        if capacity == Some(0) {
            return Err(Error::config("memory capacity must be positive or unbounded"));
        }
        Ok(MemoryPool { capacity, entries: Vec::new() })
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry<T>> {
        self.entries.iter().map(|e| e.as_ref())
    }

    pub fn entry(&self, i: usize) -> &MemoryEntry<T> {
        &self.entries[i]
    }

    pub fn last_frame_index(&self) -> Option<usize> {
        self.entries.last().map(|e| e.frame_index)
    }

    /// Stored tensors never carry gradients back to their producers.
    pub fn detached(&self) -> bool {
        true
    }
}

/// Appends a frame's keys/values, evicting the oldest entry beyond
/// capacity. Frame indices must be strictly increasing and the grids must
/// agree in shape with each other and with what the pool already holds.
pub fn memory_push<T: Scalar>(
    pool: &MemoryPool<T>,
    frame_index: usize,
    keys: &TokenGrid<T>,
    values: &TokenGrid<T>,
) -> Result<MemoryPool<T>> {
    if !keys.same_shape(values) {
        return Err(Error::ShapeMismatch {
            op: "memory_push",
            lhs: vec![keys.rows(), keys.cols(), keys.channels()],
            rhs: vec![values.rows(), values.cols(), values.channels()],
        });
    }
    if let Some(first) = pool.entries.first() {
        if !first.keys.same_shape(keys) {
            return Err(Error::ShapeMismatch {
                op: "memory_push",
                lhs: vec![first.keys.rows(), first.keys.cols(), first.keys.channels()],
                rhs: vec![keys.rows(), keys.cols(), keys.channels()],
            });
        }
    }
    if let Some(last) = pool.last_frame_index() {
        if frame_index <= last {
            return Err(Error::FrameOrder { last, new: frame_index });
        }
    }
    let mut entries = pool.entries.clone();
    entries.push(Arc::new(MemoryEntry {
        frame_index,
        keys: keys.clone(),
        values: values.clone(),
    }));
    if let Some(cap) = pool.capacity {
        while entries.len() > cap {
            entries.remove(0);
        }
    }
    Ok(MemoryPool { capacity: pool.capacity, entries })
}

fn head_cols<T: Scalar>(m: &Tensor<T>, head: usize, dim: usize) -> Tensor<T> {
    let (n, c) = m.dims2("head_cols").expect("head_cols wants rank 2");
    let mut out = vec![T::ZERO; n * dim];
    let md = m.data();
    for i in 0..n {
        let src = i * c + head * dim;
        out[i * dim..(i + 1) * dim].copy_from_slice(&md[src..src + dim]);
    }
    Tensor::from_vec(&[n, dim], out).unwrap()
}

fn gather_rows<T: Scalar>(m: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let (_, c) = m.dims2("gather_rows").expect("gather_rows wants rank 2");
    let md = m.data();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&md[i * c..(i + 1) * c]);
    }
    Tensor::from_vec(&[idx.len(), c], out).unwrap()
}

/// Multi-head scaled dot-product attention over row-token matrices.
/// `q` is `[n_q, C]`, `k` and `v` are `[n_k, C]`. Counts exactly
/// `2 * n_q * n_k * C` MACs (logits plus aggregation).
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let (n_q, c) = q.dims2("scaled_dot_attention")?;
    let (n_k, ck) = k.dims2("scaled_dot_attention")?;
    let (n_v, cv) = v.dims2("scaled_dot_attention")?;
    if ck != c || cv != c || n_v != n_k {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    if n_k == 0 {
        return Err(Error::EmptyMemory);
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim(
            "scaled_dot_attention",
            format!("{c} channels do not split into {heads} heads"),
        ));
    }
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut out = vec![T::ZERO; n_q * c];
    for h in 0..heads {
        let qh = head_cols(q, h, d);
        let kh = head_cols(k, h, d);
        let vh = head_cols(v, h, d);
        let logits = matmul(&qh, &transpose2(&kh)?, counter)?.map(|x| x * scale);
        let weights = softmax_rows(&logits, counter)?;
        let oh = matmul(&weights, &vh, counter)?;
        let od = oh.data();
        for i in 0..n_q {
            out[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(&od[i * d..(i + 1) * d]);
        }
    }
    Tensor::from_vec(&[n_q, c], out)
}

fn window_tiles(rows: usize, cols: usize, side: usize) -> Vec<Vec<usize>> {
    let mut tiles = Vec::new();
    let mut ty = 0;
    while ty < rows {
        let y_end = (ty + side).min(rows);
        let mut tx = 0;
        while tx < cols {
            let x_end = (tx + side).min(cols);
            let mut idx = Vec::with_capacity((y_end - ty) * (x_end - tx));
            for y in ty..y_end {
                for x in tx..x_end {
                    idx.push(y * cols + x);
                }
            }
            tiles.push(idx);
            tx = x_end;
        }
        ty = y_end;
    }
    tiles
}

/// Spatial self-attention over one frame's tokens.
///
/// Projections always run on the full grid; with a window, only the
/// attention itself is restricted to square tiles (boundary tiles are
/// truncated, so a window covering the whole grid is exactly global
/// attention). Returns the attended tokens after the output projection
/// plus the full-grid keys and values for the memory pool.
pub fn spatial_self_attention<T: Scalar>(
    x: &TokenGrid<T>,
    w: &AttentionWeights<T>,
    window: Option<usize>,
    counter: &MacCounter,
) -> Result<(TokenGrid<T>, TokenGrid<T>, TokenGrid<T>)> {
    if window == Some(0) {
        return Err(Error::config("window must be positive (omit it for global attention)"));
    }
    let _scope = counter.scope(Stage::SpatialAttention);
    let xm = x.to_matrix();
    let q = matmul(&xm, &w.query, counter)?;
    let k = matmul(&xm, &w.key, counter)?;
    let v = matmul(&xm, &w.value, counter)?;

    let attended = match window {
        None => scaled_dot_attention(&q, &k, &v, w.heads, counter)?,
        Some(side) => {
            let c = x.channels();
            let mut out = vec![T::ZERO; x.tokens() * c];
            for idx in window_tiles(x.rows(), x.cols(), side) {
                let qt = gather_rows(&q, &idx);
                let kt = gather_rows(&k, &idx);
                let vt = gather_rows(&v, &idx);
                let ot = scaled_dot_attention(&qt, &kt, &vt, w.heads, counter)?;
                let od = ot.data();
                for (row, &i) in idx.iter().enumerate() {
                    out[i * c..(i + 1) * c].copy_from_slice(&od[row * c..(row + 1) * c]);
                }
            }
            Tensor::from_vec(&[x.tokens(), c], out)?
        }
    };
    let projected = matmul(&attended, &w.out, counter)?;
    Ok((
        TokenGrid::from_matrix(x.rows(), x.cols(), &projected)?,
        TokenGrid::from_matrix(x.rows(), x.cols(), &k)?,
        TokenGrid::from_matrix(x.rows(), x.cols(), &v)?,
    ))
}

fn check_pool_against_query<T: Scalar>(q: &TokenGrid<T>, pool: &MemoryPool<T>) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let e = pool.entry(0);
    if !e.keys.same_shape(q) {
        return Err(Error::ShapeMismatch {
            op: "plane_attention",
            lhs: vec![q.rows(), q.cols(), q.channels()],
            rhs: vec![e.keys.rows(), e.keys.cols(), e.keys.channels()],
        });
    }
    Ok(())
}

fn gather_plane<T: Scalar>(
    pool: &MemoryPool<T>,
    fixed_row: Option<usize>,
    fixed_col: Option<usize>,
    take_keys: bool,
) -> Tensor<T> {
    let first = pool.entry(0);
    let c = first.keys.channels();
    let span = match fixed_row {
        Some(_) => first.keys.cols(),
        None => first.keys.rows(),
    };
    let mut out = Vec::with_capacity(pool.len() * span * c);
    for e in pool.entries() {
        let g = if take_keys { &e.keys } else { &e.values };
        match (fixed_row, fixed_col) {
            (Some(y), None) => {
                for x in 0..g.cols() {
                    out.extend_from_slice(g.token(y, x));
                }
            }
            (None, Some(x)) => {
                for y in 0..g.rows() {
                    out.extend_from_slice(g.token(y, x));
                }
            }
            _ => unreachable!("exactly one plane axis must be fixed"),
        }
    }
    Tensor::from_vec(&[pool.len() * span, c], out).unwrap()
}

/// Temporal cross-attention along grid rows: the tokens of each row attend
/// to that row's tokens in every remembered frame, oldest frame first.
pub fn row_plane_attention<T: Scalar>(
    q: &TokenGrid<T>,
    pool: &MemoryPool<T>,
    heads: usize,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    check_pool_against_query(q, pool)?;
    let _scope = counter.scope(Stage::TemporalCore);
    let c = q.channels();
    let mut out = TokenGrid::zeros(q.rows(), q.cols(), c);
    for y in 0..q.rows() {
        let idx: Vec<usize> = (0..q.cols()).map(|x| y * q.cols() + x).collect();
        let qr = gather_rows(&q.to_matrix(), &idx);
        let kr = gather_plane(pool, Some(y), None, true);
        let vr = gather_plane(pool, Some(y), None, false);
        let or = scaled_dot_attention(&qr, &kr, &vr, heads, counter)?;
        let od = or.data();
        for x in 0..q.cols() {
            let dst = (y * q.cols() + x) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&od[x * c..(x + 1) * c]);
        }
    }
    Ok(out)
}

/// Temporal cross-attention along grid columns; the transpose-dual of
/// [`row_plane_attention`].
pub fn col_plane_attention<T: Scalar>(
    q: &TokenGrid<T>,
    pool: &MemoryPool<T>,
    heads: usize,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    check_pool_against_query(q, pool)?;
    let _scope = counter.scope(Stage::TemporalCore);
    let c = q.channels();
    let mut out = TokenGrid::zeros(q.rows(), q.cols(), c);
    for x in 0..q.cols() {
        let idx: Vec<usize> = (0..q.rows()).map(|y| y * q.cols() + x).collect();
        let qc = gather_rows(&q.to_matrix(), &idx);
        let kc = gather_plane(pool, None, Some(x), true);
        let vc = gather_plane(pool, None, Some(x), false);
        let oc = scaled_dot_attention(&qc, &kc, &vc, heads, counter)?;
        let od = oc.data();
        for y in 0..q.rows() {
            let dst = (y * q.cols() + x) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&od[y * c..(y + 1) * c]);
        }
    }
    Ok(out)
}

/// Rebuilds the pool with per-offset embeddings added to the stored keys.
/// Offset 0 is the current frame.
fn pool_with_offset_keys<T: Scalar>(
    pool: &MemoryPool<T>,
    embed: &Tensor<T>,
    current_frame: usize,
) -> Result<MemoryPool<T>> {
    let (max_frames, c) = embed.dims2("memory_pos_embed")?;
    let mut entries = Vec::with_capacity(pool.len());
    for e in pool.entries() {
        let offset = current_frame - e.frame_index;
        if offset >= max_frames {
            return Err(Error::config(format!(
                "memory offset {offset} exceeds the {max_frames}-row position table; raise max_frames"
            )));
        }
        if e.keys.channels() != c {
            return Err(Error::ShapeMismatch {
                op: "memory_pos_embed",
                lhs: vec![e.keys.channels()],
                rhs: vec![c],
            });
        }
        let erow = embed.row(offset);
        let mut keys = e.keys.clone();
        for tok in 0..keys.tokens() {
            let base = tok * c;
            for j in 0..c {
                keys.data_mut()[base + j] += erow[j];
            }
        }
        entries.push(Arc::new(MemoryEntry {
            frame_index: e.frame_index,
            keys,
            values: e.values.clone(),
        }));
    }
    Ok(MemoryPool { capacity: pool.capacity(), entries })
}

fn gate_fuse<T: Scalar>(
    base: &mut TokenGrid<T>,
    gate: &Tensor<T>,
    branch: &Tensor<T>,
    counter: &MacCounter,
) -> Result<()> {
    let c = base.channels();
    if gate.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "gate_fuse",
            lhs: gate.shape().to_vec(),
            rhs: vec![c],
        });
    }
    let gd = gate.data();
    let bd = branch.data();
    let out = base.data_mut();
    for tok in 0..out.len() / c {
        for j in 0..c {
            out[tok * c + j] += gd[j] * bd[tok * c + j];
        }
    }
    counter.add_macs((out.len()) as u64);
    Ok(())
}

/// One frame's full attention step: spatial self-attention, push of the
/// frame's keys/values into the memory, plane-factorized temporal
/// cross-attention over the grown pool, gated fusion. Returns the fused
/// tokens and the new pool.
pub fn streaming_attention<T: Scalar>(
    x: &TokenGrid<T>,
    pool: &MemoryPool<T>,
    w: &AttentionWeights<T>,
    window: Option<usize>,
    frame_index: usize,
    counter: &MacCounter,
) -> Result<(TokenGrid<T>, MemoryPool<T>)> {
    let (spatial, keys, values) = spatial_self_attention(x, w, window, counter)?;
    let pool = memory_push(pool, frame_index, &keys, &values)?;
    let read_pool = match &w.memory_pos {
        Some(embed) => pool_with_offset_keys(&pool, embed, frame_index)?,
        None => pool.clone(),
    };

    let scope = counter.scope(Stage::TemporalProj);
    let tq = matmul(&spatial.to_matrix(), &w.temporal_query, counter)?;
    let tq = TokenGrid::from_matrix(x.rows(), x.cols(), &tq)?;
    drop(scope);

    let row_att = row_plane_attention(&tq, &read_pool, w.heads, counter)?;
    let col_att = col_plane_attention(&tq, &read_pool, w.heads, counter)?;

    let _scope = counter.scope(Stage::TemporalProj);
    let row_proj = matmul(&row_att.to_matrix(), &w.row_out, counter)?;
    let col_proj = matmul(&col_att.to_matrix(), &w.col_out, counter)?;
    let mut fused = spatial;
    gate_fuse(&mut fused, &w.row_gate, &row_proj, counter)?;
    gate_fuse(&mut fused, &w.col_gate, &col_proj, counter)?;
    Ok((fused, pool))
}
