//! The streaming encoder: patch embedding, stacked transformer layers with
//! per-layer FIFO memories, optional convolutional refinement per stage and
//! a multi-scale resolution adaptor.
//!
//! [`Encoder`] is stateful: frames go in one at a time and each layer's
//! memory pool carries keys and values forward, so frame `t` costs the same
//! once the memories are full no matter how long the stream has run.

use crate::attention::{memory_push, streaming_attention, MemoryPool, TokenGrid};
use crate::config::{ModelConfig, TaskMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, conv2d_transpose, gelu, layer_norm, matmul, MacCounter, Stage, Tensor, LN_EPS,
};
use crate::weights::{LayerWeights, ModelWeights, ResBlockParams};

/// Deliberately injectable defects, used to prove the verification suites
/// actually detect broken streaming state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Discard each frame's key/value push: every layer keeps reading a
    /// memory that only ever contains the current frame.
    SkipMemoryPush,
}

/// `[C, rows, cols]` image view of a token grid.
pub fn grid_to_image<T: Scalar>(g: &TokenGrid<T>) -> Tensor<T> {
    let (rows, cols, ch) = (g.rows(), g.cols(), g.channels());
    Tensor::from_fn(&[ch, rows, cols], |i| {
        let c = i / (rows * cols);
        let y = (i / cols) % rows;
        let x = i % cols;
        g.get(y, x, c)
    })
}

pub fn image_to_grid<T: Scalar>(t: &Tensor<T>) -> Result<TokenGrid<T>> {
    let (ch, rows, cols) = t.dims3("image_to_grid")?;
    let mut g = TokenGrid::zeros(rows, cols, ch);
    for c in 0..ch {
        for y in 0..rows {
            for x in 0..cols {
                g.set(y, x, c, t.data()[(c * rows + y) * cols + x]);
            }
        }
    }
    Ok(g)
}

/// Splits a `[3, H, W]` frame into non-overlapping patches, projects each
/// flattened patch to `C` channels and adds the position embedding.
pub fn patch_embed<T: Scalar>(
    frame: &Tensor<T>,
    patch: usize,
    proj: &Tensor<T>,
    pos: &Tensor<T>,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    let (ch, h, w) = frame.dims3("patch_embed")?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "patch_embed",
            format!("{h}x{w} frame does not tile with patch {patch}"),
        ));
    }
    let _scope = counter.scope(Stage::PatchEmbed);
    let (rows, cols) = (h / patch, w / patch);
    let dim = ch * patch * patch;
    let fd = frame.data();
    let mut patches = Vec::with_capacity(rows * cols * dim);
    for py in 0..rows {
        for px in 0..cols {
            for c in 0..ch {
                for dy in 0..patch {
                    for dx in 0..patch {
                        patches.push(fd[(c * h + py * patch + dy) * w + px * patch + dx]);
                    }
                }
            }
        }
    }
    let patches = Tensor::from_vec(&[rows * cols, dim], patches)?;
    let mut tokens = matmul(&patches, proj, counter)?;
    let (n, c_out) = tokens.dims2("patch_embed")?;
    if pos.shape() != [n, c_out] {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            lhs: pos.shape().to_vec(),
            rhs: vec![n, c_out],
        });
    }
    let pd = pos.data();
    for (i, v) in tokens.data_mut().iter_mut().enumerate() {
        *v += pd[i];
    }
    TokenGrid::from_matrix(rows, cols, &tokens)
}

fn add_bias<T: Scalar>(m: &mut Tensor<T>, b: &Tensor<T>) {
    let c = b.len();
    let bd = b.data();
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        *v += bd[i % c];
    }
}

fn grid_layer_norm<T: Scalar>(
    x: &TokenGrid<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    let normed = layer_norm(&x.to_matrix(), gamma, beta, LN_EPS, counter)?;
    TokenGrid::from_matrix(x.rows(), x.cols(), &normed)
}

fn grid_add<T: Scalar>(a: &TokenGrid<T>, b: &TokenGrid<T>) -> TokenGrid<T> {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += *v;
    }
    out
}

/// One pre-norm transformer layer with the streaming temporal extension.
pub fn transformer_layer<T: Scalar>(
    x: &TokenGrid<T>,
    pool: &MemoryPool<T>,
    lw: &LayerWeights<T>,
    window: Option<usize>,
    frame_index: usize,
    counter: &MacCounter,
) -> Result<(TokenGrid<T>, MemoryPool<T>)> {
    let normed = grid_layer_norm(x, &lw.ln1.gamma, &lw.ln1.beta, counter)?;
    let (att, pool) = streaming_attention(&normed, pool, &lw.attn, window, frame_index, counter)?;
    let y = grid_add(x, &att);

    let normed2 = grid_layer_norm(&y, &lw.ln2.gamma, &lw.ln2.beta, counter)?;
    let _scope = counter.scope(Stage::Mlp);
    let mut hidden = matmul(&normed2.to_matrix(), &lw.mlp.w1, counter)?;
    add_bias(&mut hidden, &lw.mlp.b1);
    let hidden = gelu(&hidden, counter);
    let mut out = matmul(&hidden, &lw.mlp.w2, counter)?;
    add_bias(&mut out, &lw.mlp.b2);
    let out = TokenGrid::from_matrix(x.rows(), x.cols(), &out)?;
    Ok((grid_add(&y, &out), pool))
}

fn image_channel_norm<T: Scalar>(
    img: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let g = image_to_grid(img)?;
    let normed = grid_layer_norm(&g, gamma, beta, counter)?;
    Ok(grid_to_image(&normed))
}

/// Residual convolutional refinement. Both norms act per position across
/// channels, so the block touches nothing outside the 5x5 footprint of its
/// two 3x3 convolutions.
pub fn resnet_block<T: Scalar>(
    x: &TokenGrid<T>,
    p: &ResBlockParams<T>,
    counter: &MacCounter,
) -> Result<TokenGrid<T>> {
    let _scope = counter.scope(Stage::ResNet);
    let img = grid_to_image(x);
    let t = image_channel_norm(&img, &p.norm1.gamma, &p.norm1.beta, counter)?;
    let t = conv2d(&t, &p.conv1, 1, 1, counter)?;
    let t = image_channel_norm(&t, &p.norm2.gamma, &p.norm2.beta, counter)?;
    let t = gelu(&t, counter);
    let t = conv2d(&t, &p.conv2, 1, 1, counter)?;
    let refined = image_to_grid(&t)?;
    Ok(grid_add(x, &refined))
}

/// Feature maps at 1/4x, 1/2x, 1x and 2x of the token-grid stride, coarsest
/// token grid last. Each level is `[C, h, w]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

/// Expands the final token grid into the four pyramid levels.
pub fn resolution_adaptor<T: Scalar>(
    x: &TokenGrid<T>,
    p: &crate::weights::AdaptorParams<T>,
    counter: &MacCounter,
) -> Result<FeaturePyramid<T>> {
    let _scope = counter.scope(Stage::Adaptor);
    let img = grid_to_image(x);
    let levels = vec![
        conv2d_transpose(&img, &p.up4, 4, counter)?,
        conv2d_transpose(&img, &p.up2, 2, counter)?,
        conv2d(&img, &p.keep, 1, 0, counter)?,
        conv2d(&img, &p.down2, 2, 0, counter)?,
    ];
    Ok(FeaturePyramid { levels })
}

/// Everything the encoder produces for one frame.
#[derive(Clone, Debug)]
pub struct FrameFeatures<T> {
    pub tokens: TokenGrid<T>,
    /// Present in frame mode only.
    pub pyramid: Option<FeaturePyramid<T>>,
}

pub struct Encoder<T> {
    config: ModelConfig,
    weights: ModelWeights<T>,
    pools: Vec<MemoryPool<T>>,
    next_frame: usize,
    counter: MacCounter,
    fault: Option<Fault>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: ModelConfig, weights: ModelWeights<T>) -> Result<Encoder<T>> {
        config.validate()?;
        let pools = (0..config.layers)
            .map(|_| MemoryPool::new(config.memory_capacity))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            config,
            weights,
            pools,
            next_frame: 0,
            counter: MacCounter::enabled(),
            fault: None,
        })
    }

    pub fn from_config(config: &ModelConfig) -> Result<Encoder<T>> {
        let weights = ModelWeights::init(config)?;
        Encoder::new(config.clone(), weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        &self.weights
    }

    pub fn counter(&self) -> &MacCounter {
        &self.counter
    }

    pub fn frames_seen(&self) -> usize {
        self.next_frame
    }

    pub fn pool_lengths(&self) -> Vec<usize> {
        self.pools.iter().map(|p| p.len()).collect()
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Drops all streaming state and the MAC tally; weights stay put.
    pub fn reset(&mut self) {
        for p in &mut self.pools {
            *p = MemoryPool::new(self.config.memory_capacity).unwrap();
        }
        self.next_frame = 0;
        self.counter.reset();
    }

    /// Encodes the next frame of the stream, advancing every layer memory.
    pub fn encode_frame(&mut self, frame: &Tensor<T>) -> Result<FrameFeatures<T>> {
        let (ch, h, w) = frame.dims3("encode_frame")?;
        if ch != 3 || h != self.config.image_h || w != self.config.image_w {
            return Err(Error::dim(
                "encode_frame",
                format!(
                    "frame is {ch}x{h}x{w}, model wants 3x{}x{}",
                    self.config.image_h, self.config.image_w
                ),
            ));
        }
        let frame_index = self.next_frame;
        self.next_frame += 1;

        let mut x = patch_embed(
            frame,
            self.config.patch,
            &self.weights.patch_proj,
            &self.weights.pos_embed,
            &self.counter,
        )?;
        let per_stage = self.config.layers_per_stage();
        for (l, lw) in self.weights.layers.iter().enumerate() {
            let (next, pool) = transformer_layer(
                &x,
                &self.pools[l],
                lw,
                self.config.window,
                frame_index,
                &self.counter,
            )?;
            x = next;
            match self.fault {
                Some(Fault::SkipMemoryPush) => {}
                None => self.pools[l] = pool,
            }
            if self.config.mode == TaskMode::Frame && (l + 1) % per_stage == 0 {
                let stage = l / per_stage;
                x = resnet_block(&x, &self.weights.resnet[stage], &self.counter)?;
            }
        }
        let pyramid = match self.config.mode {
            TaskMode::Frame => Some(resolution_adaptor(&x, &self.weights.adaptor, &self.counter)?),
            TaskMode::Sequence => None,
        };
        Ok(FrameFeatures { tokens: x, pyramid })
    }

    pub fn encode_sequence(&mut self, frames: &[Tensor<T>]) -> Result<Vec<FrameFeatures<T>>> {
        frames.iter().map(|f| self.encode_frame(f)).collect()
    }
}

/// Pushes a frame's keys/values into a pool the way the encoder does,
/// exposed for harnesses that drive layers manually.
pub fn push_layer_memory<T: Scalar>(
    pool: &MemoryPool<T>,
    frame_index: usize,
    keys: &TokenGrid<T>,
    values: &TokenGrid<T>,
) -> Result<MemoryPool<T>> {
    memory_push(pool, frame_index, keys, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_frame(h: usize, w: usize, rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(&[3, h, w], |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn patch_embed_matches_manual_projection() {
        let mut rng = Rng::seed_from(31);
        let frame = random_frame(4, 4, &mut rng);
        let patch = 2;
        let proj = Tensor::from_fn(&[12, 5], |_| rng.uniform_in(-1.0, 1.0));
        let pos = Tensor::from_fn(&[4, 5], |_| rng.uniform_in(-1.0, 1.0));
        let g = patch_embed(&frame, patch, &proj, &pos, &MacCounter::disabled()).unwrap();
        assert_eq!((g.rows(), g.cols(), g.channels()), (2, 2, 5));

        // Token (0, 1) covers pixels x in {2, 3}, y in {0, 1}.
        for j in 0..5 {
            let mut want = pos.data()[1 * 5 + j];
            for c in 0..3 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let pix = frame.data()[(c * 4 + dy) * 4 + 2 + dx];
                        want += pix * proj.data()[((c * 2 + dy) * 2 + dx) * 5 + j];
                    }
                }
            }
            assert!((g.get(0, 1, j) - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn patch_embed_counts_projection_macs() {
        let mut rng = Rng::seed_from(32);
        let frame = random_frame(8, 8, &mut rng);
        let proj = Tensor::from_fn(&[48, 16], |_| rng.uniform_in(-1.0, 1.0));
        let pos = Tensor::zeros(&[4, 16]);
        let counter = MacCounter::enabled();
        patch_embed(&frame, 4, &proj, &pos, &counter).unwrap();
        assert_eq!(counter.macs(), 4 * 48 * 16);
        assert_eq!(counter.stage_macs(Stage::PatchEmbed), 4 * 48 * 16);
    }

    #[test]
    fn patch_embed_rejects_untileable_frames() {
        let frame = Tensor::<f64>::zeros(&[3, 5, 4]);
        let proj = Tensor::zeros(&[12, 4]);
        let pos = Tensor::zeros(&[2, 4]);
        assert!(patch_embed(&frame, 2, &proj, &pos, &MacCounter::disabled()).is_err());
    }

    #[test]
    fn encoder_streams_and_grows_memory() {
        let cfg = crate::config::ModelConfig::compact();
        let mut enc = Encoder::<f64>::from_config(&cfg).unwrap();
        let mut rng = Rng::seed_from(33);
        for t in 1..=5 {
            let frame = random_frame(32, 32, &mut rng);
            let out = enc.encode_frame(&frame).unwrap();
            assert_eq!((out.tokens.rows(), out.tokens.cols(), out.tokens.channels()), (8, 8, 32));
            let pyramid = out.pyramid.expect("frame mode builds a pyramid");
            let shapes: Vec<Vec<usize>> =
                pyramid.levels.iter().map(|l| l.shape().to_vec()).collect();
            assert_eq!(
                shapes,
                vec![vec![32, 32, 32], vec![32, 16, 16], vec![32, 8, 8], vec![32, 4, 4]]
            );
            assert!(enc.pool_lengths().iter().all(|&n| n == t.min(8)));
            assert_eq!(enc.frames_seen(), t);
        }
    }

    #[test]
    fn sequence_mode_skips_refinement_and_pyramid() {
        let mut cfg = crate::config::ModelConfig::compact();
        let mut rng = Rng::seed_from(34);
        let frame = random_frame(32, 32, &mut rng);

        let mut frame_enc = Encoder::<f64>::from_config(&cfg).unwrap();
        let with_refine = frame_enc.encode_frame(&frame).unwrap();

        cfg.mode = TaskMode::Sequence;
        let mut seq_enc = Encoder::<f64>::from_config(&cfg).unwrap();
        let plain = seq_enc.encode_frame(&frame).unwrap();

        assert!(plain.pyramid.is_none());
        assert!(with_refine.tokens.max_abs_diff(&plain.tokens) > 0.0);
    }

    #[test]
    fn reset_restores_a_fresh_stream() {
        let cfg = crate::config::ModelConfig::compact();
        let mut enc = Encoder::<f64>::from_config(&cfg).unwrap();
        let mut rng = Rng::seed_from(35);
        let frames: Vec<Tensor<f64>> = (0..3).map(|_| random_frame(32, 32, &mut rng)).collect();
        let first: Vec<TokenGrid<f64>> =
            enc.encode_sequence(&frames).unwrap().into_iter().map(|f| f.tokens).collect();
        enc.reset();
        assert_eq!(enc.frames_seen(), 0);
        assert_eq!(enc.counter().macs(), 0);
        let second: Vec<TokenGrid<f64>> =
            enc.encode_sequence(&frames).unwrap().into_iter().map(|f| f.tokens).collect();
        for (a, b) in first.iter().zip(&second) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn skipped_memory_push_freezes_the_pools() {
        let cfg = crate::config::ModelConfig::compact();
        let mut rng = Rng::seed_from(36);
        let frames: Vec<Tensor<f64>> = (0..3).map(|_| random_frame(32, 32, &mut rng)).collect();

        let mut healthy = Encoder::<f64>::from_config(&cfg).unwrap();
        let mut broken = Encoder::<f64>::from_config(&cfg).unwrap();
        broken.inject_fault(Some(Fault::SkipMemoryPush));

        let good = healthy.encode_sequence(&frames).unwrap();
        let bad = broken.encode_sequence(&frames).unwrap();
        assert!(broken.pool_lengths().iter().all(|&n| n == 0));

        // The first frame only ever sees itself, so the fault is invisible
        // there; every later frame drifts.
        assert!(good[0].tokens.bits_eq(&bad[0].tokens));
        assert!(good[1].tokens.max_abs_diff(&bad[1].tokens) > 0.0);
        assert!(good[2].tokens.max_abs_diff(&bad[2].tokens) > 0.0);
    }

    #[test]
    fn resnet_block_touches_only_a_5x5_footprint() {
        let mut rng = Rng::seed_from(37);
        let c = 8;
        let p = ResBlockParams {
            norm1: crate::weights::LnParams {
                gamma: Tensor::filled(&[c], 1.0),
                beta: Tensor::zeros(&[c]),
            },
            conv1: Tensor::from_fn(&[c, c, 3, 3], |_| rng.uniform_in(-0.2, 0.2)),
            norm2: crate::weights::LnParams {
                gamma: Tensor::filled(&[c], 1.0),
                beta: Tensor::zeros(&[c]),
            },
            conv2: Tensor::from_fn(&[c, c, 3, 3], |_| rng.uniform_in(-0.2, 0.2)),
        };
        let mut x = TokenGrid::<f64>::zeros(7, 7, c);
        for j in 0..c {
            x.set(3, 3, j, rng.uniform_in(0.5, 1.0));
        }
        let out = resnet_block(&x, &p, &MacCounter::disabled()).unwrap();
        let mut touched_near = false;
        for y in 0..7 {
            for x_ in 0..7 {
                let dist = (y as i64 - 3).abs().max((x_ as i64 - 3).abs());
                let mag: f64 = (0..c).map(|j| out.get(y, x_, j).abs()).fold(0.0, f64::max);
                if dist > 2 {
                    assert_eq!(mag, 0.0, "position ({y},{x_}) outside the footprint moved");
                } else if dist > 0 && mag > 0.0 {
                    touched_near = true;
                }
            }
        }
        assert!(touched_near);
    }

    #[test]
    fn resnet_block_counts_conv_macs() {
        let c = 8;
        let g = TokenGrid::<f64>::zeros(4, 6, c);
        let p = ResBlockParams {
            norm1: crate::weights::LnParams {
                gamma: Tensor::filled(&[c], 1.0),
                beta: Tensor::zeros(&[c]),
            },
            conv1: Tensor::zeros(&[c, c, 3, 3]),
            norm2: crate::weights::LnParams {
                gamma: Tensor::filled(&[c], 1.0),
                beta: Tensor::zeros(&[c]),
            },
            conv2: Tensor::zeros(&[c, c, 3, 3]),
        };
        let counter = MacCounter::enabled();
        resnet_block(&g, &p, &counter).unwrap();
        let n = 4 * 6;
        assert_eq!(counter.stage_macs(Stage::ResNet), (18 * n * c * c) as u64);
    }

    #[test]
    fn adaptor_levels_and_macs() {
        let mut rng = Rng::seed_from(38);
        let c = 8;
        let g = TokenGrid::<f64>::new(
            4,
            4,
            c,
            (0..4 * 4 * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let p = crate::weights::AdaptorParams {
            up4: Tensor::from_fn(&[c, c, 8, 8], |_| rng.uniform_in(-0.1, 0.1)),
            up2: Tensor::from_fn(&[c, c, 4, 4], |_| rng.uniform_in(-0.1, 0.1)),
            keep: Tensor::from_fn(&[c, c, 1, 1], |_| rng.uniform_in(-0.1, 0.1)),
            down2: Tensor::from_fn(&[c, c, 2, 2], |_| rng.uniform_in(-0.1, 0.1)),
        };
        let counter = MacCounter::enabled();
        let pyr = resolution_adaptor(&g, &p, &counter).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.levels.iter().map(|l| l.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 16, 16], vec![8, 8, 8], vec![8, 4, 4], vec![8, 2, 2]]);
        let n = 16;
        let want = n * c * c * (64 + 16 + 1 + 1);
        assert_eq!(counter.stage_macs(Stage::Adaptor), want as u64);
    }

    #[test]
    fn grid_image_round_trip() {
        let mut rng = Rng::seed_from(39);
        let g = TokenGrid::<f64>::new(
            3,
            5,
            4,
            (0..60).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let img = grid_to_image(&g);
        assert_eq!(img.shape(), &[4, 3, 5]);
        assert_eq!(img.data()[(2 * 3 + 1) * 5 + 4], g.get(1, 4, 2));
        let back = image_to_grid(&img).unwrap();
        assert!(back.bits_eq(&g));
    }
}
