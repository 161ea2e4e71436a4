//! MAC accounting, both closed-form and instrumented.
//!
//! One MAC is one scalar multiply-accumulate inside a matrix product,
//! convolution or gated fusion. Softmax, layer norm and GELU work is kept
//! out of the MAC tally and reported as a separate element count. The
//! closed-form formulas here must match the instrumented counters exactly,
//! integer for integer; a test that runs both and compares is the check
//! that the implementation does the work the formulas claim.

use std::fmt;
use std::str::FromStr;

use crate::config::{ModelConfig, TaskMode};
use crate::decoder::decode;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::oracle::{clip_forward, image_vit_forward, TemporalMask};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{MacCounter, Stage, Tensor};
use crate::weights::ModelWeights;

/// Which execution strategy to account for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopMode {
    /// Per-frame baseline: no temporal path at all.
    Frame,
    /// Causal streaming over the bounded memory.
    Streaming,
    /// Dense bidirectional processing of the whole clip.
    Clip,
}

impl FromStr for FlopMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<FlopMode> {
        match s {
            "frame" => Ok(FlopMode::Frame),
            "streaming" => Ok(FlopMode::Streaming),
            "clip" => Ok(FlopMode::Clip),
            other => Err(Error::config(format!(
                "unknown cost mode '{other}' (frame, streaming, clip)"
            ))),
        }
    }
}

impl fmt::Display for FlopMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopMode::Frame => "frame",
            FlopMode::Streaming => "streaming",
            FlopMode::Clip => "clip",
        })
    }
}

/// Per-stage MAC tally for a whole run, plus the elementwise-op count.
#[derive(Clone, Debug)]
pub struct FlopReport {
    pub mode: FlopMode,
    pub frames: usize,
    stage_macs: [u64; Stage::ALL.len()],
    pub elems: u64,
    pub instrumented: bool,
}

impl FlopReport {
    pub fn stage(&self, s: Stage) -> u64 {
        self.stage_macs[s.index()]
    }

    pub fn total_macs(&self) -> u64 {
        self.stage_macs.iter().sum()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let source = if self.instrumented { "instrumented" } else { "closed-form" };
        out.push_str(&format!("cost mode     {} ({source})\n", self.mode));
        out.push_str(&format!("frames        {}\n", self.frames));
        for s in Stage::ALL {
            let macs = self.stage(s);
            if macs > 0 {
                out.push_str(&format!("{:<20}{:>18} MACs\n", s.name(), macs));
            }
        }
        out.push_str(&format!("{:<20}{:>18} MACs\n", "total", self.total_macs()));
        out.push_str(&format!("{:<20}{:>18} elems\n", "normalization etc.", self.elems));
        out
    }

    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mode = {}\n", self.mode));
        out.push_str(&format!("frames = {}\n", self.frames));
        out.push_str(&format!("instrumented = {}\n", if self.instrumented { "on" } else { "off" }));
        for s in Stage::ALL {
            out.push_str(&format!("{} = {}\n", s.name(), self.stage(s)));
        }
        out.push_str(&format!("total_macs = {}\n", self.total_macs()));
        out.push_str(&format!("elems = {}\n", self.elems));
        out
    }
}

/// Side lengths of the window tiling along one axis.
fn tile_sizes(extent: usize, side: usize) -> Vec<usize> {
    let mut sizes = vec![side; extent / side];
    if extent % side != 0 {
        sizes.push(extent % side);
    }
    sizes
}

/// Sum over tiles of (tokens in tile)^2; the logit/aggregation core of
/// windowed attention is quadratic within each tile.
fn tile_token_square_sum(rows: usize, cols: usize, window: Option<usize>) -> u64 {
    match window {
        None => {
            let n = (rows * cols) as u64;
            n * n
        }
        Some(side) => {
            let mut sum = 0u64;
            for ry in tile_sizes(rows, side) {
                for cx in tile_sizes(cols, side) {
                    let n = (ry * cx) as u64;
                    sum += n * n;
                }
            }
            sum
        }
    }
}

/// Memory occupancy summed over the clip: how many frames each frame's
/// temporal read covers, under the given mode.
fn memory_occupancy(frames: usize, capacity: Option<usize>, mode: FlopMode) -> u64 {
    match mode {
        FlopMode::Frame => 0,
        FlopMode::Clip => (frames * frames) as u64,
        FlopMode::Streaming => (1..=frames)
            .map(|t| match capacity {
                Some(m) => t.min(m) as u64,
                None => t as u64,
            })
            .sum(),
    }
}

/// Exact MAC and element counts for a `frames`-long run, derived from
/// the model geometry alone.
pub fn closed_form_flops(config: &ModelConfig, frames: usize, mode: FlopMode) -> Result<FlopReport> {
    config.validate()?;
    if frames == 0 {
        return Err(Error::dim("closed_form_flops", "zero frames".to_string()));
    }
    if mode == FlopMode::Clip && config.window.is_some() {
        return Err(Error::config(
            "the dense reference implements global spatial attention only; unset window",
        ));
    }
    let n = config.tokens() as u64;
    let c = config.channels as u64;
    let (rows, cols) = (config.grid_rows() as u64, config.grid_cols() as u64);
    let heads = config.heads as u64;
    let t = frames as u64;
    let layers = config.layers as u64;

    let mut stage_macs = [0u64; Stage::ALL.len()];
    let mut elems = 0u64;
    let mut add = |s: Stage, macs: u64| stage_macs[s.index()] += macs;

    let patch_dim = 3 * (config.patch * config.patch) as u64;
    add(Stage::PatchEmbed, t * n * patch_dim * c);

    let tile_sq = tile_token_square_sum(config.grid_rows(), config.grid_cols(), config.window);
    add(Stage::SpatialAttention, t * layers * (4 * n * c * c + 2 * tile_sq * c));
    elems += t * layers * heads * tile_sq;
    elems += t * layers * 2 * n * c;
    elems += t * layers * 4 * n * c;

    let occupancy = memory_occupancy(frames, config.memory_capacity, mode);
    if mode != FlopMode::Frame {
        add(Stage::TemporalProj, t * layers * (3 * n * c * c + 2 * n * c));
        let plane_logits = n * (rows + cols);
        add(Stage::TemporalCore, layers * occupancy * 2 * plane_logits * c);
        elems += layers * occupancy * heads * plane_logits;
    }

    add(Stage::Mlp, t * layers * 8 * n * c * c);

    if config.mode == TaskMode::Frame {
        let blocks = config.stages as u64;
        add(Stage::ResNet, t * blocks * 18 * n * c * c);
        elems += t * blocks * 3 * n * c;
        add(Stage::Adaptor, t * n * c * c * (64 + 16 + 1 + 1));
    } else {
        let dec_layers = config.decoder_layers as u64;
        add(Stage::Decoder, dec_layers * (12 * t * c * c + 2 * t * t * c));
        add(Stage::Decoder, c * config.num_classes as u64);
        elems += dec_layers * (2 * t * c + heads * t * t + 4 * t * c);
    }

    Ok(FlopReport { mode, frames, stage_macs, elems, instrumented: false })
}

/// Standard-normal input frames pinned by the config seed, shared by the
/// instrumented reports and the verification suites.
pub fn synthetic_frames<T: Scalar>(config: &ModelConfig, frames: usize) -> Vec<Tensor<T>> {
    let mut rng = Rng::seed_from(config.seed.wrapping_add(1));
    (0..frames)
        .map(|_| {
            Tensor::from_fn(&[3, config.image_h, config.image_w], |_| {
                T::from_f64(rng.normal())
            })
        })
        .collect()
}

/// Runs the actual model on synthetic frames and reads the counters.
pub fn instrumented_flops(config: &ModelConfig, frames: usize, mode: FlopMode) -> Result<FlopReport> {
    config.validate()?;
    if frames == 0 {
        return Err(Error::dim("instrumented_flops", "zero frames".to_string()));
    }
    let inputs = synthetic_frames::<f64>(config, frames);
    let weights = ModelWeights::<f64>::init(config)?;
    let counter = MacCounter::enabled();

    let grids = match mode {
        FlopMode::Frame => inputs
            .iter()
            .map(|f| image_vit_forward(f, config, &weights, &counter).map(|o| o.tokens))
            .collect::<Result<Vec<_>>>()?,
        FlopMode::Streaming => {
            let mut enc = Encoder::new(config.clone(), weights.clone())?;
            let out = enc.encode_sequence(&inputs)?;
            for s in Stage::ALL {
                counter.add_macs_to_stage(s, enc.counter().stage_macs(s));
            }
            counter.add_elems(enc.counter().elems());
            out.into_iter().map(|f| f.tokens).collect()
        }
        FlopMode::Clip => {
            clip_forward(&inputs, config, &weights, TemporalMask::Bidirectional, &counter)?.frames
        }
    };
    if config.mode == TaskMode::Sequence {
        decode(&grids, &weights.decoder, config.heads, &counter)?;
    }

    let mut stage_macs = [0u64; Stage::ALL.len()];
    for s in Stage::ALL {
        stage_macs[s.index()] = counter.stage_macs(s);
    }
    Ok(FlopReport { mode, frames, stage_macs, elems: counter.elems(), instrumented: true })
}
