//! Model/run configuration and its plain-text file format.
//!
//! The format is one `key = value` per line, keys fixed by [`ModelConfig`];
//! unknown or repeated keys are rejected rather than ignored so a typo
//! cannot silently fall back to a default. Parsing then serializing is the
//! identity up to whitespace.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl FromStr for Dtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Dtype> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::config(format!("dtype must be f32 or f64, got '{other}'"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

/// Frame tasks keep windowed spatial attention, per-stage ResNet blocks and
/// the resolution adaptor; sequence tasks skip those and feed pooled frame
/// tokens to the temporal decoder instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskMode {
    Frame,
    Sequence,
}

impl FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<TaskMode> {
        match s {
            "frame" => Ok(TaskMode::Frame),
            "sequence" => Ok(TaskMode::Sequence),
            other => Err(Error::config(format!("mode must be frame or sequence, got '{other}'"))),
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Frame => "frame",
            TaskMode::Sequence => "sequence",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Square patch side; image sides must divide by it.
    pub patch: usize,
    /// Embedding width C.
    pub channels: usize,
    pub heads: usize,
    /// Transformer depth L; must divide evenly into `stages`.
    pub layers: usize,
    pub stages: usize,
    /// Spatial attention window side; `None` is global attention.
    pub window: Option<usize>,
    /// Memory capacity M in frames per layer; `None` is unbounded.
    pub memory_capacity: Option<usize>,
    /// Initial value of the per-channel temporal fusion gates.
    pub fusion_init: f64,
    pub mode: TaskMode,
    pub seed: u64,
    pub dtype: Dtype,
    pub num_classes: usize,
    pub decoder_layers: usize,
    /// Capacity of the learnable temporal position tables (decoder input
    /// positions and memory offsets); sequences may not exceed it when the
    /// corresponding embedding is enabled.
    pub max_frames: usize,
    /// Adds a learnable per-offset embedding to memory keys at read time.
    pub memory_pos_embed: bool,
    /// Adds learnable frame-position embeddings to the decoder input.
    pub decoder_pos_embed: bool,
}

impl ModelConfig {
    /// Small configuration every verification suite runs at: 8x8 token
    /// grid, 32 channels, 4 layers.
    pub fn compact() -> ModelConfig {
        ModelConfig {
            image_h: 32,
            image_w: 32,
            patch: 4,
            channels: 32,
            heads: 4,
            layers: 4,
            stages: 4,
            window: Some(4),
            memory_capacity: Some(8),
            fusion_init: 1e-4,
            mode: TaskMode::Frame,
            seed: 7,
            dtype: Dtype::F32,
            num_classes: 8,
            decoder_layers: 4,
            max_frames: 64,
            memory_pos_embed: false,
            decoder_pos_embed: true,
        }
    }

    /// ViT-Base shape at 224x224/patch-16 (14x14 tokens, 768 channels,
    /// 12 layers). Used by the complexity reports; far too large for the
    /// numeric suites.
    pub fn vit_base_224() -> ModelConfig {
        ModelConfig {
            image_h: 224,
            image_w: 224,
            patch: 16,
            channels: 768,
            heads: 12,
            layers: 12,
            stages: 4,
            window: None,
            memory_capacity: None,
            fusion_init: 1e-4,
            mode: TaskMode::Sequence,
            seed: 7,
            dtype: Dtype::F32,
            num_classes: 400,
            decoder_layers: 4,
            max_frames: 64,
            memory_pos_embed: false,
            decoder_pos_embed: true,
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn layers_per_stage(&self) -> usize {
        self.layers / self.stages
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch == 0 || self.image_h == 0 || self.image_w == 0 {
            return fail("image and patch sizes must be positive".into());
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return fail(format!(
                "image {}x{} is not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            ));
        }
        if self.layers == 0 || self.stages == 0 || self.layers % self.stages != 0 {
            return fail(format!(
                "layers {} must be a positive multiple of stages {}",
                self.layers, self.stages
            ));
        }
        if self.window == Some(0) {
            return fail("window must be positive (omit it for global attention)".into());
        }
        if self.memory_capacity == Some(0) {
            return fail("memory_capacity must be positive (omit it for unbounded)".into());
        }
        if self.num_classes == 0 || self.decoder_layers == 0 || self.max_frames == 0 {
            return fail("num_classes, decoder_layers and max_frames must be positive".into());
        }
        if self.mode == TaskMode::Frame
            && (self.grid_rows() % 2 != 0 || self.grid_cols() % 2 != 0)
        {
            return fail(format!(
                "frame mode needs an even token grid for the stride-2 pyramid level, got {}x{}",
                self.grid_rows(),
                self.grid_cols()
            ));
        }
        Ok(())
    }
}

fn fmt_opt(v: Option<usize>, none_word: &str) -> String {
    match v {
        Some(n) => n.to_string(),
        None => none_word.to_string(),
    }
}

fn fmt_flag(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

pub fn render_config(c: &ModelConfig) -> String {
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    line("image_h", c.image_h.to_string());
    line("image_w", c.image_w.to_string());
    line("patch", c.patch.to_string());
    line("channels", c.channels.to_string());
    line("heads", c.heads.to_string());
    line("layers", c.layers.to_string());
    line("stages", c.stages.to_string());
    line("window", fmt_opt(c.window, "none"));
    line("memory_capacity", fmt_opt(c.memory_capacity, "unbounded"));
    line("fusion_init", format!("{:e}", c.fusion_init));
    line("mode", c.mode.to_string());
    line("seed", c.seed.to_string());
    line("dtype", c.dtype.to_string());
    line("num_classes", c.num_classes.to_string());
    line("decoder_layers", c.decoder_layers.to_string());
    line("max_frames", c.max_frames.to_string());
    line("memory_pos_embed", fmt_flag(c.memory_pos_embed).to_string());
    line("decoder_pos_embed", fmt_flag(c.decoder_pos_embed).to_string());
    s
}

/// Parses the `key = value` format. Missing keys keep the compact-config
/// defaults; unknown and repeated keys are errors. The result is validated.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::compact();
    let mut seen: Vec<String> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|k| k == key) {
            return Err(at(format!("key '{key}' given twice")));
        }
        seen.push(key.to_string());

        let usize_val = || -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| at(format!("key '{key}' wants an unsigned integer, got '{value}'")))
        };
        let opt_val = |none_word: &str| -> Result<Option<usize>> {
            if value == none_word {
                Ok(None)
            } else {
                value.parse::<usize>().map(Some).map_err(|_| {
                    at(format!("key '{key}' wants an integer or '{none_word}', got '{value}'"))
                })
            }
        };
        let flag_val = || -> Result<bool> {
            match value {
                "on" => Ok(true),
                "off" => Ok(false),
                _ => Err(at(format!("key '{key}' wants on or off, got '{value}'"))),
            }
        };

        match key {
            "image_h" => c.image_h = usize_val()?,
            "image_w" => c.image_w = usize_val()?,
            "patch" => c.patch = usize_val()?,
            "channels" => c.channels = usize_val()?,
            "heads" => c.heads = usize_val()?,
            "layers" => c.layers = usize_val()?,
            "stages" => c.stages = usize_val()?,
            "window" => c.window = opt_val("none")?,
            "memory_capacity" => c.memory_capacity = opt_val("unbounded")?,
            "fusion_init" => {
                c.fusion_init = value
                    .parse::<f64>()
                    .map_err(|_| at(format!("key 'fusion_init' wants a float, got '{value}'")))?
            }
            "mode" => c.mode = value.parse()?,
            "seed" => {
                c.seed = value
                    .parse::<u64>()
                    .map_err(|_| at(format!("key 'seed' wants an unsigned integer, got '{value}'")))?
            }
            "dtype" => c.dtype = value.parse()?,
            "num_classes" => c.num_classes = usize_val()?,
            "decoder_layers" => c.decoder_layers = usize_val()?,
            "max_frames" => c.max_frames = usize_val()?,
            "memory_pos_embed" => c.memory_pos_embed = flag_val()?,
            "decoder_pos_embed" => c.decoder_pos_embed = flag_val()?,
            other => return Err(at(format!("unknown key '{other}'"))),
        }
    }

    c.validate()?;
    Ok(c)
}
