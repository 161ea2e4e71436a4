//! Model parameters and their deterministic initialization.
//!
//! Every branch of the model is allocated regardless of the task mode, and
//! all random draws happen in one fixed order from a single seeded stream,
//! so two runs with the same seed and geometry get identical weights even
//! if one is frame mode and the other sequence mode. Draws are made in f64
//! and cast, which keeps an f32 run and an f64 run on the same parameters.

use crate::attention::AttentionWeights;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer-norm scale and shift, `[C]` each.
#[derive(Clone, Debug)]
pub struct LnParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LnParams<T> {
    fn identity(c: usize) -> LnParams<T> {
        LnParams {
            gamma: Tensor::filled(&[c], T::ONE),
            beta: Tensor::zeros(&[c]),
        }
    }
}

/// Two-layer MLP with GELU in between; hidden width is `4C`.
#[derive(Clone, Debug)]
pub struct MlpParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// One transformer layer: pre-norm attention with its temporal extension,
/// then a pre-norm MLP.
#[derive(Clone, Debug)]
pub struct LayerWeights<T> {
    pub ln1: LnParams<T>,
    pub attn: AttentionWeights<T>,
    pub ln2: LnParams<T>,
    pub mlp: MlpParams<T>,
}

/// Convolutional refinement block run at the end of each stage in frame
/// mode. Norms act per position across channels, so the block's receptive
/// field stays the 5x5 footprint of its two 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlockParams<T> {
    pub norm1: LnParams<T>,
    pub conv1: Tensor<T>,
    pub norm2: LnParams<T>,
    pub conv2: Tensor<T>,
}

/// Kernels of the multi-scale resolution adaptor: two transposed-conv
/// upsamplers, a 1x1 identity-scale branch and a strided downsampler.
#[derive(Clone, Debug)]
pub struct AdaptorParams<T> {
    pub up4: Tensor<T>,
    pub up2: Tensor<T>,
    pub keep: Tensor<T>,
    pub down2: Tensor<T>,
}

/// Bidirectional attention layer of the clip decoder.
#[derive(Clone, Debug)]
pub struct DecoderLayerWeights<T> {
    pub ln1: LnParams<T>,
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub out: Tensor<T>,
    pub ln2: LnParams<T>,
    pub mlp: MlpParams<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderWeights<T> {
    pub layers: Vec<DecoderLayerWeights<T>>,
    pub classifier: Tensor<T>,
    /// Added to the pooled frame tokens when enabled, `[max_frames, C]`.
    pub temporal_pos: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ModelWeights<T> {
    pub patch_proj: Tensor<T>,
    /// Per-token position embedding, `[tokens, C]`.
    pub pos_embed: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    /// One refinement block per stage.
    pub resnet: Vec<ResBlockParams<T>>,
    pub adaptor: AdaptorParams<T>,
    pub decoder: DecoderWeights<T>,
}

struct Init {
    rng: Rng,
}

impl Init {
    fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(self.rng.uniform_in(-bound, bound)))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn fan_in<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, (1.0 / fan_in as f64).sqrt())
    }
}

impl<T: Scalar> ModelWeights<T> {
    pub fn init(config: &ModelConfig) -> Result<ModelWeights<T>> {
        config.validate()?;
        let c = config.channels;
        let patch_dim = 3 * config.patch * config.patch;
        let mut init = Init { rng: Rng::seed_from(config.seed) };

        let patch_proj = init.fan_in(&[patch_dim, c], patch_dim);
        let pos_embed = init.uniform(&[config.tokens(), c], 0.02);

        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attn = AttentionWeights {
                heads: config.heads,
                query: init.fan_in(&[c, c], c),
                key: init.fan_in(&[c, c], c),
                value: init.fan_in(&[c, c], c),
                out: init.fan_in(&[c, c], c),
                temporal_query: init.fan_in(&[c, c], c),
                row_out: init.fan_in(&[c, c], c),
                col_out: init.fan_in(&[c, c], c),
                row_gate: Tensor::filled(&[c], T::from_f64(config.fusion_init)),
                col_gate: Tensor::filled(&[c], T::from_f64(config.fusion_init)),
                memory_pos: if config.memory_pos_embed {
                    Some(init.uniform(&[config.max_frames, c], 0.02))
                } else {
                    None
                },
            };
            layers.push(LayerWeights {
                ln1: LnParams::identity(c),
                attn,
                ln2: LnParams::identity(c),
                mlp: MlpParams {
                    w1: init.fan_in(&[c, 4 * c], c),
                    b1: Tensor::zeros(&[4 * c]),
                    w2: init.fan_in(&[4 * c, c], 4 * c),
                    b2: Tensor::zeros(&[c]),
                },
            });
        }

        let mut resnet = Vec::with_capacity(config.stages);
        for _ in 0..config.stages {
            resnet.push(ResBlockParams {
                norm1: LnParams::identity(c),
                conv1: init.fan_in(&[c, c, 3, 3], 9 * c),
                norm2: LnParams::identity(c),
                conv2: init.fan_in(&[c, c, 3, 3], 9 * c),
            });
        }

        let adaptor = AdaptorParams {
            up4: init.fan_in(&[c, c, 8, 8], 4 * c),
            up2: init.fan_in(&[c, c, 4, 4], 4 * c),
            keep: init.fan_in(&[c, c, 1, 1], c),
            down2: init.fan_in(&[c, c, 2, 2], 4 * c),
        };

        let mut dec_layers = Vec::with_capacity(config.decoder_layers);
        for _ in 0..config.decoder_layers {
            dec_layers.push(DecoderLayerWeights {
                ln1: LnParams::identity(c),
                query: init.fan_in(&[c, c], c),
                key: init.fan_in(&[c, c], c),
                value: init.fan_in(&[c, c], c),
                out: init.fan_in(&[c, c], c),
                ln2: LnParams::identity(c),
                mlp: MlpParams {
                    w1: init.fan_in(&[c, 4 * c], c),
                    b1: Tensor::zeros(&[4 * c]),
                    w2: init.fan_in(&[4 * c, c], 4 * c),
                    b2: Tensor::zeros(&[c]),
                },
            });
        }
        let classifier = init.fan_in(&[c, config.num_classes], c);
        let temporal_pos = if config.decoder_pos_embed {
            Some(init.uniform(&[config.max_frames, c], 0.02))
        } else {
            None
        };

        Ok(ModelWeights {
            patch_proj,
            pos_embed,
            layers,
            resnet,
            adaptor,
            decoder: DecoderWeights { layers: dec_layers, classifier, temporal_pos },
        })
    }

    pub fn parameter_count(&self) -> usize {
        let ln = |p: &LnParams<T>| p.gamma.len() + p.beta.len();
        let mlp = |p: &MlpParams<T>| p.w1.len() + p.b1.len() + p.w2.len() + p.b2.len();
        let mut n = self.patch_proj.len() + self.pos_embed.len();
        for l in &self.layers {
            let a = &l.attn;
            n += ln(&l.ln1) + ln(&l.ln2) + mlp(&l.mlp);
            n += a.query.len() + a.key.len() + a.value.len() + a.out.len();
            n += a.temporal_query.len() + a.row_out.len() + a.col_out.len();
            n += a.row_gate.len() + a.col_gate.len();
            n += a.memory_pos.as_ref().map_or(0, |t| t.len());
        }
        for b in &self.resnet {
            n += ln(&b.norm1) + ln(&b.norm2) + b.conv1.len() + b.conv2.len();
        }
        n += self.adaptor.up4.len()
            + self.adaptor.up2.len()
            + self.adaptor.keep.len()
            + self.adaptor.down2.len();
        for l in &self.decoder.layers {
            n += ln(&l.ln1) + ln(&l.ln2) + mlp(&l.mlp);
            n += l.query.len() + l.key.len() + l.value.len() + l.out.len();
        }
        n += self.decoder.classifier.len();
        n += self.decoder.temporal_pos.as_ref().map_or(0, |t| t.len());
        n
    }
}
