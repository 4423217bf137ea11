//! U-shaped stack of blocks over `[time | text | image]` token sequences,
//! with additive long skips from encoder blocks to their mirrored decoder
//! blocks.

mod patch;
mod tokens;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use patch::{patchify, unpatchify};
pub use tokens::{assemble_tokens, timestep_batch, timestep_encoding, token_ranges, TokenSequence, NULL_TOKEN};

use crate::blocks::{
    truncated_normal, Block, BlockConfig, LayerNorm, LinearLayer, Module, NamedParams, Preset, SkipMode, INIT_STD,
};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadKind {
    #[default]
    Linear,
    /// Linear head followed by one 3x3 same-padding convolution.
    Conv3x3Postprocess,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::Conv3x3Postprocess => "conv3x3_postprocess",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "conv3x3_postprocess" => Ok(HeadKind::Conv3x3Postprocess),
            other => Err(Error::Config(format!("unknown head kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub in_channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub text_tokens: usize,
    /// Caption vocabulary size, excluding the null id.
    pub vocab_size: usize,
    pub num_timesteps: usize,
    pub preset: Preset,
    pub mlp_scale: f64,
    pub skip_mode: SkipMode,
    pub head_kind: HeadKind,
}

impl BackboneConfig {
    /// Full-size reference: 32x32x4 latents, patch 2, width 512, depth 16,
    /// 77 caption tokens, MLP scale 4, second-stage skips.
    pub fn reference() -> Self {
        Self {
            image_side: 32,
            in_channels: 4,
            patch: 2,
            embed_dim: 512,
            depth: 16,
            text_tokens: 77,
            vocab_size: 32,
            num_timesteps: 1000,
            preset: Preset::F2Deep,
            mlp_scale: 4.0,
            skip_mode: SkipMode::SecondStage,
            head_kind: HeadKind::Linear,
        }
    }

    /// Desk-scale default: 8x8x1 images, patch 2, width 64, depth 4, 4 caption tokens.
    pub fn desk() -> Self {
        Self {
            image_side: 8,
            in_channels: 1,
            patch: 2,
            embed_dim: 64,
            depth: 4,
            text_tokens: 4,
            vocab_size: 32,
            num_timesteps: 1000,
            preset: Preset::F2,
            mlp_scale: 4.0,
            skip_mode: SkipMode::SecondStage,
            head_kind: HeadKind::Linear,
        }
    }

    pub fn image_tokens(&self) -> usize {
        let g = self.image_side / self.patch.max(1);
        g * g
    }

    /// `(side / patch)^2 + T + 1`.
    pub fn seq_len(&self) -> usize {
        self.image_tokens() + self.text_tokens + 1
    }

    pub fn block_config(&self) -> BlockConfig {
        self.preset.config(self.seq_len(), self.embed_dim, self.mlp_scale)
    }

    /// Encoder/decoder block pairs `(i, N - 1 - i)` for `i < N / 2`.
    pub fn skip_pairs(&self) -> Vec<(usize, usize)> {
        if self.skip_mode == SkipMode::None {
            return Vec::new();
        }
        (0..self.depth / 2).map(|i| (i, self.depth - 1 - i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch == 0 || self.image_side == 0 || self.image_side % self.patch != 0 {
            return bad(format!("image side {} is not divisible by patch {}", self.image_side, self.patch));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.depth == 0 {
            return bad("channels, embed_dim and depth must be positive".into());
        }
        if self.num_timesteps == 0 {
            return bad("num_timesteps must be positive".into());
        }
        if self.skip_mode != SkipMode::None && self.depth < 2 {
            return bad(format!("skip mode {} needs depth >= 2, got {}", self.skip_mode, self.depth));
        }
        self.block_config().validate()
    }
}

/// Output convolution of [`HeadKind::Conv3x3Postprocess`].
pub struct ConvHead<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub struct UlMlpModel<T: Element> {
    pub cfg: BackboneConfig,
    pub patch_embed: LinearLayer<T>,
    pub time_embed: LinearLayer<T>,
    /// `[vocab + 1, D]`; row [`NULL_TOKEN`] encodes the empty caption.
    pub text_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNorm<T>,
    pub head: LinearLayer<T>,
    pub conv: Option<ConvHead<T>>,
}

impl<T: Element> UlMlpModel<T> {
    pub fn new(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let patch_dim = cfg.patch * cfg.patch * cfg.in_channels;
        let l = cfg.seq_len();
        let tensor = |shape: &[usize], data: Vec<T>| Tensor::parameter(shape, data);
        let patch_embed = LinearLayer::new(patch_dim, d, &mut rng);
        let time_embed = LinearLayer::new(d, d, &mut rng);
        let text_embed = tensor(&[cfg.vocab_size + 1, d], truncated_normal((cfg.vocab_size + 1) * d, INIT_STD, &mut rng))?;
        let pos_embed = tensor(&[l, d], truncated_normal(l * d, INIT_STD, &mut rng))?;
        let block_cfg = cfg.block_config();
        let blocks = (0..cfg.depth).map(|_| Block::new(&block_cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
        let head = LinearLayer::new(d, patch_dim, &mut rng);
        let conv = match cfg.head_kind {
            HeadKind::Linear => None,
            HeadKind::Conv3x3Postprocess => {
                let c = cfg.in_channels;
                Some(ConvHead {
                    weight: tensor(&[c, c, 3, 3], truncated_normal(c * c * 9, INIT_STD, &mut rng))?,
                    bias: tensor(&[c], vec![T::zero(); c])?,
                })
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            time_embed,
            text_embed,
            pos_embed,
            blocks,
            final_norm: LayerNorm::new(d),
            head,
            conv,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.cfg.seq_len()
    }

    /// Embeds the noisy image, timesteps and captions into a token sequence
    /// (positional table not yet added).
    pub fn embed(&self, x_t: &Tensor<T>, text_ids: &[Vec<usize>], ts: &[usize]) -> Result<TokenSequence<T>> {
        let c = &self.cfg;
        let expected = [ts.len(), c.in_channels, c.image_side, c.image_side];
        if x_t.shape() != expected {
            return Err(Error::Shape(format!("expected input {expected:?}, got {:?}", x_t.shape())));
        }
        if text_ids.iter().any(|r| r.len() != c.text_tokens) {
            return Err(Error::Usage(format!("captions must have exactly {} token ids", c.text_tokens)));
        }
        let img = self.patch_embed.forward(&patchify(x_t, c.patch)?)?;
        let time = self.time_embed.forward(&timestep_batch(ts, c.embed_dim, c.num_timesteps)?)?;
        assemble_tokens(&time, &self.text_embed, text_ids, &img)
    }

    /// Runs the block stack on assembled tokens, applying the long skips.
    pub fn run_blocks(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.blocks.len();
        let point = self.cfg.skip_mode.point();
        let half = if point.is_some() { n / 2 } else { 0 };
        let mut stored: Vec<Tensor<T>> = Vec::with_capacity(half);
        let mut h = tokens.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = match point {
                Some(p) if i >= n - half => Some((stored[n - 1 - i].clone(), p)),
                _ => None,
            };
            h = block.forward_with_skip(&h, skip.as_ref().map(|(s, p)| (s, *p)))?;
            if i < half {
                stored.push(h.clone());
            }
        }
        Ok(h)
    }

    /// Maps the image-range tokens back to image layout.
    pub fn output_head(&self, seq: &TokenSequence<T>) -> Result<Tensor<T>> {
        let c = &self.cfg;
        let img = seq.tokens.narrow(1, seq.image.start, seq.image.len())?;
        let out = unpatchify(&self.head.forward(&img)?, c.patch, c.in_channels, c.image_side, c.image_side)?;
        match &self.conv {
            Some(conv) => out.conv3x3_same(&conv.weight, &conv.bias),
            None => Ok(out),
        }
    }

    /// Noise prediction for `x_t` at timesteps `ts` under captions `text_ids`.
    pub fn forward(&self, x_t: &Tensor<T>, text_ids: &[Vec<usize>], ts: &[usize]) -> Result<Tensor<T>> {
        let seq = self.embed(x_t, text_ids, ts)?;
        let h = self.run_blocks(&seq.tokens.add_broadcast(&self.pos_embed)?)?;
        let h = self.final_norm.forward(&h)?;
        self.output_head(&TokenSequence { tokens: h, ..seq })
    }
}

impl<T: Element> Module<T> for UlMlpModel<T> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        let join = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.patch_embed.collect_params(&join("patch_embed"), out);
        self.time_embed.collect_params(&join("time_embed"), out);
        out.push((join("text_embed"), self.text_embed.clone()));
        out.push((join("pos_embed"), self.pos_embed.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(&format!("blocks.{i}")), out);
        }
        self.final_norm.collect_params(&join("final_norm"), out);
        self.head.collect_params(&join("head"), out);
        if let Some(conv) = &self.conv {
            out.push((join("conv.weight"), conv.weight.clone()));
            out.push((join("conv.bias"), conv.bias.clone()));
        }
    }
}
