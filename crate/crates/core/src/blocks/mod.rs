//! Sequence-to-sequence blocks over `[B, L, D]` token tensors.

mod baselines;
mod config;
mod layers;
mod lmlp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use baselines::{attention_heads, GmlpBlock, MixerBlock, TransformerBlock};
pub use config::{
    BlockConfig, BlockKind, FirstStage, LeftActivation, MergeOp, MergeProjection, Preset, SecondStage, SkipMode,
};
pub use layers::{
    hidden_width, truncated_normal, LayerNorm, LinearLayer, MlpLayer, Module, NamedParams, INIT_STD, LAYER_NORM_EPS,
};
pub use lmlp::{BranchNet, LmlpBlock};

use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Entry point of a long skip connection inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipPoint {
    /// Before the first normalization.
    Input,
    /// Into the residual stream between the two stages.
    Residual,
}

impl SkipMode {
    pub fn point(self) -> Option<SkipPoint> {
        match self {
            SkipMode::None => None,
            SkipMode::FirstStage => Some(SkipPoint::Input),
            SkipMode::SecondStage => Some(SkipPoint::Residual),
        }
    }
}

pub(crate) fn check_extents<T: Element>(x: &Tensor<T>, l: usize, d: usize) -> Result<()> {
    match x.shape() {
        [_, xl, xd] if *xl == l && *xd == d => Ok(()),
        s => shape_err(format!("block built for [B, {l}, {d}] got {s:?}")),
    }
}

pub enum Block<T: Element> {
    Lmlp(LmlpBlock<T>),
    Transformer(TransformerBlock<T>),
    Mixer(MixerBlock<T>),
    Gmlp(GmlpBlock<T>),
}

/// Builds a block with parameters drawn from a ChaCha stream seeded by `seed`.
pub fn build_block<T: Element>(cfg: &BlockConfig, seed: u64) -> Result<Block<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Block::new(cfg, &mut rng)
}

impl<T: Element> Block<T> {
    pub fn new<R: rand::Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            BlockKind::Lmlp => Block::Lmlp(LmlpBlock::new(cfg, rng)),
            BlockKind::Transformer => Block::Transformer(TransformerBlock::new(cfg, rng)),
            BlockKind::Mixer => Block::Mixer(MixerBlock::new(cfg, rng)),
            BlockKind::Gmlp => Block::Gmlp(GmlpBlock::new(cfg, rng)),
        })
    }

    pub fn config(&self) -> &BlockConfig {
        match self {
            Block::Lmlp(b) => &b.cfg,
            Block::Transformer(b) => &b.cfg,
            Block::Mixer(b) => &b.cfg,
            Block::Gmlp(b) => &b.cfg,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with_skip(x, None)
    }

    pub fn forward_with_skip(&self, x: &Tensor<T>, skip: Option<(&Tensor<T>, SkipPoint)>) -> Result<Tensor<T>> {
        if let Some((s, _)) = skip {
            if s.shape() != x.shape() {
                return shape_err(format!("skip {:?} does not match block input {:?}", s.shape(), x.shape()));
            }
        }
        match self {
            Block::Lmlp(b) => b.forward(x, skip),
            Block::Transformer(b) => b.forward(x, skip),
            Block::Mixer(b) => b.forward(x, skip),
            Block::Gmlp(b) => b.forward(x, skip),
        }
    }

    pub fn as_lmlp(&self) -> Option<&LmlpBlock<T>> {
        match self {
            Block::Lmlp(b) => Some(b),
            _ => None,
        }
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        match self {
            Block::Lmlp(b) => b.collect_params(prefix, out),
            Block::Transformer(b) => b.collect_params(prefix, out),
            Block::Mixer(b) => b.collect_params(prefix, out),
            Block::Gmlp(b) => b.collect_params(prefix, out),
        }
    }
}
