use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Lmlp,
    Transformer,
    Mixer,
    Gmlp,
}

/// Branch networks of the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstStage {
    /// Square linear map.
    Linear,
    /// Square linear map followed by GELU, on both branches.
    OneLayerMlp,
}

/// Extra activation on the token-axis (left) branch after its linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeftActivation {
    None,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOp {
    /// `l + r`
    Sum,
    /// `l * r`
    Product,
    /// `l * sigmoid(r)`
    Glu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeProjection {
    Linear,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondStage {
    None,
    Mlp,
}

/// Where a long skip connection enters a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkipMode {
    #[default]
    None,
    /// Added to the block input before the first normalization.
    FirstStage,
    /// Added to the residual stream after the merge, before the second stage.
    SecondStage,
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipMode::None => "none",
            SkipMode::FirstStage => "first_stage",
            SkipMode::SecondStage => "second_stage",
        })
    }
}

impl FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SkipMode::None),
            "first_stage" => Ok(SkipMode::FirstStage),
            "second_stage" => Ok(SkipMode::SecondStage),
            other => Err(Error::Config(format!("unknown skip mode `{other}`"))),
        }
    }
}

/// One point of the block design space.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub first_stage: FirstStage,
    pub left_activation: LeftActivation,
    pub merge_op: MergeOp,
    pub merge_projection: MergeProjection,
    pub second_stage: SecondStage,
    pub seq_len: usize,
    pub embed_dim: usize,
    /// Hidden-width scale `s` of every MLP in the block.
    pub mlp_scale: f64,
}

/// Named rows of the ablation grid plus the attention baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    A1,
    A2,
    A3,
    B1,
    B2,
    B3,
    C1,
    D1,
    D2,
    E1,
    E2,
    F1,
    F2,
    F2Deep,
    Transformer,
}

impl Preset {
    pub const ALL: [Preset; 15] = [
        Preset::A1,
        Preset::A2,
        Preset::A3,
        Preset::B1,
        Preset::B2,
        Preset::B3,
        Preset::C1,
        Preset::D1,
        Preset::D2,
        Preset::E1,
        Preset::E2,
        Preset::F1,
        Preset::F2,
        Preset::F2Deep,
        Preset::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::A1 => "A1",
            Preset::A2 => "A2",
            Preset::A3 => "A3",
            Preset::B1 => "B1",
            Preset::B2 => "B2",
            Preset::B3 => "B3",
            Preset::C1 => "C1",
            Preset::D1 => "D1",
            Preset::D2 => "D2",
            Preset::E1 => "E1",
            Preset::E2 => "E2",
            Preset::F1 => "F1",
            Preset::F2 => "F2",
            Preset::F2Deep => "F2-Deep",
            Preset::Transformer => "Transformer",
        }
    }

    /// Long-skip placement the row was evaluated with.
    pub fn skip_mode(self) -> SkipMode {
        match self {
            Preset::F1 => SkipMode::FirstStage,
            Preset::F2 | Preset::F2Deep => SkipMode::SecondStage,
            _ => SkipMode::None,
        }
    }

    /// Full-scale (depth, MLP scale) where the row pins them.
    pub fn full_scale_shape(self) -> Option<(usize, f64)> {
        match self {
            Preset::F2 => Some((12, 5.2)),
            Preset::F2Deep => Some((16, 4.0)),
            _ => None,
        }
    }

    pub fn config(self, seq_len: usize, embed_dim: usize, mlp_scale: f64) -> BlockConfig {
        use FirstStage::*;
        use MergeOp::*;
        let lmlp = |first_stage, left_activation, merge_op, merge_projection, second_stage| BlockConfig {
            kind: BlockKind::Lmlp,
            first_stage,
            left_activation,
            merge_op,
            merge_projection,
            second_stage,
            seq_len,
            embed_dim,
            mlp_scale,
        };
        let baseline = |kind| BlockConfig { kind, ..lmlp(Linear, LeftActivation::None, Sum, MergeProjection::Linear, SecondStage::Mlp) };
        let (none, gelu) = (LeftActivation::None, LeftActivation::Gelu);
        let (proj, no_proj) = (MergeProjection::Linear, MergeProjection::None);
        match self {
            Preset::A1 => lmlp(OneLayerMlp, none, Sum, proj, SecondStage::None),
            Preset::B1 => lmlp(OneLayerMlp, none, Product, proj, SecondStage::None),
            Preset::B2 => lmlp(OneLayerMlp, none, Glu, proj, SecondStage::None),
            Preset::B3 => lmlp(OneLayerMlp, none, Sum, no_proj, SecondStage::None),
            Preset::C1 => lmlp(OneLayerMlp, none, Sum, proj, SecondStage::Mlp),
            Preset::D1 => lmlp(Linear, none, Product, proj, SecondStage::Mlp),
            Preset::D2 | Preset::F1 | Preset::F2 | Preset::F2Deep => lmlp(Linear, none, Sum, proj, SecondStage::Mlp),
            Preset::E1 => lmlp(Linear, gelu, Product, proj, SecondStage::Mlp),
            Preset::E2 => lmlp(Linear, gelu, Sum, proj, SecondStage::Mlp),
            Preset::A2 => baseline(BlockKind::Mixer),
            Preset::A3 => baseline(BlockKind::Gmlp),
            Preset::Transformer => baseline(BlockKind::Transformer),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        Preset::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_uppercase() == key)
            .or(match key.as_str() {
                "F2DEEP" | "F2_DEEP" => Some(Preset::F2Deep),
                "U-VIT" | "UVIT" => Some(Preset::Transformer),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown block preset `{s}`")))
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "block extents must be positive, got L={} D={}",
                self.seq_len, self.embed_dim
            )));
        }
        if !(self.mlp_scale > 0.0 && self.mlp_scale.is_finite()) {
            return Err(Error::Config(format!("mlp scale must be positive, got {}", self.mlp_scale)));
        }
        if self.kind == BlockKind::Lmlp
            && self.merge_op == MergeOp::Glu
            && self.merge_projection == MergeProjection::None
        {
            return Err(Error::Unsupported("GLU merge without a merge projection".into()));
        }
        Ok(())
    }
}
