use rand::Rng;

use super::config::{BlockConfig, FirstStage, LeftActivation, MergeOp, MergeProjection, SecondStage};
use super::layers::{hidden_width, join, LayerNorm, LinearLayer, MlpLayer, Module, NamedParams};
use super::{check_extents, SkipPoint};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Square branch network of the first stage.
pub struct BranchNet<T: Element> {
    pub linear: LinearLayer<T>,
    pub gelu: bool,
}

impl<T: Element> BranchNet<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.linear.forward(x)?;
        if self.gelu {
            y.gelu()
        } else {
            Ok(y)
        }
    }
}

/// Two-branch block: a channel branch over `D` and a token branch over `L`
/// (on the permuted input), merged, projected, and added to the input,
/// followed by an optional channel MLP with its own residual.
pub struct LmlpBlock<T: Element> {
    pub cfg: BlockConfig,
    pub norm_r: LayerNorm<T>,
    pub norm_l: LayerNorm<T>,
    pub fnn_r: BranchNet<T>,
    pub fnn_l: BranchNet<T>,
    pub merge_proj: Option<LinearLayer<T>>,
    pub norm_2: Option<LayerNorm<T>>,
    pub fnn_c: Option<MlpLayer<T>>,
}

impl<T: Element> LmlpBlock<T> {
    /// Fresh block. The merge projection and the output layer of the second
    /// stage start at zero, so the block starts as the identity map.
    pub(crate) fn new<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Self {
        let (l, d) = (cfg.seq_len, cfg.embed_dim);
        let mlp_first = cfg.first_stage == FirstStage::OneLayerMlp;
        let fnn_r = BranchNet { linear: LinearLayer::new(d, d, rng), gelu: mlp_first };
        let fnn_l = BranchNet {
            linear: LinearLayer::new(l, l, rng),
            gelu: mlp_first || cfg.left_activation == LeftActivation::Gelu,
        };
        let merge_proj = (cfg.merge_projection == MergeProjection::Linear).then(|| LinearLayer::zeros(d, d));
        let (norm_2, fnn_c) = match cfg.second_stage {
            SecondStage::Mlp => {
                let h = hidden_width(cfg.mlp_scale, d);
                let fc1 = LinearLayer::new(d, h, rng);
                (Some(LayerNorm::new(d)), Some(MlpLayer { fc1, fc2: LinearLayer::zeros(h, d) }))
            }
            SecondStage::None => (None, None),
        };
        Self {
            cfg: cfg.clone(),
            norm_r: LayerNorm::new(d),
            norm_l: LayerNorm::new(l),
            fnn_r,
            fnn_l,
            merge_proj,
            norm_2,
            fnn_c,
        }
    }

    /// Token-branch output `l` and channel-branch output `r`, both `[B, L, D]`.
    pub fn branches(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let r = self.fnn_r.forward(&self.norm_r.forward(x)?)?;
        let x_perm = x.permute_last_two()?;
        let l = self.fnn_l.forward(&self.norm_l.forward(&x_perm)?)?.permute_last_two()?;
        Ok((l, r))
    }

    pub fn forward(&self, x: &Tensor<T>, skip: Option<(&Tensor<T>, SkipPoint)>) -> Result<Tensor<T>> {
        check_extents(x, self.cfg.seq_len, self.cfg.embed_dim)?;
        let x = match skip {
            Some((s, SkipPoint::Input)) => x.add(s)?,
            _ => x.clone(),
        };
        let (l, r) = self.branches(&x)?;
        let merged = match self.cfg.merge_op {
            MergeOp::Sum => l.add(&r)?,
            MergeOp::Product => l.mul(&r)?,
            MergeOp::Glu => l.mul(&r.sigmoid()?)?,
        };
        let z = match &self.merge_proj {
            Some(p) => p.forward(&merged)?,
            None => merged,
        };
        let mut h = x.add(&z)?;
        if let Some((s, SkipPoint::Residual)) = skip {
            h = h.add(s)?;
        }
        match (&self.norm_2, &self.fnn_c) {
            (Some(norm), Some(mlp)) => h.add(&mlp.forward(&norm.forward(&h)?)?),
            _ => Ok(h),
        }
    }
}

impl<T: Element> Module<T> for LmlpBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm_r.collect_params(&join(prefix, "norm_r"), out);
        self.norm_l.collect_params(&join(prefix, "norm_l"), out);
        self.fnn_r.linear.collect_params(&join(prefix, "fnn_r"), out);
        self.fnn_l.linear.collect_params(&join(prefix, "fnn_l"), out);
        if let Some(p) = &self.merge_proj {
            p.collect_params(&join(prefix, "merge_proj"), out);
        }
        if let Some(n) = &self.norm_2 {
            n.collect_params(&join(prefix, "norm_2"), out);
        }
        if let Some(m) = &self.fnn_c {
            m.collect_params(&join(prefix, "fnn_c"), out);
        }
    }
}
