//! Comparison blocks sharing the `[B, L, D] -> [B, L, D]` interface.

use rand::Rng;

use super::config::BlockConfig;
use super::layers::{hidden_width, join, param, truncated_normal, LayerNorm, LinearLayer, MlpLayer, Module, NamedParams, INIT_STD};
use super::{check_extents, SkipPoint};
use crate::error::Result;
use crate::tensor::{attention_scope, cst, Element, Tensor};

fn with_input_skip<T: Element>(x: &Tensor<T>, skip: Option<(&Tensor<T>, SkipPoint)>) -> Result<Tensor<T>> {
    match skip {
        Some((s, SkipPoint::Input)) => x.add(s),
        _ => Ok(x.clone()),
    }
}

fn with_residual_skip<T: Element>(h: Tensor<T>, skip: Option<(&Tensor<T>, SkipPoint)>) -> Result<Tensor<T>> {
    match skip {
        Some((s, SkipPoint::Residual)) => h.add(s),
        _ => Ok(h),
    }
}

/// Number of attention heads for width `d`: `d / 64` (at least one), lowered
/// until it divides `d`.
pub fn attention_heads(d: usize) -> usize {
    let mut h = (d / 64).max(1);
    while d % h != 0 {
        h -= 1;
    }
    h
}

/// Pre-norm multi-head self-attention followed by a pre-norm MLP.
pub struct TransformerBlock<T: Element> {
    pub cfg: BlockConfig,
    pub heads: usize,
    pub norm_1: LayerNorm<T>,
    pub q: LinearLayer<T>,
    pub k: LinearLayer<T>,
    pub v: LinearLayer<T>,
    pub proj: LinearLayer<T>,
    pub norm_2: LayerNorm<T>,
    pub mlp: MlpLayer<T>,
}

impl<T: Element> TransformerBlock<T> {
    pub(crate) fn new<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            cfg: cfg.clone(),
            heads: attention_heads(d),
            norm_1: LayerNorm::new(d),
            q: LinearLayer::new(d, d, rng),
            k: LinearLayer::new(d, d, rng),
            v: LinearLayer::new(d, d, rng),
            proj: LinearLayer::new(d, d, rng),
            norm_2: LayerNorm::new(d),
            mlp: MlpLayer::new(d, hidden_width(cfg.mlp_scale, d), rng),
        }
    }

    /// Softmax attention weights `[B, H, L, L]` for the normalized input.
    pub fn attention_weights(&self, xn: &Tensor<T>) -> Result<Tensor<T>> {
        let (q, k, _) = self.split_heads(xn)?;
        self.scores(&q, &k)
    }

    fn split_heads(&self, xn: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (b, l, d) = (xn.shape()[0], xn.shape()[1], xn.shape()[2]);
        let h = self.heads;
        let split = |t: Tensor<T>| t.reshape(&[b, l, h, d / h])?.permute(&[0, 2, 1, 3]);
        Ok((split(self.q.forward(xn)?)?, split(self.k.forward(xn)?)?, split(self.v.forward(xn)?)?))
    }

    fn scores(&self, q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
        let dh = q.shape()[3];
        attention_scope(|| q.matmul(&k.permute_last_two()?))?
            .mul_scalar(cst(1.0 / (dh as f64).sqrt()))?
            .softmax_last()
    }

    pub fn forward(&self, x: &Tensor<T>, skip: Option<(&Tensor<T>, SkipPoint)>) -> Result<Tensor<T>> {
        check_extents(x, self.cfg.seq_len, self.cfg.embed_dim)?;
        let x = with_input_skip(x, skip)?;
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let xn = self.norm_1.forward(&x)?;
        let (q, k, v) = self.split_heads(&xn)?;
        let attn = self.scores(&q, &k)?;
        let ctx = attention_scope(|| attn.matmul(&v))?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, d])?;
        let h = with_residual_skip(x.add(&self.proj.forward(&ctx)?)?, skip)?;
        h.add(&self.mlp.forward(&self.norm_2.forward(&h)?)?)
    }
}

impl<T: Element> Module<T> for TransformerBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm_1.collect_params(&join(prefix, "norm_1"), out);
        self.q.collect_params(&join(prefix, "q"), out);
        self.k.collect_params(&join(prefix, "k"), out);
        self.v.collect_params(&join(prefix, "v"), out);
        self.proj.collect_params(&join(prefix, "proj"), out);
        self.norm_2.collect_params(&join(prefix, "norm_2"), out);
        self.mlp.collect_params(&join(prefix, "mlp"), out);
    }
}

/// Token-mixing MLP over `L` (hidden `L`) then channel-mixing MLP over `D`
/// (hidden `s * D`), each pre-normed with a residual.
pub struct MixerBlock<T: Element> {
    pub cfg: BlockConfig,
    pub norm_1: LayerNorm<T>,
    pub token_mlp: MlpLayer<T>,
    pub norm_2: LayerNorm<T>,
    pub channel_mlp: MlpLayer<T>,
}

impl<T: Element> MixerBlock<T> {
    pub(crate) fn new<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Self {
        let (l, d) = (cfg.seq_len, cfg.embed_dim);
        Self {
            cfg: cfg.clone(),
            norm_1: LayerNorm::new(d),
            token_mlp: MlpLayer::new(l, l, rng),
            norm_2: LayerNorm::new(d),
            channel_mlp: MlpLayer::new(d, hidden_width(cfg.mlp_scale, d), rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, skip: Option<(&Tensor<T>, SkipPoint)>) -> Result<Tensor<T>> {
        check_extents(x, self.cfg.seq_len, self.cfg.embed_dim)?;
        let x = with_input_skip(x, skip)?;
        let t = self.norm_1.forward(&x)?.permute_last_two()?;
        let t = self.token_mlp.forward(&t)?.permute_last_two()?;
        let h = with_residual_skip(x.add(&t)?, skip)?;
        h.add(&self.channel_mlp.forward(&self.norm_2.forward(&h)?)?)
    }
}

impl<T: Element> Module<T> for MixerBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm_1.collect_params(&join(prefix, "norm_1"), out);
        self.token_mlp.collect_params(&join(prefix, "token_mlp"), out);
        self.norm_2.collect_params(&join(prefix, "norm_2"), out);
        self.channel_mlp.collect_params(&join(prefix, "channel_mlp"), out);
    }
}

/// Channel projection to `h = s * D` (rounded to even), GELU, spatial gating
/// unit over `L` on one half, gated product, projection back to `D`, residual.
pub struct GmlpBlock<T: Element> {
    pub cfg: BlockConfig,
    pub norm: LayerNorm<T>,
    pub proj_in: LinearLayer<T>,
    pub gate_norm: LayerNorm<T>,
    /// Spatial linear map over the token axis; bias starts at one so the
    /// fresh gate passes its input through.
    pub spatial: LinearLayer<T>,
    pub proj_out: LinearLayer<T>,
}

impl<T: Element> GmlpBlock<T> {
    pub(crate) fn new<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Self {
        let (l, d) = (cfg.seq_len, cfg.embed_dim);
        let hidden = (hidden_width(cfg.mlp_scale, d) / 2).max(1) * 2;
        let spatial = LinearLayer {
            weight: param(&[l, l], truncated_normal(l * l, INIT_STD, rng)),
            bias: param(&[l], vec![T::one(); l]),
        };
        Self {
            cfg: cfg.clone(),
            norm: LayerNorm::new(d),
            proj_in: LinearLayer::new(d, hidden, rng),
            gate_norm: LayerNorm::new(hidden / 2),
            spatial,
            proj_out: LinearLayer::new(hidden / 2, d, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, skip: Option<(&Tensor<T>, SkipPoint)>) -> Result<Tensor<T>> {
        check_extents(x, self.cfg.seq_len, self.cfg.embed_dim)?;
        let x = with_input_skip(x, skip)?;
        let u = self.proj_in.forward(&self.norm.forward(&x)?)?.gelu()?;
        let half = u.shape()[2] / 2;
        let (a, g) = (u.narrow(2, 0, half)?, u.narrow(2, half, half)?);
        let g = self.gate_norm.forward(&g)?.permute_last_two()?;
        let g = self.spatial.forward(&g)?.permute_last_two()?;
        let h = x.add(&self.proj_out.forward(&a.mul(&g)?)?)?;
        with_residual_skip(h, skip)
    }
}

impl<T: Element> Module<T> for GmlpBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm.collect_params(&join(prefix, "norm"), out);
        self.proj_in.collect_params(&join(prefix, "proj_in"), out);
        self.gate_norm.collect_params(&join(prefix, "gate_norm"), out);
        self.spatial.collect_params(&join(prefix, "spatial"), out);
        self.proj_out.collect_params(&join(prefix, "proj_out"), out);
    }
}
