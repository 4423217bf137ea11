use std::ops::Range;

use crate::error::{shape_err, usage_err, Result};
use crate::tensor::{cst, Element, Tensor};

/// Token id reserved for the empty caption.
pub const NULL_TOKEN: usize = 0;

/// `[B, L, D]` tokens laid out as `[time | text | image]`.
#[derive(Debug, Clone)]
pub struct TokenSequence<T: Element> {
    pub tokens: Tensor<T>,
    pub time: Range<usize>,
    pub text: Range<usize>,
    pub image: Range<usize>,
}

/// Index ranges of the three token groups for `text_tokens` captions tokens
/// and `image_tokens` patches.
pub fn token_ranges(text_tokens: usize, image_tokens: usize) -> (Range<usize>, Range<usize>, Range<usize>) {
    (0..1, 1..1 + text_tokens, 1 + text_tokens..1 + text_tokens + image_tokens)
}

/// Sinusoidal encoding of a timestep: `sin(t w_k)` in the first half,
/// `cos(t w_k)` in the second, with `w_k = 10000^(-2k/D)`. Odd `D` leaves a
/// trailing zero.
pub fn timestep_encoding<T: Element>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let freq = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let arg = t as f64 * freq;
        out[k] = cst(arg.sin());
        out[half + k] = cst(arg.cos());
    }
    out
}

/// `[B, D]` encodings for a batch of timesteps, each checked against `num_timesteps`.
pub fn timestep_batch<T: Element>(ts: &[usize], dim: usize, num_timesteps: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = ts.iter().find(|&&t| t >= num_timesteps) {
        return usage_err(format!("timestep {bad} outside [0, {num_timesteps})"));
    }
    let data = ts.iter().flat_map(|&t| timestep_encoding::<T>(t, dim)).collect();
    Tensor::from_vec(&[ts.len(), dim], data)
}

/// Concatenates `[time | text | image]` tokens. `time_tokens` is `[B, D]`,
/// `text_table` is the `[V, D]` embedding table, `text_ids` holds one id row
/// per example and `image_tokens` is `[B, N, D]`.
pub fn assemble_tokens<T: Element>(
    time_tokens: &Tensor<T>,
    text_table: &Tensor<T>,
    text_ids: &[Vec<usize>],
    image_tokens: &Tensor<T>,
) -> Result<TokenSequence<T>> {
    let &[b, n, d] = image_tokens.shape() else {
        return shape_err(format!("image tokens must be [B, N, D], got {:?}", image_tokens.shape()));
    };
    if time_tokens.shape() != [b, d] {
        return shape_err(format!("time tokens {:?} do not match [{b}, {d}]", time_tokens.shape()));
    }
    if text_ids.len() != b {
        return usage_err(format!("{} caption rows for a batch of {b}", text_ids.len()));
    }
    let t_len = text_ids.first().map_or(0, Vec::len);
    if text_ids.iter().any(|r| r.len() != t_len) {
        return usage_err("caption rows differ in length");
    }
    let vocab = text_table.shape()[0];
    if let Some(&bad) = text_ids.iter().flatten().find(|&&id| id >= vocab) {
        return usage_err(format!("unknown token id {bad} (vocabulary has {vocab} ids)"));
    }
    let flat: Vec<usize> = text_ids.iter().flatten().copied().collect();
    let text = text_table.gather_rows(&flat)?.reshape(&[b, t_len, d])?;
    let time = time_tokens.reshape(&[b, 1, d])?;
    let tokens = Tensor::concat(&[&time, &text, image_tokens], 1)?;
    let (time, text, image) = token_ranges(t_len, n);
    Ok(TokenSequence { tokens, time, text, image })
}
