//! Discrete-time diffusion: noise schedule, noise-prediction training loss,
//! classifier-free guidance and a deterministic first-order sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{UlMlpModel, NULL_TOKEN};
use crate::error::{usage_err, Error, Result};
use crate::tensor::{cst, no_grad, Element, Tensor};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_SAMPLE_STEPS: usize = 50;
pub const DEFAULT_CAPTION_KEEP_PROB: f64 = 0.9;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 1.0;

/// Coefficients `beta_t`, `alpha_t = 1 - beta_t`, `alpha_bar_t = prod alpha_u`
/// and `sigma_t = sqrt(1 - alpha_bar_t)`, held in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `start` to `end` over `steps` timesteps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        let betas = (0..steps)
            .map(|t| if steps == 1 { start } else { start + (end - start) * t as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return usage_err(format!("timestep {t} outside [0, {})", self.len()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Probability of keeping the caption during training.
    pub caption_keep_prob: f64,
    pub null_id: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: DEFAULT_GUIDANCE_SCALE, caption_keep_prob: DEFAULT_CAPTION_KEEP_PROB, null_id: NULL_TOKEN }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.caption_keep_prob) {
            return Err(Error::Config(format!("caption_keep_prob {} outside [0, 1]", self.caption_keep_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub num_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: DEFAULT_SAMPLE_STEPS }
    }
}

impl SamplerConfig {
    /// `num_steps + 1` strictly decreasing timesteps, uniformly spaced from
    /// `T - 1` down to `0`.
    pub fn timesteps(&self, num_timesteps: usize) -> Result<Vec<usize>> {
        let n = self.num_steps;
        if n == 0 || n >= num_timesteps {
            return Err(Error::Config(format!(
                "sample steps must be in [1, {}), got {n}",
                num_timesteps
            )));
        }
        let top = (num_timesteps - 1) as f64;
        Ok((0..=n).map(|i| (top * (n - i) as f64 / n as f64).round() as usize).collect())
    }
}

/// Anything that predicts the noise in `x_t`.
pub trait EpsModel<T: Element> {
    fn predict_eps(&self, x_t: &Tensor<T>, text_ids: &[Vec<usize>], ts: &[usize]) -> Result<Tensor<T>>;
}

impl<T: Element> EpsModel<T> for UlMlpModel<T> {
    fn predict_eps(&self, x_t: &Tensor<T>, text_ids: &[Vec<usize>], ts: &[usize]) -> Result<Tensor<T>> {
        self.forward(x_t, text_ids, ts)
    }
}

impl<T: Element, F> EpsModel<T> for F
where
    F: Fn(&Tensor<T>, &[Vec<usize>], &[usize]) -> Result<Tensor<T>>,
{
    fn predict_eps(&self, x_t: &Tensor<T>, text_ids: &[Vec<usize>], ts: &[usize]) -> Result<Tensor<T>> {
        self(x_t, text_ids, ts)
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise<T: Element>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check(t)?;
    x0.mul_scalar(cst(sched.alpha_bar(t).sqrt()))?.add(&eps.mul_scalar(cst(sched.sigma(t)))?)
}

/// Per-example [`forward_noise`] over the leading extent of `x0`.
pub fn forward_noise_batch<T: Element>(
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() || x0.shape().first() != Some(&ts.len()) {
        return Err(Error::Shape(format!(
            "x0 {:?}, eps {:?} and {} timesteps disagree",
            x0.shape(),
            eps.shape(),
            ts.len()
        )));
    }
    for &t in ts {
        sched.check(t)?;
    }
    let per = x0.numel() / ts.len().max(1);
    let (xd, ed) = (x0.data(), eps.data());
    let data = (0..x0.numel())
        .map(|i| {
            let t = ts[i / per];
            cst::<T>(sched.alpha_bar(t).sqrt()) * xd[i] + cst::<T>(sched.sigma(t)) * ed[i]
        })
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Score estimate `-eps_hat / sigma_t`.
pub fn score_from_eps<T: Element>(eps_hat: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check(t)?;
    let sigma = sched.sigma(t);
    if sigma <= 0.0 {
        return usage_err(format!("sigma is zero at t = {t}; the score is undefined"));
    }
    eps_hat.mul_scalar(cst(-1.0 / sigma))
}

/// One draw of the noising process for a training batch.
#[derive(Debug, Clone)]
pub struct TrainingBatch<T: Element> {
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub ts: Vec<usize>,
    /// Captions after random replacement with null ids.
    pub text_ids: Vec<Vec<usize>>,
    pub dropped: Vec<bool>,
}

/// Draws per-example timesteps uniformly, Gaussian noise, and caption drops
/// with probability `1 - caption_keep_prob`.
pub fn draw_training_batch<T: Element, R: Rng + ?Sized>(
    x0: &Tensor<T>,
    text_ids: &[Vec<usize>],
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Result<TrainingBatch<T>> {
    let b = x0.shape().first().copied().unwrap_or(0);
    if b == 0 || x0.numel() == 0 {
        return usage_err("training batch is empty");
    }
    if text_ids.len() != b {
        return usage_err(format!("{} caption rows for a batch of {b}", text_ids.len()));
    }
    guidance.validate()?;
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.len())).collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let dropped: Vec<bool> = (0..b).map(|_| rng.random::<f64>() >= guidance.caption_keep_prob).collect();
    let text_ids = text_ids
        .iter()
        .zip(&dropped)
        .map(|(row, &drop)| if drop { vec![guidance.null_id; row.len()] } else { row.clone() })
        .collect();
    let x_t = forward_noise_batch(x0, &ts, &eps, sched)?;
    Ok(TrainingBatch { x_t, eps, ts, text_ids, dropped })
}

/// `mean((eps - eps_theta(x_t, text, t))^2)` on a drawn batch.
pub fn denoising_loss<T: Element, M: EpsModel<T> + ?Sized>(model: &M, batch: &TrainingBatch<T>) -> Result<Tensor<T>> {
    let pred = model.predict_eps(&batch.x_t, &batch.text_ids, &batch.ts)?;
    let diff = batch.eps.sub(&pred)?;
    diff.mul(&diff)?.mean()
}

pub fn training_loss<T: Element, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: &Tensor<T>,
    text_ids: &[Vec<usize>],
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let batch = draw_training_batch(x0, text_ids, sched, guidance, rng)?;
    denoising_loss(model, &batch)
}

/// Guided noise estimate `(1 + w) eps(x, y) - w eps(x, null)`.
pub fn cfg_eps<T: Element, M: EpsModel<T> + ?Sized>(
    model: &M,
    x_t: &Tensor<T>,
    text_ids: &[Vec<usize>],
    ts: &[usize],
    scale: f64,
    null_id: usize,
) -> Result<Tensor<T>> {
    let cond = model.predict_eps(x_t, text_ids, ts)?;
    let null: Vec<Vec<usize>> = text_ids.iter().map(|r| vec![null_id; r.len()]).collect();
    let uncond = model.predict_eps(x_t, &null, ts)?;
    combine_guidance(&cond, &uncond, scale)
}

pub fn combine_guidance<T: Element>(cond: &Tensor<T>, uncond: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    cond.mul_scalar(cst(1.0 + scale))?.sub(&uncond.mul_scalar(cst(scale))?)
}

/// Deterministic first-order update from `t` to `t_next < t`:
/// `x' = r x - (r sigma_t - sigma_next) eps` with `r = sqrt(alpha_bar_next / alpha_bar_t)`.
pub fn first_order_step<T: Element>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check(t)?;
    sched.check(t_next)?;
    let r = (sched.alpha_bar(t_next) / sched.alpha_bar(t)).sqrt();
    let c = r * sched.sigma(t) - sched.sigma(t_next);
    x.mul_scalar(cst(r))?.sub(&eps.mul_scalar(cst(c))?)
}

/// Generates one image per caption row starting from seeded Gaussian noise of
/// shape `[B, C, H, W]`.
pub fn sample<T: Element, M: EpsModel<T> + ?Sized>(
    model: &M,
    text_ids: &[Vec<usize>],
    image_shape: [usize; 3],
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    let ts = sampler.timesteps(sched.len())?;
    let b = text_ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&[b, image_shape[0], image_shape[1], image_shape[2]], &mut rng);
    no_grad(|| {
        for (step, pair) in ts.windows(2).enumerate() {
            let (t, t_next) = (pair[0], pair[1]);
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { step, t },
                other => other,
            };
            let eps = cfg_eps(model, &x, text_ids, &vec![t; b], guidance.scale, guidance.null_id).map_err(diverged)?;
            x = first_order_step(&x, &eps, t, t_next, sched).map_err(diverged)?;
        }
        Ok(x)
    })
}
