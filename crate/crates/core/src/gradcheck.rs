//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Only forward evaluations are used to build the numerical estimate, so the
//! comparison stays independent of every backward closure it checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{usage_err, Result};
use crate::tensor::{cst, no_grad, Element, Tensor};

/// Denominator floor of the relative error, so that gradients that are
/// zero analytically compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `name[index]` of the worst element.
    pub worst: String,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// with step `h` for every element of every tensor in `params`.
pub fn check<F>(params: &[(String, Tensor<f64>)], loss_fn: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    if loss.numel() != 1 {
        return usage_err("gradient check needs a scalar loss");
    }
    loss.backward()?;
    drop(loss);

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: String::new() };
    for (name, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.to_vec();
        for i in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                p.set_data(v)?;
                no_grad(|| loss_fn().map(|l| l.item()))
            };
            let plus = eval(h)?;
            let minus = eval(-h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]");
            }
        }
        p.set_data(base)?;
        p.zero_grad();
    }
    Ok(report)
}

/// Overwrites every tensor with Normal(0, std^2) draws from a seeded stream.
pub fn randomize<T: Element>(params: &[(String, Tensor<T>)], seed: u64, std: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).map_err(|e| crate::Error::Usage(e.to_string()))?;
    for (_, p) in params {
        let v = (0..p.numel()).map(|_| cst(dist.sample(&mut rng))).collect();
        p.set_data(v)?;
    }
    Ok(())
}

/// Sets every tensor to zero.
pub fn zero_all<T: Element>(params: &[(String, Tensor<T>)]) -> Result<()> {
    for (_, p) in params {
        p.set_data(vec![T::zero(); p.numel()])?;
    }
    Ok(())
}
