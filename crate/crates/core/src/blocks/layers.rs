use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::tensor::{cst, Element, Tensor};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Named trainable tensors, in a stable order.
pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

/// Anything holding trainable tensors.
pub trait Module<T: Element> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>);

    fn parameters(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal(0, std^2) truncated at two standard deviations.
pub fn truncated_normal<T: Element, R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break cst(z * std);
            }
        })
        .collect()
}

pub(crate) fn param<T: Element>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::parameter(shape, data).expect("initializer produces matching finite data")
}

/// `y = x W^T + b` over the last extent.
pub struct LinearLayer<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> LinearLayer<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: param(&[out_dim, in_dim], truncated_normal(out_dim * in_dim, INIT_STD, rng)),
            bias: param(&[out_dim], vec![T::zero(); out_dim]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: param(&[out_dim, in_dim], vec![T::zero(); out_dim * in_dim]),
            bias: param(&[out_dim], vec![T::zero(); out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().last() != Some(&self.in_dim()) {
            return shape_err(format!(
                "linear layer expects last extent {}, got {:?}",
                self.in_dim(),
                x.shape()
            ));
        }
        x.matmul(&self.weight.permute_last_two()?)?.add_broadcast(&self.bias)
    }
}

impl<T: Element> Module<T> for LinearLayer<T> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

pub struct LayerNorm<T: Element> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: T,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: param(&[dim], vec![T::one(); dim]),
            bias: param(&[dim], vec![T::zero(); dim]),
            eps: cst(LAYER_NORM_EPS),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((join(prefix, "gain"), self.gain.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// Hidden width `round(scale * dim)`, at least one.
pub fn hidden_width(scale: f64, dim: usize) -> usize {
    ((scale * dim as f64).round() as usize).max(1)
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))` with hidden width `round(s * D)`.
pub struct MlpLayer<T: Element> {
    pub fc1: LinearLayer<T>,
    pub fc2: LinearLayer<T>,
}

impl<T: Element> MlpLayer<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self { fc1: LinearLayer::new(dim, hidden, rng), fc2: LinearLayer::new(hidden, dim, rng) }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_dim()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

impl<T: Element> Module<T> for MlpLayer<T> {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_preserves_leading_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = LinearLayer::<f64>::new(4, 3, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 5, 4], &mut rng);
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 3]);
        assert!(lin.forward(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn truncated_normal_stays_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = truncated_normal(10_000, INIT_STD, &mut rng);
        assert!(v.iter().all(|x| x.abs() <= 2.0 * INIT_STD));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn hidden_width_rounds() {
        assert_eq!(hidden_width(5.2, 512), 2662);
        assert_eq!(hidden_width(4.0, 64), 256);
        assert_eq!(hidden_width(0.01, 8), 1);
    }
}
