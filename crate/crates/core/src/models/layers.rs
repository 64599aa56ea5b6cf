//! Parameterized layers shared by the architectures.

use rand::Rng as _;

use crate::error::Result;
use crate::pr::AttentionParams;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{batch_norm, conv2d, RunningStats, Tape, Tensor};

/// He-uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).unwrap().with_grad()
}

pub struct Conv<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv {
            weight: kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Tensor::zeros(&[out_ch]).with_grad()),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.weight, self.stride, self.padding, tape)?;
        match &self.bias {
            Some(b) => y.add_bias(b, tape),
            None => Ok(y),
        }
    }
}

pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>, // [in, out]
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: kaiming_uniform(&[input, output], input, rng),
            bias: Tensor::zeros(&[output]).with_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight, tape)?.add_bias(&self.bias, tape)
    }
}

pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool, tape: &Tape<T>) -> Result<Tensor<T>> {
        batch_norm(x, &self.gamma, &self.beta, &self.stats, train, 0.1, 1e-5, tape)
    }
}

pub struct PrUnit<T: Scalar> {
    pub attn: AttentionParams<T>,
}

impl<T: Scalar> PrUnit<T> {
    pub fn new(d: usize, rng: &mut Rng) -> Self {
        PrUnit {
            attn: AttentionParams::init(d, rng),
        }
    }
}
