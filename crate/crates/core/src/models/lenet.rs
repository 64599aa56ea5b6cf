//! LeNet-5 and its peer-regularized variant: two 5x5 conv blocks with a PR
//! layer after each convolution and before max-pooling, then fc120-fc84-fc10.

use super::layers::{Conv, Linear, PrUnit};
use super::{ForwardCtx, PrStage};
use crate::error::{Error, Result};
use crate::pr::PRLayerConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{max_pool2d, Tensor};

pub struct LeNet<T: Scalar> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub fc3: Linear<T>,
    pub pr1: Option<PrUnit<T>>,
    pub pr2: Option<PrUnit<T>>,
}

impl<T: Scalar> LeNet<T> {
    pub fn new(
        in_channels: usize,
        input_hw: (usize, usize),
        num_classes: usize,
        with_pr: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (h, w) = input_hw;
        if h < 13 || w < 13 {
            return Err(Error::invalid_shape(format!(
                "LeNet-5 needs at least 13x13 input, got {h}x{w}"
            )));
        }
        let (h1, w1) = (h - 4, w - 4); // conv 5x5
        let (hp1, wp1) = (h1 / 2, w1 / 2); // pool 2
        let (h2, w2) = (hp1 - 4, wp1 - 4);
        let (hp2, wp2) = (h2 / 2, w2 / 2);
        let flat = 16 * hp2 * wp2;
        Ok(LeNet {
            conv1: Conv::new(in_channels, 6, 5, 1, 0, true, rng),
            conv2: Conv::new(6, 16, 5, 1, 0, true, rng),
            fc1: Linear::new(flat, 120, rng),
            fc2: Linear::new(120, 84, rng),
            fc3: Linear::new(84, num_classes, rng),
            pr1: with_pr.then(|| PrUnit::new(6, rng)),
            pr2: with_pr.then(|| PrUnit::new(16, rng)),
        })
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        pr_cfg: &PRLayerConfig,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Tensor<T>> {
        let tape = ctx.tape;
        let mut h = self.conv1.forward(x, tape)?.relu(tape);
        if let Some(pr) = &self.pr1 {
            h = ctx.apply_pr(PrStage::First, &h, &pr.attn, pr_cfg)?;
        }
        h = max_pool2d(&h, 2, 2, tape)?;
        h = self.conv2.forward(&h, tape)?.relu(tape);
        if let Some(pr) = &self.pr2 {
            h = ctx.apply_pr(PrStage::Second, &h, &pr.attn, pr_cfg)?;
        }
        h = max_pool2d(&h, 2, 2, tape)?;
        let flat: usize = h.shape()[1..].iter().product();
        let h = h.reshape(&[h.shape()[0], flat], tape)?;
        let h = self.fc1.forward(&h, tape)?.relu(tape);
        let h = self.fc2.forward(&h, tape)?.relu(tape);
        self.fc3.forward(&h, tape)
    }
}
