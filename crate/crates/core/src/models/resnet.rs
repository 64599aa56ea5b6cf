//! CIFAR-style residual networks (depth 6n+2, three stages) and their
//! peer-regularized variants with PR layers at the last change of
//! dimensionality and before the classifier.

use super::layers::{BatchNorm, Conv, Linear, PrUnit};
use super::{ForwardCtx, PrStage};
use crate::error::{Error, Result};
use crate::pr::PRLayerConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{global_avg_pool, Tape, Tensor};

pub struct Block<T: Scalar> {
    pub conv1: Conv<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv<T>,
    pub bn2: BatchNorm<T>,
    /// Projection shortcut (1x1 conv + BN) where shape changes.
    pub proj: Option<(Conv<T>, BatchNorm<T>)>,
}

impl<T: Scalar> Block<T> {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        let proj = (in_ch != out_ch || stride != 1).then(|| {
            (
                Conv::new(in_ch, out_ch, 1, stride, 0, false, rng),
                BatchNorm::new(out_ch),
            )
        });
        Block {
            conv1: Conv::new(in_ch, out_ch, 3, stride, 1, false, rng),
            bn1: BatchNorm::new(out_ch),
            conv2: Conv::new(out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(out_ch),
            proj,
        }
    }

    fn forward(&self, x: &Tensor<T>, train: bool, tape: &Tape<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x, tape)?;
        let h = self.bn1.forward(&h, train, tape)?.relu(tape);
        let h = self.conv2.forward(&h, tape)?;
        let h = self.bn2.forward(&h, train, tape)?;
        let shortcut = match &self.proj {
            Some((conv, bn)) => {
                let s = conv.forward(x, tape)?;
                bn.forward(&s, train, tape)?
            }
            None => x.clone(),
        };
        Ok(h.add(&shortcut, tape)?.relu(tape))
    }
}

pub struct ResNet<T: Scalar> {
    pub stem: Conv<T>,
    pub stem_bn: BatchNorm<T>,
    pub stages: Vec<Vec<Block<T>>>,
    pub fc: Linear<T>,
    pub pr1: Option<PrUnit<T>>,
    pub pr2: Option<PrUnit<T>>,
}

/// Blocks per stage for a CIFAR ResNet of the given depth (depth = 6n + 2).
pub fn blocks_per_stage(depth: usize) -> Result<usize> {
    if depth < 8 || (depth - 2) % 6 != 0 {
        return Err(Error::UnknownArchitecture(format!(
            "resnet depth {depth} is not 6n+2"
        )));
    }
    Ok((depth - 2) / 6)
}

impl<T: Scalar> ResNet<T> {
    pub fn new(
        depth: usize,
        in_channels: usize,
        num_classes: usize,
        widths: (usize, usize, usize, usize),
        with_pr: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = blocks_per_stage(depth)?;
        let (w0, w1, w2, w3) = widths;
        let mut stages = Vec::with_capacity(3);
        let mut in_ch = w0;
        for (si, &width) in [w1, w2, w3].iter().enumerate() {
            let mut blocks = Vec::with_capacity(n);
            for bi in 0..n {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(Block::new(in_ch, width, stride, rng));
                in_ch = width;
            }
            stages.push(blocks);
        }
        Ok(ResNet {
            stem: Conv::new(in_channels, w0, 3, 1, 1, false, rng),
            stem_bn: BatchNorm::new(w0),
            stages,
            fc: Linear::new(w3, num_classes, rng),
            pr1: with_pr.then(|| PrUnit::new(w3, rng)),
            pr2: with_pr.then(|| PrUnit::new(w3, rng)),
        })
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        pr_cfg: &PRLayerConfig,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Tensor<T>> {
        let tape = ctx.tape;
        let train = ctx.train;
        let mut h = self.stem.forward(x, tape)?;
        h = self.stem_bn.forward(&h, train, tape)?.relu(tape);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                h = block.forward(&h, train, tape)?;
                // First PR layer right after the last spatial downsampling.
                if si == 2 && bi == 0 {
                    if let Some(pr) = &self.pr1 {
                        h = ctx.apply_pr(PrStage::First, &h, &pr.attn, pr_cfg)?;
                    }
                }
            }
        }
        // Second PR layer before the classifier.
        if let Some(pr) = &self.pr2 {
            h = ctx.apply_pr(PrStage::Second, &h, &pr.attn, pr_cfg)?;
        }
        let pooled = global_avg_pool(&h, tape)?;
        self.fc.forward(&pooled, tape)
    }
}
