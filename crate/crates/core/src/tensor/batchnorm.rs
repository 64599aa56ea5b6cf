//! Batch normalization with train/eval modes and running statistics.

use std::cell::RefCell;

use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Running mean/variance buffers owned by a batch-norm layer. Updated in
/// train mode, read in eval mode; serialized alongside the weights.
pub struct RunningStats<T> {
    pub mean: RefCell<Vec<T>>,
    pub var: RefCell<Vec<T>>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: RefCell::new(vec![T::zero(); channels]),
            var: RefCell::new(vec![T::one(); channels]),
        }
    }
}

/// Normalize `[N,C]` or `[N,C,H,W]` per channel.
///
/// Train mode normalizes with batch statistics (biased variance) and folds
/// them into the running buffers with the given momentum; eval mode uses the
/// running buffers and is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    train: bool,
    momentum: f64,
    eps: f64,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::invalid_shape(format!(
            "batch_norm expects [N,C] or [N,C,H,W], got {shape:?}"
        )));
    }
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product::<usize>().max(1);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::invalid_shape(format!(
            "batch_norm: gamma/beta must be [{c}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let m = n * spatial;
    let eps_t = T::from_f64(eps);

    let (mean, invstd) = if train {
        let x = input.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let acc = &mut mean[ci];
                for &v in &x[base..base + spatial] {
                    *acc += v;
                }
            }
        }
        let inv_m = T::one() / T::from_usize(m);
        for v in mean.iter_mut() {
            *v *= inv_m;
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let mu = mean[ci];
                let acc = &mut var[ci];
                for &v in &x[base..base + spatial] {
                    let d = v - mu;
                    *acc += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v *= inv_m;
        }
        {
            let mom = T::from_f64(momentum);
            let keep = T::one() - mom;
            let mut rm = running.mean.borrow_mut();
            let mut rv = running.var.borrow_mut();
            for ci in 0..c {
                rm[ci] = keep * rm[ci] + mom * mean[ci];
                rv[ci] = keep * rv[ci] + mom * var[ci];
            }
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        (mean, invstd)
    } else {
        let rm = running.mean.borrow().clone();
        let invstd: Vec<T> = running
            .var
            .borrow()
            .iter()
            .map(|&v| T::one() / (v + eps_t).sqrt())
            .collect();
        (rm, invstd)
    };

    let data = {
        let x = input.data();
        let g = gamma.data();
        let b = beta.data();
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let (mu, is, ga, be) = (mean[ci], invstd[ci], g[ci], b[ci]);
                for (o, &v) in out[base..base + spatial].iter_mut().zip(&x[base..base + spatial]) {
                    *o = (v - mu) * is * ga + be;
                }
            }
        }
        out
    };
    let out = Tensor::new_unchecked(shape.to_vec(), data);

    if tape.wants(&[input, gamma, beta]) {
        let (x, ga, be, o) = (input.clone(), gamma.clone(), beta.clone(), out.clone());
        tape.push(
            &[input, gamma, beta],
            &out,
            Box::new(move || {
                let Some(g) = o.grad_ref() else { return };
                let xd = x.data();
                let gad = ga.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xd.len()];

                if train {
                    // Batch statistics participate in the gradient.
                    let inv_m = T::one() / T::from_usize(m);
                    let mut sum_dxhat = vec![T::zero(); c];
                    let mut sum_dxhat_xc = vec![T::zero(); c]; // sum dxhat * (x - mean)
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * spatial;
                            let (mu, is) = (mean[ci], invstd[ci]);
                            for s in 0..spatial {
                                let gv = g[base + s];
                                let xc = xd[base + s] - mu;
                                let dxhat = gv * gad[ci];
                                sum_dxhat[ci] += dxhat;
                                sum_dxhat_xc[ci] += dxhat * xc;
                                dgamma[ci] += gv * xc * is;
                                dbeta[ci] += gv;
                            }
                        }
                    }
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * spatial;
                            let (mu, is) = (mean[ci], invstd[ci]);
                            let k1 = sum_dxhat[ci] * inv_m;
                            let k2 = sum_dxhat_xc[ci] * is * is * inv_m;
                            for s in 0..spatial {
                                let xc = xd[base + s] - mu;
                                let dxhat = g[base + s] * gad[ci];
                                dx[base + s] = (dxhat - k1 - xc * k2) * is;
                            }
                        }
                    }
                } else {
                    // Running statistics are constants.
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * spatial;
                            let (mu, is) = (mean[ci], invstd[ci]);
                            for s in 0..spatial {
                                let gv = g[base + s];
                                dgamma[ci] += gv * (xd[base + s] - mu) * is;
                                dbeta[ci] += gv;
                                dx[base + s] = gv * gad[ci] * is;
                            }
                        }
                    }
                }
                drop(xd);
                drop(gad);
                if x.requires_grad() {
                    x.acc_grad_slice(&dx);
                }
                if ga.requires_grad() {
                    ga.acc_grad_slice(&dgamma);
                }
                if be.requires_grad() {
                    be.acc_grad_slice(&dbeta);
                }
            }),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn train_mode_standardizes() {
        let tape = Tape::<f64>::disabled();
        let mut rng = seeded(3);
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(&[2, 3, 4, 4], data).unwrap();
        let gamma = Tensor::ones(&[3]);
        let beta = Tensor::zeros(&[3]);
        let stats = RunningStats::new(3);
        let y = batch_norm(&x, &gamma, &beta, &stats, true, 0.1, 1e-5, &tape).unwrap();

        // Per-channel moments of the output: mean ~ 0, var ~ 1.
        let yd = y.to_vec();
        for ci in 0..3 {
            let mut vals = Vec::new();
            for ni in 0..2 {
                let base = (ni * 3 + ci) * 16;
                vals.extend_from_slice(&yd[base..base + 16]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "channel {ci} mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "channel {ci} var {v}");
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let tape = Tape::<f64>::disabled();
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![4.0, 8.0]).unwrap();
        let gamma = Tensor::ones(&[1]);
        let beta = Tensor::zeros(&[1]);
        let stats = RunningStats::new(1);
        *stats.mean.borrow_mut() = vec![6.0];
        *stats.var.borrow_mut() = vec![4.0];
        let y = batch_norm(&x, &gamma, &beta, &stats, false, 0.1, 0.0, &tape).unwrap();
        let yd = y.to_vec();
        assert!((yd[0] + 1.0).abs() < 1e-12);
        assert!((yd[1] - 1.0).abs() < 1e-12);
    }
}
