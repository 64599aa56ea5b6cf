//! Cross-entropy over logits, the training cost for every model here.

use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean cross-entropy of `[N, C]` logits against integer labels, computed
/// through a fused log-softmax for numerical stability.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::invalid_shape(format!(
            "cross_entropy expects [N, C] logits, got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::invalid_argument(format!(
            "cross_entropy: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid_argument(format!(
            "label {bad} out of range 0..{c}"
        )));
    }

    let mut probs = vec![T::zero(); n * c];
    let mut total = T::zero();
    {
        let z = logits.data();
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= sum;
            }
            // loss_i = logsumexp - z_y
            total += max + sum.ln() - row[labels[i]];
        }
    }
    let inv_n = T::one() / T::from_usize(n);
    let out = Tensor::scalar(total * inv_n);

    if tape.wants(&[logits]) {
        let (z, o) = (logits.clone(), out.clone());
        let labels = labels.to_vec();
        tape.push(
            &[logits],
            &out,
            Box::new(move || {
                let Some(g) = o.grad_ref() else { return };
                let gv = g[0] * inv_n;
                let mut contrib = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    contrib[i * c + y] -= T::one();
                }
                for v in &mut contrib {
                    *v *= gv;
                }
                z.acc_grad_slice(&contrib);
            }),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let tape = Tape::<f64>::disabled();
        let z = Tensor::<f64>::zeros(&[2, 4]);
        let loss = cross_entropy(&z, &[0, 3], &tape).unwrap();
        assert!((loss.item() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_probs_minus_onehot() {
        let tape = Tape::<f64>::new();
        let z = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, -1.0])
            .unwrap()
            .with_grad();
        let loss = cross_entropy(&z, &[1], &tape).unwrap();
        tape.backward(&loss).unwrap();
        let g = z.grad().unwrap();
        let exp: Vec<f64> = vec![1.0f64.exp(), 1.0, (-1.0f64).exp()];
        let sum: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|e| e / sum).collect();
        assert!((g[0] - probs[0]).abs() < 1e-12);
        assert!((g[1] - (probs[1] - 1.0)).abs() < 1e-12);
        assert!((g[2] - probs[2]).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels() {
        let tape = Tape::<f64>::disabled();
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            cross_entropy(&z, &[0, 5], &tape),
            Err(Error::InvalidArgument(_))
        ));
    }
}
