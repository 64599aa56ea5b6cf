//! The Wengert tape: operations recorded in execution (topological) order,
//! replayed in reverse to accumulate gradients.

use std::cell::RefCell;
use std::collections::HashSet;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Records the backward rules of a single forward pass.
///
/// A tape is scoped: create one per forward/backward pass and drop it
/// afterwards. Tape-free forwards (Monte Carlo inference, evaluation) use
/// [`Tape::disabled`], which records nothing.
pub struct Tape<T: Scalar> {
    enabled: bool,
    nodes: RefCell<Vec<Box<dyn Fn()>>>,
    outputs: RefCell<HashSet<u64>>,
    tracked: RefCell<Vec<Tensor<T>>>,
    tracked_ids: RefCell<HashSet<u64>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            enabled: true,
            nodes: RefCell::new(Vec::new()),
            outputs: RefCell::new(HashSet::new()),
            tracked: RefCell::new(Vec::new()),
            tracked_ids: RefCell::new(HashSet::new()),
        }
    }

    /// A tape that records nothing; forwards through it stay detached.
    pub fn disabled() -> Self {
        Tape {
            enabled: false,
            nodes: RefCell::new(Vec::new()),
            outputs: RefCell::new(HashSet::new()),
            tracked: RefCell::new(Vec::new()),
            tracked_ids: RefCell::new(HashSet::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when an op over `inputs` should record a backward rule.
    #[inline]
    pub(crate) fn wants(&self, inputs: &[&Tensor<T>]) -> bool {
        self.enabled && inputs.iter().any(|t| t.requires_grad())
    }

    /// Push a backward rule. The output is marked as requiring grad so that
    /// downstream ops keep recording; all involved tensors are tracked for
    /// [`zero_grads`](Self::zero_grads).
    pub(crate) fn push(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, back: Box<dyn Fn()>) {
        output.set_requires_grad(true);
        self.outputs.borrow_mut().insert(output.id());
        {
            let mut ids = self.tracked_ids.borrow_mut();
            let mut tracked = self.tracked.borrow_mut();
            for t in inputs.iter().copied().chain(std::iter::once(output)) {
                if ids.insert(t.id()) {
                    tracked.push(t.clone());
                }
            }
        }
        self.nodes.borrow_mut().push(back);
    }

    /// Reverse-mode pass from a scalar loss: seeds d(loss)/d(loss) = 1 and
    /// replays every recorded rule in reverse order.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::invalid_argument(format!(
                "backward expects a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        self.backward_from(loss, &[T::one()])
    }

    /// Reverse-mode pass seeded with an arbitrary cotangent on `output`.
    /// Used to extract per-logit input gradients without a loss head.
    pub fn backward_from(&self, output: &Tensor<T>, seed: &[T]) -> Result<()> {
        if !self.enabled || !self.outputs.borrow().contains(&output.id()) {
            return Err(Error::NoTape);
        }
        if seed.len() != output.numel() {
            return Err(Error::invalid_shape(format!(
                "backward seed has {} values, output has {}",
                seed.len(),
                output.numel()
            )));
        }
        output.acc_grad_slice(seed);
        for node in self.nodes.borrow().iter().rev() {
            node();
        }
        Ok(())
    }

    /// Clear gradients on every tensor this tape has touched. Needed between
    /// repeated `backward_from` calls on the same tape.
    pub fn zero_grads(&self) {
        for t in self.tracked.borrow().iter() {
            t.zero_grad();
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let y = x.mul(&x, &tape).unwrap();
        match tape.backward(&y) {
            Err(Error::InvalidArgument(_)) => {}
            other => panic!("expected invalid-argument, got {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_detached() {
        let tape = Tape::<f64>::new();
        let loose = Tensor::scalar(1.0); // never produced on the tape
        match tape.backward(&loose) {
            Err(Error::NoTape) => {}
            other => panic!("expected no-tape, got {other:?}"),
        }

        // Produced under a disabled tape: also detached.
        let off = Tape::<f64>::disabled();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let y = x.sum(&off);
        match off.backward(&y) {
            Err(Error::NoTape) => {}
            other => panic!("expected no-tape, got {other:?}"),
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        // Replaying backward twice from scratch gives bit-identical grads.
        let run = || {
            let tape = Tape::<f64>::new();
            let x = Tensor::from_vec(&[3], vec![0.3, -1.7, 2.9])
                .unwrap()
                .with_grad();
            let y = x.mul(&x, &tape).unwrap();
            let z = y.mul(&x, &tape).unwrap();
            let loss = z.sum(&tape);
            tape.backward(&loss).unwrap();
            x.grad().unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
