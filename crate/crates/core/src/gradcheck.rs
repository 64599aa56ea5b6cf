//! Central finite-difference verification of backward rules.
//!
//! The numeric side evaluates the forward function twice per element and
//! never touches the tape's backward path, so it is an independent oracle
//! for the analytic gradients.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Compare analytic gradients of `f` w.r.t. every tensor in `inputs` against
/// central finite differences. `f` must be deterministic (reseed any RNG it
/// uses on every call). Returns the maximum relative error observed, or a
/// description of the first violation.
pub fn finite_diff_check(
    inputs: &[&Tensor<f64>],
    f: impl Fn(&Tape<f64>) -> Result<Tensor<f64>>,
    h: f64,
    tol: f64,
) -> std::result::Result<f64, String> {
    for t in inputs {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape).map_err(|e| format!("forward failed: {e}"))?;
    if loss.numel() != 1 {
        return Err(format!("loss must be scalar, got shape {:?}", loss.shape()));
    }
    tape.backward(&loss).map_err(|e| format!("backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let orig = t.data()[ei];
            t.data_mut()[ei] = orig + h;
            let plus = f(&Tape::disabled())
                .map_err(|e| format!("forward(+h) failed: {e}"))?
                .item();
            t.data_mut()[ei] = orig - h;
            let minus = f(&Tape::disabled())
                .map_err(|e| format!("forward(-h) failed: {e}"))?
                .item();
            t.data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            if rel > tol {
                return Err(format!(
                    "gradient mismatch: input {ti} element {ei}: analytic {a:.9e} vs numeric {numeric:.9e} (rel err {rel:.3e} > {tol:.1e})"
                ));
            }
        }
    }
    Ok(max_rel)
}
