//! Elementwise, linear-algebra and shape operations with backward rules.

use super::{same_shape, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use rand::Rng as _;

/// Row-major matrix multiply `out[m,n] = a[m,k] * b[k,n]`, accumulating in
/// i-k-j order so every output element has a fixed summation order.
pub(crate) fn matmul_slices<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a^T[m,k] * b[k,n]` where `a` is stored as `[k,m]`.
pub(crate) fn matmul_at_b<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b^T[k,n]` where `b` is stored as `[n,k]`.
pub(crate) fn matmul_a_bt<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        same_shape(self, rhs, "add")?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self, rhs]) {
            let (a, b, o) = (self.clone(), rhs.clone(), out.clone());
            tape.push(
                &[self, rhs],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    if a.requires_grad() {
                        a.acc_grad_slice(&g);
                    }
                    if b.requires_grad() {
                        b.acc_grad_slice(&g);
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &Tensor<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        same_shape(self, rhs, "sub")?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self, rhs]) {
            let (a, b, o) = (self.clone(), rhs.clone(), out.clone());
            tape.push(
                &[self, rhs],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    if a.requires_grad() {
                        a.acc_grad_slice(&g);
                    }
                    if b.requires_grad() {
                        let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                        b.acc_grad_slice(&neg);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        same_shape(self, rhs, "mul")?;
        let data = {
            let (a, b) = (self.data(), rhs.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self, rhs]) {
            let (a, b, o) = (self.clone(), rhs.clone(), out.clone());
            tape.push(
                &[self, rhs],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    if a.requires_grad() {
                        let contrib: Vec<T> =
                            g.iter().zip(b.data().iter()).map(|(&gv, &bv)| gv * bv).collect();
                        a.acc_grad_slice(&contrib);
                    }
                    if b.requires_grad() {
                        let contrib: Vec<T> =
                            g.iter().zip(a.data().iter()).map(|(&gv, &av)| gv * av).collect();
                        b.acc_grad_slice(&contrib);
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn scale(&self, s: T, tape: &Tape<T>) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * s).collect();
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let contrib: Vec<T> = g.iter().map(|&gv| gv * s).collect();
                    a.acc_grad_slice(&contrib);
                }),
            );
        }
        out
    }

    pub fn add_scalar(&self, s: T, tape: &Tape<T>) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + s).collect();
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    a.acc_grad_slice(&g);
                }),
            );
        }
        out
    }

    /// Broadcast-add a `[C]` bias along axis 1 of `[N, C, ...]`.
    pub fn add_bias(&self, bias: &Tensor<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        if self.shape().len() < 2 {
            return Err(Error::invalid_shape(
                "add_bias needs at least 2 dimensions",
            ));
        }
        let c = self.shape()[1];
        if bias.shape() != [c] {
            return Err(Error::invalid_shape(format!(
                "bias shape {:?} does not match channel dim {}",
                bias.shape(),
                c
            )));
        }
        let inner: usize = self.shape()[2..].iter().product();
        let data = {
            let (x, b) = (self.data(), bias.data());
            let mut out = x.clone();
            for chunk in out.chunks_mut(c * inner) {
                for (ci, bv) in b.iter().enumerate() {
                    for v in chunk[ci * inner..(ci + 1) * inner].iter_mut() {
                        *v += *bv;
                    }
                }
            }
            out
        };
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self, bias]) {
            let (x, b, o) = (self.clone(), bias.clone(), out.clone());
            tape.push(
                &[self, bias],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    if x.requires_grad() {
                        x.acc_grad_slice(&g);
                    }
                    if b.requires_grad() {
                        let mut db = vec![T::zero(); c];
                        for chunk in g.chunks(c * inner) {
                            for (ci, acc) in db.iter_mut().enumerate() {
                                for v in &chunk[ci * inner..(ci + 1) * inner] {
                                    *acc += *v;
                                }
                            }
                        }
                        b.acc_grad_slice(&db);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Per-channel affine `out[n,c,..] = x[n,c,..] * scale[c] + shift[c]`
    /// with constant coefficients (used for dataset normalization inside a
    /// model). Gradients flow through `x` only.
    pub fn channel_affine(&self, scale: &[T], shift: &[T], tape: &Tape<T>) -> Result<Tensor<T>> {
        if self.shape().len() < 2 {
            return Err(Error::invalid_shape(
                "channel_affine needs at least 2 dimensions",
            ));
        }
        let c = self.shape()[1];
        if scale.len() != c || shift.len() != c {
            return Err(Error::invalid_shape(format!(
                "channel_affine: {} scales / {} shifts for {} channels",
                scale.len(),
                shift.len(),
                c
            )));
        }
        let inner: usize = self.shape()[2..].iter().product();
        let data = {
            let x = self.data();
            let mut out = x.clone();
            for chunk in out.chunks_mut(c * inner) {
                for ci in 0..c {
                    let (s, b) = (scale[ci], shift[ci]);
                    for v in chunk[ci * inner..(ci + 1) * inner].iter_mut() {
                        *v = *v * s + b;
                    }
                }
            }
            out
        };
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self]) {
            let (x, o) = (self.clone(), out.clone());
            let scale = scale.to_vec();
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let mut contrib = vec![T::zero(); g.len()];
                    for (cchunk, gchunk) in
                        contrib.chunks_mut(c * inner).zip(g.chunks(c * inner))
                    {
                        for ci in 0..c {
                            let s = scale[ci];
                            for (cv, &gv) in cchunk[ci * inner..(ci + 1) * inner]
                                .iter_mut()
                                .zip(&gchunk[ci * inner..(ci + 1) * inner])
                            {
                                *cv = gv * s;
                            }
                        }
                    }
                    x.acc_grad_slice(&contrib);
                }),
            );
        }
        Ok(out)
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        let (s, r) = (self.shape(), rhs.shape());
        if s.len() != 2 || r.len() != 2 || s[1] != r[0] {
            return Err(Error::invalid_shape(format!(
                "matmul: incompatible shapes {s:?} x {r:?}"
            )));
        }
        let (m, k, n) = (s[0], s[1], r[1]);
        let mut data = vec![T::zero(); m * n];
        matmul_slices(&self.data(), &rhs.data(), m, k, n, &mut data);
        let out = Tensor::new_unchecked(vec![m, n], data);
        if tape.wants(&[self, rhs]) {
            let (a, b, o) = (self.clone(), rhs.clone(), out.clone());
            tape.push(
                &[self, rhs],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    if a.requires_grad() {
                        // dA = g * B^T
                        let mut da = vec![T::zero(); m * k];
                        matmul_a_bt(&g, &b.data(), m, n, k, &mut da);
                        a.acc_grad_slice(&da);
                    }
                    if b.requires_grad() {
                        // dB = A^T * g
                        let mut db = vec![T::zero(); k * n];
                        matmul_at_b(&a.data(), &g, k, m, n, &mut db);
                        b.acc_grad_slice(&db);
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn relu(&self, tape: &Tape<T>) -> Tensor<T> {
        self.leaky_relu(T::zero(), tape)
    }

    pub fn leaky_relu(&self, slope: T, tape: &Tape<T>) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * slope })
            .collect();
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let contrib: Vec<T> = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * slope })
                        .collect();
                    a.acc_grad_slice(&contrib);
                }),
            );
        }
        out
    }

    /// Numerically stable softmax along `axis`; output sums to 1 along the
    /// axis and is strictly positive.
    pub fn softmax(&self, axis: usize, tape: &Tape<T>) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid_argument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(data[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[base + j * inner] /= sum;
                }
            }
        }
        let out = Tensor::new_unchecked(shape.to_vec(), data);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let s = o.data();
                    let mut contrib = vec![T::zero(); s.len()];
                    for ob in 0..outer {
                        for i in 0..inner {
                            let base = ob * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += g[idx] * s[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                contrib[idx] = s[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    drop(s);
                    a.acc_grad_slice(&contrib);
                }),
            );
        }
        Ok(out)
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&self, tape: &Tape<T>) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let out = Tensor::scalar(total);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let gv = g[0];
                    a.acc_grad_with(|buf| {
                        for v in buf.iter_mut() {
                            *v += gv;
                        }
                    });
                }),
            );
        }
        out
    }

    pub fn mean(&self, tape: &Tape<T>) -> Tensor<T> {
        let n = T::from_usize(self.numel());
        self.sum(tape).scale(T::one() / n, tape)
    }

    /// Euclidean norm of the flattened tensor (scalar output).
    pub fn l2_norm(&self, tape: &Tape<T>) -> Tensor<T> {
        let sq: T = self.data().iter().map(|&x| x * x).sum();
        let norm = sq.sqrt();
        let out = Tensor::scalar(norm);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let gv = g[0];
                    let n = o.data()[0];
                    if n == T::zero() {
                        return;
                    }
                    let contrib: Vec<T> = a.data().iter().map(|&x| gv * x / n).collect();
                    a.acc_grad_slice(&contrib);
                }),
            );
        }
        out
    }

    /// Elementwise median(lo, x, hi): the L-infinity ball projection used by
    /// the attacks. Gradient passes through wherever `lo <= x <= hi`.
    pub fn linf_clip(&self, lo: &Tensor<T>, hi: &Tensor<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
        same_shape(self, lo, "linf_clip")?;
        same_shape(self, hi, "linf_clip")?;
        let data = {
            let (x, l, h) = (self.data(), lo.data(), hi.data());
            x.iter()
                .zip(l.iter().zip(h.iter()))
                .map(|(&xv, (&lv, &hv))| xv.max(lv).min(hv))
                .collect()
        };
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self, lo, hi]) {
            let (x, l, h, o) = (self.clone(), lo.clone(), hi.clone(), out.clone());
            tape.push(
                &[self, lo, hi],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let (xd, ld, hd) = (x.data(), l.data(), h.data());
                    if x.requires_grad() {
                        let contrib: Vec<T> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| {
                                if xd[i] >= ld[i] && xd[i] <= hd[i] {
                                    gv
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        x.acc_grad_slice(&contrib);
                    }
                    if l.requires_grad() {
                        let contrib: Vec<T> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| if xd[i] < ld[i] { gv } else { T::zero() })
                            .collect();
                        l.acc_grad_slice(&contrib);
                    }
                    if h.requires_grad() {
                        let contrib: Vec<T> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| if xd[i] > hd[i] { gv } else { T::zero() })
                            .collect();
                        h.acc_grad_slice(&contrib);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Clamp to constant bounds.
    pub fn clamp_scalar(&self, lo: T, hi: T, tape: &Tape<T>) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.max(lo).min(hi)).collect();
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let contrib: Vec<T> = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { T::zero() })
                        .collect();
                    a.acc_grad_slice(&contrib);
                }),
            );
        }
        out
    }

    pub fn reshape(&self, new_shape: &[usize], tape: &Tape<T>) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::invalid_shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                new_shape
            )));
        }
        let out = Tensor::new_unchecked(new_shape.to_vec(), self.to_vec());
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    a.acc_grad_slice(&g);
                }),
            );
        }
        Ok(out)
    }

    /// Concatenate along `axis`. All other dimensions must match.
    pub fn concat(tensors: &[&Tensor<T>], axis: usize, tape: &Tape<T>) -> Result<Tensor<T>> {
        if tensors.is_empty() {
            return Err(Error::invalid_argument("concat of zero tensors"));
        }
        let first = tensors[0].shape();
        if axis >= first.len() {
            return Err(Error::invalid_argument(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for t in tensors {
            let s = t.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::invalid_shape(format!(
                    "concat: incompatible shapes {first:?} vs {s:?} on axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut shape = first.to_vec();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();

        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for t in tensors {
            let seg = t.shape()[axis];
            let td = t.data();
            for o in 0..outer {
                let src = &td[o * seg * inner..(o + 1) * seg * inner];
                let dst_base = (o * axis_total + offset) * inner;
                data[dst_base..dst_base + seg * inner].copy_from_slice(src);
            }
            offset += seg;
        }
        let out = Tensor::new_unchecked(shape, data);
        if tape.wants(tensors) {
            let parts: Vec<Tensor<T>> = tensors.iter().map(|t| (*t).clone()).collect();
            let o = out.clone();
            tape.push(
                tensors,
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let mut offset = 0;
                    for t in &parts {
                        let seg = t.shape()[axis];
                        if t.requires_grad() {
                            let mut contrib = vec![T::zero(); t.numel()];
                            for ob in 0..outer {
                                let src_base = (ob * axis_total + offset) * inner;
                                contrib[ob * seg * inner..(ob + 1) * seg * inner]
                                    .copy_from_slice(&g[src_base..src_base + seg * inner]);
                            }
                            t.acc_grad_slice(&contrib);
                        }
                        offset += seg;
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Slice `[start, end)` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize, tape: &Tape<T>) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::invalid_argument(format!(
                "slice_rows {start}..{end} out of range for shape {shape:?}"
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data()[start * inner..end * inner].to_vec();
        let mut new_shape = shape.to_vec();
        new_shape[0] = end - start;
        let out = Tensor::new_unchecked(new_shape, data);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    a.acc_grad_with(|buf| {
                        for (b, &gv) in buf[start * inner..end * inner].iter_mut().zip(g.iter()) {
                            *b += gv;
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Inverted dropout: in train mode survivors are scaled by 1/(1-rate) so
    /// that eval mode is the identity.
    pub fn dropout(&self, rate: f64, train: bool, rng: &mut Rng, tape: &Tape<T>) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid_argument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::new_unchecked(self.shape().to_vec(), data);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    let contrib: Vec<T> =
                        g.iter().zip(mask.iter()).map(|(&gv, &m)| gv * m).collect();
                    a.acc_grad_slice(&contrib);
                }),
            );
        }
        Ok(out)
    }

    /// Gather `logits[i, classes[i]]` into a `[N]` vector.
    pub fn pick_class(&self, classes: &[usize], tape: &Tape<T>) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid_shape(format!(
                "pick_class expects [N, C] logits, got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if classes.len() != n {
            return Err(Error::invalid_argument(format!(
                "pick_class: {} class indices for {} rows",
                classes.len(),
                n
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&cls| cls >= c) {
            return Err(Error::invalid_argument(format!(
                "class index {bad} out of range 0..{c}"
            )));
        }
        let data = {
            let d = self.data();
            classes
                .iter()
                .enumerate()
                .map(|(i, &cls)| d[i * c + cls])
                .collect()
        };
        let out = Tensor::new_unchecked(vec![n], data);
        if tape.wants(&[self]) {
            let (a, o) = (self.clone(), out.clone());
            let classes = classes.to_vec();
            tape.push(
                &[self],
                &out,
                Box::new(move || {
                    let Some(g) = o.grad_ref() else { return };
                    a.acc_grad_with(|buf| {
                        for (i, &cls) in classes.iter().enumerate() {
                            buf[i * c + cls] += g[i];
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Index of the maximum value per row of a `[N, C]` tensor, lowest index
    /// winning ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let shape = self.shape();
        debug_assert_eq!(shape.len(), 2);
        let (n, c) = (shape[0], shape[1]);
        let d = self.data();
        (0..n)
            .map(|i| {
                let row = &d[i * c..(i + 1) * c];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .with_grad();
        let loss = x.sum(&tape);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn elementwise_square_backward() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .with_grad();
        let y = x.mul(&x, &tape).unwrap();
        let loss = y.sum(&tape);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let tape = Tape::<f64>::disabled();
        let x = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = x.softmax(1, &tape).unwrap();
        for &v in s.data().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let tape = Tape::<f64>::disabled();
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            x.softmax(2, &tape),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn linf_clip_degenerate_interval_is_identity() {
        let tape = Tape::<f32>::disabled();
        let x = Tensor::from_vec(&[4], vec![0.1, -0.5, 2.0, 0.0]).unwrap();
        let out = x.linf_clip(&x, &x, &tape).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let tape = Tape::<f32>::new();
        let mut rng = crate::rng::seeded(7);
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = x.dropout(0.0, true, &mut rng, &tape).unwrap();
        assert_eq!(a.id(), x.id());
        let b = x.dropout(0.5, false, &mut rng, &tape).unwrap();
        assert_eq!(b.id(), x.id());
    }

    #[test]
    fn matmul_known_values() {
        let tape = Tape::<f64>::disabled();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b, &tape).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::<f32>::disabled();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![5.0, 6.0]).unwrap();
        let c = Tensor::concat(&[&a, &b], 0, &tape).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        let back = c.slice_rows(0, 2, &tape).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
        let tail = c.slice_rows(2, 3, &tape).unwrap();
        assert_eq!(tail.to_vec(), b.to_vec());
    }

    #[test]
    fn pick_class_gathers() {
        let tape = Tape::<f64>::disabled();
        let logits = Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, 1.0, 2.0, 3.0]).unwrap();
        let picked = logits.pick_class(&[2, 0], &tape).unwrap();
        assert_eq!(picked.to_vec(), vec![0.3, 1.0]);
        assert!(logits.pick_class(&[3, 0], &tape).is_err());
    }
}
