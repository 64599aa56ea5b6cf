//! 2-D convolution (cross-correlation) and pooling, via im2col + matmul.

use rayon::prelude::*;

use super::ops::{matmul_a_bt, matmul_at_b, matmul_slices};
use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if stride == 0 {
        return Err(Error::invalid_argument("conv2d: stride must be positive"));
    }
    let is = input.shape();
    let ks = kernel.shape();
    if is.len() != 4 || ks.len() != 4 {
        return Err(Error::invalid_shape(format!(
            "conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw], got {is:?} and {ks:?}"
        )));
    }
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c {
        return Err(Error::invalid_shape(format!(
            "conv2d: kernel expects {kc} input channels, input has {c}"
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid_shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvDims { n, c, h, w, f, kh, kw, oh, ow })
}

/// Unfold one image `[C,H,W]` into a `[C*kh*kw, oh*ow]` patch matrix.
fn im2col<T: Scalar>(
    img: &[T],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    col: &mut [T],
) {
    let (h, w, kh, kw, oh, ow) = (d.h, d.w, d.kh, d.kw, d.oh, d.ow);
    let spatial = oh * ow;
    for c in 0..d.c {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh * kw + ki * kw + kj) * spatial;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let out_base = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        for v in &mut col[out_base..out_base + ow] {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        col[out_base + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter a `[C*kh*kw, oh*ow]` gradient back onto the `[C,H,W]` image.
fn col2im_acc<T: Scalar>(
    col: &[T],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    img: &mut [T],
) {
    let (h, w, kh, kw, oh, ow) = (d.h, d.w, d.kh, d.kw, d.oh, d.ow);
    let spatial = oh * ow;
    for c in 0..d.c {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh * kw + ki * kw + kj) * spatial;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += col[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Standard cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]` filters.
/// Output spatial size is `(H + 2*padding - kh)/stride + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernel, stride, padding)?;
    let ckk = d.c * d.kh * d.kw;
    let spatial = d.oh * d.ow;
    let img_len = d.c * d.h * d.w;
    let out_img = d.f * spatial;

    let data = {
        let xref = input.data();
        let x: &[T] = &xref;
        let kref = kernel.data();
        let k: &[T] = &kref;
        let mut data = vec![T::zero(); d.n * out_img];
        data.par_chunks_mut(out_img)
            .zip(x.par_chunks(img_len))
            .for_each(|(out_n, img)| {
                let mut col = vec![T::zero(); ckk * spatial];
                im2col(img, &d, stride, padding, &mut col);
                matmul_slices(k, &col, d.f, ckk, spatial, out_n);
            });
        data
    };
    let out = Tensor::new_unchecked(vec![d.n, d.f, d.oh, d.ow], data);

    if tape.wants(&[input, kernel]) {
        let (x, k, o) = (input.clone(), kernel.clone(), out.clone());
        tape.push(
            &[input, kernel],
            &out,
            Box::new(move || {
                let Some(g) = o.grad_ref() else { return };
                let xd = x.data();
                let kd = k.data();
                let mut dk = vec![T::zero(); d.f * ckk];
                let mut dx = vec![T::zero(); xd.len()];
                let mut col = vec![T::zero(); ckk * spatial];
                let mut dcol = vec![T::zero(); ckk * spatial];
                for ni in 0..d.n {
                    let g_n = &g[ni * out_img..(ni + 1) * out_img];
                    // dK += g_n * col^T (recompute the unfold instead of caching it)
                    if k.requires_grad() {
                        im2col(&xd[ni * img_len..(ni + 1) * img_len], &d, stride, padding, &mut col);
                        matmul_a_bt(g_n, &col, d.f, spatial, ckk, &mut dk);
                    }
                    if x.requires_grad() {
                        dcol.iter_mut().for_each(|v| *v = T::zero());
                        matmul_at_b(&kd, g_n, ckk, d.f, spatial, &mut dcol);
                        col2im_acc(
                            &dcol,
                            &d,
                            stride,
                            padding,
                            &mut dx[ni * img_len..(ni + 1) * img_len],
                        );
                    }
                }
                drop(xd);
                drop(kd);
                if k.requires_grad() {
                    k.acc_grad_slice(&dk);
                }
                if x.requires_grad() {
                    x.acc_grad_slice(&dx);
                }
            }),
        );
    }
    Ok(out)
}

/// Max pooling over `kernel`-sized windows. Ties keep the first position in
/// scan order, so backward routing is deterministic.
pub fn max_pool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid_argument(
            "max_pool2d: kernel and stride must be positive",
        ));
    }
    let is = input.shape();
    if is.len() != 4 {
        return Err(Error::invalid_shape(format!(
            "max_pool2d expects [N,C,H,W], got {is:?}"
        )));
    }
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    if h < kernel || w < kernel {
        return Err(Error::invalid_shape(format!(
            "max_pool2d: window {kernel} larger than input {h}x{w}"
        )));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;

    let mut data = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    {
        let x = input.data();
        for nc in 0..n * c {
            let plane = &x[nc * h * w..(nc + 1) * h * w];
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ki in 0..kernel {
                        let iy = oy * stride + ki;
                        for kj in 0..kernel {
                            let ix = ox * stride + kj;
                            let v = plane[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    data[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = nc * h * w + best_idx;
                }
            }
        }
    }
    let out = Tensor::new_unchecked(vec![n, c, oh, ow], data);
    if tape.wants(&[input]) {
        let (x, o) = (input.clone(), out.clone());
        tape.push(
            &[input],
            &out,
            Box::new(move || {
                let Some(g) = o.grad_ref() else { return };
                x.acc_grad_with(|buf| {
                    for (i, &src) in argmax.iter().enumerate() {
                        buf[src] += g[i];
                    }
                });
            }),
        );
    }
    Ok(out)
}

/// Spatial mean `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>, tape: &Tape<T>) -> Result<Tensor<T>> {
    let is = input.shape();
    if is.len() != 4 {
        return Err(Error::invalid_shape(format!(
            "global_avg_pool expects [N,C,H,W], got {is:?}"
        )));
    }
    let (n, c, spatial) = (is[0], is[1], is[2] * is[3]);
    let inv = T::one() / T::from_usize(spatial);
    let data = {
        let x = input.data();
        let mut data = vec![T::zero(); n * c];
        for (i, v) in data.iter_mut().enumerate() {
            let base = i * spatial;
            let mut acc = T::zero();
            for &xv in &x[base..base + spatial] {
                acc += xv;
            }
            *v = acc * inv;
        }
        data
    };
    let out = Tensor::new_unchecked(vec![n, c], data);
    if tape.wants(&[input]) {
        let (x, o) = (input.clone(), out.clone());
        tape.push(
            &[input],
            &out,
            Box::new(move || {
                let Some(g) = o.grad_ref() else { return };
                x.acc_grad_with(|buf| {
                    for (i, &gv) in g.iter().enumerate() {
                        let contrib = gv * inv;
                        for v in &mut buf[i * spatial..(i + 1) * spatial] {
                            *v += contrib;
                        }
                    }
                });
            }),
        );
    }
    Ok(out)
}
