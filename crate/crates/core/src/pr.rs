//! Peer regularization: attention-weighted aggregation of KNN peer pixels,
//! and its Monte Carlo approximation for inference.
//!
//! Each output pixel is a convex combination of its K nearest peer pixels,
//! weighted by a learned scalar attention function `a([x_p, x_q])` over the
//! concatenated query/neighbor features (query first). The normalization in
//! the aggregation is written in the source formulation as
//! LeakyReLU(exp(z)) / sum LeakyReLU(exp(z')), which is identical to a
//! softmax because exp is never negative; `literal_eq2_mode` keeps the
//! literal arithmetic available for fidelity checks.

use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::{FeatureSet, PeerGraph};
use crate::rng::{derive, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// The attention function: a fully connected layer from the concatenated
/// 2d-dimensional [query, neighbor] features to a scalar logit.
pub struct AttentionParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Uniform init in [-1/sqrt(2d), 1/sqrt(2d)], zero bias.
    pub fn init(d: usize, rng: &mut crate::rng::Rng) -> Self {
        use rand::Rng as _;
        let bound = 1.0 / ((2 * d) as f64).sqrt();
        let w: Vec<T> = (0..2 * d)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        AttentionParams {
            weight: Tensor::from_vec(&[2 * d], w).unwrap().with_grad(),
            bias: Tensor::from_vec(&[1], vec![T::zero()]).unwrap().with_grad(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.numel() / 2
    }
}

#[derive(Clone, Debug)]
pub struct PRLayerConfig {
    pub k: usize,
    pub attention_dropout: f64,
    pub distance_dropout: f64,
    pub leaky_slope: f64,
    pub literal_eq2_mode: bool,
    /// Monte Carlo forward passes at inference (training uses 1).
    pub mc_runs: usize,
}

impl Default for PRLayerConfig {
    fn default() -> Self {
        PRLayerConfig {
            k: 10,
            attention_dropout: 0.5,
            distance_dropout: 0.2,
            leaky_slope: 0.2,
            literal_eq2_mode: false,
            mc_runs: 10,
        }
    }
}

impl PRLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid_argument("PR layer: K must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.attention_dropout)
            || !(0.0..1.0).contains(&self.distance_dropout)
        {
            return Err(Error::invalid_argument(
                "PR layer: dropout rates must be in [0, 1)",
            ));
        }
        if self.mc_runs == 0 {
            return Err(Error::invalid_argument("PR layer: M must be >= 1"));
        }
        Ok(())
    }
}

/// Where neighbor pixels come from during aggregation.
pub enum PeerSource<T: Scalar> {
    /// Peers are the input batch itself (training regime).
    SelfSet,
    /// Fixed peer features; constants w.r.t. the gradient (test regime).
    External(Rc<FeatureSet<T>>),
}

/// Attention weights of one query pixel over its K neighbors. `dropout_mask`
/// marks dropped neighbors (`true` = dropped); dropped neighbors receive
/// weight zero and the rest renormalize. Errors if every neighbor is dropped.
pub fn attention_scores<T: Scalar>(
    query: &[T],
    neighbors: &[T],
    params: &AttentionParams<T>,
    dropout_mask: Option<&[bool]>,
    config: &PRLayerConfig,
) -> Result<Vec<T>> {
    let d = query.len();
    if params.weight.numel() != 2 * d {
        return Err(Error::invalid_shape(format!(
            "attention weight has {} values, expected {}",
            params.weight.numel(),
            2 * d
        )));
    }
    if d == 0 || neighbors.is_empty() || neighbors.len() % d != 0 {
        return Err(Error::invalid_shape(
            "neighbors must be a non-empty K x d matrix",
        ));
    }
    let k = neighbors.len() / d;
    if let Some(mask) = dropout_mask {
        if mask.len() != k {
            return Err(Error::invalid_argument(format!(
                "dropout mask has {} entries for {k} neighbors",
                mask.len()
            )));
        }
        if mask.iter().all(|&dropped| dropped) {
            return Err(Error::AllNeighborsDropped { query: 0, k });
        }
    }
    let w = params.weight.data();
    let (wq, wn) = w.split_at(d);
    let b = params.bias.data()[0];
    let q_dot: T = wq.iter().zip(query).map(|(&a, &x)| a * x).sum::<T>() + b;

    let live = |i: usize| dropout_mask.map_or(true, |m| !m[i]);
    let mut logits = vec![T::neg_infinity(); k];
    let mut max = T::neg_infinity();
    for (i, x) in neighbors.chunks(d).enumerate() {
        if live(i) {
            let z = q_dot + wn.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>();
            logits[i] = z;
            max = max.max(z);
        }
    }
    let mut weights = vec![T::zero(); k];
    let mut sum = T::zero();
    for i in 0..k {
        if live(i) {
            let mut e = (logits[i] - max).exp();
            if config.literal_eq2_mode {
                // Literal normalization: LeakyReLU on the (non-negative)
                // exponentials. Identity on positives, so it reproduces the
                // softmax branch exactly.
                e = if e > T::zero() {
                    e
                } else {
                    e * T::from_f64(config.leaky_slope)
                };
            }
            weights[i] = e;
            sum += e;
        }
    }
    for v in &mut weights {
        *v /= sum;
    }
    Ok(weights)
}

struct RowWeights<T> {
    alphas: Vec<T>,     // rows * k, zero where dropped
    uniform: Vec<bool>, // rows where the dropout fallback fired
}

/// Realize attention dropout masks and weights for every query row.
#[allow(clippy::too_many_arguments)]
fn compute_weights<T: Scalar>(
    graph: &PeerGraph<T>,
    q: &[T],
    peer_pixels: &[T],
    d: usize,
    wq: &[T],
    wn: &[T],
    b: T,
    drop_rate: f64,
    mask_seed: u64,
    literal: bool,
    leaky_slope: f64,
) -> RowWeights<T> {
    let rows = graph.rows();
    let k = graph.k;
    let mut alphas = vec![T::zero(); rows * k];
    let mut uniform = vec![false; rows];

    alphas
        .par_chunks_mut(k)
        .zip(uniform.par_iter_mut())
        .enumerate()
        .for_each(|(row, (arow, uni))| {
            let recs = &graph.neighbors[row * k..(row + 1) * k];
            let qrow = &q[row * d..(row + 1) * d];
            let q_dot: T = wq.iter().zip(qrow).map(|(&a, &x)| a * x).sum::<T>() + b;

            // Dropout mask with one retry, then uniform pass-through.
            let mut live_buf = [true; 64];
            let live = &mut live_buf[..k];
            let mut use_uniform = false;
            if drop_rate > 0.0 {
                let mut ok = false;
                for attempt in 0..2u64 {
                    let mut rng = SplitMix64::new(derive(mask_seed, (row as u64) << 1 | attempt));
                    let mut any = false;
                    for l in live.iter_mut() {
                        *l = !rng.bernoulli(drop_rate);
                        any |= *l;
                    }
                    if any {
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    use_uniform = true;
                }
            }
            if use_uniform {
                *uni = true;
                let w = T::one() / T::from_usize(k);
                arow.iter_mut().for_each(|a| *a = w);
                return;
            }

            let mut max = T::neg_infinity();
            let mut logits = [T::neg_infinity(); 64];
            for (i, rec) in recs.iter().enumerate() {
                if !live[i] {
                    continue;
                }
                let prow = (rec.image as usize) * graph.peer_pixels + rec.pixel as usize;
                let x = &peer_pixels[prow * d..(prow + 1) * d];
                let z = q_dot + wn.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>();
                logits[i] = z;
                max = max.max(z);
            }
            let mut sum = T::zero();
            for i in 0..k {
                if live[i] {
                    let mut e = (logits[i] - max).exp();
                    if literal {
                        e = if e > T::zero() {
                            e
                        } else {
                            e * T::from_f64(leaky_slope)
                        };
                    }
                    arow[i] = e;
                    sum += e;
                }
            }
            for a in arow.iter_mut() {
                *a /= sum;
            }
        });
    RowWeights { alphas, uniform }
}

/// The PR layer forward pass: every pixel of `input` is replaced by the
/// attention-weighted sum of its K neighbor pixels from `graph`.
///
/// Differentiable w.r.t. `input` and `params`; the graph indices and the
/// realized dropout masks are constants. `mask_seed` drives the attention
/// dropout (train mode only).
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar>(
    input: &Tensor<T>,
    peers: &PeerSource<T>,
    graph: &PeerGraph<T>,
    params: &AttentionParams<T>,
    config: &PRLayerConfig,
    train: bool,
    mask_seed: u64,
    tape: &Tape<T>,
) -> Result<Tensor<T>> {
    config.validate()?;
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::invalid_shape(format!(
            "PR layer expects [B,C,H,W] input, got {shape:?}"
        )));
    }
    let (bsz, d, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if graph.query_images != bsz || graph.query_pixels != hw {
        return Err(Error::InvalidGraph(format!(
            "graph is over {}x{} query pixels, input is {bsz}x{hw}",
            graph.query_images, graph.query_pixels
        )));
    }
    if params.feature_dim() != d {
        return Err(Error::InvalidGraph(format!(
            "attention params expect d={}, features have d={d}",
            params.feature_dim()
        )));
    }
    if graph.k > 64 {
        return Err(Error::invalid_argument("PR layer supports K <= 64"));
    }
    let k = graph.k;

    // Pixel-major copy of the input features.
    let q = to_pixel_major(input, bsz, d, hw);
    let external = match peers {
        PeerSource::SelfSet => {
            if graph.peer_images != bsz || graph.peer_pixels != hw {
                return Err(Error::InvalidGraph(
                    "self-peer graph does not match the input batch".into(),
                ));
            }
            None
        }
        PeerSource::External(fs) => {
            if fs.dim() != d {
                return Err(Error::InvalidGraph(format!(
                    "peer features have d={}, input has d={d}",
                    fs.dim()
                )));
            }
            if fs.images() != graph.peer_images || fs.pixels_per_image() != graph.peer_pixels {
                return Err(Error::InvalidGraph(
                    "graph peer layout does not match the peer feature set".into(),
                ));
            }
            Some(Rc::clone(fs))
        }
    };

    let drop_rate = if train { config.attention_dropout } else { 0.0 };
    let weights = {
        let w = params.weight.data();
        let (wq, wn) = w.split_at(d);
        let b = params.bias.data()[0];
        let peer_slice: &[T] = match &external {
            Some(fs) => fs.pixels_slice(),
            None => &q,
        };
        compute_weights(
            graph,
            &q,
            peer_slice,
            d,
            wq,
            wn,
            b,
            drop_rate,
            mask_seed,
            config.literal_eq2_mode,
            config.leaky_slope,
        )
    };

    // out_r = sum_k alpha_k x_k, written back in CHW layout.
    let mut out = vec![T::zero(); input.numel()];
    {
        let peer_slice: &[T] = match &external {
            Some(fs) => fs.pixels_slice(),
            None => &q,
        };
        let alphas = &weights.alphas;
        out.par_chunks_mut(d * hw).enumerate().for_each(|(bi, slab)| {
            for p in 0..hw {
                let row = bi * hw + p;
                let arow = &alphas[row * k..(row + 1) * k];
                let recs = &graph.neighbors[row * k..(row + 1) * k];
                for (a, rec) in arow.iter().zip(recs) {
                    if *a == T::zero() {
                        continue;
                    }
                    let prow = (rec.image as usize) * graph.peer_pixels + rec.pixel as usize;
                    let x = &peer_slice[prow * d..(prow + 1) * d];
                    for (c, &xv) in x.iter().enumerate() {
                        slab[c * hw + p] += *a * xv;
                    }
                }
            }
        });
    }
    let out = Tensor::new_unchecked(shape.to_vec(), out);

    if tape.wants(&[input, &params.weight, &params.bias]) {
        let x = input.clone();
        let weight = params.weight.clone();
        let bias = params.bias.clone();
        let o = out.clone();
        let alphas = weights.alphas;
        let uniform = weights.uniform;
        let neighbors = graph.neighbors.clone();
        let peer_layout = graph.peer_pixels;
        tape.push(
            &[input, &params.weight, &params.bias],
            &out,
            Box::new(move || {
                let Some(g) = o.grad_ref() else { return };
                let q = to_pixel_major(&x, bsz, d, hw);
                let peer_slice: &[T] = match &external {
                    Some(fs) => fs.pixels_slice(),
                    None => &q,
                };
                let self_peers = external.is_none();
                let wd = weight.data();
                let (wq, wn) = wd.split_at(d);

                let mut dx = vec![T::zero(); x.numel()]; // CHW layout
                let mut dwq = vec![T::zero(); d];
                let mut dwn = vec![T::zero(); d];
                let mut db = T::zero();
                let mut dalpha = vec![T::zero(); k];
                let mut dz = vec![T::zero(); k];

                for row in 0..bsz * hw {
                    let (bi, p) = (row / hw, row % hw);
                    let arow = &alphas[row * k..(row + 1) * k];
                    let recs = &neighbors[row * k..(row + 1) * k];
                    // Output cotangent of this pixel lives at strided CHW
                    // positions gbase + c*hw.
                    let gbase = bi * d * hw + p;

                    if uniform[row] {
                        // Constant weights: gradient flows only into the
                        // neighbor features.
                        if self_peers {
                            for (a, rec) in arow.iter().zip(recs) {
                                let prow =
                                    (rec.image as usize) * peer_layout + rec.pixel as usize;
                                let (pb, pp) = (prow / hw, prow % hw);
                                for c in 0..d {
                                    dx[(pb * d + c) * hw + pp] += *a * g[gbase + c * hw];
                                }
                            }
                        }
                        continue;
                    }

                    // dalpha_k = g . x_k over live neighbors (alpha > 0).
                    let mut s = T::zero();
                    for (i, (a, rec)) in arow.iter().zip(recs).enumerate() {
                        if *a == T::zero() {
                            dalpha[i] = T::zero();
                            dz[i] = T::zero();
                            continue;
                        }
                        let prow = (rec.image as usize) * peer_layout + rec.pixel as usize;
                        let xk = &peer_slice[prow * d..(prow + 1) * d];
                        let mut dot = T::zero();
                        for (c, &xv) in xk.iter().enumerate() {
                            dot += g[gbase + c * hw] * xv;
                        }
                        dalpha[i] = dot;
                        s += *a * dot;
                    }
                    // Softmax backward over the surviving set.
                    let mut dz_sum = T::zero();
                    for i in 0..k {
                        let a = arow[i];
                        if a == T::zero() {
                            continue;
                        }
                        dz[i] = a * (dalpha[i] - s);
                        dz_sum += dz[i];
                    }

                    let qrow = &q[row * d..(row + 1) * d];
                    for c in 0..d {
                        dwq[c] += dz_sum * qrow[c];
                    }
                    db += dz_sum;
                    // Query-side gradient through the logits.
                    for c in 0..d {
                        dx[(bi * d + c) * hw + p] += dz_sum * wq[c];
                    }
                    for (i, rec) in recs.iter().enumerate() {
                        let a = arow[i];
                        if a == T::zero() {
                            continue;
                        }
                        let prow = (rec.image as usize) * peer_layout + rec.pixel as usize;
                        if self_peers {
                            let (pb, pp) = (prow / hw, prow % hw);
                            for c in 0..d {
                                dx[(pb * d + c) * hw + pp] +=
                                    a * g[gbase + c * hw] + dz[i] * wn[c];
                            }
                        }
                        let xk = &peer_slice[prow * d..(prow + 1) * d];
                        for (c, &xv) in xk.iter().enumerate() {
                            dwn[c] += dz[i] * xv;
                        }
                    }
                }
                drop(wd);
                if x.requires_grad() {
                    x.acc_grad_slice(&dx);
                }
                if weight.requires_grad() {
                    let mut dw = dwq;
                    dw.extend_from_slice(&dwn);
                    weight.acc_grad_slice(&dw);
                }
                if bias.requires_grad() {
                    bias.acc_grad_slice(&[db]);
                }
            }),
        );
    }
    Ok(out)
}

fn to_pixel_major<T: Scalar>(t: &Tensor<T>, b: usize, d: usize, hw: usize) -> Vec<T> {
    let data = t.data();
    let mut q = vec![T::zero(); b * hw * d];
    for bi in 0..b {
        for c in 0..d {
            let src = &data[(bi * d + c) * hw..(bi * d + c + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                q[(bi * hw + p) * d + c] = v;
            }
        }
    }
    q
}

/// Monte Carlo inference: the mean of `m` stochastic forward passes, each
/// produced by `run(batch_index)` with an independently sampled peer bank.
pub fn mc_inference<T: Scalar>(
    m: usize,
    mut run: impl FnMut(usize) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if m == 0 {
        return Err(Error::invalid_argument("Monte Carlo runs M must be >= 1"));
    }
    let first = run(0)?;
    let mut acc = first.to_vec();
    let shape = first.shape().to_vec();
    for i in 1..m {
        let next = run(i)?;
        if next.shape() != shape {
            return Err(Error::invalid_shape(format!(
                "Monte Carlo pass {i} returned shape {:?}, expected {shape:?}",
                next.shape()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(next.data().iter()) {
            *a += v;
        }
    }
    let inv = T::one() / T::from_usize(m);
    for a in &mut acc {
        *a *= inv;
    }
    Ok(Tensor::new_unchecked(shape, acc))
}
