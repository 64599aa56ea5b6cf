//! Oracles for the peer-aggregation layer: a scalar-by-scalar attention
//! evaluation, a naive per-pixel aggregation loop, the literal-vs-softmax
//! normalization identity, and finite-difference gradient checks through a
//! frozen graph.

use std::rc::Rc;

use peerlab_core::gradcheck::finite_diff_check;
use peerlab_core::knn::{build_test_graph, build_train_graph, FeatureMap, FeatureSet, PeerGraph};
use peerlab_core::pr::{attention_scores, forward, mc_inference, AttentionParams, PRLayerConfig, PeerSource};
use peerlab_core::rng::seeded;
use peerlab_core::tensor::{Tape, Tensor};
use rand::Rng as _;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_params(d: usize, seed: u64) -> AttentionParams<f64> {
    let mut rng = seeded(seed);
    AttentionParams::init(d, &mut rng)
}

/// Independent evaluation of softmax(a([x_p, x_q_k])) one scalar at a time.
fn attention_oracle(
    query: &[f64],
    neighbors: &[Vec<f64>],
    w: &[f64],
    b: f64,
) -> Vec<f64> {
    let d = query.len();
    let logits: Vec<f64> = neighbors
        .iter()
        .map(|x| {
            let mut concat = query.to_vec();
            concat.extend_from_slice(x);
            let mut z = b;
            for i in 0..2 * d {
                z += w[i] * concat[i];
            }
            z
        })
        .collect();
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[test]
fn attention_matches_scalar_oracle() {
    let cfg = PRLayerConfig::default();
    for seed in 0..20 {
        let d = 5;
        let params = rand_params(d, seed);
        let mut rng = seeded(1000 + seed);
        let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neighbors: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let flat: Vec<f64> = neighbors.concat();

        let got = attention_scores(&query, &flat, &params, None, &cfg).unwrap();
        let want = attention_oracle(
            &query,
            &neighbors,
            &params.weight.to_vec(),
            params.bias.item(),
        );
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn literal_normalization_equals_softmax() {
    // The LeakyReLU(exp(.)) normalization is the softmax because exp > 0.
    let mut cfg = PRLayerConfig::default();
    let mut max_diff = 0.0f64;
    for trial in 0..1000u64 {
        let d = 4;
        let k = 6;
        let params = rand_params(d, trial);
        let mut rng = seeded(50_000 + trial);
        let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let neighbors: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-3.0..3.0)).collect();

        cfg.literal_eq2_mode = false;
        let soft = attention_scores(&query, &neighbors, &params, None, &cfg).unwrap();
        cfg.literal_eq2_mode = true;
        let lit = attention_scores(&query, &neighbors, &params, None, &cfg).unwrap();
        for (a, b) in soft.iter().zip(&lit) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    assert!(max_diff < 1e-6, "max elementwise difference {max_diff}");
}

fn graph_for(input: &Tensor<f64>, k: usize) -> PeerGraph<f64> {
    let fs = FeatureSet::from_chw(input).unwrap();
    build_train_graph(&fs, k, 0.0, &mut seeded(7)).unwrap()
}

/// Naive reference: per pixel, gather neighbors, evaluate attention with the
/// scalar oracle, and sum.
fn pr_oracle(
    input: &Tensor<f64>,
    graph: &PeerGraph<f64>,
    params: &AttentionParams<f64>,
) -> Vec<f64> {
    let s = input.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let data = input.to_vec();
    let pixel = |img: usize, p: usize| -> Vec<f64> {
        (0..c).map(|ci| data[(img * c + ci) * hw + p]).collect()
    };
    let mut out = vec![0.0; input.numel()];
    for bi in 0..b {
        for p in 0..hw {
            let recs = graph.neighbors_of(bi, p);
            let query = pixel(bi, p);
            let neigh: Vec<Vec<f64>> = recs
                .iter()
                .map(|r| pixel(r.image as usize, r.pixel as usize))
                .collect();
            let alphas = attention_oracle(
                &query,
                &neigh,
                &params.weight.to_vec(),
                params.bias.item(),
            );
            for ci in 0..c {
                let mut acc = 0.0;
                for (a, x) in alphas.iter().zip(&neigh) {
                    acc += a * x[ci];
                }
                out[(bi * c + ci) * hw + p] = acc;
            }
        }
    }
    out
}

#[test]
fn forward_matches_per_pixel_oracle() {
    // 2 images of 4x4 pixels with 8 channels.
    let input = rand_tensor(&[2, 8, 4, 4], 31);
    let graph = graph_for(&input, 5);
    let params = rand_params(8, 32);
    let cfg = PRLayerConfig { k: 5, ..Default::default() };
    let tape = Tape::disabled();
    let got = forward(
        &input,
        &PeerSource::SelfSet,
        &graph,
        &params,
        &cfg,
        false,
        0,
        &tape,
    )
    .unwrap();
    let want = pr_oracle(&input, &graph, &params);
    for (g, w) in got.to_vec().iter().zip(&want) {
        assert!((g - w).abs() < 1e-5, "{g} vs {w}");
    }
}

#[test]
fn identical_neighbors_reproduce_the_query() {
    // Every pixel of every image identical: any convex combination of
    // neighbors equals the pixel itself.
    let base = [0.4, -1.2, 0.7];
    let mut data = Vec::new();
    for _ in 0..2 {
        for &v in &base {
            data.extend(std::iter::repeat(v).take(9));
        }
    }
    let input = Tensor::from_vec(&[2, 3, 3, 3], data).unwrap();
    let graph = graph_for(&input, 4);
    let params = rand_params(3, 5);
    let cfg = PRLayerConfig { k: 4, ..Default::default() };
    let out = forward(
        &input,
        &PeerSource::SelfSet,
        &graph,
        &params,
        &cfg,
        false,
        0,
        &Tape::disabled(),
    )
    .unwrap();
    for (o, i) in out.to_vec().iter().zip(input.to_vec()) {
        assert!((o - i).abs() < 1e-9);
    }
}

#[test]
fn k1_self_graph_is_identity() {
    let input = rand_tensor(&[3, 4, 3, 3], 9);
    let graph = graph_for(&input, 1); // self is always nearest
    let params = rand_params(4, 10);
    let cfg = PRLayerConfig { k: 1, ..Default::default() };
    let out = forward(
        &input,
        &PeerSource::SelfSet,
        &graph,
        &params,
        &cfg,
        false,
        0,
        &Tape::disabled(),
    )
    .unwrap();
    for (o, i) in out.to_vec().iter().zip(input.to_vec()) {
        assert!((o - i).abs() < 1e-9);
    }
}

#[test]
fn gradients_pass_finite_difference() {
    let input = rand_tensor(&[2, 6, 3, 3], 41);
    let graph = Rc::new(graph_for(&input, 4));
    let params = rand_params(6, 42);
    let cfg = PRLayerConfig { k: 4, ..Default::default() };
    // Graph indices are constants: built once, reused across FD evaluations.
    finite_diff_check(
        &[&input, &params.weight, &params.bias],
        |tape| {
            let out = forward(
                &input,
                &PeerSource::SelfSet,
                &graph,
                &params,
                &cfg,
                false,
                0,
                tape,
            )?;
            Ok(out.mul(&out, tape)?.sum(tape))
        },
        1e-4,
        1e-4,
    )
    .unwrap();
}

#[test]
fn gradients_with_attention_dropout_and_external_peers() {
    let input = rand_tensor(&[2, 5, 3, 3], 51);
    let peer_maps: Vec<FeatureMap<f64>> = (0..3)
        .map(|i| {
            let mut rng = seeded(600 + i as u64);
            FeatureMap::new(
                i,
                9,
                5,
                (0..45).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    let peers = Rc::new(FeatureSet::from_maps(peer_maps).unwrap());
    let qs = FeatureSet::from_chw(&input).unwrap();
    let graph = Rc::new(build_test_graph(&qs, &peers, 3).unwrap());
    let params = rand_params(5, 52);
    let cfg = PRLayerConfig { k: 3, ..Default::default() };
    let src = PeerSource::External(Rc::clone(&peers));
    // Train mode with a fixed mask seed: the realized dropout mask is
    // identical on every FD evaluation.
    finite_diff_check(
        &[&input, &params.weight, &params.bias],
        |tape| {
            let out = forward(&input, &src, &graph, &params, &cfg, true, 1234, tape)?;
            Ok(out.mul(&out, tape)?.sum(tape))
        },
        1e-4,
        1e-4,
    )
    .unwrap();
}

#[test]
fn weights_sum_to_one_and_output_in_convex_hull() {
    let input = rand_tensor(&[2, 4, 4, 4], 61);
    let graph = graph_for(&input, 6);
    let params = rand_params(4, 62);
    let cfg = PRLayerConfig { k: 6, ..Default::default() };
    let out = forward(
        &input,
        &PeerSource::SelfSet,
        &graph,
        &params,
        &cfg,
        false,
        0,
        &Tape::disabled(),
    )
    .unwrap();
    let s = input.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let data = input.to_vec();
    let od = out.to_vec();
    for bi in 0..2 {
        for p in 0..hw {
            let recs = graph.neighbors_of(bi, p);
            for ci in 0..c {
                let vals: Vec<f64> = recs
                    .iter()
                    .map(|r| data[(r.image as usize * c + ci) * hw + r.pixel as usize])
                    .collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let o = od[(bi * c + ci) * hw + p];
                assert!(
                    o >= lo - 1e-6 && o <= hi + 1e-6,
                    "pixel ({bi},{p}) channel {ci}: {o} outside [{lo}, {hi}]"
                );
            }
        }
    }
}

#[test]
fn output_invariant_to_neighbor_permutation() {
    let input = rand_tensor(&[2, 4, 3, 3], 71);
    let graph = graph_for(&input, 5);
    let params = rand_params(4, 72);
    let cfg = PRLayerConfig { k: 5, ..Default::default() };
    let base = forward(
        &input,
        &PeerSource::SelfSet,
        &graph,
        &params,
        &cfg,
        false,
        0,
        &Tape::disabled(),
    )
    .unwrap();

    // Reverse every row's records.
    let mut shuffled = PeerGraph {
        k: graph.k,
        query_images: graph.query_images,
        query_pixels: graph.query_pixels,
        peer_images: graph.peer_images,
        peer_pixels: graph.peer_pixels,
        peer_image_ids: graph.peer_image_ids.clone(),
        batch_index: graph.batch_index,
        neighbors: graph.neighbors.clone(),
    };
    for row in shuffled.neighbors.chunks_mut(graph.k) {
        row.reverse();
    }
    let permuted = forward(
        &input,
        &PeerSource::SelfSet,
        &shuffled,
        &params,
        &cfg,
        false,
        0,
        &Tape::disabled(),
    )
    .unwrap();
    for (a, b) in base.to_vec().iter().zip(permuted.to_vec()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn extreme_dropout_falls_back_to_uniform() {
    // K=1 with a 0.99 drop rate: most rows drop their only neighbor twice
    // and must fall back to uniform weights instead of erroring.
    let input = rand_tensor(&[1, 3, 4, 4], 81);
    let graph = graph_for(&input, 1);
    let params = rand_params(3, 82);
    let cfg = PRLayerConfig {
        k: 1,
        attention_dropout: 0.99,
        ..Default::default()
    };
    let out = forward(
        &input,
        &PeerSource::SelfSet,
        &graph,
        &params,
        &cfg,
        true,
        99,
        &Tape::disabled(),
    )
    .unwrap();
    // With K=1 the single neighbor is self; either path yields the input.
    for (o, i) in out.to_vec().iter().zip(input.to_vec()) {
        assert!(o.is_finite());
        assert!((o - i).abs() < 1e-9);
    }
}

#[test]
fn mc_variance_shrinks_with_m() {
    // Stochastic "model": output = signal + bank-dependent noise. The
    // variance of the M=10 average across repetitions must undercut M=1.
    let signal = 0.7f64;
    let noisy_run = |seed: u64| {
        let mut rng = seeded(seed);
        let v: f64 = signal + rng.gen_range(-0.3..0.3);
        Tensor::from_vec(&[1], vec![v]).unwrap()
    };
    let repeat = |m: usize, rep: u64| {
        mc_inference(m, |i| Ok(noisy_run(rep * 1000 + i as u64)))
            .unwrap()
            .item()
    };
    let var = |m: usize| {
        let xs: Vec<f64> = (0..24).map(|rep| repeat(m, rep)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64
    };
    assert!(
        var(10) < var(1),
        "MC averaging should reduce prediction variance"
    );
}
