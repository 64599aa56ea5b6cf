//! Architecture contracts: shape guarantees, parameter counts against an
//! independent per-layer arithmetic oracle, baseline/PR weight
//! compatibility, and eval-mode determinism.

use peerlab_core::knn::PeerBank;
use peerlab_core::models::{
    ArchId, BankSampler, ForwardCtx, Model, ModelSpec, PeerCtx,
};
use peerlab_core::rng::seeded;
use peerlab_core::tensor::{Tape, Tensor};
use peerlab_core::Error;
use rand::Rng as _;

fn rand_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = seeded(seed);
    Tensor::from_vec(
        &[n, c, h, w],
        (0..n * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn eval_ctx<'a>(tape: &'a Tape<f32>, rng: &'a mut peerlab_core::rng::Rng) -> ForwardCtx<'a, f32> {
    ForwardCtx {
        tape,
        train: false,
        rng,
        peers: PeerCtx::None,
    }
}

/// Layer-by-layer parameter arithmetic, written independently of the model
/// builder: conv = f*c*k*k (+f bias), bn = 2c, fc = in*out + out,
/// projection shortcut = 1x1 conv + bn at each stage transition.
fn resnet_param_oracle(
    depth: usize,
    widths: (usize, usize, usize, usize),
    in_ch: usize,
    classes: usize,
    with_pr: bool,
) -> usize {
    let n = (depth - 2) / 6;
    let (w0, w1, w2, w3) = widths;
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
    let bn = |c: usize| 2 * c;
    let mut total = conv(in_ch, w0, 3) + bn(w0);
    let mut cin = w0;
    for wout in [w1, w2, w3] {
        for b in 0..n {
            let stride_changes = b == 0 && cin != wout;
            total += conv(cin, wout, 3) + bn(wout); // conv1 + bn1
            total += conv(wout, wout, 3) + bn(wout); // conv2 + bn2
            if stride_changes {
                total += conv(cin, wout, 1) + bn(wout); // projection
            }
            cin = wout;
        }
    }
    total += w3 * classes + classes;
    if with_pr {
        total += 2 * (2 * w3 + 1); // two attention layers over d = w3
    }
    total
}

fn lenet_param_oracle(with_pr: bool) -> usize {
    let mut total = 0;
    total += 1 * 6 * 25 + 6; // conv1
    total += 6 * 16 * 25 + 16; // conv2
    total += 256 * 120 + 120; // fc1
    total += 120 * 84 + 84; // fc2
    total += 84 * 10 + 10; // fc3
    if with_pr {
        total += (2 * 6 + 1) + (2 * 16 + 1);
    }
    total
}

#[test]
fn lenet5_logit_shape() {
    let model = Model::<f32>::build(&ModelSpec::mnist(ArchId::parse("lenet5").unwrap()), 1).unwrap();
    let x = rand_images(3, 1, 28, 28, 2);
    let logits = model.forward_eval(&x, None).unwrap();
    assert_eq!(logits.shape(), &[3, 10]);
}

#[test]
fn parameter_counts_match_arithmetic_oracle() {
    for (name, want) in [
        ("lenet5", lenet_param_oracle(false)),
        ("pr-lenet5", lenet_param_oracle(true)),
    ] {
        let model =
            Model::<f32>::build(&ModelSpec::mnist(ArchId::parse(name).unwrap()), 3).unwrap();
        assert_eq!(model.num_params(), want, "{name}");
    }
    for (name, v2) in [("resnet32", false), ("pr-resnet32", false), ("resnet32", true)] {
        let mut spec = ModelSpec::cifar(ArchId::parse(name).unwrap(), 10);
        spec.v2 = v2;
        let model = Model::<f32>::build(&spec, 4).unwrap();
        let want = resnet_param_oracle(32, spec.widths(), 3, 10, spec.arch.is_pr());
        assert_eq!(model.num_params(), want, "{name} v2={v2}");
    }
    // resnet20 backs the desk-scale CIFAR runs; resnet110 is the deep variant.
    for depth in [20, 110] {
        let spec = ModelSpec::cifar(ArchId::ResNet { depth, pr: false }, 100);
        let model = Model::<f32>::build(&spec, 5).unwrap();
        assert_eq!(
            model.num_params(),
            resnet_param_oracle(depth, spec.widths(), 3, 100, false)
        );
    }
}

#[test]
fn pr_and_baseline_names_differ_by_attention_only() {
    let base = Model::<f32>::build(&ModelSpec::cifar(ArchId::parse("resnet32").unwrap(), 10), 1)
        .unwrap();
    let pr = Model::<f32>::build(&ModelSpec::cifar(ArchId::parse("pr-resnet32").unwrap(), 10), 1)
        .unwrap();
    let base_names: std::collections::BTreeSet<String> = base.param_names().into_iter().collect();
    let pr_names: std::collections::BTreeSet<String> = pr.param_names().into_iter().collect();
    let extra: Vec<String> = pr_names.difference(&base_names).cloned().collect();
    assert_eq!(
        extra,
        vec!["pr1.attn.bias", "pr1.attn.weight", "pr2.attn.bias", "pr2.attn.weight"]
    );
    assert!(base_names.difference(&pr_names).next().is_none());
}

#[test]
fn unknown_architecture_rejected() {
    assert!(matches!(
        ArchId::parse("alexnet"),
        Err(Error::UnknownArchitecture(_))
    ));
    assert!(matches!(
        ArchId::parse("resnet33"),
        Err(Error::UnknownArchitecture(_))
    ));
}

#[test]
fn pr_model_requires_peer_context() {
    let model =
        Model::<f32>::build(&ModelSpec::mnist(ArchId::parse("pr-lenet5").unwrap()), 7).unwrap();
    let x = rand_images(2, 1, 28, 28, 8);
    let tape = Tape::disabled();
    let mut rng = seeded(0);
    let mut ctx = eval_ctx(&tape, &mut rng);
    match model.forward(&x, &mut ctx) {
        Err(Error::InvalidArgument(_)) => {}
        other => panic!("expected invalid-argument, got {other:?}"),
    }
}

#[test]
fn identical_batch_makes_pr_transparent() {
    // Every image in the batch identical: each PR layer sees all-equal
    // neighbor features and must act as the identity, so the PR model
    // matches the baseline carrying the same non-PR weights. K must not
    // exceed the number of identical copies, otherwise the graph reaches
    // past them to genuinely different pixels.
    let mut spec = ModelSpec::mnist(ArchId::parse("pr-lenet5").unwrap());
    spec.pr.k = 4;
    let pr_model = Model::<f32>::build(&spec, 11).unwrap();

    // Lift the conv biases so no pixel is ReLU-dead across every channel: a
    // zero feature vector is at cosine distance 1 from everything, including
    // its own copies, which voids the all-neighbors-identical premise.
    let mut weights = pr_model.to_container();
    for entry in weights.entries.iter_mut() {
        if entry.name == "conv1.bias" || entry.name == "conv2.bias" {
            entry.values.iter_mut().for_each(|v| *v = 3.0);
        }
    }
    pr_model.load_weights(&weights).unwrap();
    let base =
        Model::<f32>::build(&ModelSpec::mnist(ArchId::parse("lenet5").unwrap()), 99).unwrap();
    base.load_weights(&weights).unwrap();

    let one = rand_images(1, 1, 28, 28, 12);
    let mut data = Vec::new();
    for _ in 0..4 {
        data.extend_from_slice(&one.to_vec());
    }
    let batch = Tensor::from_vec(&[4, 1, 28, 28], data).unwrap();

    let tape = Tape::disabled();
    let mut rng = seeded(0);
    let mut ctx = ForwardCtx {
        tape: &tape,
        train: false,
        rng: &mut rng,
        peers: PeerCtx::Batch,
    };
    let pr_logits = pr_model.forward(&batch, &mut ctx).unwrap();
    let base_logits = base.forward_eval(&batch, None).unwrap();
    for (a, b) in pr_logits.to_vec().iter().zip(base_logits.to_vec()) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn checkpoint_compatibility_both_directions() {
    let base =
        Model::<f32>::build(&ModelSpec::mnist(ArchId::parse("lenet5").unwrap()), 21).unwrap();
    let pr =
        Model::<f32>::build(&ModelSpec::mnist(ArchId::parse("pr-lenet5").unwrap()), 22).unwrap();

    // Baseline checkpoint into PR model: attention params stay fresh.
    let report = pr.load_weights(&base.to_container()).unwrap();
    assert!(report.missing.iter().any(|n| n.starts_with("pr1.attn")));
    assert!(report.ignored.is_empty());

    // PR checkpoint into baseline: attention params ignored.
    let report = base.load_weights(&pr.to_container()).unwrap();
    assert!(report.ignored.iter().any(|n| n.starts_with("pr2.attn")));
    assert!(report.missing.is_empty());

    // Both still run.
    let x = rand_images(2, 1, 28, 28, 23);
    base.forward_eval(&x, None).unwrap();
    let pool = rand_images(8, 1, 28, 28, 24);
    let bank = PeerBank::sample(&pool, 5, 1).unwrap();
    let features = pr.precompute_bank(&bank).unwrap();
    let logits = pr.forward_eval(&x, Some(&features)).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);
}

#[test]
fn eval_is_deterministic_given_bank_and_seed() {
    let model =
        Model::<f32>::build(&ModelSpec::mnist(ArchId::parse("pr-lenet5").unwrap()), 31).unwrap();
    let pool = rand_images(12, 1, 28, 28, 32);
    let x = rand_images(3, 1, 28, 28, 33);
    let sampler = BankSampler { pool: &pool, n: 6, seed: 9 };
    let a = model.mc_predict(&x, Some(&sampler), 3).unwrap();
    let b = model.mc_predict(&x, Some(&sampler), 3).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());

    // M=1 equals a single pass with that bank.
    let single = model.mc_predict(&x, Some(&sampler), 1).unwrap();
    let bank = sampler.bank(0).unwrap();
    let features = model.precompute_bank(&bank).unwrap();
    let direct = model
        .forward_eval(&x, Some(&features))
        .unwrap()
        .softmax(1, &Tape::disabled())
        .unwrap();
    assert_eq!(single.to_vec(), direct.to_vec());
}

#[test]
fn save_load_roundtrip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model =
        Model::<f32>::build(&ModelSpec::mnist(ArchId::parse("pr-lenet5").unwrap()), 41).unwrap();
    model.set_normalization(&[0.13], &[0.31]);
    model.save(&path).unwrap();

    let loaded = Model::<f32>::load(&path).unwrap();
    assert_eq!(loaded.spec.arch.name(), "pr-lenet5");
    let x = rand_images(2, 1, 28, 28, 42);
    let pool = rand_images(10, 1, 28, 28, 43);
    let bank = PeerBank::sample(&pool, 6, 2).unwrap();
    let fa = model.precompute_bank(&bank).unwrap();
    let fb = loaded.precompute_bank(&bank).unwrap();
    let a = model.forward_eval(&x, Some(&fa)).unwrap();
    let b = loaded.forward_eval(&x, Some(&fb)).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
}

#[test]
fn resnet_forward_shapes_and_pr_variant() {
    let spec = ModelSpec::cifar(ArchId::parse("resnet20").unwrap(), 10);
    let model = Model::<f32>::build(&spec, 51).unwrap();
    let x = rand_images(2, 3, 32, 32, 52);
    let logits = model.forward_eval(&x, None).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);

    let spec = ModelSpec::cifar(ArchId::parse("pr-resnet20").unwrap(), 10);
    let model = Model::<f32>::build(&spec, 53).unwrap();
    let pool = rand_images(8, 3, 32, 32, 54);
    let bank = PeerBank::sample(&pool, 5, 3).unwrap();
    let features = model.precompute_bank(&bank).unwrap();
    assert_eq!(features.per_layer.len(), 2);
    // PR features live at the 8x8 stage-3 resolution.
    assert_eq!(features.per_layer[0].pixels_per_image(), 64);
    let logits = model.forward_eval(&x, Some(&features)).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);
}
