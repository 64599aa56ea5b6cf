// Scratch timing calibration for the PR variant (not part of the test suite).
use peerlab_core::data::{load_mnist, Split};
use peerlab_core::models::{ArchId, Model, ModelSpec};
use peerlab_core::train::{evaluate, train, EvalConfig, TrainConfig};
use std::time::Instant;

fn main() {
    let root = peerlab_core::data::data_root().join("mnist");
    let train_full = load_mnist::<f32>(&root, Split::Train).unwrap();
    let mut test_full = load_mnist::<f32>(&root, Split::Test).unwrap();
    test_full.adopt_stats(&train_full);

    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let eval_n: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(200);
    let m: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let train_ds = train_full.subset_stratified(n, 1).unwrap();
    let test_ds = test_full.subset_stratified(eval_n, 2).unwrap();

    let spec = ModelSpec::mnist(ArchId::parse("pr-lenet5").unwrap());
    let model = Model::<f32>::build(&spec, 3).unwrap();
    model.set_normalization(&train_ds.mean, &train_ds.std);
    let cfg = TrainConfig { epochs, batch_size: 32, lr: 1e-3, seed: 4, ..Default::default() };
    let t0 = Instant::now();
    let log = train(&model, &train_ds, None, &cfg, None).unwrap();
    println!("PR train {n}x{epochs}: {:.1}s total ({:.2}s/batch)", t0.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64() / (epochs as f64 * (n as f64/32.0)));
    for row in &log { println!("  epoch {} {} loss {:.4} acc {:.4}", row.epoch, row.split, row.loss, row.accuracy); }
    let t1 = Instant::now();
    let ec = EvalConfig { bank_n: 50, mc_runs: m, seed: 7, batch_size: 100, max_examples: None };
    let out = evaluate(&model, &test_ds, Some(&train_ds.images), &ec).unwrap();
    println!("PR eval({eval_n}, M={m}): {:.1}s  accuracy {:.4}", t1.elapsed().as_secs_f64(), out.accuracy);
}
