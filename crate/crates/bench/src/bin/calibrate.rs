// Scratch timing calibration (not part of the test suite).
use peerlab_core::data::{load_mnist, Split};
use peerlab_core::models::{ArchId, Model, ModelSpec};
use peerlab_core::train::{evaluate, train, EvalConfig, TrainConfig};
use std::time::Instant;

fn main() {
    let root = peerlab_core::data::data_root().join("mnist");
    let train_full = load_mnist::<f32>(&root, Split::Train).unwrap();
    let mut test_full = load_mnist::<f32>(&root, Split::Test).unwrap();
    test_full.adopt_stats(&train_full);

    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let train_ds = train_full.subset_stratified(n, 1).unwrap();
    let test_ds = test_full.subset_stratified(1000, 2).unwrap();

    let model = Model::<f32>::build(&ModelSpec::mnist(ArchId::parse("lenet5").unwrap()), 3).unwrap();
    model.set_normalization(&train_ds.mean, &train_ds.std);
    let cfg = TrainConfig { epochs, batch_size: 32, lr: 1e-3, seed: 4, ..Default::default() };
    let t0 = Instant::now();
    let log = train(&model, &train_ds, None, &cfg, None).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    for row in &log {
        println!("epoch {} {} loss {:.4} acc {:.4} ({:.1}s)", row.epoch, row.split, row.loss, row.accuracy, row.wall_seconds);
    }
    let t1 = Instant::now();
    let out = evaluate(&model, &test_ds, None, &EvalConfig::default()).unwrap();
    println!("train {:.1}s total; eval(1000) {:.3}s: accuracy {:.4}", train_time, t1.elapsed().as_secs_f64(), out.accuracy);
}
