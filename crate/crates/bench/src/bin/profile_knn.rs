// Scratch micro-profile of the KNN hot path.
use peerlab_core::knn::{build_test_graph, build_train_graph, FeatureMap, FeatureSet};
use peerlab_core::rng::seeded;
use rand::Rng as _;
use std::time::Instant;

fn random_set(images: usize, n: usize, d: usize, seed: u64) -> FeatureSet<f32> {
    let mut rng = seeded(seed);
    let maps = (0..images)
        .map(|i| {
            let pixels: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            FeatureMap::new(i, n, d, pixels).unwrap()
        })
        .collect();
    FeatureSet::from_maps(maps).unwrap()
}

fn main() {
    // Train-shape: 32 images x 576 px x 6 ch, self peers, drop 0.2
    let set = random_set(32, 576, 6, 1);
    let t = Instant::now();
    let g = build_train_graph(&set, 10, 0.2, &mut seeded(2)).unwrap();
    println!("train graph 32x576x6 drop0.2: {:.2}s ({} recs)", t.elapsed().as_secs_f64(), g.neighbors.len());

    let t = Instant::now();
    let g = build_train_graph(&set, 10, 0.0, &mut seeded(2)).unwrap();
    println!("train graph 32x576x6 drop0.0: {:.2}s ({} recs)", t.elapsed().as_secs_f64(), g.neighbors.len());

    // Eval-shape: 100 queries x 576 px vs 50 peers x 576 px
    let q = random_set(100, 576, 6, 3);
    let p = random_set(50, 576, 6, 4);
    let t = Instant::now();
    let g = build_test_graph(&q, &p, 10).unwrap();
    println!("test graph 100q vs 50p: {:.2}s ({} recs)", t.elapsed().as_secs_f64(), g.neighbors.len());
}
