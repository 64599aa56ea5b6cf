//! Brute-force oracles for the KNN graph: a naive O(n^2 d) pairwise cosine
//! loop and an exhaustive full-sort selection, both independent of the
//! production kernels.

use peerlab_core::knn::{
    build_test_graph, build_train_graph, cosine_distance_matrix, knn_select, FeatureMap,
    FeatureSet,
};
use peerlab_core::rng::seeded;
use peerlab_core::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

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

fn cosine_oracle(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb + 1e-12)) as f32
}

#[test]
fn distance_matrix_matches_pairwise_oracle() {
    // 3-image batch of 4x4 maps with 8 channels.
    let set = random_set(3, 16, 8, 5);
    let d = cosine_distance_matrix(&set, &set).unwrap();
    for r in 0..set.rows() {
        for c in 0..set.rows() {
            let want = cosine_oracle(set.row(r), set.row(c));
            let got = d.data[r * set.rows() + c];
            assert!(
                (got - want).abs() < 1e-6,
                "entry ({r},{c}): {got} vs {want}"
            );
        }
    }
}

#[test]
fn knn_matches_exhaustive_sort_oracle() {
    // Instances up to 5 images x 8x8 pixels x 16 channels.
    for (images, n, d, seed) in [(2, 9, 4, 1u64), (3, 16, 8, 2), (5, 64, 16, 3)] {
        let set = random_set(images, n, d, seed);
        let dist = cosine_distance_matrix(&set, &set).unwrap();
        let k = 7.min(set.rows());
        let graph = knn_select(&dist, k, 0.0, &mut seeded(9)).unwrap();

        for row in 0..set.rows() {
            // Oracle: full sort of all candidates by (distance, image, pixel).
            let mut cands: Vec<(f32, usize, usize)> = (0..set.rows())
                .map(|j| (dist.data[row * set.rows() + j], j / n, j % n))
                .collect();
            cands.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let recs = &graph.neighbors[row * k..(row + 1) * k];
            for (i, rec) in recs.iter().enumerate() {
                assert_eq!(rec.image as usize, cands[i].1, "row {row} slot {i}");
                assert_eq!(rec.pixel as usize, cands[i].2, "row {row} slot {i}");
                assert!((rec.distance - cands[i].0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn train_graph_includes_self_and_matches_oracle() {
    let set = random_set(4, 9, 6, 11);
    let g = build_train_graph(&set, 1, 0.0, &mut seeded(0)).unwrap();
    // With K=1 and no dropout the nearest neighbor of every pixel is itself.
    for (row, rec) in g.neighbors.iter().enumerate() {
        assert_eq!(rec.image as usize, row / 9);
        assert_eq!(rec.pixel as usize, row % 9);
        assert!(rec.distance.abs() < 1e-5);
    }
}

#[test]
fn bank_features_pixel_layout() {
    // from_chw row p must be the channel vector at spatial position p.
    let t = Tensor::<f32>::from_vec(
        &[1, 2, 2, 2],
        vec![
            1.0, 2.0, 3.0, 4.0, // channel 0
            10.0, 20.0, 30.0, 40.0, // channel 1
        ],
    )
    .unwrap();
    let set = FeatureSet::from_chw(&t).unwrap();
    assert_eq!(set.dim(), 2);
    assert_eq!(set.row(0), &[1.0, 10.0]);
    assert_eq!(set.row(3), &[4.0, 40.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Cosine distances are invariant (within 1e-5) to positive rescaling of
    /// any single feature vector.
    #[test]
    fn distance_invariant_to_positive_rescale(
        seed in 0u64..1000,
        scale in 0.05f32..20.0,
        row_pick in 0usize..8,
    ) {
        let set = random_set(2, 4, 3, seed);
        let base = cosine_distance_matrix(&set, &set).unwrap();

        let mut rows: Vec<Vec<f32>> = (0..set.rows()).map(|r| set.row(r).to_vec()).collect();
        for v in rows[row_pick].iter_mut() {
            *v *= scale;
        }
        let maps = (0..2)
            .map(|i| {
                let mut pixels = Vec::new();
                for r in 0..4 {
                    pixels.extend_from_slice(&rows[i * 4 + r]);
                }
                FeatureMap::new(i, 4, 3, pixels).unwrap()
            })
            .collect();
        let scaled = FeatureSet::from_maps(maps).unwrap();
        let after = cosine_distance_matrix(&scaled, &scaled).unwrap();
        for (a, b) in base.data.iter().zip(&after.data) {
            prop_assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    /// Test graphs structurally reference only the peer set.
    #[test]
    fn test_graph_never_links_queries(seed in 0u64..500, k in 1usize..5) {
        let q = random_set(3, 4, 5, seed);
        let p = random_set(4, 4, 5, seed ^ 0xabcd);
        let g = build_test_graph(&q, &p, k).unwrap();
        for rec in &g.neighbors {
            prop_assert!((rec.image as usize) < p.images());
        }
        prop_assert_eq!(g.peer_images, p.images());
    }
}
