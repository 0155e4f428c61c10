use iman_core::clusterer::{
    cluster_pipeline, connected_components, cosine_similarity_matrix, make_pseudolabels,
    rand_index, ClusterConfig, PseudoLabeling,
};
use iman_core::numcore::SeedRng;
use iman_core::Matrix;
use proptest::prelude::*;

fn features(seed: u64, n: usize, d: usize) -> Matrix {
    let mut rng = SeedRng::new(seed);
    Matrix::from_fn(n, d, |_, _| rng.normal())
}

/// Partition as a sorted list of sorted member lists; abandoned samples are
/// left out.
fn canonical(p: &PseudoLabeling) -> Vec<Vec<usize>> {
    let mut c = p.clusters();
    c.iter_mut().for_each(|m| m.sort_unstable());
    c.sort();
    c
}

proptest! {
    #[test]
    fn clustering_is_permutation_equivariant(seed in 0u64..10_000, n in 2usize..40, lambda in -0.5f64..0.95, p in 1usize..4) {
        let x = features(seed, n, 3);
        let perm = SeedRng::new(seed ^ 1).permutation(n);
        let xp = x.select_rows(&perm);
        let cfg = ClusterConfig::new(lambda, p).unwrap();
        let a = cluster_pipeline(&x, &cfg).unwrap();
        let b = cluster_pipeline(&xp, &cfg).unwrap();
        // row k of xp is sample perm[k] of x
        let mapped: Vec<Vec<usize>> = b.clusters().into_iter().map(|c| c.into_iter().map(|k| perm[k]).collect()).collect();
        let mut mapped: Vec<Vec<usize>> = mapped.into_iter().map(|mut c| { c.sort_unstable(); c }).collect();
        mapped.sort();
        prop_assert_eq!(canonical(&a), mapped);
    }

    #[test]
    fn assignment_partitions_the_samples(seed in 0u64..10_000, n in 1usize..50, lambda in -0.9f64..0.99, p in 1usize..6) {
        let x = features(seed, n, 4);
        let cfg = ClusterConfig::new(lambda, p).unwrap();
        let pl = cluster_pipeline(&x, &cfg).unwrap();
        let mut all: Vec<usize> = pl.assigned();
        all.extend(pl.abandoned());
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(pl.assigned_count() + pl.abandoned_count(), n);
        let clusters = pl.clusters();
        prop_assert_eq!(clusters.len(), pl.n_clusters());
        for c in &clusters {
            prop_assert!(c.len() >= p);
        }
        // ids go by descending size
        prop_assert!(clusters.windows(2).all(|w| w[0].len() >= w[1].len()));
    }

    #[test]
    fn csv_round_trip(seed in 0u64..10_000, n in 1usize..40, p in 1usize..4) {
        let pl = cluster_pipeline(&features(seed, n, 3), &ClusterConfig::new(0.5, p).unwrap()).unwrap();
        let mut buf = Vec::new();
        pl.write_csv(&mut buf).unwrap();
        let back = PseudoLabeling::from_csv_str(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back, pl);
    }

    #[test]
    fn rand_index_matches_pair_count(a in prop::collection::vec(0usize..4, 2..30), seed in 0u64..1000) {
        let mut rng = SeedRng::new(seed);
        let b: Vec<usize> = a.iter().map(|&v| if rng.uniform() < 0.3 { rng.below(4) } else { v }).collect();
        let n = a.len();
        let mut agree = 0;
        for i in 0..n {
            for j in i + 1..n {
                if (a[i] == a[j]) == (b[i] == b[j]) {
                    agree += 1;
                }
            }
        }
        let want = agree as f64 / (n * (n - 1) / 2) as f64;
        prop_assert!((rand_index(&a, &b) - want).abs() < 1e-12);
    }

    #[test]
    fn cosine_matrix_matches_direct_formula(seed in 0u64..10_000) {
        let x = features(seed, 20, 3);
        let s = cosine_similarity_matrix(&x).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let (a, b) = (x.row(i), x.row(j));
                let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((s.get(i, j) - dot / (na * nb)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn separated_blobs_recover_membership() {
    let mut rng = SeedRng::new(3);
    let x = Matrix::from_fn(20, 2, |i, j| {
        let center = if i < 10 { [1.0, 0.0] } else { [0.0, 1.0] };
        center[j] + 0.02 * rng.normal()
    });
    let pl = cluster_pipeline(&x, &ClusterConfig::new(0.5, 2).unwrap()).unwrap();
    assert_eq!(
        canonical(&pl),
        vec![(0..10).collect::<Vec<_>>(), (10..20).collect()]
    );
}

#[test]
fn threshold_extremes() {
    let x = features(8, 30, 5);
    let everything = cluster_pipeline(&x, &ClusterConfig::new(-1.0 + 1e-9, 2).unwrap()).unwrap();
    assert_eq!(everything.n_clusters(), 1);
    assert_eq!(everything.assigned_count(), 30);
    let nothing = cluster_pipeline(&x, &ClusterConfig::new(1.0 - 1e-9, 2).unwrap()).unwrap();
    assert_eq!(nothing.n_clusters(), 0);
    assert_eq!(nothing.abandoned_count(), 30);
}

#[test]
fn size_filter_orders_by_size() {
    let comps = vec![vec![0, 1], vec![2, 3, 4, 5, 6], vec![7, 8, 9]];
    let pl = make_pseudolabels(&comps, &ClusterConfig::new(0.6, 3).unwrap());
    assert_eq!(pl.label_of(2), Some(0));
    assert_eq!(pl.label_of(7), Some(1));
    assert_eq!(pl.abandoned(), vec![0, 1]);
    assert_eq!(connected_components(&[], 3).unwrap().len(), 3);
}
