use iman_core::dataio::{Dataset, Domain};
use iman_core::evalkit::{
    all_pairs, projection_2d, score_pairs, select_difficult_from, select_difficult_pairs,
    tenfold_accuracy, Pair, PairList, Provenance,
};
use iman_core::numcore::SeedRng;
use iman_core::Matrix;
use proptest::prelude::*;

fn embeddings(seed: u64, n: usize, d: usize) -> Matrix {
    let mut rng = SeedRng::new(seed);
    Matrix::from_fn(n, d, |_, _| rng.normal())
}

fn labels(seed: u64, n: usize, classes: usize) -> Vec<usize> {
    let mut rng = SeedRng::new(seed);
    (0..n).map(|_| rng.below(classes)).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn keys(p: &PairList) -> Vec<(usize, usize, bool)> {
    p.pairs()
        .iter()
        .map(|q| (q.a.min(q.b), q.a.max(q.b), q.same))
        .collect()
}

/// Dominant eigenvalues of a symmetric PSD matrix by power iteration with
/// deflation.
fn top_eigenvalues(mut a: Vec<Vec<f64>>, k: usize) -> Vec<f64> {
    let n = a.len();
    let mut out = Vec::new();
    for _ in 0..k {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| a[i][j] * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            v = w.iter().map(|x| x / norm).collect();
            lambda = norm;
        }
        out.push(lambda);
        for i in 0..n {
            for j in 0..n {
                a[i][j] -= lambda * v[i] * v[j];
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn difficult_selection_ignores_candidate_order(seed in 0u64..10_000, k_pos in 1usize..6, k_neg in 1usize..6) {
        let (n, emb, lab) = (16, embeddings(seed, 16, 3), labels(seed + 1, 16, 3));
        let all = all_pairs(&lab);
        prop_assume!(all.genuine_count() >= k_pos && all.len() - all.genuine_count() >= k_neg);
        let mut shuffled: Vec<Pair> = all.pairs().to_vec();
        SeedRng::new(seed + 2).shuffle(&mut shuffled);
        // swap endpoints as well
        let shuffled: Vec<Pair> = shuffled.into_iter().enumerate()
            .map(|(i, p)| if i % 2 == 0 { Pair { a: p.b, b: p.a, same: p.same } } else { p })
            .collect();
        let shuffled = PairList::new(shuffled, Provenance::AllPairs, n).unwrap();
        let a = select_difficult_from(&emb, &all, k_pos, k_neg).unwrap();
        let b = select_difficult_from(&emb, &shuffled, k_pos, k_neg).unwrap();
        prop_assert_eq!(keys(&a), keys(&b));
    }

    #[test]
    fn difficult_selection_matches_full_sort(seed in 0u64..10_000, k_pos in 1usize..6, k_neg in 1usize..6) {
        let (emb, lab) = (embeddings(seed, 14, 2), labels(seed + 1, 14, 3));
        let all = all_pairs(&lab);
        prop_assume!(all.genuine_count() >= k_pos && all.len() - all.genuine_count() >= k_neg);
        let mut gen: Vec<(f64, usize, usize)> = Vec::new();
        let mut imp: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..14 {
            for j in i + 1..14 {
                let s = cosine(emb.row(i), emb.row(j));
                if lab[i] == lab[j] { gen.push((s, i, j)) } else { imp.push((-s, i, j)) }
            }
        }
        gen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        imp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<(usize, usize, bool)> = gen[..k_pos].iter().map(|&(_, i, j)| (i, j, true))
            .chain(imp[..k_neg].iter().map(|&(_, i, j)| (i, j, false)))
            .collect();
        want.sort_unstable();
        let got = select_difficult_pairs(&emb, &lab, k_pos, k_neg).unwrap();
        let mut got = keys(&got);
        got.sort_unstable();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn tenfold_ignores_a_constant_shift(seed in 0u64..10_000, n in 10usize..80, shift in -0.5f64..0.5) {
        let mut rng = SeedRng::new(seed);
        // quarter-unit grid keeps shifted midpoints exact
        let scores: Vec<f64> = (0..n).map(|_| rng.below(16) as f64 / 4.0).collect();
        let same: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        let shift = (shift * 4.0).round() / 4.0;
        let moved: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let a = tenfold_accuracy(&scores, &same).unwrap();
        let b = tenfold_accuracy(&moved, &same).unwrap();
        prop_assert_eq!(a.fold_accuracies, b.fold_accuracies);
    }

    #[test]
    fn tenfold_mean_lies_within_folds(seed in 0u64..10_000, n in 10usize..200) {
        let mut rng = SeedRng::new(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let same: Vec<bool> = scores.iter().map(|s| rng.uniform() < *s).collect();
        let r = tenfold_accuracy(&scores, &same).unwrap();
        let lo = r.fold_accuracies.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.fold_accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-12 <= r.mean && r.mean <= hi + 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.mean));
    }

    #[test]
    fn projection_variance_matches_eigen_oracle(seed in 0u64..10_000, n in 6usize..40) {
        let mut rng = SeedRng::new(seed);
        let scales = [3.0, 2.0, 1.0, 0.5, 0.25];
        let x = Matrix::from_fn(n, 5, |_, j| scales[j] * rng.normal());
        let proj = projection_2d(&x).unwrap();
        let mean: Vec<f64> = (0..5).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
        let cov: Vec<Vec<f64>> = (0..5).map(|a| (0..5).map(|b| {
            (0..n).map(|i| (x.get(i, a) - mean[a]) * (x.get(i, b) - mean[b])).sum::<f64>() / (n - 1) as f64
        }).collect()).collect();
        let trace: f64 = (0..5).map(|i| cov[i][i]).sum();
        let top = top_eigenvalues(cov, 2);
        let want = (top[0] + top[1]) / trace;
        prop_assert!((proj.retained_variance - want).abs() < 1e-6, "{} vs {}", proj.retained_variance, want);
        // coordinate variances are the top eigenvalues
        for (c, lam) in top.iter().enumerate() {
            let var = (0..n).map(|i| proj.coords.get(i, c).powi(2)).sum::<f64>() / (n - 1) as f64;
            prop_assert!((var - lam).abs() < 1e-6 * lam.max(1.0));
        }
    }
}

#[test]
fn scores_match_direct_formula() {
    let emb = embeddings(4, 30, 4);
    let mut rng = SeedRng::new(5);
    let mut pairs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    while pairs.len() < 50 {
        let (a, b) = (rng.below(30), rng.below(30));
        if a != b && seen.insert((a.min(b), a.max(b))) {
            pairs.push(Pair {
                a,
                b,
                same: rng.uniform() < 0.5,
            });
        }
    }
    let list = PairList::new(pairs, Provenance::Sampled, 30).unwrap();
    let got = score_pairs(&emb, &list).unwrap();
    for (p, s) in list.pairs().iter().zip(got) {
        assert!((s - cosine(emb.row(p.a), emb.row(p.b))).abs() < 1e-12);
    }
}

#[test]
fn pair_csv_round_trip() {
    let lab = labels(6, 12, 3);
    let ids: Vec<u64> = (0..12).map(|i| 100 + 7 * i).collect();
    let data = Dataset::new(ids.clone(), embeddings(6, 12, 2), None, Domain::Target).unwrap();
    let pairs = all_pairs(&lab);
    let back = PairList::from_csv_str(&pairs.to_csv_string(&ids), &data).unwrap();
    assert_eq!(keys(&back), keys(&pairs));
    assert!(PairList::from_csv_str("id_a,id_b,same\n100,999,1\n", &data).is_err());
}

#[test]
fn all_pairs_covers_every_unordered_pair() {
    let pairs = all_pairs(&[0, 0, 1, 1, 2]);
    assert_eq!(pairs.len(), 10);
    assert_eq!(pairs.genuine_count(), 2);
}
