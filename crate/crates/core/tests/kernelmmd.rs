use iman_core::kernelmmd::{
    median_heuristic, mmd2_biased, mmd2_multilayer, mmd2_unbiased, rbf_kernel_matrix,
    AdaptationConfig, KernelSpec, DEFAULT_BANDWIDTH_SCALES,
};
use iman_core::numcore::SeedRng;
use iman_core::Matrix;
use proptest::prelude::*;

fn sample(seed: u64, n: usize, d: usize, shift: f64) -> Matrix {
    let mut rng = SeedRng::new(seed);
    Matrix::from_fn(n, d, |_, _| rng.normal() + shift)
}

fn kernel_sum(a: &Matrix, b: &Matrix, bw: f64, skip_diag: bool) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            if skip_diag && i == j {
                continue;
            }
            let d2: f64 = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            s += (-d2 / (2.0 * bw)).exp();
        }
    }
    s
}

proptest! {
    #[test]
    fn biased_mmd_is_symmetric_and_non_negative(seed in 0u64..10_000, n in 2usize..15, m in 2usize..15, shift in 0.0f64..2.0) {
        let x = sample(seed, n, 3, 0.0);
        let y = sample(seed + 1, m, 3, shift);
        let spec = KernelSpec::from_median_heuristic(&x, &y, &DEFAULT_BANDWIDTH_SCALES).unwrap();
        let xy = mmd2_biased(&x, &y, &spec).unwrap();
        let yx = mmd2_biased(&y, &x, &spec).unwrap();
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!(xy >= 0.0);
    }

    #[test]
    fn estimators_match_kernel_sums(seed in 0u64..10_000, n in 2usize..10, m in 2usize..10, bw in 0.1f64..5.0) {
        let x = sample(seed, n, 2, 0.0);
        let y = sample(seed + 7, m, 2, 0.5);
        let spec = KernelSpec::single(bw).unwrap();
        let (nf, mf) = (n as f64, m as f64);
        let biased = kernel_sum(&x, &x, bw, false) / (nf * nf) + kernel_sum(&y, &y, bw, false) / (mf * mf)
            - 2.0 * kernel_sum(&x, &y, bw, false) / (nf * mf);
        let unbiased = kernel_sum(&x, &x, bw, true) / (nf * (nf - 1.0)) + kernel_sum(&y, &y, bw, true) / (mf * (mf - 1.0))
            - 2.0 * kernel_sum(&x, &y, bw, false) / (nf * mf);
        prop_assert!((mmd2_biased(&x, &y, &spec).unwrap() - biased.max(0.0)).abs() < 1e-12);
        prop_assert!((mmd2_unbiased(&x, &y, &spec).unwrap() - unbiased).abs() < 1e-12);
    }

    #[test]
    fn kernel_matrix_entries_lie_in_unit_interval(seed in 0u64..10_000, bw in 0.01f64..10.0) {
        let x = sample(seed, 6, 2, 0.0);
        let y = sample(seed + 3, 4, 2, 1.0);
        let k = rbf_kernel_matrix(&x, &y, bw).unwrap();
        prop_assert!(k.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn median_heuristic_matches_brute_force() {
    let x = sample(1, 30, 2, 0.0);
    let y = sample(2, 20, 2, 1.0);
    let all = x.vstack(&y).unwrap();
    let mut d2 = Vec::new();
    for i in 0..all.rows() {
        for j in i + 1..all.rows() {
            d2.push(
                all.row(i)
                    .iter()
                    .zip(all.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>(),
            );
        }
    }
    d2.sort_by(f64::total_cmp);
    let k = d2.len();
    let want = if k % 2 == 1 {
        d2[k / 2]
    } else {
        (d2[k / 2 - 1] + d2[k / 2]) / 2.0
    };
    assert!((median_heuristic(&x, &y).unwrap() - want).abs() < 1e-12);
}

#[test]
fn shifted_distributions_separate_clearly() {
    let spec = KernelSpec::multiscale(1.0, &DEFAULT_BANDWIDTH_SCALES).unwrap();
    let x = sample(10, 200, 2, 0.0);
    let same = mmd2_biased(&x, &sample(11, 200, 2, 0.0), &spec).unwrap();
    let far = mmd2_biased(&x, &sample(12, 200, 2, 3.0), &spec).unwrap();
    assert!(far > 5.0 * same, "{far} vs {same}");
    let far_u = mmd2_unbiased(&x, &sample(12, 200, 2, 3.0), &spec).unwrap();
    let same_u = mmd2_unbiased(&x, &sample(11, 200, 2, 0.0), &spec).unwrap();
    assert!(far_u > 5.0 * same_u.abs());
}

#[test]
fn multilayer_is_the_sum_of_layers() {
    let (s1, t1) = (sample(1, 10, 3, 0.0), sample(2, 12, 3, 0.5));
    let (s2, t2) = (sample(3, 10, 2, 0.0), sample(4, 12, 2, 1.0));
    let k1 = KernelSpec::from_median_heuristic(&s1, &t1, &DEFAULT_BANDWIDTH_SCALES).unwrap();
    let k2 = KernelSpec::from_median_heuristic(&s2, &t2, &DEFAULT_BANDWIDTH_SCALES).unwrap();
    let cfg = AdaptationConfig::new(vec![0, 1], vec![k1.clone(), k2.clone()]).unwrap();
    let got = mmd2_multilayer(&[s1.clone(), s2.clone()], &[t1.clone(), t2.clone()], &cfg).unwrap();
    let want = mmd2_biased(&s1, &t1, &k1).unwrap() + mmd2_biased(&s2, &t2, &k2).unwrap();
    assert!((got - want).abs() < 1e-12);
}
