use kpc::data::{Column, Dataset, MetricSpec, VariableRoles};
use kpc::graph::GraphSpec;
use kpc::inference::{
    crt_pvalue, crt_pvalue_from_stats, gaussian_knockoffs, knockoff_select, knockoff_w, CrtStatistic, GaussianLinear,
    KnockoffInput, KnockoffStat, UniformAdditive,
};
use kpc::kernels::{Bandwidth, KernelSpec};
use kpc::sim::{simulate, SimModel, SimSpec};
use kpc::KpcError;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn roles() -> VariableRoles {
    VariableRoles::new(vec![2], vec![1], vec![0])
}

fn graph_stat() -> CrtStatistic {
    let g = GraphSpec::knn(1, 0);
    CrtStatistic::Graph { kernel: KernelSpec::gaussian_median(), graph_x: g, graph_xz: g, metric: MetricSpec::euclidean() }
}

#[test]
fn pvalue_formula() {
    let ds = simulate(&SimSpec::new(SimModel::CrtAdditive { gamma: 0.0 }, 50, 1)).unwrap();
    let sampler = UniformAdditive { coef: vec![1.0], half_width: 1.0 };
    let r = crt_pvalue(&ds, &roles(), &graph_stat(), &sampler, 0, 3).unwrap();
    assert_eq!((r.pvalue, r.b), (1.0, 0));
    assert!(r.null_statistics.is_empty());

    let nulls: Vec<f64> = (0..19).map(|i| -1.0 + 0.05 * i as f64).collect();
    assert_eq!(crt_pvalue_from_stats(0.5, &nulls), 0.05);
    // ties count against the observed statistic
    assert_eq!(crt_pvalue_from_stats(0.5, &[0.5, 0.1, 0.9]), 0.75);
}

#[test]
fn crt_is_deterministic_and_checks_the_sampler() {
    let ds = simulate(&SimSpec::new(SimModel::CrtAdditive { gamma: 0.5 }, 60, 2)).unwrap();
    let sampler = UniformAdditive { coef: vec![1.0], half_width: 1.0 };
    let stat = CrtStatistic::default_rkhs();
    let a = crt_pvalue(&ds, &roles(), &stat, &sampler, 19, 8).unwrap();
    let b = crt_pvalue(&ds, &roles(), &stat, &sampler, 19, 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.null_statistics.len(), 19);
    let two = VariableRoles::new(vec![2], vec![0, 1], vec![]);
    assert!(matches!(crt_pvalue(&ds, &two, &stat, &sampler, 5, 8), Err(KpcError::SizeMismatch { .. })));
}

#[test]
fn crt_is_super_uniform_under_the_null() {
    let reps = 500u64;
    let sampler = UniformAdditive { coef: vec![1.0], half_width: 1.0 };
    let ps: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let ds = simulate(&SimSpec::new(SimModel::CrtAdditive { gamma: 0.0 }, 100, 30_000 + r)).unwrap();
            crt_pvalue(&ds, &roles(), &graph_stat(), &sampler, 99, r).unwrap().pvalue
        })
        .collect();
    for alpha in [0.01, 0.05, 0.1] {
        let rate = ps.iter().filter(|&&p| p <= alpha).count() as f64 / reps as f64;
        let mc = (alpha * (1.0 - alpha) / reps as f64).sqrt();
        assert!(rate <= alpha + 2.0 * mc, "α = {alpha}: rate {rate}");
    }
}

#[test]
fn crt_has_power_with_gaussian_sampler() {
    // Z = X + N(0,1), Y depends on Z
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100;
    let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let z: Vec<f64> = x.iter().map(|v| v + normal(&mut rng)).collect();
    let y: Vec<f64> = z.iter().map(|v| v + 0.3 * normal(&mut rng)).collect();
    let ds = Dataset::new(vec![Column::numeric("x", x), Column::numeric("z", z), Column::numeric("y", y)]).unwrap();
    let sampler = GaussianLinear { intercept: 0.0, coef: vec![1.0], sd: 1.0 };
    let r = crt_pvalue(&ds, &roles(), &CrtStatistic::default_rkhs(), &sampler, 49, 1).unwrap();
    assert_eq!(r.pvalue, 0.02);
}

fn ar_cov(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

fn gaussian_rows(n: usize, cov: &DMatrix<f64>, seed: u64) -> DMatrix<f64> {
    let l = cov.clone().cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = DMatrix::from_fn(n, cov.nrows(), |_, _| normal(&mut rng));
    e * l.transpose()
}

fn knock_stats() -> Vec<KnockoffStat> {
    vec![
        KnockoffStat::Graph { kernel_y: KernelSpec::gaussian_median(), k: 2, seed: 4 },
        KnockoffStat::Rkhs { kernel_y: KernelSpec::gaussian_median(), kernel_x: KernelSpec::Gaussian(Bandwidth::Fixed(2.0)), eps: 1e-3 },
        KnockoffStat::Rkhs { kernel_y: KernelSpec::Linear, kernel_x: KernelSpec::Linear, eps: 1e-3 },
    ]
}

#[test]
fn identical_knockoffs_give_zero() {
    let cov = ar_cov(4, 0.4);
    let x = gaussian_rows(40, &cov, 1);
    let y: Vec<f64> = (0..40).map(|i| x[(i, 0)] - x[(i, 2)]).collect();
    let ki = KnockoffInput::new(x.clone(), x, y, 0.2).unwrap();
    for stat in knock_stats() {
        assert!(knockoff_w(&ki, &stat).unwrap().iter().all(|w| *w == 0.0), "{stat:?}");
    }
}

#[test]
fn swap_flips_one_sign_exactly() {
    let cov = ar_cov(4, 0.3);
    let x = gaussian_rows(50, &cov, 2);
    let xk = gaussian_knockoffs(&x, &[0.0; 4], &cov, 9).unwrap();
    let y: Vec<f64> = (0..50).map(|i| x[(i, 1)].sin() + 0.5 * x[(i, 3)]).collect();
    let ki = KnockoffInput::new(x, xk, y, 0.2).unwrap();
    for stat in knock_stats() {
        let w = knockoff_w(&ki, &stat).unwrap();
        for j in 0..4 {
            let ws = knockoff_w(&ki.swap(j), &stat).unwrap();
            for k in 0..4 {
                let want = if k == j { -w[k] } else { w[k] };
                assert_eq!(ws[k].to_bits(), want.to_bits(), "{stat:?}: swap {j}, coordinate {k}");
            }
        }
    }
}

#[test]
fn signal_coordinates_have_positive_mean_w() {
    let p = 5;
    let cov = ar_cov(p, 0.3);
    let reps = 20u64;
    for stat in knock_stats() {
        let sums = (0..reps)
            .into_par_iter()
            .map(|r| {
                let x = gaussian_rows(150, &cov, 100 + r);
                let xk = gaussian_knockoffs(&x, &vec![0.0; p], &cov, 200 + r).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(300 + r);
                let y: Vec<f64> =
                    (0..150).map(|i| 2.0 * x[(i, 0)] + x[(i, 1)] + 0.5 * normal(&mut rng)).collect();
                knockoff_w(&KnockoffInput::new(x, xk, y, 0.2).unwrap(), &stat).unwrap()
            })
            .reduce(|| vec![0.0; p], |a, b| a.iter().zip(&b).map(|(u, v)| u + v).collect());
        assert!(sums[0] > 0.0 && sums[1] > 0.0, "{stat:?}: {sums:?}");
    }
}

#[test]
fn knockoff_config_checks() {
    let x = gaussian_rows(10, &ar_cov(2, 0.0), 3);
    assert!(KnockoffInput::new(x.clone(), x.clone(), vec![0.0; 10], 1.0).is_err());
    assert!(KnockoffInput::new(x.clone(), x.clone(), vec![0.0; 9], 0.1).is_err());
    let ki = KnockoffInput::new(x.clone(), x, (0..10).map(|i| i as f64).collect(), 0.1).unwrap();
    let median = KnockoffStat::Rkhs { kernel_y: KernelSpec::Linear, kernel_x: KernelSpec::gaussian_median(), eps: 1e-3 };
    assert!(matches!(knockoff_w(&ki, &median), Err(KpcError::AsymmetricConfig(_))));
}

#[test]
fn selection_examples() {
    let w = [3.0, -1.0, 2.0, -2.0, 1.0];
    let s = knockoff_select(&w, 0.5, false);
    assert_eq!((s.threshold, s.selected), (Some(2.0), vec![0, 2]));
    let s = knockoff_select(&w, 0.5, true);
    assert_eq!((s.threshold, s.selected), (None, vec![]));
    assert!(knockoff_select(&[-1.0, -0.5, -3.0], 0.9, false).selected.is_empty());
    assert!(knockoff_select(&[0.0, 0.0], 0.9, false).selected.is_empty());
}

proptest! {
    #[test]
    fn selection_monotone_in_q(w in prop::collection::vec(-5i32..=5, 1..30), q1 in 0.01f64..0.99, q2 in 0.01f64..0.99) {
        let w: Vec<f64> = w.into_iter().map(f64::from).collect();
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        for plus in [false, true] {
            let a = knockoff_select(&w, lo, plus).selected;
            let b = knockoff_select(&w, hi, plus).selected;
            prop_assert!(a.iter().all(|j| b.contains(j)), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn plus_is_a_subset(w in prop::collection::vec(-5.0f64..5.0, 1..30), q in 0.01f64..0.99) {
        let plus = knockoff_select(&w, q, true).selected;
        let plain = knockoff_select(&w, q, false).selected;
        prop_assert!(plus.iter().all(|j| plain.contains(j)));
    }
}

#[test]
fn knockoff_moments() {
    let p = 3;
    let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, 0.3, 0.6, 1.0, 0.4, 0.3, 0.4, 1.5]);
    let n = 20_000;
    let mean = [1.0, -2.0, 0.5];
    let mut x = gaussian_rows(n, &cov, 6);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] += mean[j];
        }
    }
    let xk = gaussian_knockoffs(&x, &mean, &cov, 7).unwrap();
    let col_mean = |m: &DMatrix<f64>, j: usize| m.column(j).sum() / n as f64;
    let cross = |a: &DMatrix<f64>, b: &DMatrix<f64>, j: usize, k: usize| {
        let (ma, mb) = (col_mean(a, j), col_mean(b, k));
        (0..n).map(|i| (a[(i, j)] - ma) * (b[(i, k)] - mb)).sum::<f64>() / (n - 1) as f64
    };
    // Monte Carlo sd of a covariance estimate is about sqrt(σ_jj σ_kk / n) ≤ 0.015 here
    let tol = 0.06;
    for j in 0..p {
        assert!((col_mean(&xk, j) - mean[j]).abs() < tol);
        for k in 0..p {
            assert!((cross(&xk, &xk, j, k) - cov[(j, k)]).abs() < tol, "knockoff cov {j}{k}");
            if j != k {
                assert!((cross(&x, &xk, j, k) - cov[(j, k)]).abs() < tol, "cross cov {j}{k}");
            }
        }
    }
    assert_eq!(xk, gaussian_knockoffs(&x, &mean, &cov, 7).unwrap());
    assert_ne!(xk, gaussian_knockoffs(&x, &mean, &cov, 8).unwrap());
}

#[test]
fn identity_covariance_knockoffs_ignore_x() {
    let id = DMatrix::identity(3, 3);
    let a = gaussian_rows(5, &id, 1);
    let b = a.map(|v| v * 10.0 + 3.0);
    assert_eq!(gaussian_knockoffs(&a, &[0.0; 3], &id, 2).unwrap(), gaussian_knockoffs(&b, &[0.0; 3], &id, 2).unwrap());
    let singular = DMatrix::from_element(2, 2, 1.0);
    let x = DMatrix::zeros(3, 2);
    assert!(matches!(gaussian_knockoffs(&x, &[0.0; 2], &singular, 1), Err(KpcError::NotPositiveDefinite)));
}
