use kpc::data::{Column, Dataset, MetricSpec, VariableRoles};
use kpc::graph::{build_knn, GraphSpec};
use kpc::graph_est::{kpc_graph, t_n};
use kpc::kernels::{Bandwidth, KernelSpec};
use kpc::oracle::{population_rho2, Atom, DiscreteJoint};
use kpc::sim::{simulate, SimModel, SimSpec};
use kpc::KpcError;
use proptest::prelude::*;
use rayon::prelude::*;

fn xy(x: &[f64], y: &[f64]) -> Dataset {
    Dataset::new(vec![Column::numeric("x", x.to_vec()), Column::numeric("y", y.to_vec())]).unwrap()
}

fn roles() -> VariableRoles {
    VariableRoles::new(vec![2], vec![1], vec![0])
}

#[test]
fn t_n_examples() {
    let e = MetricSpec::euclidean();
    let ds = xy(&[0.0, 1.0, 10.0], &[1.0, 2.0, 3.0]);
    let g = build_knn(&GraphSpec::knn(1, 0), &ds, &[0], &e).unwrap();
    assert!((t_n(&ds, &[1], &KernelSpec::Linear, &g).unwrap() - 10.0 / 3.0).abs() < 1e-15);

    let ds = xy(&[0.0, 1.0, 10.0], &[0.0, 0.0, 1.0]);
    assert!((t_n(&ds, &[1], &KernelSpec::Discrete, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);

    let c = xy(&[0.0, 1.0, 10.0], &[0.7, 0.7, 0.7]);
    assert_eq!(t_n(&c, &[1], &KernelSpec::Gaussian(Bandwidth::Fixed(1.0)), &g).unwrap(), 1.0);

    let long = xy(&[0.0, 1.0, 10.0, 11.0], &[1.0, 2.0, 3.0, 4.0]);
    assert!(matches!(t_n(&long, &[1], &KernelSpec::Linear, &g), Err(KpcError::SizeMismatch { .. })));
}

#[test]
fn kpc_graph_examples() {
    let z = [0.0, 10.0, 0.0, 10.0];
    let y: Vec<f64> = z.iter().map(|&v| (v == 10.0) as u8 as f64).collect();
    let ds = Dataset::new(vec![
        Column::numeric("x", vec![0.0, 1.0, 2.1, 3.3]),
        Column::numeric("z", z.to_vec()),
        Column::numeric("y", y),
    ])
    .unwrap();
    let g = GraphSpec::knn(1, 0);
    let est = kpc_graph(&ds, &roles(), &KernelSpec::Discrete, &g, &g, &MetricSpec::product(), false).unwrap();
    assert_eq!((est.numerator, est.denominator, est.value), (1.0, 1.0, 1.0));
    assert_eq!(est.diagnostics["t_x"], 0.0);

    let x = vec![0.3, -1.2, 2.5, 0.9, -0.4];
    let copy = Dataset::new(vec![
        Column::numeric("x", x.clone()),
        Column::numeric("z", x),
        Column::numeric("y", vec![1.0, 0.5, -2.0, 3.0, 0.1]),
    ])
    .unwrap();
    let est = kpc_graph(&copy, &roles(), &KernelSpec::gaussian_median(), &g, &g, &MetricSpec::euclidean(), false).unwrap();
    assert_eq!(est.numerator, 0.0);
    assert_eq!(est.value, 0.0);

    // Y a function of X with a perfectly matching graph: no variance left
    let dead = Dataset::new(vec![
        Column::numeric("x", vec![0.0, 0.0, 5.0, 5.0]),
        Column::numeric("z", vec![1.0, 2.0, 3.0, 4.0]),
        Column::numeric("y", vec![1.0, 1.0, 2.0, 2.0]),
    ])
    .unwrap();
    let r = kpc_graph(&dead, &roles(), &KernelSpec::Discrete, &g, &g, &MetricSpec::euclidean(), false);
    assert!(matches!(r, Err(KpcError::DegenerateDenominator { .. })));

    let no_x = VariableRoles::new(vec![2], vec![1], vec![]);
    assert!(kpc_graph(&dead, &no_x, &KernelSpec::Discrete, &g, &g, &MetricSpec::euclidean(), false).is_err());
}

#[test]
fn clamping() {
    let ds = simulate(&SimSpec::new(SimModel::ModelV, 60, 3)).unwrap();
    let g = GraphSpec::knn(1, 3);
    let k = KernelSpec::So3;
    let raw = kpc_graph(&ds, &roles(), &k, &g, &g, &MetricSpec::euclidean(), false).unwrap();
    let cl = kpc_graph(&ds, &roles(), &k, &g, &g, &MetricSpec::euclidean(), true).unwrap();
    assert_eq!(cl.value, raw.value.clamp(0.0, 1.0));
    assert_eq!(cl.clamped, raw.value != cl.value);
    assert_eq!(cl.raw_value(), raw.value);
}

fn random_xyz(rows: &[(f64, f64, f64, f64)]) -> Dataset {
    Dataset::new(vec![
        Column::numeric("x", rows.iter().map(|r| r.0).collect()),
        Column::numeric("z", rows.iter().map(|r| r.1).collect()),
        Column::numeric("y1", rows.iter().map(|r| r.2).collect()),
        Column::numeric("y2", rows.iter().map(|r| r.3).collect()),
    ])
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn isometry_in_y_invariance(rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 4..40),
                                      shift in (-10.0f64..10.0, -10.0f64..10.0), swap in any::<bool>(), flip in any::<bool>()) {
        let ds = random_xyz(&rows);
        // swaps, sign flips and quarter-integer shifts: distances agree up to rounding of the shifted sums
        let (sx, sy) = ((shift.0 * 4.0).round() / 4.0, (shift.1 * 4.0).round() / 4.0);
        let sgn = if flip { -1.0 } else { 1.0 };
        let moved: Vec<(f64, f64, f64, f64)> = rows.iter().map(|r| {
            let (a, b) = if swap { (r.3, r.2) } else { (r.2, r.3) };
            (r.0, r.1, sgn * a + sx, b + sy)
        }).collect();
        let ds2 = random_xyz(&moved);
        let roles = VariableRoles::new(vec![2, 3], vec![1], vec![0]);
        let g = GraphSpec::knn(2, 9);
        for k in [KernelSpec::Gaussian(Bandwidth::Fixed(1.3)), KernelSpec::Laplace(Bandwidth::Fixed(0.8))] {
            let a = kpc_graph(&ds, &roles, &k, &g, &g, &MetricSpec::euclidean(), false);
            let b = kpc_graph(&ds2, &roles, &k, &g, &g, &MetricSpec::euclidean(), false);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    let close = |u: f64, v: f64| (u - v).abs() <= 1e-12;
                    prop_assert!(close(a.value, b.value) && close(a.numerator, b.numerator), "{} vs {}", a.value, b.value);
                }
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn permutation_invariance(rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 5..60), rot in 1usize..50) {
        let ds = random_xyz(&rows);
        let n = rows.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(rot % n);
        perm.reverse();
        let sh = ds.permute_rows(&perm).unwrap();
        let roles = VariableRoles::new(vec![2], vec![1], vec![0]);
        let k = KernelSpec::Gaussian(Bandwidth::Fixed(1.0));
        for g in [GraphSpec::knn(1, 0), GraphSpec::knn(2, 0), GraphSpec::mst()] {
            let a = kpc_graph(&ds, &roles, &k, &g, &g, &MetricSpec::euclidean(), false).unwrap();
            let b = kpc_graph(&sh, &roles, &k, &g, &g, &MetricSpec::euclidean(), false).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12);
        }
    }

    #[test]
    fn denominator_nonnegative(rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -2.0f64..2.0, 0.0f64..1.0), 3..60), k in 1usize..3) {
        prop_assume!(rows.len() > k);
        let mut rows = rows;
        for r in &mut rows {
            r.3 = r.3.round();
        }
        let ds = random_xyz(&rows);
        let g = GraphSpec::knn(k, 1);
        for (y, kern) in [(2, KernelSpec::gaussian_gamma(0.7)), (3, KernelSpec::Discrete)] {
            let roles = VariableRoles::new(vec![y], vec![1], vec![0]);
            match kpc_graph(&ds, &roles, &kern, &g, &g, &MetricSpec::euclidean(), false) {
                Ok(e) => prop_assert!(e.denominator >= 0.0),
                Err(KpcError::DegenerateDenominator { denominator }) => prop_assert!(denominator.abs() < 1e-9),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}

fn sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn spread_shrinks_like_root_n() {
    let reps = 500u64;
    let k = KernelSpec::gaussian_gamma(0.5);
    let run = |n: usize| -> Vec<f64> {
        (0..reps)
            .into_par_iter()
            .map(|r| {
                let ds = simulate(&SimSpec::new(SimModel::ModelI, n, 10_000 * n as u64 + r)).unwrap();
                let g = GraphSpec::knn(1, r);
                kpc_graph(&ds, &roles(), &k, &g, &g, &MetricSpec::euclidean(), false).unwrap().value
            })
            .collect()
    };
    let ratio = sd(&run(400)) / sd(&run(1600));
    assert!((1.6..=2.5).contains(&ratio), "sd ratio {ratio}");
}

/// X uniform on {0,1,2}; Z in {0,1}; Y in {0,1,2} depends on both.
fn discrete_model() -> DiscreteJoint {
    let mut atoms = Vec::new();
    let mut probs = Vec::new();
    for x in 0..3 {
        for z in 0..2 {
            let w = [1.0 + x as f64, 1.0 + 2.0 * z as f64, 1.0 + (x * z) as f64];
            let tot: f64 = w.iter().sum();
            for (y, wy) in w.iter().enumerate() {
                atoms.push(Atom { x: vec![x as f64], z: vec![z as f64], y: vec![y as f64] });
                probs.push(wy / tot / 6.0);
            }
        }
    }
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);
    DiscreteJoint::new(atoms, probs).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 { (v[m - 1] + v[m]) / 2.0 } else { v[m] }
}

#[test]
fn consistency_on_discrete_models() {
    let dj = discrete_model();
    let roles = dj.sample_roles();
    for kern in [KernelSpec::Discrete, KernelSpec::Linear] {
        let truth = population_rho2(&dj, &kern).unwrap();
        let errs: Vec<f64> = [250usize, 1000, 4000]
            .iter()
            .map(|&n| {
                let e: Vec<f64> = (0..100u64)
                    .into_par_iter()
                    .map(|r| {
                        let ds = dj.sample(n, 77 * n as u64 + r).unwrap();
                        let g = GraphSpec::knn(1, r);
                        let est = kpc_graph(&ds, &roles, &kern, &g, &g, &MetricSpec::euclidean(), false).unwrap();
                        (est.value - truth).abs()
                    })
                    .collect();
                median(e)
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{kern:?}: truth {truth}, median errors {errs:?}");
    }
}
