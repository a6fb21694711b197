use std::f64::consts::PI;

use kpc::data::{Column, Dataset, MetricSpec, Rotation};
use kpc::kernels::{eval, gram_matrix, median_bandwidth, rotation_angle, Bandwidth, FociReference, KernelSpec, Point, Points, SO3_DIAG};
use kpc::sim::{matmul3, r1, r3};
use kpc::KpcError;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn line(v: &[f64]) -> Dataset {
    Dataset::new(vec![Column::numeric("a", v.to_vec())]).unwrap()
}

fn k2(k: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    eval(k, Point::Real(a), Point::Real(b)).unwrap()
}

#[test]
fn median_examples() {
    let m = MetricSpec::euclidean();
    assert_eq!(median_bandwidth(&line(&[0.0, 1.0, 3.0]), &[0], &m).unwrap(), 2.0);
    assert_eq!(median_bandwidth(&line(&[0.0, 2.0]), &[0], &m).unwrap(), 2.0);
    // even count: mean of the middle two of {1, 2, 3, 1, 2, 1}
    assert_eq!(median_bandwidth(&line(&[0.0, 1.0, 2.0, 3.0]), &[0], &m).unwrap(), 1.5);
    assert!(matches!(median_bandwidth(&line(&[4.0, 4.0, 4.0]), &[0], &m), Err(KpcError::DegenerateBandwidth)));
}

#[test]
fn eval_examples() {
    let g = KernelSpec::Gaussian(Bandwidth::Fixed(1.0));
    assert!((k2(&g, &[0.0], &[2.0]) - (-2.0f64).exp()).abs() < 1e-16);
    assert!((k2(&g, &[0.0], &[2.0]) - 0.1353352832366127).abs() < 1e-15);
    assert_eq!(k2(&KernelSpec::Distance { alpha: 1.0 }, &[1.0], &[2.0]), 1.0);
    assert_eq!(k2(&KernelSpec::Discrete, &[0.3], &[0.3]), 1.0);
    assert_eq!(k2(&KernelSpec::Discrete, &[0.3], &[0.4]), 0.0);
    let l = KernelSpec::Laplace(Bandwidth::Fixed(2.0));
    assert!((k2(&l, &[0.0, 0.0], &[1.0, -1.0]) - (-1.0f64).exp()).abs() < 1e-16);
    assert_eq!(k2(&KernelSpec::HistInv, &[0.0, 1.0], &[1.0, 1.0]), 0.5 * (1.0 / 3.0));
    assert!((k2(&KernelSpec::HistExpSqrt, &[0.0, 2.0], &[1.0, 2.0]) - (-3.0f64).exp()).abs() < 1e-16);
    assert!(matches!(eval(&KernelSpec::HistInv, Point::Real(&[-1.0]), Point::Real(&[1.0])), Err(KpcError::TypeMismatch(_))));

    let id = r3(0.0);
    assert!((eval(&KernelSpec::So3, Point::Rot(&id), Point::Rot(&id)).unwrap() - PI * PI / 8.0).abs() < 1e-15);
    let q = eval(&KernelSpec::So3, Point::Rot(&r3(PI / 2.0)), Point::Rot(&id)).unwrap();
    assert!((q - 0.968946146259369).abs() < 1e-12);
    assert!(matches!(eval(&KernelSpec::So3, Point::Real(&[1.0]), Point::Real(&[1.0])), Err(KpcError::TypeMismatch(_))));

    let foci = KernelSpec::FociCdf(FociReference::Sample).resolve(&Points::scalar(&[1.0, 2.0, 3.0])).unwrap();
    assert!((foci.eval(Point::Real(&[2.0]), Point::Real(&[3.0])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn gram_examples() {
    let ds = line(&[1.0, 2.0, 3.0]);
    let lin = gram_matrix(&KernelSpec::Linear, &ds, &[0]).unwrap();
    assert_eq!(lin, DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0]));
    let g = gram_matrix(&KernelSpec::gaussian_median(), &ds, &[0]).unwrap();
    assert!((0..3).all(|i| g[(i, i)] == 1.0));
    let one = gram_matrix(&KernelSpec::Linear, &line(&[3.0]), &[0]).unwrap();
    assert_eq!(one, DMatrix::from_element(1, 1, 9.0));
}

fn rotation_from(a: f64, b: f64, c: f64) -> Rotation {
    matmul3(&matmul3(&r3(a), &r1(b)), &r3(c))
}

fn min_eig_ok(k: &DMatrix<f64>) -> bool {
    let e = SymmetricEigen::new(k.clone()).eigenvalues;
    e.min() >= -1e-9 * e.max().abs().max(1e-300)
}

proptest! {
    #[test]
    fn real_kernels_are_psd(rows in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 3), 2..25)) {
        let cols: Vec<Column> = (0..3).map(|d| Column::numeric(format!("c{d}"), rows.iter().map(|r| r[d]).collect())).collect();
        let ds = Dataset::new(cols).unwrap();
        let specs = [
            KernelSpec::Gaussian(Bandwidth::Fixed(0.8)),
            KernelSpec::Laplace(Bandwidth::Fixed(1.1)),
            KernelSpec::Linear,
            KernelSpec::Distance { alpha: 1.3 },
            KernelSpec::Discrete,
            KernelSpec::HistInv,
            KernelSpec::HistExpSqrt,
        ];
        for s in &specs {
            let k = gram_matrix(s, &ds, &[0, 1, 2]).unwrap();
            prop_assert!(min_eig_ok(&k), "{s:?}");
            prop_assert_eq!(&k, &k.transpose());
        }
        let f = gram_matrix(&KernelSpec::FociCdf(FociReference::Sample), &ds, &[0]).unwrap();
        prop_assert!(min_eig_ok(&f));
    }

    #[test]
    fn gaussian_isometry_invariance(u in prop::collection::vec(-3.0f64..3.0, 3), v in prop::collection::vec(-3.0f64..3.0, 3),
                                    ang in (0.0f64..6.3, 0.0f64..3.1, 0.0f64..6.3), t in prop::collection::vec(-5.0f64..5.0, 3)) {
        let q = rotation_from(ang.0, ang.1, ang.2);
        let map = |x: &[f64]| -> Vec<f64> { (0..3).map(|i| (0..3).map(|j| q[3 * i + j] * x[j]).sum::<f64>() + t[i]).collect() };
        let lin = |x: &[f64]| -> Vec<f64> { (0..3).map(|i| (0..3).map(|j| q[3 * i + j] * x[j]).sum::<f64>()).collect() };
        let g = KernelSpec::Gaussian(Bandwidth::Fixed(1.7));
        prop_assert!((k2(&g, &map(&u), &map(&v)) - k2(&g, &u, &v)).abs() <= 1e-12);
        // linear and distance kernels depend on the origin: invariant under orthogonal maps only
        prop_assert!((k2(&KernelSpec::Linear, &lin(&u), &lin(&v)) - k2(&KernelSpec::Linear, &u, &v)).abs() <= 1e-12);
        let d = KernelSpec::Distance { alpha: 0.7 };
        prop_assert!((k2(&d, &lin(&u), &lin(&v)) - k2(&d, &u, &v)).abs() <= 1e-12);
        // Laplace uses the L1 norm: invariant under translations and signed coordinate permutations
        let l = KernelSpec::Laplace(Bandwidth::Fixed(0.9));
        let perm = |x: &[f64]| vec![-x[2] + t[0], x[0] + t[1], -x[1] + t[2]];
        prop_assert!((k2(&l, &perm(&u), &perm(&v)) - k2(&l, &u, &v)).abs() <= 1e-12);
    }

    #[test]
    fn so3_left_invariance(a in (0.0f64..6.3, 0.0f64..3.1, 0.0f64..6.3), b in (0.0f64..6.3, 0.0f64..3.1, 0.0f64..6.3),
                           c in (0.0f64..6.3, 0.0f64..3.1, 0.0f64..6.3)) {
        let (ra, rb, rc) = (rotation_from(a.0, a.1, a.2), rotation_from(b.0, b.1, b.2), rotation_from(c.0, c.1, c.2));
        let base = eval(&KernelSpec::So3, Point::Rot(&ra), Point::Rot(&rb)).unwrap();
        let moved = eval(&KernelSpec::So3, Point::Rot(&matmul3(&rc, &ra)), Point::Rot(&matmul3(&rc, &rb))).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9);
    }

    #[test]
    fn foci_bounded_and_monotone(sample in prop::collection::vec(-5.0f64..5.0, 1..30), mut ys in prop::collection::vec(-6.0f64..6.0, 3)) {
        let k = KernelSpec::FociCdf(FociReference::Sample).resolve(&Points::scalar(&sample)).unwrap();
        ys.sort_by(f64::total_cmp);
        let e = |a: f64, b: f64| k.eval(Point::Real(&[a]), Point::Real(&[b])).unwrap();
        let (y, y1, y2) = (ys[0], ys[1], ys[2]);
        for v in [e(y, y1), e(y, y2), e(y1, y2), e(y2, y2)] {
            prop_assert!((0.0..=1.0 + 1e-15).contains(&v));
        }
        prop_assert!(e(y, y2) <= e(y, y1));
    }
}

#[test]
fn distance_kernel_exponent_checked() {
    let pts = Points::scalar(&[1.0]);
    assert!(KernelSpec::Distance { alpha: 2.0 }.resolve(&pts).is_err());
    assert!(KernelSpec::Gaussian(Bandwidth::Fixed(0.0)).resolve(&pts).is_err());
}

// The rotation-angle form is not PSD on arbitrary rotation sets; it is with the half angle.
#[test]
fn so3_psd_counterexample() {
    let rots = vec![
        rotation_from(2.756156519444075, 0.0, 0.0),
        rotation_from(0.0, 0.0, 0.0),
        rotation_from(0.7616737886975746, 2.697585104776546, 4.249603856526843),
        rotation_from(4.107154013522323, 1.9054763615271229, 2.0740318574961663),
    ];
    let ds = Dataset::new(vec![Column::rotation("r", rots.clone()).unwrap()]).unwrap();
    let k = gram_matrix(&KernelSpec::So3, &ds, &[0]).unwrap();
    let min = SymmetricEigen::new(k).eigenvalues.min();
    assert!(min < -1e-3, "{min}");

    let half = DMatrix::from_fn(4, 4, |i, j| {
        let t = rotation_angle(&rots[i], &rots[j]) / 2.0;
        if t < 1e-7 { PI * PI / 8.0 } else { PI * t * (PI - t) / (8.0 * t.sin()) }
    });
    assert!(min_eig_ok(&half));
}

#[test]
fn so3_psd_on_single_axis() {
    // rotations about one axis with angles in [0, pi/2]: pairwise angles stay below pi/2
    let rots: Vec<Rotation> = (0..12).map(|i| r3(i as f64 * PI / 22.0)).collect();
    let ds = Dataset::new(vec![Column::rotation("r", rots).unwrap()]).unwrap();
    let k = gram_matrix(&KernelSpec::So3, &ds, &[0]).unwrap();
    assert_eq!(k, k.transpose());
    assert!((0..12).all(|i| (k[(i, i)] - SO3_DIAG).abs() < 1e-15));
}
