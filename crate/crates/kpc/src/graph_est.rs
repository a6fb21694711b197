//! Graph-based estimator of the kernel partial correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MetricSpec, VariableRoles};
use crate::error::{KpcError, Result};
use crate::graph::{build_graph, GeometricGraph, GraphSpec};
use crate::kernels::{Kernel, KernelSpec, Points};
use crate::rng::tag;

/// Output of every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpcEstimate {
    pub value: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub clamped: bool,
    pub diagnostics: BTreeMap<String, f64>,
}

impl KpcEstimate {
    pub(crate) fn from_parts(numerator: f64, denominator: f64, clamp: bool) -> Self {
        let raw = numerator / denominator;
        let value = if clamp { raw.clamp(0.0, 1.0) } else { raw };
        KpcEstimate { value, numerator, denominator, clamped: clamp && value != raw, diagnostics: BTreeMap::new() }
    }

    pub fn raw_value(&self) -> f64 {
        self.numerator / self.denominator
    }
}

/// (1/n) Σ_i (1/d_i) Σ_{j ∈ N(i)} k(Y_i, Y_j) with a resolved kernel.
pub fn t_n_points(y: &Points, kernel: &Kernel, graph: &GeometricGraph) -> Result<f64> {
    let n = y.len();
    if graph.n() != n {
        return Err(KpcError::SizeMismatch { expected: n, got: graph.n() });
    }
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let nb = graph.out_neighbors(i);
        let mut s = 0.0;
        for &j in nb {
            s += kernel.eval_idx(y, i, j)?;
        }
        terms.push(s / nb.len() as f64);
    }
    Ok(ordered_sum(&terms) / n as f64)
}

/// Pairwise summation in a fixed tree shape.
pub(crate) fn ordered_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    ordered_sum(&v[..mid]) + ordered_sum(&v[mid..])
}

/// T_n for response columns `y_cols`; the kernel is resolved on those columns.
pub fn t_n(ds: &Dataset, y_cols: &[usize], kernel: &KernelSpec, graph: &GeometricGraph) -> Result<f64> {
    let y = Points::from_dataset(ds, y_cols)?;
    let k = kernel.resolve(&y)?;
    t_n_points(&y, &k, graph)
}

/// Mean of k(Y_i, Y_i).
pub fn diag_mean(y: &Points, kernel: &Kernel) -> Result<f64> {
    Ok(ordered_sum(&kernel.diag(y)?) / y.len() as f64)
}

/// Assemble the estimate from the three averages.
pub fn kpc_from_stats(t_xz: f64, t_x: f64, diag: f64, clamp: bool) -> Result<KpcEstimate> {
    let num = t_xz - t_x;
    let den = diag - t_x;
    if !(den.abs() > 1e-12 * diag.abs().max(f64::MIN_POSITIVE)) {
        return Err(KpcError::DegenerateDenominator { denominator: den });
    }
    Ok(KpcEstimate::from_parts(num, den, clamp))
}

/// ρ̂²(Y, Z | X) from a K-NN or MST graph on X and on (X, Z).
pub fn kpc_graph(
    ds: &Dataset,
    roles: &VariableRoles,
    kernel: &KernelSpec,
    spec_x: &GraphSpec,
    spec_xz: &GraphSpec,
    metric: &MetricSpec,
    clamp: bool,
) -> Result<KpcEstimate> {
    roles.validate(ds)?;
    if roles.x.is_empty() {
        return Err(KpcError::InvalidConfig(
            "the graph estimator needs a non-empty conditioning set; use the RKHS estimator for empty X".into(),
        ));
    }
    let y = Points::from_dataset(ds, &roles.y)?;
    let k = kernel.resolve(&y)?;
    let gx = build_graph(&spec_x.with_stream(stream_for(spec_x, tag::GRAPH_X)), ds, &roles.x, metric)?;
    let gxz = build_graph(&spec_xz.with_stream(stream_for(spec_xz, tag::GRAPH_XZ)), ds, &roles.xz(), metric)?;
    let t_x = t_n_points(&y, &k, &gx)?;
    let t_xz = t_n_points(&y, &k, &gxz)?;
    let diag = diag_mean(&y, &k)?;
    let mut est = kpc_from_stats(t_xz, t_x, diag, clamp)?;
    est.diagnostics.insert("t_x".into(), t_x);
    est.diagnostics.insert("t_xz".into(), t_xz);
    est.diagnostics.insert("diag_mean".into(), diag);
    est.diagnostics.insert("ties_x".into(), gx.ties_broken() as f64);
    est.diagnostics.insert("ties_xz".into(), gxz.ties_broken() as f64);
    if let Some(s) = k.bandwidth() {
        est.diagnostics.insert("bandwidth_y".into(), s);
    }
    Ok(est)
}

/// The role tag is mixed into any user-chosen stream so X and (X, Z) ties stay independent.
pub(crate) fn stream_for(spec: &GraphSpec, role: u64) -> u64 {
    spec.stream.wrapping_mul(0x100).wrapping_add(role)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;
    use crate::graph::build_knn;

    #[test]
    fn t_n_linear_example() {
        let ds = Dataset::new(vec![
            Column::numeric("x", vec![0.0, 1.0, 10.0]),
            Column::numeric("y", vec![1.0, 2.0, 3.0]),
        ])
        .unwrap();
        let g = build_knn(&GraphSpec::knn(1, 0), &ds, &[0], &MetricSpec::euclidean()).unwrap();
        let t = t_n(&ds, &[1], &KernelSpec::Linear, &g).unwrap();
        assert!((t - 10.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn t_n_discrete_example() {
        let ds = Dataset::new(vec![
            Column::numeric("x", vec![0.0, 1.0, 10.0]),
            Column::numeric("y", vec![0.0, 0.0, 1.0]),
        ])
        .unwrap();
        let g = build_knn(&GraphSpec::knn(1, 0), &ds, &[0], &MetricSpec::euclidean()).unwrap();
        let t = t_n(&ds, &[1], &KernelSpec::Discrete, &g).unwrap();
        assert!((t - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn t_n_constant_response() {
        let ds = Dataset::new(vec![
            Column::numeric("x", vec![0.3, 1.0, 7.0, 2.0]),
            Column::numeric("y", vec![2.0; 4]),
        ])
        .unwrap();
        let g = build_knn(&GraphSpec::knn(2, 5), &ds, &[0], &MetricSpec::euclidean()).unwrap();
        assert_eq!(t_n(&ds, &[1], &KernelSpec::Linear, &g).unwrap(), 4.0);
    }

    #[test]
    fn size_mismatch() {
        let ds = Dataset::new(vec![Column::numeric("y", vec![1.0, 2.0])]).unwrap();
        let other = Dataset::new(vec![Column::numeric("x", vec![0.0, 1.0, 2.0])]).unwrap();
        let g = build_knn(&GraphSpec::knn(1, 0), &other, &[0], &MetricSpec::euclidean()).unwrap();
        assert!(matches!(t_n(&ds, &[0], &KernelSpec::Linear, &g), Err(KpcError::SizeMismatch { .. })));
    }

    #[test]
    fn hand_enumerated_estimate_is_one() {
        let z = vec![0.0, 10.0, 0.0, 10.0];
        let ds = Dataset::new(vec![
            Column::numeric("x", vec![0.0, 1.0, 2.1, 3.3]),
            Column::numeric("z", z.clone()),
            Column::numeric("y", z.iter().map(|v| (*v == 10.0) as u8 as f64).collect()),
        ])
        .unwrap();
        let roles = VariableRoles::new(vec![2], vec![1], vec![0]);
        let spec = GraphSpec::knn(1, 0);
        let e = kpc_graph(&ds, &roles, &KernelSpec::Discrete, &spec, &spec, &MetricSpec::euclidean(), false).unwrap();
        assert_eq!(e.numerator, 1.0);
        assert_eq!(e.denominator, 1.0);
        assert_eq!(e.value, 1.0);
    }

    #[test]
    fn duplicated_conditioning_gives_zero() {
        let x = vec![0.1, 0.9, 2.3, 3.0, 4.4, 5.8];
        let ds = Dataset::new(vec![
            Column::numeric("x", x.clone()),
            Column::numeric("z", x),
            Column::numeric("y", vec![1.0, 3.0, 2.0, 5.0, 4.0, 0.0]),
        ])
        .unwrap();
        let roles = VariableRoles::new(vec![2], vec![1], vec![0]);
        let spec = GraphSpec::knn(1, 3);
        let k = KernelSpec::gaussian_median();
        let e = kpc_graph(&ds, &roles, &k, &spec, &spec, &MetricSpec::euclidean(), false).unwrap();
        assert_eq!(e.numerator, 0.0);
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn degenerate_denominator() {
        // Y is a function of X and every point's neighbor shares its Y
        let ds = Dataset::new(vec![
            Column::numeric("x", vec![0.0, 0.1, 5.0, 5.1]),
            Column::numeric("z", vec![1.0, 2.0, 3.0, 4.0]),
            Column::numeric("y", vec![0.0, 0.0, 1.0, 1.0]),
        ])
        .unwrap();
        let roles = VariableRoles::new(vec![2], vec![1], vec![0]);
        let spec = GraphSpec::knn(1, 0);
        let r = kpc_graph(&ds, &roles, &KernelSpec::Discrete, &spec, &spec, &MetricSpec::euclidean(), false);
        assert!(matches!(r, Err(KpcError::DegenerateDenominator { .. })));
    }
}
