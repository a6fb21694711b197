//! Forward stepwise variable selection: KFOCI (graph statistic, automatic
//! stopping) and the fixed-budget RKHS variant.

use serde::{Deserialize, Serialize};

use crate::data::{standardize, ColumnType, Dataset, MetricSpec};
use crate::error::{KpcError, Result};
use crate::graph::{build_graph, GraphSpec};
use crate::graph_est::t_n_points;
use crate::kernels::{KernelSpec, Points};
use crate::rkhs::{GramSource, PreparedRkhs, RkhsConfig, XzKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The best addition lowered the objective.
    Criterion,
    /// `max_vars` or the RKHS budget was reached.
    Budget,
    /// No candidates left.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// Selected dataset column indices in order of entry.
    pub order: Vec<usize>,
    /// Objective after each entry.
    pub objective: Vec<f64>,
    pub stopped_by: StopReason,
    /// Best rejected candidate and its objective when stopped by the criterion.
    pub rejected: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfociOptions {
    /// Cap on the number of selected variables; default min(p, n − 1).
    pub max_vars: Option<usize>,
    /// Standardize numeric candidate columns before building graphs.
    pub standardize: bool,
}

impl Default for KfociOptions {
    fn default() -> Self {
        KfociOptions { max_vars: None, standardize: true }
    }
}

fn prepare(ds: &Dataset, y_cols: &[usize], candidates: &[usize], standardize_cols: bool) -> Result<(Dataset, Vec<usize>)> {
    if candidates.is_empty() {
        return Err(KpcError::InvalidConfig("no candidate columns".into()));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if cands.iter().any(|c| y_cols.contains(c) || *c >= ds.ncols()) {
        return Err(KpcError::InvalidConfig("candidates must be valid columns distinct from Y".into()));
    }
    let ds = if standardize_cols {
        let numeric: Vec<usize> =
            cands.iter().copied().filter(|&c| ds.column(c).payload.kind() == ColumnType::Numeric).collect();
        standardize(ds, &numeric)?
    } else {
        ds.clone()
    };
    Ok((ds, cands))
}

/// KFOCI: greedy maximization of T_n(Y, graph on X_S) with the stop rule T_n(S ∪ {j}) < T_n(S).
pub fn kfoci(
    ds: &Dataset,
    y_cols: &[usize],
    candidates: &[usize],
    kernel_y: &KernelSpec,
    graph: &GraphSpec,
    metric: &MetricSpec,
    opts: &KfociOptions,
) -> Result<SelectionTrace> {
    let (ds, cands) = prepare(ds, y_cols, candidates, opts.standardize)?;
    let y = Points::from_dataset(&ds, y_cols)?;
    let k = kernel_y.resolve(&y)?;
    let cap = opts.max_vars.unwrap_or(cands.len().min(ds.n().saturating_sub(1))).min(cands.len());
    let mut order: Vec<usize> = Vec::new();
    let mut objective: Vec<f64> = Vec::new();
    let mut current = f64::NEG_INFINITY;
    loop {
        if order.len() >= cap {
            let stopped_by = if order.len() == cands.len() { StopReason::Exhausted } else { StopReason::Budget };
            return Ok(SelectionTrace { order, objective, stopped_by, rejected: None });
        }
        let step = order.len() as u64;
        let mut best: Option<(usize, f64)> = None;
        for &j in cands.iter().filter(|c| !order.contains(c)) {
            let mut cols = order.clone();
            cols.push(j);
            let spec = graph.with_stream(graph.stream ^ ((step << 32) | j as u64));
            let g = build_graph(&spec, &ds, &cols, metric)?;
            let t = t_n_points(&y, &k, &g)?;
            if best.is_none_or(|(_, bt)| t > bt) {
                best = Some((j, t));
            }
        }
        let (j, t) = best.expect("at least one candidate remains below the cap");
        if t < current {
            return Ok(SelectionTrace { order, objective, stopped_by: StopReason::Criterion, rejected: Some((j, t)) });
        }
        order.push(j);
        objective.push(t);
        current = t;
    }
}

/// Kernel used on the conditioning block during RKHS selection.
#[derive(Debug, Clone, PartialEq)]
pub enum SubsetKernelRule {
    /// exp(−‖x − x'‖²/|S|) on the block S.
    ScaledGaussian,
    /// `cfg.kernel_x` on X_S and `cfg.kernel_xz` on X_{S∪{j}}.
    FromConfig,
}

fn subset_gram(ds: &Dataset, cols: &[usize], rule: &SubsetKernelRule, fallback: &KernelSpec) -> Result<nalgebra::DMatrix<f64>> {
    let spec = match rule {
        SubsetKernelRule::ScaledGaussian => KernelSpec::gaussian_gamma(1.0 / cols.len() as f64),
        SubsetKernelRule::FromConfig => fallback.clone(),
    };
    GramSource::simple(&spec, Points::from_dataset(ds, cols)?)?.dense()
}

/// Greedy forward selection of exactly `p0` columns maximizing ρ̃²(Y, X_j | X_S).
pub fn rkhs_forward_select(
    ds: &Dataset,
    y_cols: &[usize],
    candidates: &[usize],
    p0: usize,
    cfg: &RkhsConfig,
    rule: &SubsetKernelRule,
    standardize_cols: bool,
) -> Result<SelectionTrace> {
    let (ds, cands) = prepare(ds, y_cols, candidates, standardize_cols)?;
    if p0 == 0 || p0 > cands.len() {
        return Err(KpcError::InvalidConfig(format!("budget {p0} outside 1..={}", cands.len())));
    }
    let xz_spec = match (&cfg.kernel_xz, rule) {
        (XzKernel::Joint(k), _) => k.clone(),
        (_, SubsetKernelRule::ScaledGaussian) => cfg.kernel_x.clone(),
        (XzKernel::Product { .. }, SubsetKernelRule::FromConfig) => {
            return Err(KpcError::InvalidConfig("selection needs a joint kernel on X_S ∪ {j}".into()))
        }
    };
    let ky = GramSource::simple(&cfg.kernel_y, Points::from_dataset(&ds, y_cols)?)?.dense()?;
    let mut order: Vec<usize> = Vec::new();
    let mut objective: Vec<f64> = Vec::new();
    while order.len() < p0 {
        let kx = if order.is_empty() { None } else { Some(subset_gram(&ds, &order, rule, &cfg.kernel_x)?) };
        let prep = PreparedRkhs::new(&ky, kx.as_ref(), cfg.eps1, cfg.eps2, cfg.centered)?;
        let mut best: Option<(usize, f64)> = None;
        for &j in cands.iter().filter(|c| !order.contains(c)) {
            let mut cols = order.clone();
            cols.push(j);
            let kxz = subset_gram(&ds, &cols, rule, &xz_spec)?;
            let v = prep.estimate(&kxz)?.value;
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        let (j, v) = best.expect("budget below candidate count");
        order.push(j);
        objective.push(v);
    }
    let stopped_by = if order.len() == cands.len() { StopReason::Exhausted } else { StopReason::Budget };
    Ok(SelectionTrace { order, objective, stopped_by, rejected: None })
}
