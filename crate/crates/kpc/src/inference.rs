//! Model-X inference: the conditional randomization test and knockoff
//! selection with KPC statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MetricSpec, Payload, VariableRoles};
use crate::error::{KpcError, Result};
use crate::graph::{build_graph, knn_from_fn, GraphSpec};
use crate::graph_est::{diag_mean, kpc_from_stats, stream_for, t_n_points};
use crate::kernels::{Bandwidth, Kernel, KernelSpec, Points};
use crate::rkhs::{sources, PreparedRkhs, RkhsConfig};
use crate::rng::{stream, tag};

/// One draw of Z given X = x. Rows get independent streams.
pub trait ConditionalSampler: Sync {
    /// Number of Z coordinates produced per draw.
    fn dim(&self) -> usize {
        1
    }
    fn draw(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Z = a + bᵀx + σ·N(0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLinear {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub sd: f64,
}

impl ConditionalSampler for GaussianLinear {
    fn draw(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![self.intercept + dot(&self.coef, x) + self.sd * std_normal(rng)]
    }
}

/// Z = bᵀx + U with U uniform on [−h, h].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformAdditive {
    pub coef: Vec<f64>,
    pub half_width: f64,
}

impl ConditionalSampler for UniformAdditive {
    fn draw(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![dot(&self.coef, x) + rng.random_range(-self.half_width..=self.half_width)]
    }
}

/// Z = (bᵀx)·σ·N(0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScale {
    pub coef: Vec<f64>,
    pub sd: f64,
}

impl ConditionalSampler for GaussianScale {
    fn draw(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![dot(&self.coef, x) * self.sd * std_normal(rng)]
    }
}

/// Statistic recomputed on observed and resampled data.
#[derive(Debug, Clone, PartialEq)]
pub enum CrtStatistic {
    Rkhs(RkhsConfig),
    Graph { kernel: KernelSpec, graph_x: GraphSpec, graph_xz: GraphSpec, metric: MetricSpec },
}

impl CrtStatistic {
    /// k_Y = k_X = exp(−|·|²), k on (X, Z) = exp(−‖·‖²/2), ε = 10⁻³.
    pub fn default_rkhs() -> Self {
        CrtStatistic::Rkhs(RkhsConfig::new(
            KernelSpec::gaussian_gamma(1.0),
            KernelSpec::gaussian_gamma(1.0),
            KernelSpec::gaussian_gamma(0.5),
            1e-3,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrtResult {
    pub pvalue: f64,
    pub statistic: f64,
    pub b: usize,
    pub null_statistics: Vec<f64>,
}

/// (1 + #{T⁽ʲ⁾ ≥ T}) / (1 + B).
pub fn crt_pvalue_from_stats(observed: f64, nulls: &[f64]) -> f64 {
    let hits = nulls.iter().filter(|&&t| t >= observed).count();
    (1 + hits) as f64 / (1 + nulls.len()) as f64
}

/// Everything about the statistic that does not depend on Z.
enum Fixed<'a> {
    Rkhs { cfg: &'a RkhsConfig, prep: PreparedRkhs },
    Graph { y: Points, kernel: Kernel, t_x: f64, diag: f64, spec: &'a GraphSpec, metric: &'a MetricSpec },
}

impl Fixed<'_> {
    fn value(&self, ds: &Dataset, roles: &VariableRoles) -> Result<f64> {
        match self {
            Fixed::Rkhs { cfg, prep } => Ok(prep.estimate(&sources(ds, roles, cfg)?.xz.dense()?)?.value),
            Fixed::Graph { y, kernel, t_x, diag, spec, metric } => {
                let g = build_graph(&spec.with_stream(stream_for(spec, tag::GRAPH_XZ)), ds, &roles.xz(), metric)?;
                let t_xz = t_n_points(y, kernel, &g)?;
                Ok(kpc_from_stats(t_xz, *t_x, *diag, false)?.value)
            }
        }
    }
}

fn prepare<'a>(ds: &Dataset, roles: &VariableRoles, stat: &'a CrtStatistic) -> Result<Fixed<'a>> {
    match stat {
        CrtStatistic::Rkhs(cfg) => {
            let s = sources(ds, roles, cfg)?;
            let ky = s.y.dense()?;
            let kx = s.x.as_ref().map(|x| x.dense()).transpose()?;
            Ok(Fixed::Rkhs { cfg, prep: PreparedRkhs::new(&ky, kx.as_ref(), cfg.eps1, cfg.eps2, cfg.centered)? })
        }
        CrtStatistic::Graph { kernel, graph_x, graph_xz, metric } => {
            if roles.x.is_empty() {
                return Err(KpcError::InvalidConfig("the graph statistic needs a non-empty X".into()));
            }
            let y = Points::from_dataset(ds, &roles.y)?;
            let kernel = kernel.resolve(&y)?;
            let gx = build_graph(&graph_x.with_stream(stream_for(graph_x, tag::GRAPH_X)), ds, &roles.x, metric)?;
            let t_x = t_n_points(&y, &kernel, &gx)?;
            let diag = diag_mean(&y, &kernel)?;
            Ok(Fixed::Graph { y, kernel, t_x, diag, spec: graph_xz, metric })
        }
    }
}

/// Conditional randomization test of Y ⊥ Z | X with B resamples of Z.
pub fn crt_pvalue(
    ds: &Dataset,
    roles: &VariableRoles,
    stat: &CrtStatistic,
    sampler: &dyn ConditionalSampler,
    b: usize,
    seed: u64,
) -> Result<CrtResult> {
    roles.validate(ds)?;
    if roles.z.len() != sampler.dim() {
        return Err(KpcError::SizeMismatch { expected: sampler.dim(), got: roles.z.len() });
    }
    for &c in &roles.z {
        ds.numeric(c)?;
    }
    let xcols: Vec<&[f64]> = roles.x.iter().map(|&c| ds.numeric(c)).collect::<Result<_>>()?;
    let n = ds.n();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| xcols.iter().map(|c| c[i]).collect()).collect();
    let fixed = prepare(ds, roles, stat)?;
    let statistic = fixed.value(ds, roles)?;
    let nulls: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|j| {
            let mut z = vec![Vec::with_capacity(n); roles.z.len()];
            for (i, row) in rows.iter().enumerate() {
                let mut rng = stream(seed, &[tag::CRT, j as u64, i as u64]);
                for (col, v) in z.iter_mut().zip(sampler.draw(row, &mut rng)) {
                    col.push(v);
                }
            }
            let mut resampled = ds.clone();
            for (&c, vals) in roles.z.iter().zip(z) {
                resampled = resampled.with_payload(c, Payload::Numeric(vals))?;
            }
            fixed.value(&resampled, roles)
        })
        .collect::<Result<_>>()?;
    Ok(CrtResult { pvalue: crt_pvalue_from_stats(statistic, &nulls), statistic, b, null_statistics: nulls })
}

/// Original features X and knockoffs X̃, both n × p.
#[derive(Debug, Clone, PartialEq)]
pub struct KnockoffInput {
    pub x: DMatrix<f64>,
    pub x_knock: DMatrix<f64>,
    pub y: Vec<f64>,
    pub q: f64,
}

impl KnockoffInput {
    pub fn new(x: DMatrix<f64>, x_knock: DMatrix<f64>, y: Vec<f64>, q: f64) -> Result<Self> {
        if x.shape() != x_knock.shape() {
            return Err(KpcError::SizeMismatch { expected: x.ncols(), got: x_knock.ncols() });
        }
        if y.len() != x.nrows() {
            return Err(KpcError::SizeMismatch { expected: x.nrows(), got: y.len() });
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(KpcError::InvalidConfig(format!("q = {q} must lie in (0, 1)")));
        }
        Ok(KnockoffInput { x, x_knock, y, q })
    }

    /// Exchange column j of X with column j of X̃.
    pub fn swap(&self, j: usize) -> Self {
        let mut out = self.clone();
        out.x.set_column(j, &self.x_knock.column(j));
        out.x_knock.set_column(j, &self.x.column(j));
        out
    }
}

/// Statistic behind W_j.
#[derive(Debug, Clone, PartialEq)]
pub enum KnockoffStat {
    /// Graph estimator with a K-NN graph on Euclidean coordinates.
    Graph { kernel_y: KernelSpec, k: usize, seed: u64 },
    /// RKHS estimator; the feature kernel must be Gaussian or Laplace with a fixed bandwidth, or linear.
    Rkhs { kernel_y: KernelSpec, kernel_x: KernelSpec, eps: f64 },
}

/// Feature kernel as a function of per-pair coordinate sums, so that swapping X_j and X̃_j is exact.
#[derive(Clone, Copy)]
enum PairKernel {
    Gaussian(f64),
    Laplace(f64),
    Linear,
}

impl PairKernel {
    fn of(spec: &KernelSpec) -> Result<Self> {
        match spec {
            KernelSpec::Gaussian(Bandwidth::Fixed(s)) => Ok(PairKernel::Gaussian(1.0 / (2.0 * s * s))),
            KernelSpec::Laplace(Bandwidth::Fixed(s)) => Ok(PairKernel::Laplace(1.0 / s)),
            KernelSpec::Linear => Ok(PairKernel::Linear),
            other => Err(KpcError::AsymmetricConfig(format!(
                "{other:?} cannot be verified to treat X_j and its knockoff alike; use a fixed bandwidth"
            ))),
        }
    }

    fn term(self, a: f64, b: f64) -> f64 {
        match self {
            PairKernel::Gaussian(_) => (a - b) * (a - b),
            PairKernel::Laplace(_) => (a - b).abs(),
            PairKernel::Linear => a * b,
        }
    }

    fn finish(self, s: f64) -> f64 {
        match self {
            PairKernel::Gaussian(g) => (-g * s).exp(),
            PairKernel::Laplace(g) => (-g * s).exp(),
            PairKernel::Linear => s,
        }
    }
}

/// Which of the 2p columns enter a block: all of them, or all but X_j / X̃_j.
#[derive(Clone, Copy)]
enum Drop {
    None,
    Original(usize),
    Knockoff(usize),
}

/// Σ over features k of (t(X_k) + t(X̃_k)), summed pairwise in index order.
fn pair_sum(ki: &KnockoffInput, drop: Drop, a: usize, b: usize, term: impl Fn(f64, f64) -> f64) -> f64 {
    let mut s = 0.0;
    for k in 0..ki.x.ncols() {
        let o = term(ki.x[(a, k)], ki.x[(b, k)]);
        let t = term(ki.x_knock[(a, k)], ki.x_knock[(b, k)]);
        s += match drop {
            Drop::Original(j) if j == k => t,
            Drop::Knockoff(j) if j == k => o,
            _ => o + t,
        };
    }
    s
}

/// W_j = ρ²(Y, X_j | X_{−j}, X̃) − ρ²(Y, X̃_j | X, X̃_{−j}) for every j.
pub fn knockoff_w(ki: &KnockoffInput, stat: &KnockoffStat) -> Result<Vec<f64>> {
    let n = ki.x.nrows();
    let p = ki.x.ncols();
    let y = Points::scalar(&ki.y);
    match stat {
        KnockoffStat::Graph { kernel_y, k, seed } => {
            let kernel = kernel_y.resolve(&y)?;
            let diag = diag_mean(&y, &kernel)?;
            let sq = |a: f64, b: f64| (a - b) * (a - b);
            let base = GraphSpec::knn(*k, *seed);
            let t_of = |drop: Drop, stream_id: u64| -> Result<f64> {
                let g = knn_from_fn(&base.with_stream(stream_id), n, |a, b| pair_sum(ki, drop, a, b, sq))?;
                t_n_points(&y, &kernel, &g)
            };
            let t_full = t_of(Drop::None, u64::MAX)?;
            (0..p)
                .into_par_iter()
                .map(|j| {
                    let t1 = t_of(Drop::Original(j), j as u64)?;
                    let t2 = t_of(Drop::Knockoff(j), j as u64)?;
                    let r1 = kpc_from_stats(t_full, t1, diag, false)?.value;
                    let r2 = kpc_from_stats(t_full, t2, diag, false)?.value;
                    Ok(r1 - r2)
                })
                .collect()
        }
        KnockoffStat::Rkhs { kernel_y, kernel_x, eps } => {
            let pk = PairKernel::of(kernel_x)?;
            let ky = kernel_y.resolve(&y)?.gram(&y)?;
            let gram = |drop: Drop| {
                let mut m = DMatrix::zeros(n, n);
                for b in 0..n {
                    for a in b..n {
                        let v = pk.finish(pair_sum(ki, drop, a, b, |u, v| pk.term(u, v)));
                        m[(a, b)] = v;
                        m[(b, a)] = v;
                    }
                }
                m
            };
            let k_full = gram(Drop::None);
            (0..p)
                .into_par_iter()
                .map(|j| {
                    let rho = |drop: Drop| -> Result<f64> {
                        let kx = gram(drop);
                        Ok(PreparedRkhs::new(&ky, Some(&kx), *eps, *eps, true)?.estimate(&k_full)?.value)
                    };
                    Ok(rho(Drop::Original(j))? - rho(Drop::Knockoff(j))?)
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoffSelection {
    /// τ (or τ₊); `None` when no threshold qualifies.
    pub threshold: Option<f64>,
    /// 0-based feature indices with W_j ≥ τ.
    pub selected: Vec<usize>,
}

/// Smallest t among the nonzero |W_j| with #{W ≤ −t} / #{W ≥ t} ≤ q; `plus` adds one to the numerator.
pub fn knockoff_select(w: &[f64], q: f64, plus: bool) -> KnockoffSelection {
    let mut ts: Vec<f64> = w.iter().filter(|v| **v != 0.0).map(|v| v.abs()).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let offset = if plus { 1.0 } else { 0.0 };
    for t in ts {
        let neg = w.iter().filter(|&&v| v <= -t).count() as f64;
        let pos = w.iter().filter(|&&v| v >= t).count();
        if pos > 0 && (offset + neg) / pos as f64 <= q {
            let selected = (0..w.len()).filter(|&j| w[j] >= t).collect();
            return KnockoffSelection { threshold: Some(t), selected };
        }
    }
    KnockoffSelection { threshold: None, selected: Vec::new() }
}

/// Equicorrelated Gaussian knockoffs for rows of `x` drawn from N(mean, cov).
pub fn gaussian_knockoffs(x: &DMatrix<f64>, mean: &[f64], cov: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
    let p = x.ncols();
    if mean.len() != p || cov.shape() != (p, p) {
        return Err(KpcError::SizeMismatch { expected: p, got: mean.len() });
    }
    let chol = cov.clone().cholesky().ok_or(KpcError::NotPositiveDefinite)?;
    let sd: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    let corr = DMatrix::from_fn(p, p, |i, j| cov[(i, j)] / (sd[i] * sd[j]));
    let lambda_min = SymmetricEigen::new(corr).eigenvalues.min();
    if !(lambda_min > 0.0) {
        return Err(KpcError::NotPositiveDefinite);
    }
    let s = DVector::from_fn(p, |j, _| (2.0 * lambda_min).min(1.0) * sd[j] * sd[j]);
    let sdiag = DMatrix::from_diagonal(&s);
    // X̃ | X ~ N(X − SΣ⁻¹(X − μ), 2S − SΣ⁻¹S)
    let sigma_inv_s = chol.solve(&sdiag);
    let v = &sdiag * 2.0 - &sdiag * &sigma_inv_s;
    let eig = SymmetricEigen::new((&v + v.transpose()) * 0.5);
    let root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
        * eig.eigenvectors.transpose();
    let mu = DVector::from_column_slice(mean);
    let mut out = DMatrix::zeros(x.nrows(), p);
    for i in 0..x.nrows() {
        let xi = x.row(i).transpose();
        let centered = &xi - &mu;
        let cond_mean = &xi - &sigma_inv_s.transpose() * centered;
        let mut rng = stream(seed, &[tag::KNOCKOFF, i as u64]);
        let e = DVector::from_fn(p, |_, _| std_normal(&mut rng));
        out.set_row(i, &(cond_mean + &root * e).transpose());
    }
    Ok(out)
}
