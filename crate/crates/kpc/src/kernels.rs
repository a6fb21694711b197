//! Kernel zoo: evaluation, Gram matrices and bandwidth selection.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::data::{distance, Dataset, MetricSpec, Payload, Rotation};
use crate::error::{KpcError, Result};

/// Rows of a block of columns, materialized in the representation kernels need.
#[derive(Debug, Clone, PartialEq)]
pub enum Points {
    /// Row-major `n × dim` reals.
    Real { dim: usize, data: Vec<f64> },
    /// Row-major `n × dim` category codes.
    Cat { dim: usize, codes: Vec<u32> },
    /// One rotation per row.
    Rot(Vec<Rotation>),
}

#[derive(Debug, Clone, Copy)]
pub enum Point<'a> {
    Real(&'a [f64]),
    Cat(&'a [u32]),
    Rot(&'a Rotation),
}

impl Points {
    /// Real points from column vectors of equal length.
    pub fn from_columns(cols: &[&[f64]]) -> Points {
        let dim = cols.len();
        let n = cols.first().map(|c| c.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            for c in cols {
                data.push(c[i]);
            }
        }
        Points::Real { dim, data }
    }

    pub fn scalar(v: &[f64]) -> Points {
        Points::Real { dim: 1, data: v.to_vec() }
    }

    /// Gather `cols` of `ds`. Blocks must be all numeric, all categorical, or a single rotation column.
    pub fn from_dataset(ds: &Dataset, cols: &[usize]) -> Result<Points> {
        if cols.is_empty() {
            return Err(KpcError::InvalidConfig("empty column block".into()));
        }
        let payloads: Vec<&Payload> = cols.iter().map(|&c| &ds.column(c).payload).collect();
        if payloads.iter().all(|p| matches!(p, Payload::Numeric(_))) {
            let vs: Vec<&[f64]> = payloads
                .iter()
                .map(|p| match p {
                    Payload::Numeric(v) => v.as_slice(),
                    _ => unreachable!(),
                })
                .collect();
            return Ok(Points::from_columns(&vs));
        }
        if payloads.iter().all(|p| matches!(p, Payload::Categorical { .. })) {
            let n = ds.n();
            let dim = cols.len();
            let mut codes = Vec::with_capacity(n * dim);
            for i in 0..n {
                for p in &payloads {
                    if let Payload::Categorical { codes: c, .. } = p {
                        codes.push(c[i]);
                    }
                }
            }
            return Ok(Points::Cat { dim, codes });
        }
        if let [Payload::Rotation(v)] = payloads.as_slice() {
            return Ok(Points::Rot(v.clone()));
        }
        Err(KpcError::TypeMismatch(
            "kernel blocks must be all numeric, all categorical, or one rotation column".into(),
        ))
    }

    pub fn len(&self) -> usize {
        match self {
            Points::Real { dim, data } => {
                if *dim == 0 {
                    0
                } else {
                    data.len() / dim
                }
            }
            Points::Cat { dim, codes } => {
                if *dim == 0 {
                    0
                } else {
                    codes.len() / dim
                }
            }
            Points::Rot(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn point(&self, i: usize) -> Point<'_> {
        match self {
            Points::Real { dim, data } => Point::Real(&data[i * dim..(i + 1) * dim]),
            Points::Cat { dim, codes } => Point::Cat(&codes[i * dim..(i + 1) * dim]),
            Points::Rot(v) => Point::Rot(&v[i]),
        }
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Points {
        match self {
            Points::Real { dim, data } => Points::Real {
                dim: *dim,
                data: idx.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied()).collect(),
            },
            Points::Cat { dim, codes } => Points::Cat {
                dim: *dim,
                codes: idx.iter().flat_map(|&i| codes[i * dim..(i + 1) * dim].iter().copied()).collect(),
            },
            Points::Rot(v) => Points::Rot(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    Median,
}

/// Reference measure for the CDF kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum FociReference {
    /// The observed response sample, each point with mass 1/n.
    Sample,
    /// Explicit (value, probability) atoms.
    Weighted(Vec<(f64, f64)>),
}

/// Declarative kernel description; bandwidths are resolved against data by [`KernelSpec::resolve`].
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// exp(−‖u−v‖²/(2s²))
    Gaussian(Bandwidth),
    /// exp(−‖u−v‖₁/s)
    Laplace(Bandwidth),
    /// uᵀv
    Linear,
    /// (‖u‖^α + ‖v‖^α − ‖u−v‖^α)/2 with α ∈ (0,2)
    Distance { alpha: f64 },
    /// 1{u = v}
    Discrete,
    /// πθ(π−θ)/(8 sin θ), θ the angle of B⁻¹A
    So3,
    /// Π(a_i+b_i+1)⁻¹
    HistInv,
    /// exp(−Σ√(a_i+b_i))
    HistExpSqrt,
    /// ∫ 1{u ≥ t}1{v ≥ t} dμ(t)
    FociCdf(FociReference),
}

impl KernelSpec {
    /// Gaussian with the form exp(−γ‖u−v‖²).
    pub fn gaussian_gamma(gamma: f64) -> KernelSpec {
        KernelSpec::Gaussian(Bandwidth::Fixed((1.0 / (2.0 * gamma)).sqrt()))
    }

    pub fn gaussian_median() -> KernelSpec {
        KernelSpec::Gaussian(Bandwidth::Median)
    }

    pub fn has_median_rule(&self) -> bool {
        matches!(self, KernelSpec::Gaussian(Bandwidth::Median) | KernelSpec::Laplace(Bandwidth::Median))
    }

    /// Freeze data-dependent parameters on `pts`.
    pub fn resolve(&self, pts: &Points) -> Result<Kernel> {
        Ok(match self {
            KernelSpec::Gaussian(b) => {
                let s = match *b {
                    Bandwidth::Fixed(s) => positive_bandwidth(s)?,
                    Bandwidth::Median => median_of_distances(pts, Norm::L2)?,
                };
                Kernel::Gaussian { inv2s2: 1.0 / (2.0 * s * s) }
            }
            KernelSpec::Laplace(b) => {
                let s = match *b {
                    Bandwidth::Fixed(s) => positive_bandwidth(s)?,
                    Bandwidth::Median => median_of_distances(pts, Norm::L1)?,
                };
                Kernel::Laplace { inv_s: 1.0 / s }
            }
            KernelSpec::Linear => Kernel::Linear,
            KernelSpec::Distance { alpha } => {
                if !(*alpha > 0.0 && *alpha < 2.0) {
                    return Err(KpcError::InvalidConfig(format!("distance kernel exponent {alpha} outside (0,2)")));
                }
                Kernel::Distance { alpha: *alpha }
            }
            KernelSpec::Discrete => Kernel::Discrete,
            KernelSpec::So3 => Kernel::So3,
            KernelSpec::HistInv => Kernel::HistInv,
            KernelSpec::HistExpSqrt => Kernel::HistExpSqrt,
            KernelSpec::FociCdf(r) => {
                let atoms = match r {
                    FociReference::Weighted(a) => a.clone(),
                    FociReference::Sample => match pts {
                        Points::Real { dim: 1, data } => {
                            let w = 1.0 / data.len() as f64;
                            data.iter().map(|&y| (y, w)).collect()
                        }
                        _ => return Err(KpcError::TypeMismatch("foci_cdf needs a scalar real sample".into())),
                    },
                };
                Kernel::foci(atoms)?
            }
        })
    }

    /// Resolve directly on columns of a dataset.
    pub fn resolve_on(&self, ds: &Dataset, cols: &[usize]) -> Result<Kernel> {
        self.resolve(&Points::from_dataset(ds, cols)?)
    }
}

fn positive_bandwidth(s: f64) -> Result<f64> {
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(KpcError::InvalidConfig(format!("bandwidth {s} must be positive")))
    }
}

/// A kernel with every parameter fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Gaussian { inv2s2: f64 },
    Laplace { inv_s: f64 },
    Linear,
    Distance { alpha: f64 },
    Discrete,
    So3,
    HistInv,
    HistExpSqrt,
    /// Sorted distinct thresholds with cumulative mass `cum[k] = μ(t ≤ thresholds[k])`.
    FociCdf { thresholds: Vec<f64>, cum: Vec<f64> },
}

pub const SO3_DIAG: f64 = PI * PI / 8.0;

impl Kernel {
    pub fn foci(mut atoms: Vec<(f64, f64)>) -> Result<Kernel> {
        if atoms.is_empty() {
            return Err(KpcError::InvalidConfig("foci_cdf reference sample is empty".into()));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut thresholds: Vec<f64> = Vec::new();
        let mut cum: Vec<f64> = Vec::new();
        let mut acc = 0.0;
        for (t, w) in atoms {
            acc += w;
            if thresholds.last() == Some(&t) {
                *cum.last_mut().unwrap() = acc;
            } else {
                thresholds.push(t);
                cum.push(acc);
            }
        }
        Ok(Kernel::FociCdf { thresholds, cum })
    }

    /// Bandwidth s for Gaussian/Laplace kernels.
    pub fn bandwidth(&self) -> Option<f64> {
        match self {
            Kernel::Gaussian { inv2s2 } => Some((1.0 / (2.0 * inv2s2)).sqrt()),
            Kernel::Laplace { inv_s } => Some(1.0 / inv_s),
            _ => None,
        }
    }

    #[inline]
    pub fn eval_idx(&self, pts: &Points, i: usize, j: usize) -> Result<f64> {
        self.eval(pts.point(i), pts.point(j))
    }

    pub fn eval(&self, a: Point<'_>, b: Point<'_>) -> Result<f64> {
        match (self, a, b) {
            (Kernel::Discrete, Point::Real(u), Point::Real(v)) => Ok((u == v) as u8 as f64),
            (Kernel::Discrete, Point::Cat(u), Point::Cat(v)) => Ok((u == v) as u8 as f64),
            (Kernel::Discrete, Point::Rot(u), Point::Rot(v)) => Ok((u == v) as u8 as f64),
            (Kernel::So3, Point::Rot(u), Point::Rot(v)) => Ok(so3(u, v)),
            (_, Point::Real(u), Point::Real(v)) if u.len() == v.len() => self.eval_real(u, v),
            _ => Err(KpcError::TypeMismatch(format!("{self:?} on {a:?} and {b:?}"))),
        }
    }

    fn eval_real(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        Ok(match self {
            Kernel::Gaussian { inv2s2 } => (-sq_dist(u, v) * inv2s2).exp(),
            Kernel::Laplace { inv_s } => (-u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum::<f64>() * inv_s).exp(),
            Kernel::Linear => u.iter().zip(v).map(|(a, b)| a * b).sum(),
            Kernel::Distance { alpha } => {
                let p = |x: f64| x.powf(alpha / 2.0);
                let nu: f64 = u.iter().map(|a| a * a).sum();
                let nv: f64 = v.iter().map(|a| a * a).sum();
                (p(nu) + p(nv) - p(sq_dist(u, v))) / 2.0
            }
            Kernel::HistInv => {
                check_nonneg(u, v)?;
                u.iter().zip(v).map(|(a, b)| 1.0 / (a + b + 1.0)).product()
            }
            Kernel::HistExpSqrt => {
                check_nonneg(u, v)?;
                (-u.iter().zip(v).map(|(a, b)| (a + b).sqrt()).sum::<f64>()).exp()
            }
            Kernel::FociCdf { thresholds, cum } => {
                if u.len() != 1 {
                    return Err(KpcError::TypeMismatch("foci_cdf needs scalar points".into()));
                }
                let m = u[0].min(v[0]);
                let k = thresholds.partition_point(|t| *t <= m);
                if k == 0 {
                    0.0
                } else {
                    cum[k - 1]
                }
            }
            Kernel::Discrete | Kernel::So3 => return Err(KpcError::TypeMismatch(format!("{self:?} on real points"))),
        })
    }

    /// Gram matrix over all rows of `pts`.
    pub fn gram(&self, pts: &Points) -> Result<DMatrix<f64>> {
        let n = pts.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.eval_idx(pts, i, j)?;
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// k(p_i, p_i) for every row.
    pub fn diag(&self, pts: &Points) -> Result<Vec<f64>> {
        (0..pts.len()).map(|i| self.eval_idx(pts, i, i)).collect()
    }
}

fn check_nonneg(u: &[f64], v: &[f64]) -> Result<()> {
    if u.iter().chain(v).any(|x| *x < 0.0) {
        return Err(KpcError::TypeMismatch("histogram kernels need nonnegative vectors".into()));
    }
    Ok(())
}

#[inline]
fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..u.len() {
        let d = u[k] - v[k];
        s += d * d;
    }
    s
}

/// Rotation angle of BᵀA.
pub fn rotation_angle(a: &Rotation, b: &Rotation) -> f64 {
    // Tr(BᵀA) = Σ_ij B_ij A_ij
    let tr: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

fn so3(a: &Rotation, b: &Rotation) -> f64 {
    let theta = rotation_angle(a, b);
    if theta < 1e-7 || PI - theta < 1e-7 {
        return SO3_DIAG;
    }
    PI * theta * (PI - theta) / (8.0 * theta.sin())
}

/// Evaluate a kernel on two points.
pub fn eval(k: &KernelSpec, a: Point<'_>, b: Point<'_>) -> Result<f64> {
    let kernel = match k {
        KernelSpec::Gaussian(Bandwidth::Median) | KernelSpec::Laplace(Bandwidth::Median) => {
            return Err(KpcError::InvalidConfig("median bandwidth must be resolved on data first".into()))
        }
        KernelSpec::FociCdf(FociReference::Sample) => {
            return Err(KpcError::InvalidConfig("foci_cdf sample reference must be resolved on data first".into()))
        }
        _ => k.resolve(&Points::Real { dim: 0, data: vec![] })?,
    };
    kernel.eval(a, b)
}

/// Gram matrix of `k` resolved on `cols` of `ds`.
pub fn gram_matrix(k: &KernelSpec, ds: &Dataset, cols: &[usize]) -> Result<DMatrix<f64>> {
    let pts = Points::from_dataset(ds, cols)?;
    k.resolve(&pts)?.gram(&pts)
}

#[derive(Clone, Copy)]
enum Norm {
    L1,
    L2,
}

/// Above this size the median is taken over an evenly strided subsample of rows.
pub const MEDIAN_MAX_ROWS: usize = 4000;

fn strided(n: usize) -> Vec<usize> {
    if n <= MEDIAN_MAX_ROWS {
        (0..n).collect()
    } else {
        (0..MEDIAN_MAX_ROWS).map(|k| k * n / MEDIAN_MAX_ROWS).collect()
    }
}

fn median_of_distances(pts: &Points, norm: Norm) -> Result<f64> {
    let idx = strided(pts.len());
    let (dim, data) = match pts {
        Points::Real { dim, data } => (*dim, data),
        _ => return Err(KpcError::TypeMismatch("median bandwidth needs real points".into())),
    };
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut d = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[..a] {
            d.push(match norm {
                Norm::L2 => sq_dist(row(i), row(j)).sqrt(),
                Norm::L1 => row(i).iter().zip(row(j)).map(|(x, y)| (x - y).abs()).sum(),
            });
        }
    }
    median(d)
}

fn median(mut d: Vec<f64>) -> Result<f64> {
    if d.is_empty() {
        return Err(KpcError::TooFewPoints { need: 2, have: 1 });
    }
    let m = d.len();
    let hi = {
        let (_, v, _) = d.select_nth_unstable_by(m / 2, |a, b| a.total_cmp(b));
        *v
    };
    let med = if m % 2 == 1 {
        hi
    } else {
        let lo = d[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0
    };
    if med > 0.0 {
        Ok(med)
    } else if d.iter().any(|x| *x > 0.0) {
        // more than half the pairs coincide; fall back to the smallest positive distance
        Ok(d.iter().copied().filter(|x| *x > 0.0).fold(f64::INFINITY, f64::min))
    } else {
        Err(KpcError::DegenerateBandwidth)
    }
}

/// Median of pairwise distances between rows of `cols` under `metric`.
pub fn median_bandwidth(ds: &Dataset, cols: &[usize], metric: &MetricSpec) -> Result<f64> {
    let idx = strided(ds.n());
    let mut d = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[..a] {
            d.push(distance(metric, ds, cols, i, j)?);
        }
    }
    median(d)
}
