//! Ground-truth references: exact population ρ² on finite supports, the
//! Azadkia–Chatterjee functional, classical partial correlation, and Monte
//! Carlo monotonicity probes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset, MetricSpec, VariableRoles};
use crate::error::{KpcError, Result};
use crate::graph::GraphSpec;
use crate::graph_est::kpc_graph;
use crate::kernels::{FociReference, Kernel, KernelSpec, Point, Points};
use crate::rng::{child_seed, stream, tag};

/// Compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    pub fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

/// Finite joint law of (X, Y, Z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    atoms: Vec<Atom>,
    probs: Vec<f64>,
}

fn key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| if *x == 0.0 { 0 } else { x.to_bits() }).collect()
}

impl DiscreteJoint {
    pub fn new(atoms: Vec<Atom>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != probs.len() {
            return Err(KpcError::InvalidConfig("atoms and probabilities must be non-empty and aligned".into()));
        }
        if probs.iter().any(|p| !(*p > 0.0)) {
            return Err(KpcError::InvalidConfig("atom probabilities must be positive".into()));
        }
        let mut total = Kahan::default();
        probs.iter().for_each(|p| total.add(*p));
        if (total.value() - 1.0).abs() > 1e-12 {
            return Err(KpcError::InvalidConfig(format!("probabilities sum to {}", total.value())));
        }
        let (dx, dy, dz) = (atoms[0].x.len(), atoms[0].y.len(), atoms[0].z.len());
        if dy == 0 || dz == 0 {
            return Err(KpcError::InvalidConfig("atoms need non-empty y and z".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for a in &atoms {
            if a.x.len() != dx || a.y.len() != dy || a.z.len() != dz {
                return Err(KpcError::InvalidConfig("atoms have inconsistent dimensions".into()));
            }
            if a.x.iter().chain(&a.y).chain(&a.z).any(|v| !v.is_finite()) {
                return Err(KpcError::InvalidConfig("atoms must be finite".into()));
            }
            if !seen.insert((key(&a.x), key(&a.y), key(&a.z))) {
                return Err(KpcError::InvalidConfig("atoms must be distinct".into()));
            }
        }
        Ok(DiscreteJoint { atoms, probs })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Marginal law of a scalar Y as (value, probability) pairs.
    pub fn marginal_y(&self) -> Result<Vec<(f64, f64)>> {
        let mut m: BTreeMap<u64, (f64, Kahan)> = BTreeMap::new();
        for (a, p) in self.atoms.iter().zip(&self.probs) {
            if a.y.len() != 1 {
                return Err(KpcError::TypeMismatch("marginal_y needs scalar Y".into()));
            }
            let y = a.y[0];
            m.entry(key(&a.y)[0]).or_insert((y, Kahan::default())).1.add(*p);
        }
        let mut out: Vec<(f64, f64)> = m.into_values().map(|(y, k)| (y, k.value())).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(out)
    }

    /// n i.i.d. draws as a dataset with columns x1.., z1.., y1.. (plain x, z, y when scalar).
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(KpcError::EmptyData);
        }
        let mut cum = Vec::with_capacity(self.probs.len());
        let mut acc = 0.0;
        for p in &self.probs {
            acc += p;
            cum.push(acc);
        }
        let mut rng = stream(seed, &[tag::SIM, 0xd15c]);
        let draws: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                cum.partition_point(|c| *c <= u).min(self.atoms.len() - 1)
            })
            .collect();
        let a0 = &self.atoms[0];
        let mut columns = Vec::new();
        let block = |name: &str, dim: usize, get: &dyn Fn(&Atom) -> &Vec<f64>, columns: &mut Vec<Column>| {
            for k in 0..dim {
                let label = if dim == 1 { name.to_string() } else { format!("{name}{}", k + 1) };
                columns.push(Column::numeric(label, draws.iter().map(|&d| get(&self.atoms[d])[k]).collect()));
            }
        };
        block("x", a0.x.len(), &|a| &a.x, &mut columns);
        block("z", a0.z.len(), &|a| &a.z, &mut columns);
        block("y", a0.y.len(), &|a| &a.y, &mut columns);
        Dataset::new(columns)
    }

    /// Roles matching the column layout of [`DiscreteJoint::sample`].
    pub fn sample_roles(&self) -> VariableRoles {
        let a0 = &self.atoms[0];
        let (dx, dz, dy) = (a0.x.len(), a0.z.len(), a0.y.len());
        VariableRoles::new((dx + dz..dx + dz + dy).collect(), (dx..dx + dz).collect(), (0..dx).collect())
    }

    fn groups(&self, with_z: bool) -> Vec<Vec<usize>> {
        let mut g: BTreeMap<(Vec<u64>, Vec<u64>), Vec<usize>> = BTreeMap::new();
        for (i, a) in self.atoms.iter().enumerate() {
            let zk = if with_z { key(&a.z) } else { Vec::new() };
            g.entry((key(&a.x), zk)).or_default().push(i);
        }
        g.into_values().collect()
    }
}

/// E over groups of E[k(Y, Y') | group] for conditionally independent copies.
fn conditional_self_similarity(dj: &DiscreteJoint, k: &Kernel, groups: &[Vec<usize>]) -> Result<f64> {
    let mut total = Kahan::default();
    for g in groups {
        let mut mass = Kahan::default();
        let mut s = Kahan::default();
        for &a in g {
            mass.add(dj.probs[a]);
            for &b in g {
                let v = k.eval(Point::Real(&dj.atoms[a].y), Point::Real(&dj.atoms[b].y))?;
                s.add(dj.probs[a] * dj.probs[b] * v);
            }
        }
        total.add(s.value() / mass.value());
    }
    Ok(total.value())
}

fn resolve_population(dj: &DiscreteJoint, kernel: &KernelSpec) -> Result<Kernel> {
    match kernel {
        KernelSpec::FociCdf(FociReference::Sample) => Kernel::foci(dj.marginal_y()?),
        k if k.has_median_rule() => {
            Err(KpcError::InvalidConfig("population values need a fixed bandwidth".into()))
        }
        k => k.resolve(&Points::Real { dim: 0, data: vec![] }),
    }
}

/// Exact ρ²(Y, Z | X) by enumeration. A `FociCdf(Sample)` kernel uses the marginal of Y as reference.
pub fn population_rho2(dj: &DiscreteJoint, kernel: &KernelSpec) -> Result<f64> {
    let k = resolve_population(dj, kernel)?;
    let t_x = conditional_self_similarity(dj, &k, &dj.groups(false))?;
    let t_xz = conditional_self_similarity(dj, &k, &dj.groups(true))?;
    let mut diag = Kahan::default();
    for (a, p) in dj.atoms.iter().zip(&dj.probs) {
        diag.add(p * k.eval(Point::Real(&a.y), Point::Real(&a.y))?);
    }
    let den = diag.value() - t_x;
    if !(den > 1e-14 * diag.value().abs().max(f64::MIN_POSITIVE)) {
        return Err(KpcError::DegenerateY);
    }
    Ok((t_xz - t_x) / den)
}

/// Azadkia–Chatterjee T(Y, Z | X) for scalar Y:
/// ∫ E[Var(P(Y ≥ t | X, Z) | X)] dμ(t) / ∫ E[Var(1{Y ≥ t} | X)] dμ(t), μ the law of Y.
pub fn azadkia_chatterjee_t(dj: &DiscreteJoint) -> Result<f64> {
    let marginal = dj.marginal_y()?;
    let gx = dj.groups(false);
    let gxz = dj.groups(true);
    let prob_ge = |g: &[usize], t: f64| -> (f64, f64) {
        let mut mass = Kahan::default();
        let mut hit = Kahan::default();
        for &a in g {
            mass.add(dj.probs[a]);
            if dj.atoms[a].y[0] >= t {
                hit.add(dj.probs[a]);
            }
        }
        (mass.value(), hit.value() / mass.value())
    };
    let mut num = Kahan::default();
    let mut den = Kahan::default();
    for &(t, w) in &marginal {
        for g in &gx {
            let (px, qx) = prob_ge(g, t);
            // E[P(Y ≥ t | X, Z)² | X = x] over the (x, z) cells inside this x-group
            let xk = key(&dj.atoms[g[0]].x);
            let mut second = Kahan::default();
            for c in gxz.iter().filter(|c| key(&dj.atoms[c[0]].x) == xk) {
                let (pc, qc) = prob_ge(c, t);
                second.add(pc / px * qc * qc);
            }
            num.add(w * px * (second.value() - qx * qx));
            den.add(w * px * qx * (1.0 - qx));
        }
    }
    if !(den.value() > 1e-14) {
        return Err(KpcError::DegenerateY);
    }
    Ok(num.value() / den.value())
}

/// Correlation of the OLS residuals of `y` and `z` on an intercept plus the columns of `x`.
pub fn classical_partial_correlation(y: &[f64], z: &[f64], x: &[&[f64]]) -> Result<f64> {
    let n = y.len();
    if z.len() != n || x.iter().any(|c| c.len() != n) {
        return Err(KpcError::SizeMismatch { expected: n, got: z.len() });
    }
    let p = x.len() + 1;
    if n <= p {
        return Err(KpcError::RankDeficient);
    }
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[j - 1][i] });
    let qr = design.qr();
    let r = qr.r();
    let rmax = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if (0..p).any(|j| r[(j, j)].abs() <= 1e-10 * rmax.max(1.0)) {
        return Err(KpcError::RankDeficient);
    }
    let q = qr.q();
    let resid = |v: &[f64]| -> DVector<f64> {
        let v = DVector::from_column_slice(v);
        let coef = q.transpose() * &v;
        &v - &q * coef
    };
    let ry = resid(y);
    let rz = resid(z);
    let (ny, nz) = (ry.norm(), rz.norm());
    if ny == 0.0 || nz == 0.0 {
        return Err(KpcError::RankDeficient);
    }
    Ok(ry.dot(&rz) / (ny * nz))
}

/// ρ_{YZ·X} from pairwise correlations of a jointly Gaussian triple.
pub fn gaussian_partial_correlation(r_yz: f64, r_yx: f64, r_zx: f64) -> f64 {
    (r_yz - r_yx * r_zx) / ((1.0 - r_yx * r_yx) * (1.0 - r_zx * r_zx)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProbeFamily {
    /// Z = X/2 + U, Y = X + ρU + √(1−ρ²)V: partial correlation ρ with Var(Y | X) = 1.
    GaussianParcor,
    /// Y = (1−λ) sin(2X) + λ(XZ + Z) + σε.
    LambdaMixture { noise_sd: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n: usize,
    pub reps: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { n: 100_000, reps: 8, k: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub param: f64,
    pub estimate: f64,
    /// Monte Carlo standard error of `estimate`.
    pub se: f64,
}

/// Draw (x, z, y) for one probe parameter.
pub fn probe_dataset(family: ProbeFamily, param: f64, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = stream(seed, &[tag::SIM, 0x9b0e]);
    let mut nrm = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut x = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = nrm();
        match family {
            ProbeFamily::GaussianParcor => {
                let (u, v) = (nrm(), nrm());
                x.push(xi);
                z.push(0.5 * xi + u);
                y.push(xi + param * u + (1.0 - param * param).max(0.0).sqrt() * v);
            }
            ProbeFamily::LambdaMixture { noise_sd } => {
                let zi = nrm();
                let e = if noise_sd > 0.0 { noise_sd * nrm() } else { 0.0 };
                x.push(xi);
                z.push(zi);
                y.push((1.0 - param) * (2.0 * xi).sin() + param * (xi * zi + zi) + e);
            }
        }
    }
    Dataset::new(vec![Column::numeric("x", x), Column::numeric("z", z), Column::numeric("y", y)])
}

/// Large-sample graph-estimator curve of ρ² over `grid`.
pub fn monotonicity_probe(
    family: ProbeFamily,
    grid: &[f64],
    kernel: &KernelSpec,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbePoint>> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(KpcError::InvalidConfig("probe grid must be sorted".into()));
    }
    let roles = VariableRoles::new(vec![2], vec![1], vec![0]);
    let mut out = Vec::with_capacity(grid.len());
    for (g, &param) in grid.iter().enumerate() {
        let mut vals = Vec::with_capacity(cfg.reps);
        for r in 0..cfg.reps {
            let seed = child_seed(cfg.seed, &[g as u64, r as u64]);
            let ds = probe_dataset(family, param, cfg.n, seed)?;
            let spec = GraphSpec::knn(cfg.k, seed);
            vals.push(kpc_graph(&ds, &roles, kernel, &spec, &spec, &MetricSpec::euclidean(), false)?.value);
        }
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
        out.push(ProbePoint { param, estimate: mean, se: (var / m).sqrt() });
    }
    Ok(out)
}
