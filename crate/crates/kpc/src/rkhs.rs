//! RKHS estimator ρ̃² through regularized Gram-matrix solves, its uncentered
//! variant, and the incomplete-Cholesky low-rank path.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VariableRoles};
use crate::error::{KpcError, Result};
use crate::graph_est::KpcEstimate;
use crate::kernels::{Kernel, KernelSpec, Points};

/// Kernel on the joint (X, Z) block.
#[derive(Debug, Clone, PartialEq)]
pub enum XzKernel {
    /// One kernel on the concatenated columns.
    Joint(KernelSpec),
    /// (k_x(x,x') + shift)·k_z(z,z'); with `z = None` the Z block is ignored.
    Product { x: KernelSpec, x_shift: f64, z: Option<KernelSpec> },
}

/// Incomplete Cholesky stopping rule for the low-rank path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowRankSpec {
    /// Stop once the trace residual is at most `tol_rel · trace(K)`.
    pub tol_rel: f64,
    pub max_rank: Option<usize>,
}

impl Default for LowRankSpec {
    fn default() -> Self {
        LowRankSpec { tol_rel: 1e-6, max_rank: None }
    }
}

impl LowRankSpec {
    pub fn rank(r: usize) -> Self {
        LowRankSpec { tol_rel: 0.0, max_rank: Some(r) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RkhsConfig {
    pub eps1: f64,
    pub eps2: f64,
    pub kernel_y: KernelSpec,
    pub kernel_x: KernelSpec,
    pub kernel_xz: XzKernel,
    pub centered: bool,
    pub lowrank: Option<LowRankSpec>,
}

pub const DEFAULT_EPS: f64 = 1e-3;

/// ε_n = 10⁻³·n^(−0.4).
pub fn eps_schedule(n: usize) -> f64 {
    1e-3 * (n as f64).powf(-0.4)
}

impl RkhsConfig {
    pub fn new(kernel_y: KernelSpec, kernel_x: KernelSpec, kernel_xz: KernelSpec, eps: f64) -> Self {
        RkhsConfig {
            eps1: eps,
            eps2: eps,
            kernel_y,
            kernel_x,
            kernel_xz: XzKernel::Joint(kernel_xz),
            centered: true,
            lowrank: None,
        }
    }

    /// Gaussian kernels with median bandwidths and ε = 10⁻³.
    pub fn gaussian_median() -> Self {
        let g = KernelSpec::gaussian_median();
        Self::new(g.clone(), g.clone(), g, DEFAULT_EPS)
    }

    pub fn linear(eps: f64) -> Self {
        Self::new(KernelSpec::Linear, KernelSpec::Linear, KernelSpec::Linear, eps)
    }

    pub fn with_eps(mut self, eps1: f64, eps2: f64) -> Self {
        self.eps1 = eps1;
        self.eps2 = eps2;
        self
    }

    pub fn uncentered(mut self) -> Self {
        self.centered = false;
        self
    }

    pub fn with_lowrank(mut self, lr: LowRankSpec) -> Self {
        self.lowrank = Some(lr);
        self
    }

    fn check(&self) -> Result<()> {
        for e in [self.eps1, self.eps2] {
            if !(e > 0.0 && e.is_finite()) {
                return Err(KpcError::InvalidConfig(format!("ε = {e} must be positive")));
            }
        }
        if let Some(lr) = &self.lowrank {
            if lr.max_rank == Some(0) || !(lr.tol_rel >= 0.0) {
                return Err(KpcError::InvalidConfig("low-rank rank must be ≥ 1 and tolerance ≥ 0".into()));
            }
        }
        Ok(())
    }
}

/// Entry-wise access to a Gram matrix without materializing it.
#[derive(Debug, Clone)]
pub enum GramSource {
    Simple { kernel: Kernel, pts: Points },
    Product { kx: Kernel, px: Points, shift: f64, z: Option<(Kernel, Points)> },
}

impl GramSource {
    pub fn simple(spec: &KernelSpec, pts: Points) -> Result<Self> {
        let kernel = spec.resolve(&pts)?;
        Ok(GramSource::Simple { kernel, pts })
    }

    pub fn n(&self) -> usize {
        match self {
            GramSource::Simple { pts, .. } => pts.len(),
            GramSource::Product { px, .. } => px.len(),
        }
    }

    #[inline]
    pub fn eval(&self, i: usize, j: usize) -> Result<f64> {
        match self {
            GramSource::Simple { kernel, pts } => kernel.eval_idx(pts, i, j),
            GramSource::Product { kx, px, shift, z } => {
                let a = kx.eval_idx(px, i, j)? + shift;
                Ok(match z {
                    Some((kz, pz)) => a * kz.eval_idx(pz, i, j)?,
                    None => a,
                })
            }
        }
    }

    pub fn dense(&self) -> Result<DMatrix<f64>> {
        if let GramSource::Simple { kernel, pts } = self {
            return kernel.gram(pts);
        }
        let n = self.n();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.eval(i, j)?;
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Real feature matrix when the Gram is a linear kernel on real points.
    fn linear_features(&self) -> Option<DMatrix<f64>> {
        match self {
            GramSource::Simple { kernel: Kernel::Linear, pts: Points::Real { dim, data } } if *dim > 0 => {
                Some(DMatrix::from_row_slice(data.len() / dim, *dim, data))
            }
            _ => None,
        }
    }
}

/// Gram sources for Y, X (if any) and the joint block.
pub struct Sources {
    pub y: GramSource,
    pub x: Option<GramSource>,
    pub xz: GramSource,
}

pub fn sources(ds: &Dataset, roles: &VariableRoles, cfg: &RkhsConfig) -> Result<Sources> {
    roles.validate(ds)?;
    cfg.check()?;
    let y = GramSource::simple(&cfg.kernel_y, Points::from_dataset(ds, &roles.y)?)?;
    let x = if roles.x.is_empty() {
        None
    } else {
        Some(GramSource::simple(&cfg.kernel_x, Points::from_dataset(ds, &roles.x)?)?)
    };
    let xz = match &cfg.kernel_xz {
        XzKernel::Joint(spec) => {
            let cols = if roles.x.is_empty() { roles.z.clone() } else { roles.xz() };
            GramSource::simple(spec, Points::from_dataset(ds, &cols)?)?
        }
        XzKernel::Product { x: kx, x_shift, z } => {
            let z = match z {
                Some(kz) => {
                    let pz = Points::from_dataset(ds, &roles.z)?;
                    Some((kz.resolve(&pz)?, pz))
                }
                None => None,
            };
            if roles.x.is_empty() {
                match z {
                    Some((kz, pz)) => GramSource::Simple { kernel: kz, pts: pz },
                    None => return Err(KpcError::InvalidConfig("product kernel without a Z factor and no X".into())),
                }
            } else {
                let px = Points::from_dataset(ds, &roles.x)?;
                let kxr = kx.resolve(&px)?;
                GramSource::Product { kx: kxr, px, shift: *x_shift, z }
            }
        }
    };
    Ok(Sources { y, x, xz })
}

/// HKH with H = I − 11ᵀ/n.
pub fn center_gram(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let nf = n as f64;
    let row: Vec<f64> = (0..n).map(|i| k.row(i).sum() / nf).collect();
    let col: Vec<f64> = (0..n).map(|j| k.column(j).sum() / nf).collect();
    let grand = row.iter().sum::<f64>() / nf;
    DMatrix::from_fn(n, k.ncols(), |i, j| k[(i, j)] - row[i] - col[j] + grand)
}

/// L − column means of L, i.e. HL.
pub fn center_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = l.clone();
    let n = l.nrows() as f64;
    for mut c in out.column_iter_mut() {
        let m = c.sum() / n;
        c.add_scalar_mut(-m);
    }
    out
}

fn spd(mut a: DMatrix<f64>, shift: f64) -> Result<Cholesky<f64, Dyn>> {
    for i in 0..a.nrows() {
        a[(i, i)] += shift;
    }
    Cholesky::new(a).ok_or(KpcError::NonPsdGram)
}

/// Greedily pivoted incomplete Cholesky factor, L Lᵀ ≈ K.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    pub pivots: Vec<usize>,
    /// trace(K − LLᵀ) at termination.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CholStop {
    /// Stop once the trace residual is at most this absolute value.
    Tolerance(f64),
    MaxRank(usize),
    Both { tol: f64, max_rank: usize },
}

/// Incomplete Cholesky from the diagonal and an entry oracle `k(i, j)`.
pub fn incomplete_cholesky_fn<F>(diag: Vec<f64>, k: F, stop: CholStop) -> Result<CholFactor>
where
    F: Fn(usize, usize) -> Result<f64>,
{
    let n = diag.len();
    let (tol, max_rank) = match stop {
        CholStop::Tolerance(t) => (t, n),
        CholStop::MaxRank(r) => (0.0, r.min(n)),
        CholStop::Both { tol, max_rank } => (tol, max_rank.min(n)),
    };
    let scale = diag.iter().copied().fold(0.0, f64::max);
    let slack = 1e-9 * scale.max(f64::MIN_POSITIVE);
    let floor = 1e-14 * scale;
    if let Some((i, &v)) = diag.iter().enumerate().find(|(_, v)| **v < -slack) {
        return Err(KpcError::NegativeDiagonal { index: i, value: v });
    }
    let mut d: Vec<f64> = diag.iter().map(|v| v.max(0.0)).collect();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivots = Vec::new();
    let mut is_pivot = vec![false; n];
    while cols.len() < max_rank {
        let residual: f64 = d.iter().sum();
        if residual <= tol {
            break;
        }
        let (p, &dp) = d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        if dp <= floor {
            break;
        }
        let lpp = dp.sqrt();
        let mut col = vec![0.0; n];
        for i in 0..n {
            if is_pivot[i] {
                continue;
            }
            let mut v = k(i, p)?;
            for c in &cols {
                v -= c[i] * c[p];
            }
            col[i] = v / lpp;
        }
        col[p] = lpp;
        is_pivot[p] = true;
        for i in 0..n {
            if is_pivot[i] {
                d[i] = 0.0;
                continue;
            }
            let nd = d[i] - col[i] * col[i];
            if nd < -slack {
                return Err(KpcError::NegativeDiagonal { index: i, value: nd });
            }
            d[i] = nd.max(0.0);
        }
        pivots.push(p);
        cols.push(col);
    }
    let r = cols.len();
    let l = DMatrix::from_fn(n, r, |i, j| cols[j][i]);
    Ok(CholFactor { l, pivots, residual: d.iter().sum() })
}

pub fn incomplete_cholesky_matrix(k: &DMatrix<f64>, stop: CholStop) -> Result<CholFactor> {
    let diag = (0..k.nrows()).map(|i| k[(i, i)]).collect();
    incomplete_cholesky_fn(diag, |i, j| Ok(k[(i, j)]), stop)
}

pub fn incomplete_cholesky_source(src: &GramSource, stop: CholStop) -> Result<CholFactor> {
    let diag = (0..src.n()).map(|i| src.eval(i, i)).collect::<Result<Vec<_>>>()?;
    incomplete_cholesky_fn(diag, |i, j| src.eval(i, j), stop)
}

/// Incomplete Cholesky of the Gram matrix of `k` on `cols` of `ds`.
pub fn incomplete_cholesky(k: &KernelSpec, ds: &Dataset, cols: &[usize], stop: CholStop) -> Result<CholFactor> {
    let src = GramSource::simple(k, Points::from_dataset(ds, cols)?)?;
    incomplete_cholesky_source(&src, stop)
}

/// Essentially exact factor F with F Fᵀ = K (used to turn traces into Frobenius norms).
pub fn exact_factor(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(incomplete_cholesky_matrix(k, CholStop::Tolerance(0.0))?.l)
}

fn check_den(den: f64, trace_y: f64) -> Result<()> {
    if !(den >= 1e-12 * trace_y.max(1.0)) {
        return Err(KpcError::DegenerateDenominator { denominator: den });
    }
    Ok(())
}

/// ρ̃² from Gram matrices. `kx = None` is the unconditional case.
///
/// With A = K_X + nε₁I and B = K_Ẍ + nε₂I (centered or not):
/// M = nε₂B⁻¹ − nε₁A⁻¹ and N = nε₁A⁻¹, or M = I − nε₂B⁻¹, N = I without X.
/// For K_Y = F Fᵀ the traces are ‖MF‖² and ‖NF‖².
pub fn kpc_from_grams(
    ky: &DMatrix<f64>,
    kx: Option<&DMatrix<f64>>,
    kxz: &DMatrix<f64>,
    eps1: f64,
    eps2: f64,
    centered: bool,
) -> Result<KpcEstimate> {
    PreparedRkhs::new(ky, kx, eps1, eps2, centered)?.estimate(kxz)
}

/// Everything in ρ̃² that does not depend on the joint (X, Z) Gram matrix.
#[derive(Debug, Clone)]
pub struct PreparedRkhs {
    f: DMatrix<f64>,
    n_f: DMatrix<f64>,
    has_x: bool,
    den: f64,
    eps1: f64,
    eps2: f64,
    centered: bool,
}

impl PreparedRkhs {
    pub fn new(ky: &DMatrix<f64>, kx: Option<&DMatrix<f64>>, eps1: f64, eps2: f64, centered: bool) -> Result<Self> {
        let n = ky.nrows();
        if let Some(m) = kx {
            if m.nrows() != n || m.ncols() != n {
                return Err(KpcError::SizeMismatch { expected: n, got: m.nrows() });
            }
        }
        let kyc = if centered { center_gram(ky) } else { ky.clone() };
        let f = exact_factor(&kyc)?;
        let nf = n as f64;
        let n_f = match kx {
            Some(kx) => {
                let a = spd(if centered { center_gram(kx) } else { kx.clone() }, nf * eps1)?;
                a.solve(&f) * (nf * eps1)
            }
            None => f.clone(),
        };
        let den = n_f.norm_squared();
        check_den(den, kyc.trace())?;
        Ok(PreparedRkhs { f, n_f, has_x: kx.is_some(), den, eps1, eps2, centered })
    }

    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    pub fn denominator(&self) -> f64 {
        self.den
    }

    pub fn estimate(&self, kxz: &DMatrix<f64>) -> Result<KpcEstimate> {
        let n = self.n();
        if kxz.nrows() != n || kxz.ncols() != n {
            return Err(KpcError::SizeMismatch { expected: n, got: kxz.nrows() });
        }
        let nf = n as f64;
        let k = if self.centered { center_gram(kxz) } else { kxz.clone() };
        let mf = if self.has_x {
            let b = spd(k, nf * self.eps2)?;
            b.solve(&self.f) * (nf * self.eps2) - &self.n_f
        } else {
            // I − nεB⁻¹ = B⁻¹K; this form is exactly 0 when K vanishes
            let kf = &k * &self.f;
            spd(k, nf * self.eps2)?.solve(&kf)
        };
        let mut e = KpcEstimate::from_parts(mf.norm_squared(), self.den, false);
        e.diagnostics.insert("eps1".into(), self.eps1);
        e.diagnostics.insert("eps2".into(), self.eps2);
        e.diagnostics.insert("rank_y".into(), self.f.ncols() as f64);
        Ok(e)
    }
}

/// ρ̃² from low-rank factors L_X, L_Ẍ, L_Y via the Woodbury identity.
pub fn kpc_from_factors(
    ly: &DMatrix<f64>,
    lx: Option<&DMatrix<f64>>,
    lxz: &DMatrix<f64>,
    eps1: f64,
    eps2: f64,
    centered: bool,
) -> Result<KpcEstimate> {
    let n = ly.nrows();
    let nf = n as f64;
    let c = |m: &DMatrix<f64>| if centered { center_factor(m) } else { m.clone() };
    let l3 = c(ly);
    // L̃₃ᵀ L̃ (nεI + L̃ᵀL̃)⁻¹ L̃ᵀ, an r₃ × n matrix
    let smooth = |l: &DMatrix<f64>, eps: f64| -> Result<DMatrix<f64>> {
        let lc = c(l);
        let g = l3.transpose() * &lc;
        let cm = spd(lc.transpose() * &lc, nf * eps)?;
        let h = cm.solve(&g.transpose()).transpose();
        Ok(h * lc.transpose())
    };
    let t2 = smooth(lxz, eps2)?;
    let l3t = l3.transpose();
    let (num, den) = match lx {
        Some(lx) => {
            let t1 = smooth(lx, eps1)?;
            ((&t1 - &t2).norm_squared(), (&l3t - &t1).norm_squared())
        }
        None => (t2.norm_squared(), l3t.norm_squared()),
    };
    check_den(den, l3.norm_squared())?;
    let mut e = KpcEstimate::from_parts(num, den, false);
    e.diagnostics.insert("eps1".into(), eps1);
    e.diagnostics.insert("eps2".into(), eps2);
    e.diagnostics.insert("rank_y".into(), ly.ncols() as f64);
    e.diagnostics.insert("rank_x".into(), lx.map(|m| m.ncols()).unwrap_or(0) as f64);
    e.diagnostics.insert("rank_xz".into(), lxz.ncols() as f64);
    Ok(e)
}

fn estimate(ds: &Dataset, roles: &VariableRoles, cfg: &RkhsConfig, centered: bool) -> Result<KpcEstimate> {
    let s = sources(ds, roles, cfg)?;
    if cfg.lowrank.is_some() {
        return lowrank(&s, cfg, centered);
    }
    // Linear kernels on real data have exact finite feature maps; the Woodbury
    // form avoids the ill-conditioned n×n solves at tiny ε.
    let fx = s.x.as_ref().map(|x| x.linear_features());
    if let Some(lxz) = s.xz.linear_features() {
        if !matches!(fx, Some(None)) {
            let ly = match s.y.linear_features() {
                Some(f) => f,
                None => exact_factor(&s.y.dense()?)?,
            };
            let lx = fx.flatten();
            let mut e = kpc_from_factors(&ly, lx.as_ref(), &lxz, cfg.eps1, cfg.eps2, centered)?;
            e.diagnostics.insert("feature_path".into(), 1.0);
            return Ok(e);
        }
    }
    let ky = s.y.dense()?;
    let kx = s.x.as_ref().map(|x| x.dense()).transpose()?;
    let kxz = s.xz.dense()?;
    kpc_from_grams(&ky, kx.as_ref(), &kxz, cfg.eps1, cfg.eps2, centered)
}

fn lowrank(s: &Sources, cfg: &RkhsConfig, centered: bool) -> Result<KpcEstimate> {
    let lr = cfg.lowrank.unwrap_or_default();
    let factor = |src: &GramSource| -> Result<DMatrix<f64>> {
        let diag = (0..src.n()).map(|i| src.eval(i, i)).collect::<Result<Vec<_>>>()?;
        let tol = lr.tol_rel * diag.iter().sum::<f64>();
        let stop = CholStop::Both { tol, max_rank: lr.max_rank.unwrap_or(src.n()) };
        Ok(incomplete_cholesky_fn(diag, |i, j| src.eval(i, j), stop)?.l)
    };
    let ly = factor(&s.y)?;
    let lx = s.x.as_ref().map(factor).transpose()?;
    let lxz = factor(&s.xz)?;
    kpc_from_factors(&ly, lx.as_ref(), &lxz, cfg.eps1, cfg.eps2, centered)
}

/// ρ̃²(Y, Z | X) with centered Gram matrices (uncentered if `cfg.centered` is false).
pub fn kpc_rkhs(ds: &Dataset, roles: &VariableRoles, cfg: &RkhsConfig) -> Result<KpcEstimate> {
    estimate(ds, roles, cfg, cfg.centered)
}

/// The uncentered variant: every K̃ replaced by K.
pub fn kpc_rkhs_uncentered(ds: &Dataset, roles: &VariableRoles, cfg: &RkhsConfig) -> Result<KpcEstimate> {
    estimate(ds, roles, cfg, false)
}

/// Low-rank path; uses `cfg.lowrank` or the default tolerance.
pub fn kpc_rkhs_lowrank(ds: &Dataset, roles: &VariableRoles, cfg: &RkhsConfig) -> Result<KpcEstimate> {
    let mut cfg = cfg.clone();
    cfg.lowrank.get_or_insert_with(LowRankSpec::default);
    estimate(ds, roles, &cfg, cfg.centered)
}

/// K(K + nεI)⁻¹ for a symmetric PSD K, by a Cholesky solve.
pub fn smoother(k: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let n = k.nrows() as f64;
    Ok(spd(k.clone(), n * eps)?.solve(k))
}

/// nε(K + nεI)⁻¹, by a Cholesky solve against the identity.
pub fn resolvent(k: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    Ok(spd(k.clone(), n as f64 * eps)?.solve(&id) * (n as f64 * eps))
}

/// M in smoother form: K_X(K_X+nε₁I)⁻¹ − K_Ẍ(K_Ẍ+nε₂I)⁻¹.
pub fn smoother_difference(kx: &DMatrix<f64>, kxz: &DMatrix<f64>, eps1: f64, eps2: f64) -> Result<DMatrix<f64>> {
    Ok(smoother(kx, eps1)? - smoother(kxz, eps2)?)
}

/// M in resolvent form: nε₂(K_Ẍ+nε₂I)⁻¹ − nε₁(K_X+nε₁I)⁻¹.
pub fn resolvent_difference(kx: &DMatrix<f64>, kxz: &DMatrix<f64>, eps1: f64, eps2: f64) -> Result<DMatrix<f64>> {
    Ok(resolvent(kxz, eps2)? - resolvent(kx, eps1)?)
}
