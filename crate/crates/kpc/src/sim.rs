//! Simulation models for the estimation, selection and testing experiments.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset, Rotation};
use crate::error::{KpcError, Result};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SimModel {
    ModelI,
    ModelII,
    ModelIII,
    ModelIV,
    ModelV,
    Lm,
    Gam,
    Nonlin1,
    Nonlin2,
    Nonlin3,
    So3Select,
    CrtAdditive { gamma: f64 },
    CrtMultiplicative { gamma: f64 },
}

impl SimModel {
    /// Models whose predictors are x1..xp.
    pub fn is_selection(&self) -> bool {
        matches!(
            self,
            SimModel::Lm | SimModel::Gam | SimModel::Nonlin1 | SimModel::Nonlin2 | SimModel::Nonlin3 | SimModel::So3Select
        )
    }

    fn id(&self) -> u64 {
        match self {
            SimModel::ModelI => 1,
            SimModel::ModelII => 2,
            SimModel::ModelIII => 3,
            SimModel::ModelIV => 4,
            SimModel::ModelV => 5,
            SimModel::Lm => 6,
            SimModel::Gam => 7,
            SimModel::Nonlin1 => 8,
            SimModel::Nonlin2 => 9,
            SimModel::Nonlin3 => 10,
            SimModel::So3Select => 11,
            SimModel::CrtAdditive { .. } => 12,
            SimModel::CrtMultiplicative { .. } => 13,
        }
    }
}

impl fmt::Display for SimModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimModel::ModelI => write!(f, "model_I"),
            SimModel::ModelII => write!(f, "model_II"),
            SimModel::ModelIII => write!(f, "model_III"),
            SimModel::ModelIV => write!(f, "model_IV_so3"),
            SimModel::ModelV => write!(f, "model_V_so3"),
            SimModel::Lm => write!(f, "LM"),
            SimModel::Gam => write!(f, "GAM"),
            SimModel::Nonlin1 => write!(f, "Nonlin1"),
            SimModel::Nonlin2 => write!(f, "Nonlin2"),
            SimModel::Nonlin3 => write!(f, "Nonlin3"),
            SimModel::So3Select => write!(f, "SO3_select"),
            SimModel::CrtAdditive { gamma } => write!(f, "crt_additive({gamma})"),
            SimModel::CrtMultiplicative { gamma } => write!(f, "crt_multiplicative({gamma})"),
        }
    }
}

impl FromStr for SimModel {
    type Err = KpcError;

    /// Accepts the display names; CRT models take `crt_additive(0.5)` or `crt_additive:0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let gamma_of = |rest: &str| -> Result<f64> {
            let g = rest.trim_start_matches([':', '(', '=']).trim_end_matches(')');
            let g: f64 = if g.is_empty() { 0.0 } else { g.parse().map_err(|_| bad(s))? };
            if !(0.0..=1.0).contains(&g) {
                return Err(KpcError::InvalidConfig(format!("γ = {g} outside [0,1]")));
            }
            Ok(g)
        };
        Ok(match lower.as_str() {
            "model_i" => SimModel::ModelI,
            "model_ii" => SimModel::ModelII,
            "model_iii" => SimModel::ModelIII,
            "model_iv" | "model_iv_so3" => SimModel::ModelIV,
            "model_v" | "model_v_so3" => SimModel::ModelV,
            "lm" => SimModel::Lm,
            "gam" => SimModel::Gam,
            "nonlin1" => SimModel::Nonlin1,
            "nonlin2" => SimModel::Nonlin2,
            "nonlin3" => SimModel::Nonlin3,
            "so3_select" | "so3" => SimModel::So3Select,
            _ => {
                if let Some(rest) = lower.strip_prefix("crt_additive") {
                    SimModel::CrtAdditive { gamma: gamma_of(rest)? }
                } else if let Some(rest) = lower.strip_prefix("crt_multiplicative") {
                    SimModel::CrtMultiplicative { gamma: gamma_of(rest)? }
                } else {
                    return Err(bad(s));
                }
            }
        })
    }
}

fn bad(s: &str) -> KpcError {
    KpcError::InvalidConfig(format!("unknown model '{s}'"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub model: SimModel,
    pub n: usize,
    /// Predictor count for the selection models (default 10).
    pub p: usize,
    pub seed: u64,
}

impl SimSpec {
    pub fn new(model: SimModel, n: usize, seed: u64) -> Self {
        SimSpec { model, n, p: 10, seed }
    }

    pub fn with_p(mut self, p: usize) -> Self {
        self.p = p;
        self
    }
}

/// Rotation by `a` about the x-axis.
pub fn r1(a: f64) -> Rotation {
    let (s, c) = a.sin_cos();
    [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c]
}

/// Rotation by `a` about the z-axis.
pub fn r3(a: f64) -> Rotation {
    let (s, c) = a.sin_cos();
    [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]
}

pub fn matmul3(a: &Rotation, b: &Rotation) -> Rotation {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = (0..3).map(|k| a[3 * i + k] * b[3 * k + j]).sum();
        }
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn uniforms(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let u = Uniform::new(lo, hi).expect("valid uniform range");
    (0..n).map(|_| u.sample(rng)).collect()
}

/// Draw a dataset. Columns: `x, z, y` for models I–V and the CRT models, `x1..xp, y` for selection models.
pub fn simulate(spec: &SimSpec) -> Result<Dataset> {
    let n = spec.n;
    if n == 0 {
        return Err(KpcError::EmptyData);
    }
    let mut rng = stream(spec.seed, &[tag::SIM, spec.model.id()]);
    let rng = &mut rng;
    if spec.model.is_selection() {
        if spec.p < 3 {
            return Err(KpcError::InvalidConfig("selection models need p ≥ 3".into()));
        }
        let xs: Vec<Vec<f64>> = (0..spec.p).map(|_| normals(rng, n)).collect();
        let (x1, x2, x3) = (&xs[0], &xs[1], &xs[2]);
        let mut columns: Vec<Column> =
            xs.iter().enumerate().map(|(j, v)| Column::numeric(format!("x{}", j + 1), v.clone())).collect();
        let y = match spec.model {
            SimModel::Lm => Some((0..n).map(|i| 3.0 * x1[i] + 2.0 * x2[i] - x3[i] + normal(rng)).collect::<Vec<_>>()),
            SimModel::Gam => {
                Some((0..n).map(|i| x1[i].sin() + 2.0 * x2[i].cos() + x3[i].exp() + normal(rng)).collect())
            }
            SimModel::Nonlin1 => Some((0..n).map(|i| x1[i] * x2[i] + (x1[i] * x3[i]).sin()).collect()),
            SimModel::Nonlin2 => Some(
                (0..n)
                    .map(|i| {
                        let t1 = normal(rng) / normal(rng);
                        2.0 * (x1[i] * x1[i] + x2[i].powi(4)).ln() / (x1[i].cos() + x3[i].sin()) + t1
                    })
                    .collect(),
            ),
            SimModel::Nonlin3 => Some(
                (0..n)
                    .map(|i| {
                        let u: f64 = rng.random();
                        (x1[i] + u).abs().powf((x2[i] - x3[i]).sin())
                    })
                    .collect(),
            ),
            SimModel::So3Select => None,
            _ => unreachable!(),
        };
        match y {
            Some(y) => columns.push(Column::numeric("y", y)),
            None => {
                let rots = (0..n).map(|i| matmul3(&r1(x1[i]), &r3(x2[i] * x3[i]))).collect();
                columns.push(Column::rotation("y", rots)?);
            }
        }
        return Dataset::new(columns);
    }

    let (x, z, y): (Vec<f64>, Vec<f64>, Column) = match spec.model {
        SimModel::ModelI => {
            let x = normals(rng, n);
            let z = normals(rng, n);
            let y = (0..n).map(|i| x[i] + z[i] + 1.0 + normal(rng)).collect();
            (x, z, Column::numeric("y", y))
        }
        SimModel::ModelII => {
            let x = normals(rng, n);
            let z = normals(rng, n);
            let y = (0..n)
                .map(|i| {
                    let p = (-z[i] * z[i] / 2.0).exp();
                    Bernoulli::new(p).expect("probability in [0,1]").sample(rng) as u8 as f64
                })
                .collect();
            (x, z, Column::numeric("y", y))
        }
        SimModel::ModelIII => {
            let x = uniforms(rng, n, 0.0, 1.0);
            let z = uniforms(rng, n, 0.0, 1.0);
            let y = (0..n).map(|i| (x[i] + z[i]).rem_euclid(1.0)).collect();
            (x, z, Column::numeric("y", y))
        }
        SimModel::ModelIV | SimModel::ModelV => {
            let x = normals(rng, n);
            let z = normals(rng, n);
            let rots = if spec.model == SimModel::ModelIV {
                (0..n).map(|i| matmul3(&r1(x[i]), &r3(z[i]))).collect()
            } else {
                (0..n).map(|i| matmul3(&r1(x[i]), &r3(normal(rng)))).collect()
            };
            (x, z, Column::rotation("y", rots)?)
        }
        SimModel::CrtAdditive { gamma } => {
            let x = normals(rng, n);
            let z: Vec<f64> = (0..n).map(|i| x[i] + rng.random_range(-1.0..1.0)).collect();
            let y = (0..n)
                .map(|i| gamma * (z[i] * x[i]).sin() + (1.0 - gamma) * (x[i].exp() / (x[i] * x[i]) + normal(rng)))
                .collect();
            (x, z, Column::numeric("y", y))
        }
        SimModel::CrtMultiplicative { gamma } => {
            let x = normals(rng, n);
            let z: Vec<f64> = (0..n).map(|i| x[i] * normal(rng)).collect();
            let y = (0..n)
                .map(|i| (x[i].tanh() + normal(rng)).abs().powf(1.0 - gamma) * (z[i] * x[i]).cosh().powf(gamma))
                .collect();
            (x, z, Column::numeric("y", y))
        }
        _ => unreachable!(),
    };
    Dataset::new(vec![Column::numeric("x", x), Column::numeric("z", z), y])
}

/// ρ² of model II: (2√6 + 2√3 − 3√2 − 3)/3.
pub fn model_ii_rho2() -> f64 {
    (2.0 * 6f64.sqrt() + 2.0 * 3f64.sqrt() - 3.0 * 2f64.sqrt() - 3.0) / 3.0
}

/// Population values where they are known in closed form.
pub fn population_value(model: SimModel) -> Option<f64> {
    match model {
        SimModel::ModelI => Some(0.5),
        SimModel::ModelII => Some(model_ii_rho2()),
        SimModel::ModelIII | SimModel::ModelIV => Some(1.0),
        SimModel::ModelV => Some(0.0),
        SimModel::CrtAdditive { gamma } | SimModel::CrtMultiplicative { gamma } if gamma == 0.0 => Some(0.0),
        _ => None,
    }
}
