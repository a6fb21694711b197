//! Seeded replication of simulation studies.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MetricSpec, VariableRoles};
use crate::error::{KpcError, Result};
use crate::graph::GraphSpec;
use crate::graph_est::kpc_graph;
use crate::inference::{crt_pvalue, ConditionalSampler, CrtStatistic, GaussianLinear, GaussianScale, UniformAdditive};
use crate::kernels::KernelSpec;
use crate::rkhs::{kpc_rkhs, kpc_rkhs_lowrank, kpc_rkhs_uncentered, RkhsConfig};
use crate::rng::{child_seed, path_hash, tag};
use crate::select::{kfoci, rkhs_forward_select, KfociOptions, SubsetKernelRule};
use crate::sim::{simulate, SimModel, SimSpec};

/// What to run on each simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Procedure {
    /// Graph estimator of ρ²(y, z | x); the same spec builds both graphs.
    Graph { kernel: KernelSpec, graph: GraphSpec, metric: MetricSpec },
    /// RKHS estimator; `lowrank` and `centered` in the config pick the variant.
    Rkhs(RkhsConfig),
    Kfoci { kernel_y: KernelSpec, graph: GraphSpec, metric: MetricSpec, opts: KfociOptions },
    RkhsSelect { p0: usize, cfg: RkhsConfig, rule: SubsetKernelRule },
    /// CRT with the model's exact conditional sampler for Z | X.
    Crt { stat: CrtStatistic, b: usize, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub sim: SimSpec,
    pub procedure: Procedure,
    pub replications: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub replication: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pvalue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub replications: usize,
    pub failures: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// (level, value) pairs.
    pub quantiles: Vec<(f64, f64)>,
    pub exact_recovery: Option<f64>,
    pub superset_recovery: Option<f64>,
    pub average_size: Option<f64>,
    pub rejection_rate: Option<f64>,
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub replications: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub records: Vec<Record>,
    pub summary: Summary,
}

impl ExperimentReport {
    /// One JSON object per record, newline separated.
    pub fn records_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({ "provenance": self.provenance, "summary": self.summary }))
            .expect("summary serializes")
    }
}

/// Relevant predictors (0-based columns) of the selection models.
pub fn relevant_set(model: SimModel) -> Option<Vec<usize>> {
    model.is_selection().then(|| vec![0, 1, 2])
}

/// Exact sampler of Z | X for the models with a single x column.
pub fn exact_sampler(model: SimModel) -> Option<Box<dyn ConditionalSampler>> {
    match model {
        SimModel::CrtAdditive { .. } => Some(Box::new(UniformAdditive { coef: vec![1.0], half_width: 1.0 })),
        SimModel::CrtMultiplicative { .. } => Some(Box::new(GaussianScale { coef: vec![1.0], sd: 1.0 })),
        SimModel::ModelI | SimModel::ModelII | SimModel::ModelIV | SimModel::ModelV => {
            Some(Box::new(GaussianLinear { intercept: 0.0, coef: vec![0.0], sd: 1.0 }))
        }
        _ => None,
    }
}

fn xzy_roles() -> VariableRoles {
    VariableRoles::new(vec![2], vec![1], vec![0])
}

fn selection_cols(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let y = ds.ncols() - 1;
    (vec![y], (0..y).collect())
}

fn run_one(plan: &Plan, r: usize) -> Record {
    let seed = child_seed(plan.seed, &[tag::REPLICATION, r as u64]);
    let mut rec = Record { replication: r, seed, value: None, selected: None, pvalue: None, error: None };
    let outcome = (|| -> Result<()> {
        let ds = simulate(&SimSpec { seed, ..plan.sim })?;
        match &plan.procedure {
            Procedure::Graph { kernel, graph, metric } => {
                let g = GraphSpec { seed, ..*graph };
                rec.value = Some(kpc_graph(&ds, &xzy_roles(), kernel, &g, &g, metric, false)?.value);
            }
            Procedure::Rkhs(cfg) => {
                let est = if cfg.lowrank.is_some() {
                    kpc_rkhs_lowrank(&ds, &xzy_roles(), cfg)?
                } else if !cfg.centered {
                    kpc_rkhs_uncentered(&ds, &xzy_roles(), cfg)?
                } else {
                    kpc_rkhs(&ds, &xzy_roles(), cfg)?
                };
                rec.value = Some(est.value);
            }
            Procedure::Kfoci { kernel_y, graph, metric, opts } => {
                let (y, cands) = selection_cols(&ds);
                let g = GraphSpec { seed, ..*graph };
                rec.selected = Some(kfoci(&ds, &y, &cands, kernel_y, &g, metric, opts)?.order);
            }
            Procedure::RkhsSelect { p0, cfg, rule } => {
                let (y, cands) = selection_cols(&ds);
                rec.selected = Some(rkhs_forward_select(&ds, &y, &cands, *p0, cfg, rule, true)?.order);
            }
            Procedure::Crt { stat, b, .. } => {
                let sampler = exact_sampler(plan.sim.model)
                    .ok_or_else(|| KpcError::InvalidConfig(format!("no exact sampler for {}", plan.sim.model)))?;
                let stat = match stat {
                    CrtStatistic::Graph { kernel, graph_x, graph_xz, metric } => CrtStatistic::Graph {
                        kernel: kernel.clone(),
                        graph_x: GraphSpec { seed, ..*graph_x },
                        graph_xz: GraphSpec { seed, ..*graph_xz },
                        metric: metric.clone(),
                    },
                    other => other.clone(),
                };
                let res = crt_pvalue(&ds, &xzy_roles(), &stat, sampler.as_ref(), *b, seed)?;
                rec.value = Some(res.statistic);
                rec.pvalue = Some(res.pvalue);
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        rec.error = Some(e.to_string());
    }
    rec
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    /// Recomputes every summary field from the records alone.
    pub fn from_records(records: &[Record], truth: Option<&[usize]>, alpha: Option<f64>) -> Summary {
        let mut values: Vec<f64> = records.iter().filter_map(|r| r.value).filter(|v| v.is_finite()).collect();
        let m = values.len() as f64;
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / m);
        let sd = mean.filter(|_| values.len() > 1).map(|mu| {
            (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (m - 1.0)).sqrt()
        });
        values.sort_by(f64::total_cmp);
        let quantiles = if values.is_empty() {
            Vec::new()
        } else {
            QUANTILE_LEVELS.iter().map(|&l| (l, quantile(&values, l))).collect()
        };
        let sels: Vec<&Vec<usize>> = records.iter().filter_map(|r| r.selected.as_ref()).collect();
        let frac = |f: &dyn Fn(&Vec<usize>) -> bool| {
            (!sels.is_empty()).then(|| sels.iter().filter(|s| f(s)).count() as f64 / sels.len() as f64)
        };
        let (exact_recovery, superset_recovery) = match truth {
            Some(t) => (
                frac(&|s| s.len() == t.len() && t.iter().all(|j| s.contains(j))),
                frac(&|s| t.iter().all(|j| s.contains(j))),
            ),
            None => (None, None),
        };
        let average_size = (!sels.is_empty()).then(|| sels.iter().map(|s| s.len() as f64).sum::<f64>() / sels.len() as f64);
        let pvals: Vec<f64> = records.iter().filter_map(|r| r.pvalue).collect();
        let rejection_rate = alpha
            .filter(|_| !pvals.is_empty())
            .map(|a| pvals.iter().filter(|&&p| p <= a).count() as f64 / pvals.len() as f64);
        Summary {
            replications: records.len(),
            failures: records.iter().filter(|r| r.error.is_some()).count(),
            mean,
            sd,
            quantiles,
            exact_recovery,
            superset_recovery,
            average_size,
            rejection_rate,
        }
    }
}

/// Run R seeded replications; replication r uses seed child_seed(seed, [REPLICATION, r]).
pub fn run_experiment(plan: &Plan) -> Result<ExperimentReport> {
    if plan.sim.n == 0 {
        return Err(KpcError::EmptyData);
    }
    let records: Vec<Record> = (0..plan.replications).into_par_iter().map(|r| run_one(plan, r)).collect();
    let truth = relevant_set(plan.sim.model);
    let alpha = match &plan.procedure {
        Procedure::Crt { alpha, .. } => Some(*alpha),
        _ => None,
    };
    let summary = Summary::from_records(&records, truth.as_deref(), alpha);
    let provenance = Provenance {
        model: plan.sim.model.to_string(),
        n: plan.sim.n,
        p: plan.sim.p,
        seed: plan.seed,
        replications: plan.replications,
        config_hash: format!("{:016x}", path_hash(plan.seed, &config_words(plan))),
    };
    Ok(ExperimentReport { provenance, records, summary })
}

fn config_words(plan: &Plan) -> Vec<u64> {
    format!("{plan:?}").bytes().map(u64::from).collect()
}
