//! `kpc`: estimate, select, test, simulate and report from the command line.

mod parse;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kpc::data::{load_csv, save_csv, write_csv, Dataset, Schema, VariableRoles};
use kpc::experiment::{run_experiment, Plan, Procedure};
use kpc::inference::{
    crt_pvalue, gaussian_knockoffs, knockoff_select, knockoff_w, ConditionalSampler, CrtStatistic, GaussianLinear,
    GaussianScale, KnockoffInput, KnockoffStat, UniformAdditive,
};
use kpc::rkhs::{LowRankSpec, RkhsConfig};
use kpc::select::{kfoci, rkhs_forward_select, KfociOptions, SubsetKernelRule};
use kpc::sim::{simulate, SimModel, SimSpec};
use kpc::{kpc_graph, kpc_rkhs, KpcError};
use nalgebra::DMatrix;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "kpc", version, about = "Kernel partial correlation", args_override_self = true)]
struct Cli {
    /// Key-value file; keys mirror long flag names and are overridden by flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default from KPC_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write JSON here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate ρ²(Y, Z | X).
    #[command(args_override_self = true)]
    Estimate(EstimateArgs),
    /// Select variables by KFOCI, RKHS forward selection or knockoffs.
    #[command(args_override_self = true)]
    Select(SelectArgs),
    /// Conditional randomization test of Y ⊥ Z | X.
    #[command(args_override_self = true)]
    Test(TestArgs),
    /// Draw a dataset from a simulation model as CSV.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Run a replicated simulation experiment.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV file with a header row.
    data: PathBuf,
    /// Column types, `name = numeric|categorical|rotation9` per line.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EstimatorArgs {
    /// Kernel on Y: gaussian[:s|median], gaussian-gamma:γ, laplace[:s], linear, distance[:α], discrete, so3, hist-inv, hist-expsqrt, foci.
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    /// Kernel on X and (X, Z) for RKHS methods.
    #[arg(long, default_value = "gaussian")]
    kernel_x: String,
    #[arg(long, default_value = "knn")]
    graph: String,
    /// Neighbours per node for K-NN graphs.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// euclidean, product, hamming or frobenius.
    #[arg(long, default_value = "product")]
    metric: String,
    /// Ridge parameter for RKHS methods.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long)]
    uncentered: bool,
    /// Incomplete Cholesky rank for the RKHS estimator.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EstimatorArgs {
    fn rkhs(&self) -> Result<RkhsConfig, String> {
        let kx = parse::kernel(&self.kernel_x)?;
        let mut cfg = RkhsConfig::new(parse::kernel(&self.kernel)?, kx.clone(), kx, self.eps);
        if self.uncentered {
            cfg = cfg.uncentered();
        }
        if let Some(r) = self.rank {
            cfg = cfg.with_lowrank(LowRankSpec::rank(r));
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// graph or rkhs.
    #[arg(long, default_value = "graph")]
    method: String,
    #[arg(long)]
    y: String,
    #[arg(long)]
    z: String,
    /// Conditioning columns; empty for an unconditional measure.
    #[arg(long, default_value = "")]
    x: String,
    #[command(flatten)]
    est: EstimatorArgs,
    /// Report the raw ratio instead of clamping to [0, 1].
    #[arg(long)]
    no_clamp: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// kfoci, rkhs or knockoff.
    #[arg(long, default_value = "kfoci")]
    method: String,
    #[arg(long)]
    y: String,
    /// Candidate columns; defaults to every column except Y.
    #[arg(long)]
    candidates: Option<String>,
    #[command(flatten)]
    est: EstimatorArgs,
    /// KFOCI cap on the number of selected variables.
    #[arg(long)]
    max_vars: Option<usize>,
    /// RKHS selection budget.
    #[arg(long)]
    p0: Option<usize>,
    /// Knockoff target FDR.
    #[arg(long, default_value_t = 0.2)]
    q: f64,
    /// Use the knockoff+ threshold.
    #[arg(long)]
    plus: bool,
    /// Knockoff statistic: graph or rkhs.
    #[arg(long, default_value = "graph")]
    stat: String,
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "crt")]
    method: String,
    #[arg(long)]
    y: String,
    #[arg(long)]
    z: String,
    #[arg(long)]
    x: String,
    /// Law of Z | X: gaussian-linear, uniform-additive or gaussian-scale.
    #[arg(long, default_value = "gaussian-linear")]
    sampler: String,
    /// Coefficients on X, comma separated (default all ones).
    #[arg(long)]
    coef: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    intercept: f64,
    #[arg(long, default_value_t = 1.0)]
    sd: f64,
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
    /// Number of resamples.
    #[arg(long, default_value_t = 100)]
    b: usize,
    /// Statistic: rkhs (fixed Gaussian kernels) or graph.
    #[arg(long, default_value = "rkhs")]
    stat: String,
    #[command(flatten)]
    est: EstimatorArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// graph, rkhs, kfoci, rkhs-select or crt.
    #[arg(long, default_value = "graph")]
    procedure: String,
    #[command(flatten)]
    est: EstimatorArgs,
    #[arg(long)]
    max_vars: Option<usize>,
    #[arg(long, default_value_t = 3)]
    p0: usize,
    #[arg(long, default_value_t = 100)]
    b: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// CRT statistic: rkhs or graph.
    #[arg(long, default_value = "rkhs")]
    stat: String,
    /// Write per-replication records here as JSON lines.
    #[arg(long)]
    records: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<KpcError> for Failure {
    fn from(e: KpcError) -> Self {
        match e {
            KpcError::InvalidConfig(_) | KpcError::UnknownColumn(_) | KpcError::AsymmetricConfig(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Usage(s)
    }
}

type Out = Result<Value, Failure>;

fn load(d: &DataArgs) -> Result<Dataset, Failure> {
    let schema = match &d.schema {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
            Schema::parse(&text)?
        }
        None => Schema::default(),
    };
    load_csv(&d.data, &schema).map_err(|e| match e {
        KpcError::Io(io) => Failure::Data(format!("{}: {io}", d.data.display())),
        e => e.into(),
    })
}

fn cols(ds: &Dataset, s: &str) -> Result<Vec<usize>, Failure> {
    Ok(parse::columns(ds, &parse::names(s)?)?)
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("results serialize")
}

fn estimate(a: &EstimateArgs) -> Out {
    let ds = load(&a.data)?;
    let roles = VariableRoles::new(cols(&ds, &a.y)?, cols(&ds, &a.z)?, cols(&ds, &a.x)?);
    let clamp = !a.no_clamp;
    let est = match a.method.as_str() {
        "graph" => {
            let g = parse::graph(&a.est.graph, a.est.k, a.est.seed)?;
            kpc_graph(&ds, &roles, &parse::kernel(&a.est.kernel)?, &g, &g, &parse::metric(&a.est.metric)?, clamp)?
        }
        "rkhs" => {
            let mut e = kpc_rkhs(&ds, &roles, &a.est.rkhs()?)?;
            if clamp {
                let v = e.value.clamp(0.0, 1.0);
                e.clamped = v != e.value;
                e.value = v;
            }
            e
        }
        m => return Err(Failure::Usage(format!("unknown estimate method '{m}' (graph, rkhs)"))),
    };
    Ok(to_json(&est))
}

fn names_of(ds: &Dataset, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| ds.column(i).name.clone()).collect()
}

fn select(a: &SelectArgs) -> Out {
    let ds = load(&a.data)?;
    let y = cols(&ds, &a.y)?;
    let cands = match &a.candidates {
        Some(c) => cols(&ds, c)?,
        None => (0..ds.ncols()).filter(|c| !y.contains(c)).collect(),
    };
    let standardize = !a.no_standardize;
    let trace = match a.method.as_str() {
        "kfoci" => {
            let g = parse::graph(&a.est.graph, a.est.k, a.est.seed)?;
            let opts = KfociOptions { max_vars: a.max_vars, standardize };
            kfoci(&ds, &y, &cands, &parse::kernel(&a.est.kernel)?, &g, &parse::metric(&a.est.metric)?, &opts)?
        }
        "rkhs" => {
            let p0 = a.p0.ok_or_else(|| Failure::Usage("rkhs selection needs --p0".into()))?;
            let cfg = a.est.rkhs()?;
            let rule = if a.est.kernel_x == "gaussian" { SubsetKernelRule::ScaledGaussian } else { SubsetKernelRule::FromConfig };
            rkhs_forward_select(&ds, &y, &cands, p0, &cfg, &rule, standardize)?
        }
        "knockoff" => return knockoff(a, &ds, &y, &cands),
        m => return Err(Failure::Usage(format!("unknown select method '{m}' (kfoci, rkhs, knockoff)"))),
    };
    let mut v = to_json(&trace);
    v["names"] = json!(names_of(&ds, &trace.order));
    Ok(v)
}

/// Gaussian model-X knockoffs from the standardized candidates' sample correlation.
fn knockoff(a: &SelectArgs, ds: &Dataset, y: &[usize], cands: &[usize]) -> Out {
    if y.len() != 1 {
        return Err(Failure::Usage("knockoff selection needs a single numeric Y".into()));
    }
    let yv = ds.numeric(y[0])?.to_vec();
    let std = kpc::data::standardize(ds, cands)?;
    let (n, p) = (ds.n(), cands.len());
    let mut x = DMatrix::zeros(n, p);
    for (j, &c) in cands.iter().enumerate() {
        x.set_column(j, &nalgebra::DVector::from_column_slice(std.numeric(c)?));
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let xk = gaussian_knockoffs(&x, &vec![0.0; p], &cov, a.est.seed)?;
    let ki = KnockoffInput::new(x, xk, yv, a.q)?;
    let kernel_y = parse::kernel(&a.est.kernel)?;
    let stat = match a.stat.as_str() {
        "graph" => KnockoffStat::Graph { kernel_y, k: a.est.k, seed: a.est.seed },
        "rkhs" => {
            let kx = if a.est.kernel_x == "gaussian" { "gaussian:1" } else { a.est.kernel_x.as_str() };
            KnockoffStat::Rkhs { kernel_y, kernel_x: parse::kernel(kx)?, eps: a.est.eps }
        }
        s => return Err(Failure::Usage(format!("unknown knockoff statistic '{s}' (graph, rkhs)"))),
    };
    let w = knockoff_w(&ki, &stat)?;
    let sel = knockoff_select(&w, a.q, a.plus);
    let chosen: Vec<usize> = sel.selected.iter().map(|&j| cands[j]).collect();
    Ok(json!({
        "w": w,
        "q": a.q,
        "plus": a.plus,
        "threshold": sel.threshold,
        "selected": chosen,
        "names": names_of(ds, &chosen),
    }))
}

fn sampler(a: &TestArgs, p: usize) -> Result<Box<dyn ConditionalSampler>, Failure> {
    let coef: Vec<f64> = match &a.coef {
        Some(c) => c
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| Failure::Usage(format!("bad coefficient '{t}'"))))
            .collect::<Result<_, _>>()?,
        None => vec![1.0; p],
    };
    if coef.len() != p {
        return Err(Failure::Usage(format!("--coef has {} entries for {p} X columns", coef.len())));
    }
    Ok(match a.sampler.as_str() {
        "gaussian-linear" => Box::new(GaussianLinear { intercept: a.intercept, coef, sd: a.sd }),
        "uniform-additive" => Box::new(UniformAdditive { coef, half_width: a.half_width }),
        "gaussian-scale" => Box::new(GaussianScale { coef, sd: a.sd }),
        s => return Err(Failure::Usage(format!("unknown sampler '{s}'"))),
    })
}

fn crt_stat(stat: &str, est: &EstimatorArgs, explicit_kernels: bool) -> Result<CrtStatistic, Failure> {
    Ok(match stat {
        "rkhs" if explicit_kernels => CrtStatistic::Rkhs(est.rkhs()?),
        "rkhs" => CrtStatistic::default_rkhs(),
        "graph" => {
            let g = parse::graph(&est.graph, est.k, est.seed)?;
            CrtStatistic::Graph { kernel: parse::kernel(&est.kernel)?, graph_x: g, graph_xz: g, metric: parse::metric(&est.metric)? }
        }
        s => return Err(Failure::Usage(format!("unknown statistic '{s}' (rkhs, graph)"))),
    })
}

fn explicit_kernels(est: &EstimatorArgs) -> bool {
    est.kernel != "gaussian" || est.kernel_x != "gaussian" || est.uncentered || est.eps != 1e-3
}

fn test(a: &TestArgs) -> Out {
    if a.method != "crt" {
        return Err(Failure::Usage(format!("unknown test method '{}' (crt)", a.method)));
    }
    let ds = load(&a.data)?;
    let roles = VariableRoles::new(cols(&ds, &a.y)?, cols(&ds, &a.z)?, cols(&ds, &a.x)?);
    let s = sampler(a, roles.x.len())?;
    let stat = crt_stat(&a.stat, &a.est, explicit_kernels(&a.est))?;
    Ok(to_json(&crt_pvalue(&ds, &roles, &stat, s.as_ref(), a.b, a.est.seed)?))
}

fn model(s: &str) -> Result<SimModel, Failure> {
    Ok(s.parse::<SimModel>()?)
}

fn report(a: &ReportArgs) -> Result<(Value, String), Failure> {
    let sim = SimSpec::new(model(&a.model)?, a.n, 0).with_p(a.p);
    let g = parse::graph(&a.est.graph, a.est.k, 0)?;
    let metric = parse::metric(&a.est.metric)?;
    let procedure = match a.procedure.as_str() {
        "graph" => Procedure::Graph { kernel: parse::kernel(&a.est.kernel)?, graph: g, metric },
        "rkhs" => Procedure::Rkhs(a.est.rkhs()?),
        "kfoci" => Procedure::Kfoci {
            kernel_y: parse::kernel(&a.est.kernel)?,
            graph: g,
            metric,
            opts: KfociOptions { max_vars: a.max_vars, standardize: true },
        },
        "rkhs-select" => {
            let rule = if a.est.kernel_x == "gaussian" { SubsetKernelRule::ScaledGaussian } else { SubsetKernelRule::FromConfig };
            Procedure::RkhsSelect { p0: a.p0, cfg: a.est.rkhs()?, rule }
        }
        "crt" => Procedure::Crt { stat: crt_stat(&a.stat, &a.est, explicit_kernels(&a.est))?, b: a.b, alpha: a.alpha },
        p => return Err(Failure::Usage(format!("unknown procedure '{p}'"))),
    };
    let rep = run_experiment(&Plan { sim, procedure, replications: a.reps, seed: a.est.seed })?;
    let summary = json!({ "provenance": rep.provenance, "summary": rep.summary });
    Ok((summary, rep.records_jsonl()))
}

fn write_out(text: &str, out: &Option<PathBuf>) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var("KPC_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| Failure::Usage(format!("KPC_THREADS='{v}' is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        // a second initialization can only fail when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let value = match &cli.cmd {
        Cmd::Estimate(a) => estimate(a)?,
        Cmd::Select(a) => select(a)?,
        Cmd::Test(a) => test(a)?,
        Cmd::Simulate(a) => {
            let ds = simulate(&SimSpec::new(model(&a.model)?, a.n, a.seed).with_p(a.p))?;
            return match &cli.out {
                Some(p) => Ok(save_csv(&ds, p)?),
                None => Ok(write_csv(&ds, std::io::stdout().lock())?),
            };
        }
        Cmd::Report(a) => {
            let (summary, records) = report(a)?;
            if let Some(p) = &a.records {
                write_out(&records, &Some(p.clone()))?;
            }
            summary
        }
    };
    let text = serde_json::to_string_pretty(&value).expect("json renders") + "\n";
    write_out(&text, &cli.out)
}

const SUBCOMMANDS: [&str; 5] = ["estimate", "select", "test", "simulate", "report"];

/// Splice config-file arguments in right after the subcommand so explicit flags win.
fn expand_config(mut argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = if let Some(p) = argv[pos].strip_prefix("--config=") {
        let p = p.to_string();
        argv.remove(pos);
        p
    } else {
        if pos + 1 >= argv.len() {
            return Err("--config needs a file".into());
        }
        argv.remove(pos);
        argv.remove(pos)
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("config {path}: {e}"))?;
    let extra = parse::config_args(&text)?;
    let at = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())).map_or(argv.len(), |i| i + 1);
    argv.splice(at..at, extra);
    Ok(argv)
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\nrun `kpc --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
