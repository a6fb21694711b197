//! String forms of kernels, graphs, metrics, column lists and config files.

use kpc::data::{Dataset, MetricFamily, MetricSpec};
use kpc::graph::GraphSpec;
use kpc::kernels::{Bandwidth, FociReference, KernelSpec};

pub fn kernel(s: &str) -> Result<KernelSpec, String> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let num = |a: &str| a.parse::<f64>().map_err(|_| format!("bad kernel parameter '{a}' in '{s}'"));
    let bw = |a: Option<&str>| -> Result<Bandwidth, String> {
        match a {
            None | Some("median") => Ok(Bandwidth::Median),
            Some(a) => Ok(Bandwidth::Fixed(num(a)?)),
        }
    };
    Ok(match name.to_ascii_lowercase().as_str() {
        "gaussian" => KernelSpec::Gaussian(bw(arg)?),
        "gaussian-gamma" => KernelSpec::gaussian_gamma(num(arg.ok_or("gaussian-gamma needs a value")?)?),
        "laplace" => KernelSpec::Laplace(bw(arg)?),
        "linear" => KernelSpec::Linear,
        "distance" => KernelSpec::Distance { alpha: arg.map(num).transpose()?.unwrap_or(1.0) },
        "discrete" => KernelSpec::Discrete,
        "so3" => KernelSpec::So3,
        "hist-inv" => KernelSpec::HistInv,
        "hist-expsqrt" => KernelSpec::HistExpSqrt,
        "foci" => KernelSpec::FociCdf(FociReference::Sample),
        _ => return Err(format!("unknown kernel '{s}'")),
    })
}

pub fn graph(kind: &str, k: usize, seed: u64) -> Result<GraphSpec, String> {
    if k == 0 {
        return Err("--k must be at least 1".into());
    }
    match kind {
        "knn" => Ok(GraphSpec::knn(k, seed)),
        "knn-undirected" => Ok(GraphSpec::knn_undirected(k, seed)),
        "mst" => Ok(GraphSpec { seed, ..GraphSpec::mst() }),
        _ => Err(format!("unknown graph '{kind}' (knn, knn-undirected, mst)")),
    }
}

pub fn metric(s: &str) -> Result<MetricSpec, String> {
    let fam = match s {
        "euclidean" => MetricFamily::Euclidean,
        "product" => MetricFamily::Product,
        "hamming" => MetricFamily::Hamming01,
        "frobenius" => MetricFamily::Frobenius,
        _ => return Err(format!("unknown metric '{s}'")),
    };
    Ok(MetricSpec::new(fam))
}

/// Comma-separated names; `x1..x10` expands to x1, x2, …, x10.
pub fn names(s: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match item.split_once("..") {
            Some((a, b)) => {
                let split = |t: &str| {
                    let i = t.trim_end_matches(|c: char| c.is_ascii_digit()).len();
                    let (p, d) = t.split_at(i);
                    d.parse::<usize>().map(|d| (p.to_string(), d)).map_err(|_| format!("bad range '{item}'"))
                };
                let ((pa, lo), (pb, hi)) = (split(a)?, split(b)?);
                if pa != pb || lo > hi {
                    return Err(format!("bad range '{item}'"));
                }
                out.extend((lo..=hi).map(|i| format!("{pa}{i}")));
            }
            None => out.push(item.to_string()),
        }
    }
    Ok(out)
}

pub fn columns(ds: &Dataset, list: &[String]) -> kpc::Result<Vec<usize>> {
    list.iter().map(|n| ds.index_of(n)).collect()
}

/// `key = value` lines become `--key value`; `true` gives a bare flag and `false` drops it.
pub fn config_args(text: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected 'key = value'", i + 1))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        match v {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => {
                out.push(format!("--{k}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}
