use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Result};
use ccpf_hessian::estimator::{estimate_hessian, estimate_score, sample_increments};
use ccpf_hessian::functionals::pair_index;
use ccpf_hessian::model::{simulate_observations, BuiltinModel, Model, Observations, Params};
use ccpf_hessian::optimize::{newton_fit, newton_with, sgd_fit, sgd_with, FitTrace};
use ccpf_hessian::oracle::{oracle_derivatives, OracleDerivatives, Transition};
use ccpf_hessian::rng::derive_seed;
use ccpf_hessian::stats::{log_log_slope, sample_variance};
use ccpf_hessian::{EstimatorConfig, LevelSpec};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::io::{self, RunManifest, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EstimateKind {
    Score,
    Hessian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Bias,
    Variance,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FitMethod {
    Sgd,
    Newton,
}

fn write_manifest(
    out: &Path,
    command: String,
    config: &RunConfig,
    data: Option<&Path>,
    start: Instant,
    summary: Value,
) -> Result<()> {
    let manifest = RunManifest {
        command,
        model: &config.model,
        config,
        seed: config.seed,
        data: data.map(|p| p.display().to_string()),
        timestamp: io::timestamp(),
        version: io::version(),
        elapsed_secs: start.elapsed().as_secs_f64(),
        summary,
    };
    io::write_json(&io::manifest_path(out), &manifest)
}

fn theta(model: &BuiltinModel, config: &RunConfig) -> Result<Params> {
    Ok(Params::new(model, config.theta.clone())?)
}

fn estimator(config: &RunConfig) -> EstimatorConfig {
    EstimatorConfig { seed: config.seed, ..config.estimator.clone() }
}

pub fn simulate(config: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let model = BuiltinModel::by_name(&config.model)?;
    let theta = theta(&model, config)?;
    let (obs, latent) = simulate_observations(&model, &theta, config.level, config.n, config.seed)?;
    io::write_data(out, &obs, &latent)?;
    write_manifest(out, "simulate".into(), config, None, start, json!({ "rows": obs.len() }))
}

#[derive(Serialize)]
struct OracleBlock {
    exact: OracleDerivatives,
    /// Derivatives of the Euler-discretized likelihood at the deepest level the
    /// estimator can draw, when the level distribution is truncated.
    euler_l_max: Option<(u32, OracleDerivatives)>,
}

fn oracle_block(model: &BuiltinModel, theta: &[f64], obs: &Observations, levels: LevelSpec) -> Result<OracleBlock> {
    let exact = oracle_derivatives(model, theta, obs, Transition::Exact)?;
    let euler_l_max = match levels {
        LevelSpec::Truncated { l_max } => {
            Some((l_max, oracle_derivatives(model, theta, obs, Transition::Euler(l_max))?))
        }
        _ => None,
    };
    Ok(OracleBlock { exact, euler_l_max })
}

fn level_histogram(levels: impl Iterator<Item = u32>) -> Vec<usize> {
    let mut hist = Vec::new();
    for l in levels {
        let l = l as usize;
        if hist.len() <= l {
            hist.resize(l + 1, 0);
        }
        hist[l] += 1;
    }
    hist
}

pub fn estimate(kind: EstimateKind, config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let model = BuiltinModel::by_name(&config.model)?;
    let obs = io::read_observations(data)?;
    let theta = theta(&model, config)?;
    let est = estimator(config);
    let oracle = if config.oracle { Some(oracle_block(&model, &theta, &obs, est.levels)?) } else { None };
    let (estimate, diagnostics) = match kind {
        EstimateKind::Hessian => {
            let h = estimate_hessian(&model, &theta, &obs, &est)?;
            let hist = level_histogram(h.levels.iter().flat_map(|&(a, b)| [a, b]));
            let diag = json!({ "level_histogram": hist, "cost": h.cost, "replicates": h.replicates });
            (serde_json::to_value(&h)?, diag)
        }
        EstimateKind::Score => {
            let s = estimate_score(&model, &theta, &obs, &est)?;
            let hist = level_histogram(s.levels.iter().copied());
            let diag = json!({ "level_histogram": hist, "cost": s.cost, "replicates": s.replicates });
            (serde_json::to_value(&s)?, diag)
        }
    };
    let kind_name = match kind {
        EstimateKind::Score => "score",
        EstimateKind::Hessian => "hessian",
    };
    let doc = json!({
        "kind": kind_name,
        "model": config.model,
        "theta": config.theta,
        "estimate": estimate,
        "diagnostics": diagnostics,
        "oracle": oracle,
    });
    io::write_json(out, &doc)?;
    write_manifest(out, format!("estimate {kind_name}"), config, Some(data), start, diagnostics)
}

fn delta(level: u32) -> f64 {
    (-(level as f64)).exp2()
}

fn upper_entries(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect()
}

/// Column names of the functional bundle `[G | GG | H]`.
fn bundle_names(p: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..p).map(|i| format!("g_{i}")).collect();
    for prefix in ["gg", "h"] {
        let mut pairs = vec![String::new(); p * (p + 1) / 2];
        for (i, j) in upper_entries(p) {
            pairs[pair_index(p, i, j)] = format!("{prefix}_{i}_{j}");
        }
        names.extend(pairs);
    }
    names
}

pub fn sweep(kind: SweepKind, config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    if config.levels.is_empty() {
        bail!("the level list is empty");
    }
    let model = BuiltinModel::by_name(&config.model)?;
    let obs = io::read_observations(data)?;
    let theta = theta(&model, config)?;
    let base = estimator(config);
    base.validate()?;
    let p = model.param_dim();
    let table = match kind {
        SweepKind::Variance => variance_sweep(&model, &theta, &obs, &base, &config.levels, p)?,
        SweepKind::Bias | SweepKind::Mse => {
            let exact = match oracle_derivatives(&model, &theta, &obs, Transition::Exact) {
                Ok(o) => o.hessian,
                Err(e) => bail!("{} sweeps need the Kalman oracle, unavailable for {}: {e}", name(kind), config.model),
            };
            error_sweep(kind, &model, &theta, &obs, &base, &config.levels, &exact)?
        }
    };
    table.write(out)?;
    let fits: serde_json::Map<String, Value> = table.fits.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    write_manifest(out, format!("sweep {}", name(kind)), config, Some(data), start, Value::Object(fits))
}

fn name(kind: SweepKind) -> &'static str {
    match kind {
        SweepKind::Bias => "bias",
        SweepKind::Variance => "variance",
        SweepKind::Mse => "mse",
    }
}

fn variance_sweep(
    model: &BuiltinModel,
    theta: &Params,
    obs: &Observations,
    base: &EstimatorConfig,
    levels: &[u32],
    p: usize,
) -> Result<Table> {
    let names = bundle_names(p);
    let mut header = vec!["level".to_string(), "delta".to_string()];
    header.extend(names.iter().map(|n| format!("var_{n}")));
    header.extend(["summed_variance", "replicates", "cost_euler_steps", "cost_resampling_draws", "elapsed_secs"].map(String::from));
    let mut table = Table::new(header);
    let mut summed = Vec::new();
    for &l in levels {
        let t = Instant::now();
        let config = EstimatorConfig { seed: derive_seed(base.seed, &[l as u64]), ..base.clone() };
        let inc = sample_increments(model, theta, obs, l, base.replicates, &config)?;
        let vars: Vec<f64> = (0..names.len())
            .map(|e| sample_variance(&inc.iter().map(|x| x.bundle.as_slice()[e]).collect::<Vec<_>>()))
            .collect();
        let total: f64 = vars.iter().sum();
        let (euler, draws) = inc.iter().fold((0u64, 0u64), |(a, b), x| (a + x.cost.euler_steps, b + x.cost.resampling_draws));
        let mut row = vec![l.to_string(), delta(l).to_string()];
        row.extend(vars.iter().map(|v| v.to_string()));
        row.extend([total.to_string(), inc.len().to_string(), euler.to_string(), draws.to_string()]);
        row.push(format!("{:.3}", t.elapsed().as_secs_f64()));
        table.rows.push(row);
        summed.push(total);
    }
    if levels.len() >= 2 {
        let deltas: Vec<f64> = levels.iter().map(|&l| delta(l)).collect();
        table.fits.push(("summed_variance_vs_delta".into(), log_log_slope(&deltas, &summed)));
    }
    Ok(table)
}

fn error_sweep(
    kind: SweepKind,
    model: &BuiltinModel,
    theta: &Params,
    obs: &Observations,
    base: &EstimatorConfig,
    levels: &[u32],
    exact: &[Vec<f64>],
) -> Result<Table> {
    let entries = upper_entries(exact.len());
    let stat = name(kind);
    let mut header = vec!["level".to_string(), "delta".to_string()];
    header.extend(entries.iter().map(|(i, j)| format!("{stat}_{i}_{j}")));
    header.push(format!("summed_{}", if kind == SweepKind::Bias { "abs_bias" } else { "mse" }));
    header.extend(["replicates", "cost_euler_steps", "cost_resampling_draws", "elapsed_secs"].map(String::from));
    let mut table = Table::new(header);
    let (mut summed, mut costs) = (Vec::new(), Vec::new());
    let mut per_entry = vec![Vec::new(); entries.len()];
    for &l in levels {
        let t = Instant::now();
        let config = EstimatorConfig {
            levels: LevelSpec::Truncated { l_max: l },
            seed: derive_seed(base.seed, &[l as u64]),
            ..base.clone()
        };
        let h = estimate_hessian(model, theta, obs, &config)?;
        let values: Vec<f64> = entries
            .iter()
            .map(|&(i, j)| {
                let bias = h.mean[i][j] - exact[i][j];
                match kind {
                    SweepKind::Bias => bias,
                    _ => bias * bias + h.std_err[i][j].powi(2),
                }
            })
            .collect();
        let total: f64 = values.iter().map(|v| v.abs()).sum();
        let mut row = vec![l.to_string(), delta(l).to_string()];
        row.extend(values.iter().map(|v| v.to_string()));
        row.extend([
            total.to_string(),
            h.replicates.to_string(),
            h.cost.euler_steps.to_string(),
            h.cost.resampling_draws.to_string(),
        ]);
        row.push(format!("{:.3}", t.elapsed().as_secs_f64()));
        table.rows.push(row);
        for (k, v) in values.iter().enumerate() {
            per_entry[k].push(v.abs());
        }
        summed.push(total);
        costs.push(h.cost.total() as f64);
    }
    if levels.len() >= 2 {
        let deltas: Vec<f64> = levels.iter().map(|&l| delta(l)).collect();
        let label = if kind == SweepKind::Bias { "abs_bias" } else { "mse" };
        table.fits.push((format!("summed_{label}_vs_delta"), log_log_slope(&deltas, &summed)));
        for ((i, j), v) in entries.iter().zip(&per_entry) {
            table.fits.push((format!("{label}_{i}_{j}_vs_delta"), log_log_slope(&deltas, v)));
        }
        if kind == SweepKind::Mse {
            table.fits.push(("cost_vs_summed_mse".into(), log_log_slope(&summed, &costs)));
        }
    }
    Ok(table)
}

fn oracle_fit(method: FitMethod, model: &BuiltinModel, obs: &Observations, config: &RunConfig) -> Result<FitTrace> {
    let in_domain = |t: &[f64]| model.check_params(t).is_ok();
    Ok(match method {
        FitMethod::Sgd => sgd_with(&config.fit, in_domain, |t, _| {
            Ok(oracle_derivatives(model, t, obs, Transition::Exact)?.score)
        })?,
        FitMethod::Newton => newton_with(&config.fit, in_domain, |t, _| {
            let d = oracle_derivatives(model, t, obs, Transition::Exact)?;
            Ok((d.score, d.hessian))
        })?,
    })
}

pub fn fit(method: FitMethod, config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let model = BuiltinModel::by_name(&config.model)?;
    let obs = io::read_observations(data)?;
    config.fit.validate(model.param_dim())?;
    let est = estimator(config);
    let trace = match (config.oracle, method) {
        (true, _) => oracle_fit(method, &model, &obs, config)?,
        (false, FitMethod::Sgd) => sgd_fit(&model, &obs, &est, &config.fit)?,
        (false, FitMethod::Newton) => newton_fit(&model, &obs, &est, &config.fit)?,
    };
    let p = model.param_dim();
    let mut header = vec!["iteration".to_string()];
    header.extend((0..p).map(|i| format!("theta_{i}")));
    header.extend(["score_norm", "distance"].map(String::from));
    let mut table = Table::new(header);
    for row in &trace.rows {
        let mut r = vec![row.iteration.to_string()];
        r.extend(row.theta.iter().map(|v| v.to_string()));
        r.push(row.score_norm.to_string());
        r.push(row.distance.map(|d| d.to_string()).unwrap_or_default());
        table.rows.push(r);
    }
    table.write(out)?;
    let method_name = match method {
        FitMethod::Sgd => "sgd",
        FitMethod::Newton => "newton",
    };
    let summary = json!({
        "converged": trace.converged,
        "iterations": trace.iterations,
        "final_theta": trace.final_theta(),
        "final_score_norm": trace.rows.last().map(|r| r.score_norm),
    });
    write_manifest(out, format!("fit {method_name}"), config, Some(data), start, summary)
}
