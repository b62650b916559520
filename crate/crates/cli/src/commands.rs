use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use smc_core::filters::summary::{ensemble_summary, histogram, uses_ensemble_summary, weighted_summary};
use smc_core::filters::{FilterConfig, FilterKind, FilterResult, Lookahead, ParamScale, ParticleFilter};
use smc_core::kalman::{extract_gaussian, kalman_filter, normal_quantile};
use smc_core::model::ModelGraph;
use smc_core::pmmh::{check_covariance, pmmh_run, PmmhConfig};
use smc_core::resampling::Method;
use smc_core::rng::StreamKey;
use smc_core::runtime::ModelState;

use crate::args::{FilterChoice, InnerChoice, Inputs, ParticleArgs, PmmhArgs, Recorded, RunArgs, SimulateArgs, SummaryCloud};
use crate::error::CliError;
use crate::io::{load_model, num, read_matrix, Table};

// Stream roots below the seed.
const INIT: u64 = 0;
const ALGORITHM: u64 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    #[serde(flatten)]
    recorded: Recorded,
    /// Files written, relative to the output directory.
    outputs: Vec<String>,
}

fn write_run_json(out: &Path, recorded: Recorded, mut outputs: Vec<String>, results: Value) -> Result<(), CliError> {
    outputs.push("run.json".into());
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        recorded,
        outputs,
    };
    let doc = json!({ "manifest": manifest, "results": results });
    let text = serde_json::to_string_pretty(&doc).expect("serializable") + "\n";
    let path = out.join("run.json");
    fs::write(&path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn prepare(inputs: &Inputs, out: &Path) -> Result<(ModelGraph, ModelState), CliError> {
    let g = load_model(&inputs.model, inputs.data.as_deref(), inputs.constants.as_deref(), inputs.inits.as_deref())?;
    let state = ModelState::initialized(&g, &mut StreamKey::root(inputs.seed).child(INIT).rng())
        .map_err(|e| CliError::Config(format!("cannot initialize unset nodes: {e}")))?;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
    Ok((g, state))
}

fn filter_config(p: &ParticleArgs, particles: usize) -> Result<FilterConfig, CliError> {
    let method: Method = p.method.parse().map_err(|e| CliError::Config(format!("--method: {e}")))?;
    let lookahead: Lookahead = p.lookahead.parse()?;
    Ok(FilterConfig {
        particles,
        threshold: p.thresh,
        method,
        lookahead,
        param_scale: if p.raw_scale { ParamScale::Raw } else { ParamScale::Transformed },
        ..FilterConfig::default()
    })
}

fn json_nums(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| json!(x)).collect())
}

pub fn run(args: &RunArgs, out: &Path) -> Result<(), CliError> {
    let (g, state) = prepare(&args.inputs, out)?;
    let latent = &args.inputs.latent;
    let mut outputs = vec!["filter_summary.csv".to_string()];

    let results = if args.filter == FilterChoice::Kalman {
        let (ssm, y) = extract_gaussian(&g, latent, state.values()).map_err(|e| CliError::Config(e.to_string()))?;
        let k = kalman_filter(&ssm, &y)?;
        let mut t = Table::new(&["t", "mean", "sd", "q025", "q50", "q975"]);
        for (i, s) in k.steps.iter().enumerate() {
            let (m, v) = (s.mean[0], s.cov[(0, 0)]);
            let q: Vec<String> = [0.025, 0.5, 0.975].iter().map(|&p| num(normal_quantile(m, v, p))).collect();
            t.row(&[vec![(i + 1).to_string(), num(m), num(v.sqrt())], q].concat());
        }
        t.write(&out.join("filter_summary.csv"))?;
        json!({ "loglik": k.loglik })
    } else {
        let kind = match args.filter {
            FilterChoice::Bootstrap => FilterKind::Bootstrap,
            FilterChoice::Auxiliary => FilterKind::Auxiliary,
            FilterChoice::LiuWest => FilterKind::LiuWest,
            FilterChoice::Enkf => FilterKind::EnKF,
            FilterChoice::Kalman => unreachable!(),
        };
        let config = FilterConfig {
            save_all: args.save_all,
            discount: args.discount,
            params: args.params.clone(),
            ..filter_config(&args.particle, args.particles)?
        };
        let r = ParticleFilter::new(&g, latent, kind, config)?.run(&state, StreamKey::root(args.inputs.seed).child(ALGORITHM))?;
        write_summary(&r, args.summary_cloud, out)?;
        if args.samples {
            outputs.extend(write_samples(&r, latent, out)?);
        }
        if let Some(pc) = &r.params {
            let slot = pc.equal.slots() - 1;
            let mut t = Table::new(&["parameter", "lower", "upper", "count"]);
            for (j, name) in pc.names.iter().enumerate() {
                for (lo, hi, c) in histogram(&pc.equal.column(slot, j), args.bins) {
                    t.row(&[name.clone(), num(lo), num(hi), c.to_string()]);
                }
            }
            t.write(&out.join("param_histograms.csv"))?;
            outputs.push("param_histograms.csv".into());
        }
        json!({
            "loglik": r.loglik,
            "loglik_steps": json_nums(&r.loglik_steps),
            "ess": json_nums(&r.ess),
            "resampled": r.resampled,
        })
    };
    write_run_json(out, Recorded::Run(args.clone()), outputs, results)
}

fn write_summary(r: &FilterResult, cloud: SummaryCloud, out: &Path) -> Result<(), CliError> {
    let path = out.join("filter_summary.csv");
    if uses_ensemble_summary(r) {
        let mut t = Table::new(&["t", "mean", "sd", "lower", "upper"]);
        for row in ensemble_summary(r) {
            t.row(&[row.t.to_string(), num(row.mean), num(row.sd), num(row.lower), num(row.upper)]);
        }
        return t.write(&path);
    }
    let mut t = Table::new(&["t", "ess", "mean", "q025", "q50", "q975"]);
    for row in weighted_summary(r, cloud == SummaryCloud::Equal) {
        t.row(&[row.t.to_string(), num(row.ess), num(row.mean), num(row.q025), num(row.q50), num(row.q975)]);
    }
    t.write(&path)
}

fn write_samples(r: &FilterResult, latent: &str, out: &Path) -> Result<Vec<String>, CliError> {
    let names: Vec<String> = r.params.as_ref().map(|p| p.names.clone()).unwrap_or_default();
    let mut header = vec!["t", "particle", latent];
    header.extend(names.iter().map(String::as_str));
    let rows = |t: &mut Table, cloud: &smc_core::runtime::ParticleCloud, params: Option<&smc_core::runtime::ParticleCloud>, weights: bool| {
        for (slot, &time) in r.times.iter().enumerate() {
            let lw = if weights { Some(cloud.log_weights(slot)) } else { None };
            for k in 0..cloud.rows() {
                let mut cells = vec![time.to_string(), (k + 1).to_string()];
                if let Some(lw) = lw {
                    cells.push(num(lw[k]));
                }
                cells.extend(cloud.row(slot, k).expect("in range").iter().map(|&v| num(v)));
                if let Some(p) = params {
                    cells.extend(p.row(slot, k).expect("in range").iter().map(|&v| num(v)));
                }
                t.row(&cells);
            }
        }
    };
    let Some(w) = &r.weighted else {
        let mut t = Table::new(&header);
        rows(&mut t, &r.equal, None, false);
        t.write(&out.join("samples.csv"))?;
        return Ok(vec!["samples.csv".into()]);
    };
    let mut ew = Table::new(&header);
    rows(&mut ew, &r.equal, r.params.as_ref().map(|p| &p.equal), false);
    ew.write(&out.join("samples_ew.csv"))?;
    let mut wh = header.clone();
    wh.insert(2, "log_weight");
    let mut wt = Table::new(&wh);
    rows(&mut wt, w, r.params.as_ref().map(|p| &p.weighted), true);
    wt.write(&out.join("samples_w.csv"))?;
    Ok(vec!["samples_ew.csv".into(), "samples_w.csv".into()])
}

pub fn pmmh(args: &PmmhArgs, out: &Path) -> Result<(), CliError> {
    let d = args.target.len();
    let prop_cov = match &args.prop_cov {
        Some(p) => read_matrix(p)?,
        None => DMatrix::identity(d, d) * (args.prop_sd * args.prop_sd),
    };
    check_covariance(&prop_cov).map_err(|e| CliError::Config(format!("--prop-cov: {e}")))?;
    let (g, state) = prepare(&args.inputs, out)?;
    let config = PmmhConfig {
        adaptive: args.adaptive,
        pf_resample: args.pf_resample,
        thin: args.thin,
        burn_in: args.burn_in.unwrap_or(args.iterations / 2),
        scale: if args.particle.raw_scale { ParamScale::Raw } else { ParamScale::Transformed },
        ..PmmhConfig::block(args.target.clone(), prop_cov, args.iterations)
    };
    let inner = match args.inner {
        InnerChoice::Bootstrap => FilterKind::Bootstrap,
        InnerChoice::Auxiliary => FilterKind::Auxiliary,
    };
    let filter = filter_config(&args.particle, args.inner_particles)?;
    let key = StreamKey::root(args.inputs.seed).child(ALGORITHM);
    let chain = pmmh_run(&g, &args.inputs.latent, config, inner, filter, args.trajectories, &state, key)?;

    let mut header = vec!["iteration"];
    header.extend(chain.names.iter().map(String::as_str));
    header.extend(["loglik", "accepted"]);
    let mut t = Table::new(&header);
    for r in &chain.rows {
        let mut cells = vec![r.iteration.to_string()];
        cells.extend(r.theta.iter().map(|&v| num(v)));
        cells.push(num(r.loglik));
        cells.push((r.accepted as u8).to_string());
        t.row(&cells);
    }
    t.write(&out.join("chain.csv"))?;
    let mut outputs = vec!["chain.csv".to_string()];
    if args.trajectories {
        let labels: Vec<String> = g.latent_nodes(&args.inputs.latent).map_err(|e| CliError::Config(e.to_string()))?.iter().map(|&id| g.label(id)).collect();
        let mut header = vec!["iteration"];
        header.extend(labels.iter().map(String::as_str));
        let mut t = Table::new(&header);
        for r in &chain.rows {
            let mut cells = vec![r.iteration.to_string()];
            cells.extend(r.trajectory.iter().flatten().map(|&v| num(v)));
            t.row(&cells);
        }
        t.write(&out.join("trajectories.csv"))?;
        outputs.push("trajectories.csv".into());
    }
    let cov: Vec<Value> = chain.proposal_cov.row_iter().map(|r| json_nums(&r.iter().copied().collect::<Vec<_>>())).collect();
    let results = json!({
        "iterations": chain.iterations,
        "accepted": chain.accepted,
        "acceptance_rate": chain.acceptance_rate(),
        "failed_likelihoods": chain.failures,
        "final_proposal_cov": cov,
    });
    write_run_json(out, Recorded::Pmmh(args.clone()), outputs, results)
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let g = load_model(&args.model, None, args.constants.as_deref(), args.inits.as_deref())?;
    let state = ModelState::initialized(&g, &mut StreamKey::root(args.seed).rng()).map_err(|e| CliError::Config(format!("simulation failed: {e}")))?;
    let mut cols = Vec::new();
    for name in &args.variables {
        let ids = g.variable(name).map_err(|e| CliError::Config(e.to_string()))?;
        cols.push(ids.iter().map(|&id| state.get(id)).collect::<Vec<_>>());
    }
    let n = cols[0].len();
    if cols.iter().any(|c| c.len() != n) {
        return Err(CliError::Config("simulated variables must have the same length".into()));
    }
    let header: Vec<&str> = args.variables.iter().map(String::as_str).collect();
    let mut t = Table::new(&header);
    for i in 0..n {
        t.row(&cols.iter().map(|c| num(c[i])).collect::<Vec<_>>());
    }
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    }
    t.write(&args.out)
}

pub fn replay(manifest: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(manifest).map_err(|e| CliError::Config(format!("cannot read {}: {e}", manifest.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", manifest.display())))?;
    let m: Manifest = serde_json::from_value(doc.get("manifest").cloned().unwrap_or(Value::Null))
        .map_err(|e| CliError::Config(format!("{}: not a run manifest: {e}", manifest.display())))?;
    match m.recorded {
        Recorded::Run(a) => run(&a, out),
        Recorded::Pmmh(a) => pmmh(&a, out),
    }
}
