use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{
    log_normalize, par_particles, stream, step_rng, ChainPlan, FilterConfig, FilterError, FilterKind, FilterResult, ParamCloud, ParamScale, ParticleFilter,
    Recorder, OUTPUT, PARAM_INIT, PERTURB, PROPAGATE, RESAMPLE,
};
use crate::distributions::standard_normal;
use crate::model::{DepFilter, ModelGraph, NodeId, Role};
use crate::resampling::{self, ess};
use crate::rng::StreamKey;
use crate::runtime::{self, ModelState};
use crate::transform::Transform;

/// Shrinkage `a` and kernel variance scale `h²` for discount `d`.
pub fn shrinkage(d: f64) -> (f64, f64) {
    let a = (3.0 * d - 1.0) / (2.0 * d);
    (a, 1.0 - a * a)
}

#[derive(Debug, Clone)]
pub struct LiuWestSetup {
    pub ids: Vec<NodeId>,
    pub names: Vec<String>,
    /// Deterministic nodes downstream of the parameters.
    det: Vec<NodeId>,
    a: f64,
    h2: f64,
    raw: bool,
}

impl LiuWestSetup {
    pub(super) fn new(graph: &ModelGraph, _plan: &ChainPlan, config: &FilterConfig) -> Result<Self, FilterError> {
        if config.params.is_empty() {
            return Err(FilterError::Config("Liu–West needs at least one parameter node".into()));
        }
        let mut ids = Vec::new();
        for name in &config.params {
            let id = graph.node_id(name)?;
            let node = graph.node(id);
            if node.role != Role::Parameter {
                return Err(FilterError::Config(format!("{name} is not an unobserved top-level parameter ({:?})", node.role)));
            }
            if ids.contains(&id) {
                return Err(FilterError::Config(format!("{name} listed twice")));
            }
            ids.push(id);
        }
        for &id in &ids {
            let (_, params) = graph.node(id).dist().expect("parameters are stochastic");
            for e in params {
                if let Some(&other) = graph.expr_stochastic_ancestors(e).iter().find(|a| ids.contains(a)) {
                    return Err(FilterError::Config(format!(
                        "prior of {} depends on estimated parameter {}",
                        graph.label(id),
                        graph.label(other)
                    )));
                }
            }
        }
        let (a, h2) = shrinkage(config.discount);
        Ok(LiuWestSetup {
            names: ids.iter().map(|&i| graph.label(i)).collect(),
            det: graph.dependencies_of_set(&ids, DepFilter::DeterministicOnly),
            ids,
            a,
            h2,
            raw: config.param_scale == ParamScale::Raw,
        })
    }

    fn set_theta(&self, graph: &ModelGraph, s: &mut ModelState, theta: &[f64]) {
        for (&id, &v) in self.ids.iter().zip(theta) {
            s.set(id, v);
        }
        runtime::refresh(graph, s, &self.det);
    }
}

/// Weighted mean and covariance of the rows of `u` (k × p, row-major).
fn weighted_moments(u: &[f64], p: usize, pi: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean = DVector::zeros(p);
    for (row, &w) in u.chunks(p).zip(pi) {
        for j in 0..p {
            mean[j] += w * row[j];
        }
    }
    let mut cov = DMatrix::zeros(p, p);
    for (row, &w) in u.chunks(p).zip(pi) {
        if w == 0.0 {
            continue;
        }
        for i in 0..p {
            for j in 0..=i {
                cov[(i, j)] += w * (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mean, cov)
}

/// A factor `L` with `L Lᵀ = m` for symmetric positive semi-definite `m`.
fn psd_factor(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let mut l = eig.eigenvectors;
    for (j, s) in scale.iter().enumerate() {
        l.column_mut(j).scale_mut(*s);
    }
    l
}

pub(super) fn run(f: &ParticleFilter<'_>, lw: &LiuWestSetup, base: &ModelState, key: StreamKey) -> Result<FilterResult, FilterError> {
    let g = f.graph;
    let k = f.config.particles;
    let p = lw.ids.len();
    let ln_k = (k as f64).ln();
    let mut rec = Recorder::new(f);
    let mut pw = f.cloud(p, false);
    let mut pe = f.cloud(p, true);

    let support: Vec<Transform> = lw
        .ids
        .iter()
        .map(|&id| {
            let (spec, params) = runtime::resolve(g, base, id).expect("stochastic");
            Transform::for_support(spec.support(&params))
        })
        .collect();
    let scale: Vec<Transform> = if lw.raw { vec![Transform::Identity; p] } else { support.clone() };

    // θ_0 from the priors
    let init: Vec<Vec<f64>> = par_particles(k, base, |s, i| {
        let mut rng = stream(key, PARAM_INIT, 0, i);
        runtime::simulate(g, s, &lw.ids, &mut rng).map_err(|source| FilterError::Model { t: 0, source })?;
        Ok(lw.ids.iter().map(|&id| s.get(id)).collect())
    })?;
    let mut theta: Vec<f64> = init.concat();
    let mut prev = vec![0.0; k];
    let mut log_pi = vec![-ln_k; k];

    for t in 0..f.steps() {
        let pi: Vec<f64> = log_pi.iter().map(|l| l.exp()).collect();
        let u: Vec<f64> = theta.chunks(p).flat_map(|row| row.iter().zip(&scale).map(|(&v, tr)| tr.to_real(v))).collect();
        let (u_bar, v) = weighted_moments(&u, p, &pi);
        let m: Vec<f64> = u.chunks(p).flat_map(|row| (0..p).map(|j| lw.a * row[j] + (1.0 - lw.a) * u_bar[j]).collect::<Vec<_>>()).collect();
        let theta_aux: Vec<f64> = m.chunks(p).flat_map(|row| row.iter().zip(&scale).map(|(&x, tr)| tr.from_real(x)).collect::<Vec<_>>()).collect();

        let look: Vec<f64> = par_particles(k, base, |s, i| {
            let th = &theta_aux[i * p..(i + 1) * p];
            if log_pi[i] == f64::NEG_INFINITY || th.iter().zip(&support).any(|(&x, tr)| !tr.contains(x)) {
                return Ok(f64::NEG_INFINITY);
            }
            lw.set_theta(g, s, th);
            f.set_previous(s, t, prev[i]);
            let xt = f.transition_mean(s, t);
            f.observe(s, t, xt)
        })?;
        let first: Vec<f64> = look.iter().zip(&log_pi).map(|(l, p)| l + p).collect();
        let (pi1, _, _) = log_normalize(&first, t)?;
        let ids = resampling::resample(&pi1, k, f.config.method, &mut step_rng(key, RESAMPLE, t));
        let factor = psd_factor(v * lw.h2);

        let draws: Vec<(Vec<f64>, f64, f64)> = par_particles(k, base, |s, i| {
            let j = ids[i];
            let th: Vec<f64> = if lw.h2 == 0.0 {
                theta[j * p..(j + 1) * p].to_vec()
            } else {
                let mut rng = stream(key, PERTURB, t, i);
                let z = DVector::from_iterator(p, (0..p).map(|_| standard_normal(&mut rng)));
                let shifted = &factor * z;
                (0..p).map(|c| scale[c].from_real(m[j * p + c] + shifted[c])).collect()
            };
            if th.iter().zip(&support).any(|(&x, tr)| !tr.contains(x)) {
                return Ok((th, f64::NAN, f64::NEG_INFINITY));
            }
            lw.set_theta(g, s, &th);
            f.set_previous(s, t, prev[j]);
            let x = f.propagate(s, t, &mut stream(key, PROPAGATE, t, i))?;
            let w = f.observe(s, t, x)? - look[j];
            Ok((th, x, w))
        })?;
        let x: Vec<f64> = draws.iter().map(|d| d.1).collect();
        let w2: Vec<f64> = draws.iter().map(|d| d.2).collect();
        let new_theta: Vec<f64> = draws.into_iter().flat_map(|d| d.0).collect();
        let (pi_t, lp, _) = log_normalize(&w2, t)?;

        rec.ess.push(ess(&pi_t));
        rec.resampled.push(true);
        rec.ancestors(ids);
        let out_ids = match f.slot(t) {
            Some(_) => resampling::resample(&pi_t, k, f.config.method, &mut step_rng(key, OUTPUT, t)),
            None => Vec::new(),
        };
        rec.store(f.slot(t), &x, &lp, &out_ids);
        if let Some(slot) = f.slot(t) {
            pw.slot_values_mut(slot).copy_from_slice(&new_theta);
            pw.set_log_weights(slot, &lp).expect("row count");
            let dst = pe.slot_values_mut(slot);
            for (r, &i) in out_ids.iter().enumerate() {
                dst[r * p..(r + 1) * p].copy_from_slice(&new_theta[i * p..(i + 1) * p]);
            }
        }
        prev = x;
        log_pi = lp;
        theta = new_theta;
    }
    let params = ParamCloud {
        names: lw.names.clone(),
        weighted: pw,
        equal: pe,
    };
    Ok(rec.finish(FilterKind::LiuWest, false, Some(params)))
}
