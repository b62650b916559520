use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{par_particles, stream, ChainPlan, FilterError, FilterKind, FilterResult, ParticleFilter, OBS_NOISE, PROPAGATE};
use crate::distributions::{normal_mean_var, standard_normal};
use crate::model::{ModelGraph, NodeKind};
use crate::rng::StreamKey;
use crate::runtime::{self, ModelState};

/// Largest accepted condition number of the innovation covariance.
const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub(super) struct EnkfSetup;

impl EnkfSetup {
    /// Observations must be normal with noise that does not depend on the state.
    pub(super) fn new(graph: &ModelGraph, plan: &ChainPlan) -> Result<Self, FilterError> {
        for (t, obs) in plan.obs.iter().enumerate() {
            for &o in obs {
                let NodeKind::Stochastic { params, .. } = &graph.node(o).kind else { unreachable!() };
                if !graph.is_normal(o) {
                    return Err(FilterError::Config(format!("{}: the ensemble Kalman filter needs normal observations", graph.label(o))));
                }
                if graph.expr_stochastic_ancestors(&params[1]).contains(&plan.latent[t]) {
                    return Err(FilterError::Config(format!("{}: observation noise depends on the latent state", graph.label(o))));
                }
            }
        }
        Ok(EnkfSetup)
    }
}

pub(super) fn run(f: &ParticleFilter<'_>, _setup: &EnkfSetup, base: &ModelState, key: StreamKey) -> Result<FilterResult, FilterError> {
    let g = f.graph;
    let k = f.config.particles;
    let mut cloud = f.cloud(1, true);
    let mut gains = Vec::with_capacity(f.steps());
    let mut prev = vec![0.0; k];

    for t in 0..f.steps() {
        let obs = &f.plan.obs[t];
        let m = obs.len();
        // propagate and evaluate the observation means g(x)
        let draws: Vec<(f64, Vec<f64>)> = par_particles(k, base, |s, i| {
            f.set_previous(s, t, prev[i]);
            let x = f.propagate(s, t, &mut stream(key, PROPAGATE, t, i))?;
            s.set(f.plan.latent[t], x);
            runtime::refresh(g, s, &f.plan.det[t]);
            let gx = obs.iter().map(|&o| runtime::resolve(g, s, o).expect("stochastic").1[0]).collect();
            Ok((x, gx))
        })?;
        let mut x: Vec<f64> = draws.iter().map(|d| d.0).collect();
        if m == 0 {
            gains.push(DMatrix::zeros(1, 0));
        } else {
            let mut noise = DMatrix::zeros(m, m);
            let mut y = DVector::zeros(m);
            for (j, &o) in obs.iter().enumerate() {
                let (spec, params) = runtime::resolve(g, base, o).expect("stochastic");
                let (_, var) = normal_mean_var(&spec, &[0.0, params[1]]).map_err(|e| FilterError::Model {
                    t: t + 1,
                    source: runtime::RuntimeError::Domain {
                        node: g.label(o),
                        source: e,
                    },
                })?;
                noise[(j, j)] = var;
                y[j] = g.observed_value(o).expect("observation");
            }
            let kf = k as f64;
            let x_bar = x.iter().sum::<f64>() / kf;
            let mut y_bar = DVector::zeros(m);
            for d in &draws {
                for j in 0..m {
                    y_bar[j] += d.1[j];
                }
            }
            y_bar /= kf;
            let ex = DMatrix::from_iterator(1, k, x.iter().map(|v| v - x_bar));
            let ey = DMatrix::from_fn(m, k, |j, i| draws[i].1[j] - y_bar[j]);
            let pxy = &ex * ey.transpose() / (kf - 1.0);
            let pyy = &ey * ey.transpose() / (kf - 1.0) + &noise;
            let pyy = (&pyy + pyy.transpose()) * 0.5;
            let eig = SymmetricEigen::new(pyy.clone());
            let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| (lo.min(l), hi.max(l.abs())));
            if lo.is_nan() || lo <= 0.0 || hi / lo > CONDITION_LIMIT {
                return Err(FilterError::Singular {
                    t: t + 1,
                    detail: format!("innovation covariance is singular or ill-conditioned (eigenvalues {lo:e} to {hi:e})"),
                });
            }
            let lu = pyy.lu();
            let gain = lu
                .solve(&pxy.transpose())
                .ok_or_else(|| FilterError::Singular {
                    t: t + 1,
                    detail: "innovation covariance is singular".into(),
                })?
                .transpose();
            let sd: Vec<f64> = (0..m).map(|j| noise[(j, j)].sqrt()).collect();
            for (i, xi) in x.iter_mut().enumerate() {
                let mut rng = stream(key, OBS_NOISE, t, i);
                let innov = DVector::from_fn(m, |j, _| y[j] + sd[j] * standard_normal(&mut rng) - draws[i].1[j]);
                *xi += (&gain * innov)[0];
            }
            gains.push(gain);
        }
        if let Some(slot) = f.slot(t) {
            cloud.slot_values_mut(slot).copy_from_slice(&x);
        }
        prev = x;
    }
    Ok(FilterResult {
        kind: FilterKind::EnKF,
        times: f.stored_times(),
        weighted: None,
        equal: cloud,
        ess: vec![k as f64; f.steps()],
        resampled: vec![false; f.steps()],
        loglik: None,
        loglik_steps: Vec::new(),
        ancestors: Vec::new(),
        params: None,
        gains,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::super::testutil::*;
    use super::super::*;
    use crate::model::{bundled, compile, parse};

    fn cfg(k: usize) -> FilterConfig {
        FilterConfig {
            particles: k,
            save_all: true,
            ..FilterConfig::default()
        }
    }

    fn mean_sd(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    }

    #[test]
    fn gain_converges_to_kalman() {
        let y = lg_data(31, 10);
        let g = lg_graph(&y);
        let r = enkf(&g, "x", cfg(100_000), &state(&g), StreamKey::root(6)).unwrap();
        assert!((r.gains[0][(0, 0)] - 2.0 / 3.0).abs() < 0.02, "{}", r.gains[0]);
        assert!(r.weighted.is_none() && r.loglik.is_none());
    }

    #[test]
    fn means_track_kalman() {
        let y = lg_data(32, 10);
        let g = lg_graph(&y);
        let oracle = lg_oracle(&y);
        let r = enkf(&g, "x", cfg(10_000), &state(&g), StreamKey::root(7)).unwrap();
        for t in 0..10 {
            let (m, sd) = mean_sd(&r.equal.column(t, 0));
            assert!((m - oracle.steps[t].mean[0]).abs() < 0.1, "t {t}");
            let lo = oracle.quantiles(0, 0.025)[t];
            assert!((m - 1.959_963_984_540_054 * sd - lo).abs() < 0.15, "t {t}");
        }
    }

    #[test]
    fn tiny_noise_pulls_mean_to_observation() {
        let src = "x[1] ~ dnorm(0, var = 1)\ny[1] ~ dnorm(x[1], var = 1e-8)";
        let g = compile(&parse(src).unwrap(), &BTreeMap::new(), &BTreeMap::from([("y".to_string(), vec![1.7])]), &BTreeMap::new()).unwrap();
        let r = enkf(&g, "x", cfg(5000), &state(&g), StreamKey::root(1)).unwrap();
        let (m, _) = mean_sd(&r.equal.column(0, 0));
        assert!((m - 1.7).abs() < 1e-3);
    }

    #[test]
    fn duplicate_noiseless_observations_are_ill_conditioned() {
        let src = "x[1] ~ dnorm(0, var = 1)\ny[1] ~ dnorm(x[1], var = 1e-20)\nz[1] ~ dnorm(x[1], var = 1e-20)";
        let data = BTreeMap::from([("y".to_string(), vec![0.0]), ("z".to_string(), vec![0.0])]);
        let g = compile(&parse(src).unwrap(), &BTreeMap::new(), &data, &BTreeMap::new()).unwrap();
        let err = enkf(&g, "x", cfg(50), &state(&g), StreamKey::root(1)).unwrap_err();
        assert!(matches!(err, FilterError::Singular { t: 1, .. }), "{err}");
    }

    #[test]
    fn state_dependent_noise_is_rejected() {
        let src = parse(bundled::STOCHASTIC_VOLATILITY).unwrap();
        let g = compile(
            &src,
            &BTreeMap::from([("T".to_string(), 5.0)]),
            &BTreeMap::from([("y".to_string(), vec![0.0; 5])]),
            &BTreeMap::new(),
        )
        .unwrap();
        let err = ParticleFilter::new(&g, "x", FilterKind::EnKF, cfg(10)).unwrap_err();
        assert!(err.to_string().contains("y[1]"), "{err}");
    }

    #[test]
    fn needs_two_particles() {
        let g = lg_graph(&lg_data(1, 10));
        assert!(matches!(ParticleFilter::new(&g, "x", FilterKind::EnKF, cfg(1)), Err(FilterError::Config(_))));
    }
}
