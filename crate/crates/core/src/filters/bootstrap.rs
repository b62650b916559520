use super::{log_normalize, par_particles, stream, step_rng, FilterError, FilterKind, FilterResult, ParticleFilter, Recorder, OUTPUT, PROPAGATE, RESAMPLE};
use crate::resampling::{self, ess};
use crate::rng::StreamKey;
use crate::runtime::ModelState;

pub(super) fn run(f: &ParticleFilter<'_>, base: &ModelState, key: StreamKey) -> Result<FilterResult, FilterError> {
    let k = f.config.particles;
    let mut rec = Recorder::new(f);
    // source of each propagated particle and the carried log-weights
    let mut prev = vec![0.0; k];
    let mut prev_log_pi = vec![-(k as f64).ln(); k];
    let mut parents: Vec<usize> = (0..k).collect();

    for t in 0..f.steps() {
        rec.ancestors(std::mem::take(&mut parents));
        let draws: Vec<(f64, f64)> = par_particles(k, base, |s, i| {
            f.set_previous(s, t, prev[i]);
            let mut rng = stream(key, PROPAGATE, t, i);
            let x = f.propagate(s, t, &mut rng)?;
            Ok((x, f.observe(s, t, x)?))
        })?;
        let x: Vec<f64> = draws.iter().map(|d| d.0).collect();
        let lw: Vec<f64> = draws.iter().zip(&prev_log_pi).map(|(d, p)| d.1 + p).collect();
        // prev_log_pi is normalized, so this is log Σ π_{t-1} g_t
        let (pi, log_pi, inc) = log_normalize(&lw, t)?;
        rec.loglik_steps.push(inc);
        rec.ess.push(ess(&pi));

        let resample = resampling::should_resample(&pi, f.config.threshold).map_err(|e| FilterError::Config(e.to_string()))?;
        rec.resampled.push(resample);
        if resample {
            let ids = resampling::resample(&pi, k, f.config.method, &mut step_rng(key, RESAMPLE, t));
            rec.store(f.slot(t), &x, &log_pi, &ids);
            prev = ids.iter().map(|&i| x[i]).collect();
            prev_log_pi.iter_mut().for_each(|p| *p = -(k as f64).ln());
            parents = ids;
        } else {
            let ids = if f.slot(t).is_some() {
                resampling::resample(&pi, k, f.config.method, &mut step_rng(key, OUTPUT, t))
            } else {
                Vec::new()
            };
            rec.store(f.slot(t), &x, &log_pi, &ids);
            prev = x;
            prev_log_pi = log_pi;
            parents = (0..k).collect();
        }
    }
    Ok(rec.finish(FilterKind::Bootstrap, true, None))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::*;
    use crate::filters::summary::weighted_quantile;

    fn cfg(k: usize, tau: f64) -> FilterConfig {
        FilterConfig {
            particles: k,
            save_all: true,
            threshold: tau,
            ..FilterConfig::default()
        }
    }

    #[test]
    fn quantiles_track_kalman() {
        let y = lg_data(1, 10);
        let g = lg_graph(&y);
        let oracle = lg_oracle(&y);
        let (lo, hi) = (oracle.quantiles(0, 0.025), oracle.quantiles(0, 0.975));
        for tau in [0.9, 1.0] {
            let r = bootstrap_filter(&g, "x", cfg(10_000, tau), &state(&g), StreamKey::root(3)).unwrap();
            let w = r.weighted.as_ref().unwrap();
            for t in 0..10 {
                let xs = w.column(t, 0);
                let pi = w.weights(t);
                assert!((weighted_quantile(&xs, &pi, 0.025) - lo[t]).abs() < 0.15, "tau {tau} t {t}");
                assert!((weighted_quantile(&xs, &pi, 0.975) - hi[t]).abs() < 0.15, "tau {tau} t {t}");
            }
            assert!((r.loglik.unwrap() - oracle.loglik).abs() < 1.0);
        }
    }

    // Without resampling the weights degenerate over time, so agreement is
    // judged against the Monte Carlo error implied by each time's ESS.
    #[test]
    fn never_resampling_stays_within_its_monte_carlo_error() {
        let y = lg_data(1, 10);
        let g = lg_graph(&y);
        let oracle = lg_oracle(&y);
        let (lo, hi) = (oracle.quantiles(0, 0.025), oracle.quantiles(0, 0.975));
        let r = bootstrap_filter(&g, "x", cfg(10_000, 0.0), &state(&g), StreamKey::root(3)).unwrap();
        assert!(r.resampled.iter().all(|&b| !b));
        assert!(r.ess.windows(2).all(|w| w[1] <= w[0]));
        let w = r.weighted.as_ref().unwrap();
        for t in 0..10 {
            let (xs, pi) = (w.column(t, 0), w.weights(t));
            let tol = quantile_tolerance(0.025, r.ess[t], oracle.steps[t].cov[(0, 0)].sqrt());
            assert!((weighted_quantile(&xs, &pi, 0.025) - lo[t]).abs() < tol, "t {t}");
            assert!((weighted_quantile(&xs, &pi, 0.975) - hi[t]).abs() < tol, "t {t}");
        }
    }

    #[test]
    fn always_resampling_flags_every_step() {
        let y = lg_data(2, 10);
        let g = lg_graph(&y);
        let r = bootstrap_filter(&g, "x", cfg(200, 1.0), &state(&g), StreamKey::root(3)).unwrap();
        assert!(r.resampled.iter().all(|&b| b));
        for t in 0..10 {
            assert!(r.equal.weights(t).iter().all(|&p| p == 1.0 / 200.0));
        }
    }

    #[test]
    fn single_particle_has_unit_weight() {
        let y = lg_data(5, 10);
        let g = lg_graph(&y);
        let r = bootstrap_filter(&g, "x", cfg(1, 0.8), &state(&g), StreamKey::root(1)).unwrap();
        let w = r.weighted.unwrap();
        for t in 0..10 {
            assert_eq!(w.weights(t), vec![1.0]);
            assert_eq!(w.row(t, 0).unwrap(), r.equal.row(t, 0).unwrap());
        }
        assert_eq!(r.ess, vec![1.0; 10]);
    }

    #[test]
    fn repeat_runs_identical() {
        let y = lg_data(6, 10);
        let g = lg_graph(&y);
        let a = bootstrap_filter(&g, "x", cfg(500, 0.5), &state(&g), StreamKey::root(9)).unwrap();
        let b = bootstrap_filter(&g, "x", cfg(500, 0.5), &state(&g), StreamKey::root(9)).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_filter(&g, "x", cfg(500, 0.5), &state(&g), StreamKey::root(10)).unwrap();
        assert_ne!(a.loglik, c.loglik);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let y = lg_data(7, 10);
        let g = lg_graph(&y);
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| bootstrap_filter(&g, "x", cfg(3000, 0.7), &state(&g), StreamKey::root(4)).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn final_only_storage() {
        let y = lg_data(8, 10);
        let g = lg_graph(&y);
        let c = FilterConfig { save_all: false, ..cfg(100, 0.8) };
        let r = bootstrap_filter(&g, "x", c, &state(&g), StreamKey::root(2)).unwrap();
        assert_eq!(r.times, vec![10]);
        assert_eq!(r.equal.slots(), 1);
        assert!(r.ancestors.is_empty());
        assert_eq!(r.ess.len(), 10);
    }

    #[test]
    fn trajectories_follow_ancestry() {
        let y = lg_data(12, 10);
        let g = lg_graph(&y);
        let r = bootstrap_filter(&g, "x", cfg(50, 1.0), &state(&g), StreamKey::root(2)).unwrap();
        let w = r.weighted.as_ref().unwrap();
        let path = r.trajectory(17).unwrap();
        assert_eq!(path[9], w.row(9, 17).unwrap()[0]);
        let parent = r.ancestors[9][17];
        assert_eq!(path[8], w.row(8, parent).unwrap()[0]);
    }

    #[test]
    fn impossible_observation_is_degenerate() {
        use std::collections::BTreeMap;
        let src = "x[1] ~ dunif(0, 1)\ny[1] ~ dunif(x[1], x[1] + 1)\nx[2] ~ dunif(0, 1)\ny[2] ~ dunif(x[2], x[2] + 1)";
        let g = crate::model::compile(
            &crate::model::parse(src).unwrap(),
            &BTreeMap::new(),
            &BTreeMap::from([("y".to_string(), vec![0.5, 5.0])]),
            &BTreeMap::new(),
        )
        .unwrap();
        let err = bootstrap_filter(&g, "x", cfg(100, 0.5), &state(&g), StreamKey::root(1)).unwrap_err();
        assert_eq!(err, FilterError::Degenerate { t: 2 });
        assert!(err.is_numerical());
    }

    #[test]
    fn config_errors() {
        let g = lg_graph(&lg_data(1, 10));
        for c in [cfg(0, 0.5), cfg(10, 1.5), FilterConfig { discount: 0.0, ..cfg(10, 0.5) }] {
            assert!(matches!(ParticleFilter::new(&g, "x", FilterKind::Bootstrap, c), Err(FilterError::Config(_))));
        }
        assert!(matches!(ParticleFilter::new(&g, "y", FilterKind::Bootstrap, cfg(10, 0.5)), Err(FilterError::Lookup(_))));
    }
}
