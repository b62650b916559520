use super::{
    log_normalize, par_particles, stream, step_rng, FilterError, FilterKind, FilterResult, Lookahead, ParticleFilter, Recorder, LOOKAHEAD, OUTPUT, PROPAGATE,
    RESAMPLE,
};
use crate::resampling::{self, ess, log_sum_exp};
use crate::rng::StreamKey;
use crate::runtime::ModelState;

pub(super) fn run(f: &ParticleFilter<'_>, base: &ModelState, key: StreamKey) -> Result<FilterResult, FilterError> {
    let k = f.config.particles;
    let ln_k = (k as f64).ln();
    let mut rec = Recorder::new(f);
    // weighted cloud at t-1 with its normalized log-weights
    let mut prev = vec![0.0; k];
    let mut prev_log_pi = vec![-ln_k; k];

    for t in 0..f.steps() {
        let (x, log_w, parents) = if t == 0 {
            let draws: Vec<(f64, f64)> = par_particles(k, base, |s, i| {
                let x = f.propagate(s, 0, &mut stream(key, PROPAGATE, 0, i))?;
                Ok((x, f.observe(s, 0, x)?))
            })?;
            let x: Vec<f64> = draws.iter().map(|d| d.0).collect();
            let lw: Vec<f64> = draws.iter().map(|d| d.1).collect();
            let lse = log_sum_exp(&lw);
            if lse == f64::NEG_INFINITY {
                return Err(FilterError::Degenerate { t: 1 });
            }
            rec.loglik_steps.push(lse - ln_k);
            rec.resampled.push(false);
            (x, lw, (0..k).collect::<Vec<_>>())
        } else {
            // first stage: lookahead log-likelihoods
            let look: Vec<f64> = par_particles(k, base, |s, i| {
                f.set_previous(s, t, prev[i]);
                let xt = match f.config.lookahead {
                    Lookahead::Mean => f.transition_mean(s, t),
                    Lookahead::Simulate => f.propagate(s, t, &mut stream(key, LOOKAHEAD, t, i))?,
                };
                f.observe(s, t, xt)
            })?;
            let first: Vec<f64> = look.iter().zip(&prev_log_pi).map(|(l, p)| l + p).collect();
            let (pi1, _, lse1) = log_normalize(&first, t)?;
            let ids = resampling::resample(&pi1, k, f.config.method, &mut step_rng(key, RESAMPLE, t));
            // second stage
            let draws: Vec<(f64, f64)> = par_particles(k, base, |s, i| {
                let j = ids[i];
                f.set_previous(s, t, prev[j]);
                let x = f.propagate(s, t, &mut stream(key, PROPAGATE, t, i))?;
                Ok((x, f.observe(s, t, x)? - look[j]))
            })?;
            let x: Vec<f64> = draws.iter().map(|d| d.0).collect();
            let lw: Vec<f64> = draws.iter().map(|d| d.1).collect();
            let lse2 = log_sum_exp(&lw);
            if lse2 == f64::NEG_INFINITY || lse2.is_nan() {
                return Err(FilterError::Degenerate { t: t + 1 });
            }
            rec.loglik_steps.push(lse2 - ln_k + lse1);
            rec.resampled.push(true);
            (x, lw, ids)
        };
        rec.ancestors(parents);
        let (pi, log_pi, _) = log_normalize(&log_w, t)?;
        rec.ess.push(ess(&pi));
        let out_ids = if f.slot(t).is_some() {
            resampling::resample(&pi, k, f.config.method, &mut step_rng(key, OUTPUT, t))
        } else {
            Vec::new()
        };
        rec.store(f.slot(t), &x, &log_pi, &out_ids);
        prev = x;
        prev_log_pi = log_pi;
    }
    Ok(rec.finish(FilterKind::Auxiliary, true, None))
}
