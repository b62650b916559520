//! Weight normalization, effective sample size and resampling kernels.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightError {
    #[error("all particle weights are zero")]
    Degenerate,
    #[error("weight vector is empty")]
    Empty,
    #[error("resampling threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("unknown resampling method `{0}` (expected systematic, residual or multinomial)")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Systematic,
    Residual,
    Multinomial,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Systematic => "systematic",
            Method::Residual => "residual",
            Method::Multinomial => "multinomial",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = WeightError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "systematic" => Ok(Method::Systematic),
            "residual" => Ok(Method::Residual),
            "multinomial" => Ok(Method::Multinomial),
            other => Err(WeightError::UnknownMethod(other.to_string())),
        }
    }
}

/// log(sum(exp(lw))), or -inf when every entry is -inf.
pub fn log_sum_exp(lw: &[f64]) -> f64 {
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + lw.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Normalized probabilities and the log of the mean raw weight.
pub fn normalize(lw: &[f64]) -> Result<(Vec<f64>, f64), WeightError> {
    if lw.is_empty() {
        return Err(WeightError::Empty);
    }
    let lse = log_sum_exp(lw);
    if !lse.is_finite() {
        return Err(WeightError::Degenerate);
    }
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = lw.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = raw.iter().sum();
    let pi = raw.into_iter().map(|w| w / sum).collect();
    Ok((pi, lse - (lw.len() as f64).ln()))
}

pub fn ess(pi: &[f64]) -> f64 {
    1.0 / pi.iter().map(|p| p * p).sum::<f64>()
}

pub fn should_resample(pi: &[f64], tau: f64) -> Result<bool, WeightError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(WeightError::Threshold(tau));
    }
    Ok(ess(pi) / (pi.len() as f64) < tau)
}

/// Draw `k` ancestor indices (0-based, sorted ascending) from `pi`.
pub fn resample(pi: &[f64], k: usize, method: Method, rng: &mut RngState) -> Vec<usize> {
    match method {
        Method::Systematic => systematic(pi, k, rng.open01()),
        Method::Multinomial => multinomial(pi, k, rng),
        Method::Residual => residual(pi, k, rng),
    }
}

/// Systematic resampling with a single offset `u` in (0, 1).
pub fn systematic(pi: &[f64], k: usize, u: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut cum = 0.0;
    let mut j = 0;
    let last = last_positive(pi);
    for i in 0..k {
        let point = (i as f64 + u) / k as f64;
        while j < last && cum + pi[j] <= point {
            cum += pi[j];
            j += 1;
        }
        out.push(j);
    }
    out
}

fn last_positive(pi: &[f64]) -> usize {
    pi.iter().rposition(|&p| p > 0.0).unwrap_or(pi.len() - 1)
}

/// Inverse-CDF lookup of sorted uniforms.
fn invert_sorted(pi: &[f64], sorted_u: &[f64], out: &mut Vec<usize>) {
    let mut cum = 0.0;
    let mut j = 0;
    let last = last_positive(pi);
    for &u in sorted_u {
        while j < last && cum + pi[j] <= u {
            cum += pi[j];
            j += 1;
        }
        out.push(j);
    }
}

/// Sorted iid uniforms via normalized exponential spacings.
fn sorted_uniforms(n: usize, rng: &mut RngState) -> Vec<f64> {
    let mut acc = 0.0;
    let mut e: Vec<f64> = (0..=n)
        .map(|_| {
            acc += -rng.open01().ln();
            acc
        })
        .collect();
    let total = e.pop().unwrap_or(1.0);
    e.iter_mut().for_each(|x| *x /= total);
    e
}

pub fn multinomial(pi: &[f64], k: usize, rng: &mut RngState) -> Vec<usize> {
    let u = sorted_uniforms(k, rng);
    let mut out = Vec::with_capacity(k);
    invert_sorted(pi, &u, &mut out);
    out
}

pub fn residual(pi: &[f64], k: usize, rng: &mut RngState) -> Vec<usize> {
    let kf = k as f64;
    let mut counts: Vec<usize> = pi.iter().map(|&p| (kf * p).floor() as usize).collect();
    let fixed: usize = counts.iter().sum();
    let rest = k.saturating_sub(fixed);
    if rest > 0 {
        let resid: Vec<f64> = pi.iter().zip(&counts).map(|(&p, &c)| (kf * p - c as f64).max(0.0)).collect();
        let s: f64 = resid.iter().sum();
        let resid: Vec<f64> = if s > 0.0 { resid.iter().map(|r| r / s).collect() } else { pi.to_vec() };
        for j in multinomial(&resid, rest, rng) {
            counts[j] += 1;
        }
    }
    let mut out = Vec::with_capacity(k);
    for (j, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(j, c));
    }
    out.truncate(k);
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::StreamKey;

    fn counts(ids: &[usize], n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        for &i in ids {
            c[i] += 1;
        }
        c
    }

    #[test]
    fn normalize_examples() {
        let (pi, lm) = normalize(&[0.0; 4]).unwrap();
        assert!(pi.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert_eq!(lm, 0.0);

        let ninf = f64::NEG_INFINITY;
        let (pi, lm) = normalize(&[2f64.ln(), ninf, ninf, ninf]).unwrap();
        assert_eq!(pi, vec![1.0, 0.0, 0.0, 0.0]);
        assert!((lm - 0.5f64.ln()).abs() < 1e-15);

        assert_eq!(normalize(&[ninf; 3]), Err(WeightError::Degenerate));
    }

    #[test]
    fn ess_examples() {
        assert_eq!(ess(&[0.25; 4]), 4.0);
        assert_eq!(ess(&[1.0, 0.0, 0.0, 0.0]), 1.0);
        assert_eq!(ess(&[0.5, 0.5, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn threshold_semantics() {
        let unequal = [0.3, 0.7];
        assert!(!should_resample(&unequal, 0.0).unwrap());
        assert!(should_resample(&unequal, 1.0).unwrap());
        assert!(!should_resample(&[0.5, 0.5], 1.0).unwrap());
        assert!(should_resample(&[0.5, 0.5], 1.5).is_err());
        assert!(should_resample(&[0.5, 0.5], -0.1).is_err());
    }

    #[test]
    fn point_mass_selects_only_that_particle() {
        let mut rng = StreamKey::root(3).rng();
        for m in [Method::Systematic, Method::Residual, Method::Multinomial] {
            assert_eq!(resample(&[1.0, 0.0, 0.0], 3, m, &mut rng), vec![0, 0, 0]);
            assert_eq!(resample(&[0.0, 0.0, 1.0], 3, m, &mut rng), vec![2, 2, 2]);
        }
    }

    #[test]
    fn systematic_uniform_is_identity() {
        let mut rng = StreamKey::root(4).rng();
        for k in 1..50 {
            let pi = vec![1.0 / k as f64; k];
            assert_eq!(resample(&pi, k, Method::Systematic, &mut rng), (0..k).collect::<Vec<_>>());
        }
    }

    #[test]
    fn systematic_bracket_over_offset_grid() {
        let pi = [0.1, 0.35, 0.05, 0.5];
        for k in 2..=12 {
            for step in 1..200 {
                let u = step as f64 / 200.0;
                let c = counts(&systematic(&pi, k, u), pi.len());
                for (j, &p) in pi.iter().enumerate() {
                    let e = k as f64 * p;
                    assert!(c[j] == e.floor() as usize || c[j] == e.ceil() as usize, "k={k} u={u} j={j}");
                }
            }
        }
    }

    #[test]
    fn systematic_bracket_random_weights() {
        let mut rng = StreamKey::root(11).rng();
        for trial in 0..1000 {
            let k = 2 + trial % 63;
            let raw: Vec<f64> = (0..k).map(|_| rng.open01().powi(3)).collect();
            let (pi, _) = normalize(&raw.iter().map(|w| w.ln()).collect::<Vec<_>>()).unwrap();
            let c = counts(&resample(&pi, k, Method::Systematic, &mut rng), k);
            for j in 0..k {
                let e = k as f64 * pi[j];
                // float slack at exact integers
                assert!(c[j] as f64 >= (e - 1e-9).floor() && c[j] as f64 <= (e + 1e-9).ceil(), "trial {trial}");
            }
        }
    }

    // Two-sided z test on the total count of index 1 across repeated draws.
    fn clt_check(method: Method, pi: &[f64], k: usize, reps: usize, seed: u64) {
        let mut rng = StreamKey::root(seed).rng();
        let mut hits = 0usize;
        for _ in 0..reps {
            hits += resample(pi, k, method, &mut rng).iter().filter(|&&i| i == 1).count();
        }
        let n = (k * reps) as f64;
        let frac = hits as f64 / n;
        let var = match method {
            Method::Multinomial => pi[1] * (1.0 - pi[1]) / n,
            // residual only randomizes the fractional remainder
            _ => {
                let r = (k as f64 * pi[1]).fract();
                r * (1.0 - r) / (k as f64 * n)
            }
        };
        let z = (frac - pi[1]) / var.sqrt().max(1e-300);
        assert!(z.abs() < 3.2905, "{method}: frac {frac} z {z}");
    }

    #[test]
    fn multinomial_count_fraction() {
        clt_check(Method::Multinomial, &[0.3, 0.7], 100, 1000, 21);
    }

    #[test]
    fn residual_count_fraction() {
        clt_check(Method::Residual, &[0.37, 0.63], 10, 10_000, 22);
    }

    #[test]
    fn ids_sorted_and_in_range() {
        let mut rng = StreamKey::root(8).rng();
        let pi = [0.2, 0.1, 0.4, 0.3];
        for m in [Method::Systematic, Method::Residual, Method::Multinomial] {
            let ids = resample(&pi, 17, m, &mut rng);
            assert_eq!(ids.len(), 17);
            assert!(ids.windows(2).all(|w| w[0] <= w[1]));
            assert!(ids.iter().all(|&i| i < 4));
        }
    }

    proptest! {
        #[test]
        fn normalize_shift_invariant(lw in prop::collection::vec(-50.0f64..50.0, 1..40), c in -500.0f64..500.0) {
            let (p1, m1) = normalize(&lw).unwrap();
            let shifted: Vec<f64> = lw.iter().map(|l| l + c).collect();
            let (p2, m2) = normalize(&shifted).unwrap();
            for (a, b) in p1.iter().zip(&p2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((m2 - m1 - c).abs() < 1e-9 * (1.0 + c.abs()));
            prop_assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let e = ess(&p1);
            prop_assert!(e >= 1.0 - 1e-12 && e <= lw.len() as f64 + 1e-9);
        }

        #[test]
        fn every_method_returns_k_valid_ids(lw in prop::collection::vec(-10.0f64..10.0, 1..30), k in 1usize..80, seed in any::<u64>()) {
            let (pi, _) = normalize(&lw).unwrap();
            let mut rng = StreamKey::root(seed).rng();
            for m in [Method::Systematic, Method::Residual, Method::Multinomial] {
                let ids = resample(&pi, k, m, &mut rng);
                prop_assert_eq!(ids.len(), k);
                prop_assert!(ids.iter().all(|&i| i < pi.len() && pi[i] > 0.0));
            }
        }
    }
}
