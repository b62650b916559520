//! Per-time summaries of filter output.

use super::{FilterKind, FilterResult};

/// Normal 97.5% quantile.
pub const Z975: f64 = 1.959_963_984_540_054;

/// Left-continuous inverse of the weighted empirical CDF: the smallest value
/// whose cumulative weight reaches `p`. Values are sorted ascending with ties
/// broken by index. Equal weights give the plain order statistic.
pub fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> f64 {
    assert_eq!(values.len(), weights.len());
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    if weights.iter().all(|&w| w == weights[0]) {
        let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
        return values[order[rank - 1]];
    }
    let total: f64 = weights.iter().sum();
    let mut cum = 0.0;
    for &i in &order {
        cum += weights[i];
        if cum / total >= p - 1e-12 {
            return values[i];
        }
    }
    values[order[n - 1]]
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total
}

/// One row of a weighted-filter summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub t: usize,
    pub ess: f64,
    pub mean: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

/// One row of an ensemble summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRow {
    pub t: usize,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Summaries of the weighted cloud (the equal cloud when `equal` is set).
pub fn weighted_summary(r: &FilterResult, equal: bool) -> Vec<SummaryRow> {
    let cloud = match (&r.weighted, equal) {
        (Some(w), false) => w,
        _ => &r.equal,
    };
    r.times
        .iter()
        .enumerate()
        .map(|(slot, &t)| {
            let xs = cloud.column(slot, 0);
            let w = cloud.weights(slot);
            SummaryRow {
                t,
                ess: r.ess[t - 1],
                mean: weighted_mean(&xs, &w),
                q025: weighted_quantile(&xs, &w, 0.025),
                q50: weighted_quantile(&xs, &w, 0.5),
                q975: weighted_quantile(&xs, &w, 0.975),
            }
        })
        .collect()
}

/// Mean, sample sd and mean ± 1.96 sd of the equally weighted cloud.
pub fn ensemble_summary(r: &FilterResult) -> Vec<EnsembleRow> {
    r.times
        .iter()
        .enumerate()
        .map(|(slot, &t)| {
            let xs = r.equal.column(slot, 0);
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            EnsembleRow {
                t,
                mean,
                sd,
                lower: mean - Z975 * sd,
                upper: mean + Z975 * sd,
            }
        })
        .collect()
}

/// True when the result's natural summary is the ensemble form.
pub fn uses_ensemble_summary(r: &FilterResult) -> bool {
    r.kind == FilterKind::EnKF
}

/// Equal-width histogram as (lower edge, upper edge, count).
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn quantile_examples() {
        let v = [3.0, 1.0, 2.0, 4.0];
        let w = [0.25; 4];
        assert_eq!(weighted_quantile(&v, &w, 0.5), 2.0);
        assert_eq!(weighted_quantile(&v, &w, 0.51), 3.0);
        assert_eq!(weighted_quantile(&v, &w, 0.0), 1.0);
        assert_eq!(weighted_quantile(&v, &w, 1.0), 4.0);
        assert_eq!(weighted_quantile(&v, &[0.0, 0.0, 0.0, 1.0], 0.01), 4.0);
        assert_eq!(weighted_quantile(&v, &[0.1, 0.6, 0.2, 0.1], 0.5), 1.0);
    }

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let h = histogram(&v, 7);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 100);
        assert_eq!(h[0].0, 0.0);
        assert_eq!(h[6].1, 99.0);
    }

    proptest! {
        #[test]
        fn uniform_weights_give_order_statistics(v in prop::collection::vec(-100.0f64..100.0, 1..60), p in 0.0f64..=1.0) {
            let n = v.len();
            let w = vec![1.0 / n as f64; n];
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
            prop_assert_eq!(weighted_quantile(&v, &w, p), sorted[rank - 1]);
        }

        #[test]
        fn quantile_is_monotone(v in prop::collection::vec(-10.0f64..10.0, 2..40), w in prop::collection::vec(0.01f64..1.0, 40), p in 0.0f64..0.99) {
            let w = &w[..v.len()];
            prop_assert!(weighted_quantile(&v, w, p) <= weighted_quantile(&v, w, p + 0.01));
        }
    }
}
