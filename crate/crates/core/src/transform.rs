//! Maps between a parameter's support and the real line.

use crate::distributions::Support;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    Log,
    /// Scaled logit onto (lo, hi).
    Logit { lo: f64, hi: f64 },
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Transform {
    pub fn for_support(s: Support) -> Self {
        match s {
            Support::Real => Transform::Identity,
            Support::Positive => Transform::Log,
            Support::Interval(lo, hi) => Transform::Logit { lo, hi },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Log => "log",
            Transform::Logit { .. } => "logit",
        }
    }

    pub fn to_real(&self, x: f64) -> f64 {
        match *self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::Logit { lo, hi } => {
                let p = (x - lo) / (hi - lo);
                p.ln() - (-p).ln_1p()
            }
        }
    }

    pub fn from_real(&self, u: f64) -> f64 {
        match *self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::Logit { lo, hi } => {
                let p = if u >= 0.0 { 1.0 / (1.0 + (-u).exp()) } else { u.exp() / (1.0 + u.exp()) };
                lo + (hi - lo) * p
            }
        }
    }

    /// log |d from_real(u) / du|
    pub fn log_jacobian(&self, u: f64) -> f64 {
        match *self {
            Transform::Identity => 0.0,
            Transform::Log => u,
            Transform::Logit { lo, hi } => (hi - lo).ln() - softplus(-u) - softplus(u),
        }
    }

    /// True when `x` lies strictly inside the support.
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Transform::Identity => x.is_finite(),
            Transform::Log => x > 0.0 && x.is_finite(),
            Transform::Logit { lo, hi } => x > lo && x < hi,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn jacobian_matches_finite_difference() {
        for t in [Transform::Identity, Transform::Log, Transform::Logit { lo: -1.0, hi: 3.0 }] {
            for u in [-3.0, -0.4, 0.0, 0.7, 2.5] {
                let h = 1e-6;
                let fd = (t.from_real(u + h) - t.from_real(u - h)) / (2.0 * h);
                assert!((fd.ln() - t.log_jacobian(u)).abs() < 1e-7, "{t:?} {u}");
            }
        }
    }

    #[test]
    fn support_mapping() {
        assert_eq!(Transform::for_support(Support::Positive), Transform::Log);
        assert_eq!(Transform::for_support(Support::Interval(0.0, 1.0)), Transform::Logit { lo: 0.0, hi: 1.0 });
        assert!(!Transform::Log.contains(0.0));
        assert!(!Transform::Logit { lo: 0.0, hi: 1.0 }.contains(1.0));
    }

    proptest! {
        #[test]
        fn round_trip(x in 1e-6f64..0.999_999) {
            let t = Transform::Logit { lo: 0.0, hi: 1.0 };
            prop_assert!((t.from_real(t.to_real(x)) - x).abs() < 1e-12);
            prop_assert!((Transform::Log.from_real(Transform::Log.to_real(x * 100.0)) - x * 100.0).abs() < 1e-10);
        }

        #[test]
        fn image_stays_in_support(u in -30.0f64..30.0) {
            let t = Transform::Logit { lo: 2.0, hi: 5.0 };
            let x = t.from_real(u);
            prop_assert!((2.0..=5.0).contains(&x));
            prop_assert!(Transform::Log.from_real(u) > 0.0);
        }
    }
}
