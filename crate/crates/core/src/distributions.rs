//! Densities and seeded draws for the distributions the model language admits.
//!
//! Normal distributions carry one of three scale parameterizations; gamma is
//! (shape, rate) so that inverse-gamma priors are written as gamma priors on
//! the reciprocal.

use std::f64::consts::PI;
use std::fmt;

use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::rng::RngState;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid {dist} parameters: {detail}")]
pub struct DistError {
    pub dist: &'static str,
    pub detail: String,
}

fn domain(dist: &'static str, detail: impl Into<String>) -> DistError {
    DistError {
        dist,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistKind {
    Normal,
    Beta,
    Gamma,
    Uniform,
}

impl DistKind {
    /// Name as written in model source.
    pub fn source_name(self) -> &'static str {
        match self {
            DistKind::Normal => "dnorm",
            DistKind::Beta => "dbeta",
            DistKind::Gamma => "dgamma",
            DistKind::Uniform => "dunif",
        }
    }

    pub fn from_source_name(name: &str) -> Option<Self> {
        match name {
            "dnorm" => Some(DistKind::Normal),
            "dbeta" => Some(DistKind::Beta),
            "dgamma" => Some(DistKind::Gamma),
            "dunif" => Some(DistKind::Uniform),
            _ => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            DistKind::Normal => "normal",
            DistKind::Beta => "beta",
            DistKind::Gamma => "gamma",
            DistKind::Uniform => "uniform",
        }
    }
}

/// How the second argument of a normal distribution is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleTag {
    Precision,
    Variance,
    Sd,
}

/// Distribution family plus, for normals, the scale parameterization.
///
/// Parameters are always supplied in canonical order: (mean, scale) for
/// normal, (shape1, shape2) for beta, (shape, rate) for gamma and
/// (lower, upper) for uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DistSpec {
    pub kind: DistKind,
    pub scale: Option<ScaleTag>,
}

impl DistSpec {
    pub fn normal(tag: ScaleTag) -> Self {
        DistSpec {
            kind: DistKind::Normal,
            scale: Some(tag),
        }
    }

    pub fn beta() -> Self {
        DistSpec {
            kind: DistKind::Beta,
            scale: None,
        }
    }

    pub fn gamma() -> Self {
        DistSpec {
            kind: DistKind::Gamma,
            scale: None,
        }
    }

    pub fn uniform() -> Self {
        DistSpec {
            kind: DistKind::Uniform,
            scale: None,
        }
    }

    pub const fn arity(&self) -> usize {
        2
    }

    /// Canonical parameter names.
    pub fn param_names(&self) -> [&'static str; 2] {
        match (self.kind, self.scale) {
            (DistKind::Normal, Some(ScaleTag::Variance)) => ["mean", "var"],
            (DistKind::Normal, Some(ScaleTag::Sd)) => ["mean", "sd"],
            (DistKind::Normal, _) => ["mean", "tau"],
            (DistKind::Beta, _) => ["shape1", "shape2"],
            (DistKind::Gamma, _) => ["shape", "rate"],
            (DistKind::Uniform, _) => ["min", "max"],
        }
    }

    /// Support of the distribution for the given parameters.
    pub fn support(&self, params: &[f64]) -> Support {
        match self.kind {
            DistKind::Normal => Support::Real,
            DistKind::Beta => Support::Interval(0.0, 1.0),
            DistKind::Gamma => Support::Positive,
            DistKind::Uniform => Support::Interval(params[0], params[1]),
        }
    }
}

impl fmt::Display for DistSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    Real,
    Positive,
    Interval(f64, f64),
}

/// Convert a normal scale parameter to a precision.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn convert_scale(tag: ScaleTag, value: f64) -> Result<f64, DistError> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(domain("normal", format!("scale must be positive and finite, got {value}")));
    }
    Ok(match tag {
        ScaleTag::Precision => value,
        ScaleTag::Variance => 1.0 / value,
        ScaleTag::Sd => 1.0 / (value * value),
    })
}

/// Inverse of [`convert_scale`]: express a precision under `tag`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn precision_to_scale(tag: ScaleTag, precision: f64) -> Result<f64, DistError> {
    if !(precision > 0.0) || !precision.is_finite() {
        return Err(domain("normal", format!("precision must be positive and finite, got {precision}")));
    }
    Ok(match tag {
        ScaleTag::Precision => precision,
        ScaleTag::Variance => 1.0 / precision,
        ScaleTag::Sd => 1.0 / precision.sqrt(),
    })
}

/// Resolved normal parameters (mean, variance).
pub fn normal_mean_var(spec: &DistSpec, params: &[f64]) -> Result<(f64, f64), DistError> {
    let tag = spec.scale.unwrap_or(ScaleTag::Precision);
    let mean = params[0];
    if !mean.is_finite() {
        return Err(domain("normal", format!("mean must be finite, got {mean}")));
    }
    let prec = convert_scale(tag, params[1])?;
    Ok((mean, 1.0 / prec))
}

fn check_positive(dist: &'static str, name: &str, v: f64) -> Result<(), DistError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(domain(dist, format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_params(spec: &DistSpec, params: &[f64]) -> Result<(), DistError> {
    if params.len() != spec.arity() {
        return Err(domain(
            spec.kind.label(),
            format!("expected {} parameters, got {}", spec.arity(), params.len()),
        ));
    }
    match spec.kind {
        DistKind::Normal => normal_mean_var(spec, params).map(|_| ()),
        DistKind::Beta => {
            check_positive("beta", "shape1", params[0])?;
            check_positive("beta", "shape2", params[1])
        }
        DistKind::Gamma => {
            check_positive("gamma", "shape", params[0])?;
            check_positive("gamma", "rate", params[1])
        }
        DistKind::Uniform => {
            let (lo, hi) = (params[0], params[1]);
            if lo.is_finite() && hi.is_finite() && lo < hi {
                Ok(())
            } else {
                Err(domain("uniform", format!("need finite lower < upper, got ({lo}, {hi})")))
            }
        }
    }
}

/// Natural-log density. Values outside the support give `-inf`.
pub fn log_density(spec: &DistSpec, value: f64, params: &[f64]) -> Result<f64, DistError> {
    check_params(spec, params)?;
    if value.is_nan() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(match spec.kind {
        DistKind::Normal => {
            let (mean, var) = normal_mean_var(spec, params)?;
            let z = value - mean;
            -0.5 * (LN_2PI + var.ln()) - 0.5 * z * z / var
        }
        DistKind::Beta => {
            let (a, b) = (params[0], params[1]);
            if !(0.0..=1.0).contains(&value) {
                return Ok(f64::NEG_INFINITY);
            }
            let norm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
            norm + xlogy(a - 1.0, value) + xlogy(b - 1.0, 1.0 - value)
        }
        DistKind::Gamma => {
            let (shape, rate) = (params[0], params[1]);
            if value < 0.0 || value.is_infinite() {
                return Ok(f64::NEG_INFINITY);
            }
            shape * rate.ln() - ln_gamma(shape) + xlogy(shape - 1.0, value) - rate * value
        }
        DistKind::Uniform => {
            let (lo, hi) = (params[0], params[1]);
            if value < lo || value > hi {
                f64::NEG_INFINITY
            } else {
                -(hi - lo).ln()
            }
        }
    })
}

// x * ln(y) with the 0 * ln(0) = 0 convention.
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// One draw from the distribution.
pub fn sample(spec: &DistSpec, params: &[f64], rng: &mut RngState) -> Result<f64, DistError> {
    check_params(spec, params)?;
    Ok(match spec.kind {
        DistKind::Normal => {
            let (mean, var) = normal_mean_var(spec, params)?;
            let z: f64 = StandardNormal.sample(rng);
            mean + var.sqrt() * z
        }
        DistKind::Beta => Beta::new(params[0], params[1])
            .map_err(|e| domain("beta", e.to_string()))?
            .sample(rng),
        DistKind::Gamma => Gamma::new(params[0], 1.0 / params[1])
            .map_err(|e| domain("gamma", e.to_string()))?
            .sample(rng),
        DistKind::Uniform => {
            let (lo, hi) = (params[0], params[1]);
            lo + (hi - lo) * rng.open01()
        }
    })
}

/// Standard normal draw, shared by kernels that build their own Gaussians.
pub fn standard_normal(rng: &mut RngState) -> f64 {
    StandardNormal.sample(rng)
}

/// Log density of N(mean, var) without parameter validation.
#[inline]
pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    -0.5 * ((2.0 * PI * var).ln() + z * z / var)
}
