//! Exact filtering for linear-Gaussian state-space models.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::distributions::{self, DistKind};
use crate::filters::{ChainPlan, FilterError};
use crate::model::{ModelGraph, NodeExpr, NodeId, NodeKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KalmanError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("time {t}: {what} is not positive definite")]
    NotPositiveDefinite { t: usize, what: &'static str },
}

/// x[1] ~ N(m0, P0); x[t] = A x[t-1] + b[t] + N(0, Q[t]);
/// y[t] = H x[t] + c[t] + N(0, R[t]).
///
/// Per-time vectors are indexed from 0; `b[0]` and `q[0]` are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSSM {
    pub a: DMatrix<f64>,
    pub b: Vec<DVector<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub h: DMatrix<f64>,
    pub c: Vec<DVector<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl GaussianSSM {
    /// Scalar model with constant coefficients and no offsets.
    pub fn scalar(a: f64, q: f64, h: f64, r: f64, m0: f64, p0: f64, steps: usize) -> Self {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        GaussianSSM {
            a: s(a),
            b: vec![DVector::zeros(1); steps],
            q: vec![s(q); steps],
            h: s(h),
            c: vec![DVector::zeros(1); steps],
            r: vec![s(r); steps],
            m0: DVector::from_element(1, m0),
            p0: s(p0),
        }
    }

    pub fn steps(&self) -> usize {
        self.q.len()
    }

    pub fn state_dim(&self) -> usize {
        self.m0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanStep {
    pub pred_mean: DVector<f64>,
    pub pred_cov: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// log p(y[t] | y[1..t-1])
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanOutput {
    pub steps: Vec<KalmanStep>,
    pub loglik: f64,
}

impl KalmanOutput {
    /// Marginal filtering quantile of state component `i` at each time.
    pub fn quantiles(&self, i: usize, p: f64) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| normal_quantile(s.mean[i], s.cov[(i, i)], p))
            .collect()
    }
}

pub fn normal_quantile(mean: f64, var: f64, p: f64) -> f64 {
    Normal::new(mean, var.sqrt()).map(|n| n.inverse_cdf(p)).unwrap_or(mean)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn kalman_filter(ssm: &GaussianSSM, y: &[DVector<f64>]) -> Result<KalmanOutput, KalmanError> {
    let n = ssm.state_dim();
    let m = ssm.h.nrows();
    let steps = ssm.steps();
    if y.len() != steps || ssm.r.len() != steps || ssm.b.len() != steps || ssm.c.len() != steps {
        return Err(KalmanError::Dimension(format!("{} observations for {} steps", y.len(), steps)));
    }
    if ssm.a.shape() != (n, n) || ssm.h.ncols() != n || ssm.p0.shape() != (n, n) {
        return Err(KalmanError::Dimension("coefficient shapes disagree with the state".into()));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut out = Vec::with_capacity(steps);
    let mut total = 0.0;
    let (mut mean, mut cov) = (ssm.m0.clone(), ssm.p0.clone());
    for (t, yt) in y.iter().enumerate().take(steps) {
        if yt.len() != m {
            return Err(KalmanError::Dimension(format!("observation {} has length {}", t + 1, yt.len())));
        }
        let (pm, pc) = if t == 0 {
            (mean.clone(), cov.clone())
        } else {
            (&ssm.a * &mean + &ssm.b[t], symmetrize(&(&ssm.a * &cov * ssm.a.transpose() + &ssm.q[t])))
        };
        let s = symmetrize(&(&ssm.h * &pc * ssm.h.transpose() + &ssm.r[t]));
        let chol = s
            .clone()
            .cholesky()
            .ok_or(KalmanError::NotPositiveDefinite { t: t + 1, what: "innovation covariance" })?;
        let innov = yt - (&ssm.h * &pm + &ssm.c[t]);
        let gain = chol.solve(&(&ssm.h * &pc)).transpose();
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let quad = innov.dot(&chol.solve(&innov));
        let ll = -0.5 * (m as f64 * (2.0 * PI).ln() + log_det + quad);
        let ikh = &eye - &gain * &ssm.h;
        mean = &pm + &gain * &innov;
        cov = symmetrize(&(&ikh * &pc * ikh.transpose() + &gain * &ssm.r[t] * gain.transpose()));
        total += ll;
        out.push(KalmanStep {
            pred_mean: pm,
            pred_cov: pc,
            mean: mean.clone(),
            cov: cov.clone(),
            gain,
            loglik: ll,
        });
    }
    Ok(KalmanOutput { steps: out, loglik: total })
}

/// Why a model is not linear-Gaussian in its latent chain.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct MismatchReport {
    pub node: String,
    pub reason: String,
}

impl fmt::Display for MismatchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "not linear-Gaussian at {}: {}", self.node, self.reason)
    }
}

/// `c + k * x` where x is the single chain node in scope.
#[derive(Debug, Clone, Copy)]
struct Affine {
    c: f64,
    k: f64,
    state: bool,
}

impl Affine {
    fn constant(c: f64) -> Self {
        Affine { c, k: 0.0, state: false }
    }
}

fn affine(graph: &ModelGraph, e: &NodeExpr, values: &[f64], chain: &[bool]) -> Result<Affine, String> {
    use crate::model::ast::BinOp;
    Ok(match e {
        NodeExpr::Const(v) => Affine::constant(*v),
        NodeExpr::Node(id) if chain[*id] => Affine { c: 0.0, k: 1.0, state: true },
        NodeExpr::Node(id) => match &graph.node(*id).kind {
            NodeKind::Deterministic(inner) => affine(graph, inner, values, chain)?,
            NodeKind::Stochastic { .. } => Affine::constant(values[*id]),
        },
        NodeExpr::Neg(x) => {
            let a = affine(graph, x, values, chain)?;
            Affine { c: -a.c, k: -a.k, ..a }
        }
        NodeExpr::Binary(op, l, r) => {
            let (l, r) = (affine(graph, l, values, chain)?, affine(graph, r, values, chain)?);
            let state = l.state || r.state;
            match op {
                BinOp::Add => Affine { c: l.c + r.c, k: l.k + r.k, state },
                BinOp::Sub => Affine { c: l.c - r.c, k: l.k - r.k, state },
                BinOp::Mul if !l.state => Affine { c: l.c * r.c, k: l.c * r.k, state },
                BinOp::Mul if !r.state => Affine { c: l.c * r.c, k: l.k * r.c, state },
                BinOp::Mul => return Err("product of two state terms".into()),
                BinOp::Div if !r.state => Affine { c: l.c / r.c, k: l.k / r.c, state },
                BinOp::Div => return Err("division by a state term".into()),
                BinOp::Pow if !state => Affine::constant(l.c.powf(r.c)),
                BinOp::Pow => return Err("power of a state term".into()),
            }
        }
        NodeExpr::Call(f, x) => {
            let a = affine(graph, x, values, chain)?;
            if a.state {
                return Err(format!("{} applied to the state", f.name()));
            }
            Affine::constant(f.apply(a.c))
        }
    })
}

/// Normal (mean, variance) of `id` as affine functions of the chain node in scope.
fn normal_affine(graph: &ModelGraph, id: NodeId, values: &[f64], chain: &[bool], role: &str) -> Result<(Affine, Affine), MismatchReport> {
    let report = |reason: String| MismatchReport {
        node: graph.label(id),
        reason,
    };
    let (spec, params) = graph.node(id).dist().expect("stochastic node");
    if spec.kind != DistKind::Normal {
        return Err(report(format!("{role} distribution is {}, not normal", spec.kind.source_name())));
    }
    let mean = affine(graph, &params[0], values, chain).map_err(|r| report(format!("{role} mean is not linear in the state ({r})")))?;
    let scale = affine(graph, &params[1], values, chain).map_err(|r| report(format!("{role} variance depends on the state ({r})")))?;
    if scale.state {
        return Err(report(format!("{role} variance depends on the state")));
    }
    Ok((mean, scale))
}

fn variance(graph: &ModelGraph, id: NodeId, mean: f64, scale: f64) -> Result<f64, MismatchReport> {
    let (spec, _) = graph.node(id).dist().expect("stochastic node");
    let bad = |reason: String| MismatchReport {
        node: graph.label(id),
        reason,
    };
    if !scale.is_finite() || !mean.is_finite() {
        return Err(bad("parameters have no finite value; supply inits".into()));
    }
    let (_, var) = distributions::normal_mean_var(spec, &[mean, scale]).map_err(|e| bad(e.to_string()))?;
    if var <= 0.0 || !var.is_finite() {
        return Err(bad(format!("variance {var} is not positive")));
    }
    Ok(var)
}

/// The linear-Gaussian form of latent chain `name`, with non-chain nodes
/// held at `values`. Also returns the observation vectors.
pub fn extract_gaussian(graph: &ModelGraph, name: &str, values: &[f64]) -> Result<(GaussianSSM, Vec<DVector<f64>>), MismatchReport> {
    let plan = ChainPlan::new(graph, name).map_err(|e| match e {
        FilterError::Chain { node, reason } => MismatchReport { node, reason },
        other => MismatchReport {
            node: name.to_string(),
            reason: other.to_string(),
        },
    })?;
    let mut chain = vec![false; graph.len()];
    let steps = plan.len();

    // structure first, over the whole chain, so the report names the first
    // structurally offending node rather than a missing value
    let mut trans = Vec::with_capacity(steps);
    let mut obs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = plan.latent[t];
        chain.iter_mut().for_each(|c| *c = false);
        if t > 0 {
            chain[plan.latent[t - 1]] = true;
        }
        trans.push(normal_affine(graph, x, values, &chain, "transition")?);
        chain.iter_mut().for_each(|c| *c = false);
        chain[x] = true;
        let mut here = Vec::new();
        for &o in &plan.obs[t] {
            here.push(normal_affine(graph, o, values, &chain, "observation")?);
        }
        obs.push(here);
    }

    let m = plan.obs.first().map_or(0, Vec::len);
    if m == 0 {
        return Err(MismatchReport {
            node: graph.label(plan.latent[0]),
            reason: "no observation depends on this time point".into(),
        });
    }
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let (mut a, mut h) = (None::<f64>, None::<DVector<f64>>);
    let mut ssm = GaussianSSM {
        a: s(0.0),
        b: Vec::with_capacity(steps),
        q: Vec::with_capacity(steps),
        h: DMatrix::zeros(m, 1),
        c: Vec::with_capacity(steps),
        r: Vec::with_capacity(steps),
        m0: DVector::zeros(1),
        p0: s(0.0),
    };
    let mut ys = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = plan.latent[t];
        let (mean, scale) = trans[t];
        let q = variance(graph, x, mean.c, scale.c)?;
        if t == 0 {
            ssm.m0[0] = mean.c;
            ssm.p0[(0, 0)] = q;
        } else {
            match a {
                None => a = Some(mean.k),
                Some(prev) if prev != mean.k => {
                    return Err(MismatchReport {
                        node: graph.label(x),
                        reason: "transition coefficient varies over time".into(),
                    })
                }
                _ => {}
            }
        }
        ssm.b.push(DVector::from_element(1, if t == 0 { 0.0 } else { mean.c }));
        ssm.q.push(s(q));

        if plan.obs[t].len() != m {
            return Err(MismatchReport {
                node: graph.label(x),
                reason: format!("{} observations at this time point, expected {m}", plan.obs[t].len()),
            });
        }
        let mut ht = DVector::zeros(m);
        let mut ct = DVector::zeros(m);
        let mut rt = DMatrix::zeros(m, m);
        let mut yt = DVector::zeros(m);
        for (j, (&o, &(om, os))) in plan.obs[t].iter().zip(&obs[t]).enumerate() {
            ht[j] = om.k;
            ct[j] = om.c;
            rt[(j, j)] = variance(graph, o, om.c, os.c)?;
            yt[j] = graph.observed_value(o).unwrap_or(f64::NAN);
        }
        match &h {
            None => h = Some(ht),
            Some(prev) if *prev != ht => {
                return Err(MismatchReport {
                    node: graph.label(plan.obs[t][0]),
                    reason: "observation coefficient varies over time".into(),
                })
            }
            _ => {}
        }
        ssm.c.push(ct);
        ssm.r.push(rt);
        ys.push(yt);
    }
    ssm.a[(0, 0)] = a.unwrap_or(0.0);
    ssm.h = DMatrix::from_column_slice(m, 1, h.expect("at least one step").as_slice());
    Ok((ssm, ys))
}
