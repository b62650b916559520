//! Particle marginal Metropolis–Hastings over a set of parameter nodes.
//!
//! Each iteration proposes new parameter values from a Gaussian random walk
//! on an unconstrained scale, estimates the marginal likelihood of the data
//! with an inner filter, and accepts or rejects in log space. Any
//! [`MarginalLikelihood`] can stand in for the particle filter, which is how
//! the exact Kalman likelihood is plugged in for linear-Gaussian models.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::distributions::standard_normal;
use crate::filters::{FilterConfig, FilterError, FilterKind, ParamScale, ParticleFilter};
use crate::kalman::{extract_gaussian, kalman_filter, KalmanError, MismatchReport};
use crate::model::{DepFilter, LookupError, ModelGraph, NodeId, Role};
use crate::rng::{RngState, StreamKey};
use crate::runtime::{self, ModelState};
use crate::transform::Transform;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PmmhError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Mismatch(#[from] MismatchReport),
    #[error("cannot start the chain: {0}")]
    Start(String),
}

impl PmmhError {
    /// Failures of a single likelihood evaluation that the chain treats as
    /// a zero likelihood.
    pub fn is_numerical(&self) -> bool {
        match self {
            PmmhError::Filter(e) => e.is_numerical(),
            PmmhError::Kalman(KalmanError::NotPositiveDefinite { .. }) => true,
            _ => false,
        }
    }
}

/// A likelihood estimate and, optionally, one latent path drawn with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub loglik: f64,
    pub trajectory: Option<Vec<f64>>,
}

/// Source of log p(y | θ) for the sampler. The parameters are already set
/// in `state`.
pub trait MarginalLikelihood {
    fn estimate(&self, state: &ModelState, key: StreamKey) -> Result<Estimate, PmmhError>;
}

impl<L: MarginalLikelihood + ?Sized> MarginalLikelihood for &L {
    fn estimate(&self, state: &ModelState, key: StreamKey) -> Result<Estimate, PmmhError> {
        (**self).estimate(state, key)
    }
}

/// Particle filter estimate (bootstrap or auxiliary).
#[derive(Debug, Clone)]
pub struct ParticleLikelihood<'g> {
    filter: ParticleFilter<'g>,
    trajectories: bool,
}

impl<'g> ParticleLikelihood<'g> {
    /// `trajectories` keeps every time point so a path can be traced.
    pub fn new(graph: &'g ModelGraph, latent: &str, kind: FilterKind, mut config: FilterConfig, trajectories: bool) -> Result<Self, PmmhError> {
        if !matches!(kind, FilterKind::Bootstrap | FilterKind::Auxiliary) {
            return Err(PmmhError::Config(format!("inner filter must be bootstrap or auxiliary, not {kind}")));
        }
        if trajectories {
            config.save_all = true;
        }
        Ok(ParticleLikelihood {
            filter: ParticleFilter::new(graph, latent, kind, config)?,
            trajectories,
        })
    }
}

impl MarginalLikelihood for ParticleLikelihood<'_> {
    fn estimate(&self, state: &ModelState, key: StreamKey) -> Result<Estimate, PmmhError> {
        let r = self.filter.run(state, key.child(0))?;
        let trajectory = if self.trajectories {
            r.sample_trajectory(&mut key.child(1).rng())
        } else {
            None
        };
        Ok(Estimate {
            loglik: r.loglik.expect("weighted filters estimate the likelihood"),
            trajectory,
        })
    }
}

/// Exact likelihood of a linear-Gaussian model.
#[derive(Debug, Clone)]
pub struct KalmanLikelihood<'g> {
    graph: &'g ModelGraph,
    latent: String,
}

impl<'g> KalmanLikelihood<'g> {
    pub fn new(graph: &'g ModelGraph, latent: &str, state: &ModelState) -> Result<Self, PmmhError> {
        extract_gaussian(graph, latent, state.values())?;
        Ok(KalmanLikelihood {
            graph,
            latent: latent.to_string(),
        })
    }
}

impl MarginalLikelihood for KalmanLikelihood<'_> {
    fn estimate(&self, state: &ModelState, _key: StreamKey) -> Result<Estimate, PmmhError> {
        let (ssm, y) = extract_gaussian(self.graph, &self.latent, state.values())?;
        let out = kalman_filter(&ssm, &y)?;
        Ok(Estimate {
            loglik: out.loglik,
            trajectory: None,
        })
    }
}

/// A deterministic log-likelihood given as a function of the state.
pub struct FnLikelihood<F>(pub F);

impl<F: Fn(&ModelState) -> f64> MarginalLikelihood for FnLikelihood<F> {
    fn estimate(&self, state: &ModelState, _key: StreamKey) -> Result<Estimate, PmmhError> {
        Ok(Estimate {
            loglik: (self.0)(state),
            trajectory: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmmhConfig {
    pub targets: Vec<String>,
    /// Initial proposal covariance on the proposal scale.
    pub prop_cov: DMatrix<f64>,
    pub adaptive: bool,
    /// Re-estimate the current likelihood before every proposal.
    pub pf_resample: bool,
    pub iterations: usize,
    pub thin: usize,
    /// Iterations after which adaptation stops.
    pub burn_in: usize,
    pub scale: ParamScale,
}

impl PmmhConfig {
    /// Random walk on one node with proposal standard deviation `sd`.
    pub fn scalar(target: &str, sd: f64, iterations: usize) -> Self {
        Self::block(vec![target.to_string()], DMatrix::from_element(1, 1, sd * sd), iterations)
    }

    /// Joint random walk on several nodes.
    pub fn block(targets: Vec<String>, prop_cov: DMatrix<f64>, iterations: usize) -> Self {
        PmmhConfig {
            targets,
            prop_cov,
            adaptive: false,
            pf_resample: false,
            iterations,
            thin: 1,
            burn_in: iterations / 2,
            scale: ParamScale::Transformed,
        }
    }

    pub fn validate(&self) -> Result<(), PmmhError> {
        if self.targets.is_empty() {
            return Err(PmmhError::Config("no target nodes".into()));
        }
        if self.iterations < 1 {
            return Err(PmmhError::Config("iterations must be at least 1".into()));
        }
        if self.thin < 1 {
            return Err(PmmhError::Config("thin must be at least 1".into()));
        }
        let d = self.targets.len();
        if self.prop_cov.shape() != (d, d) {
            return Err(PmmhError::Config(format!(
                "proposal covariance is {}x{} but there are {d} targets",
                self.prop_cov.nrows(),
                self.prop_cov.ncols()
            )));
        }
        check_covariance(&self.prop_cov).map_err(PmmhError::Config)
    }
}

/// Check that `m` is finite, symmetric and positive definite.
pub fn check_covariance(m: &DMatrix<f64>) -> Result<(), String> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err("proposal covariance must be a finite square matrix".into());
    }
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let tol = 1e-12 * (m[(i, j)].abs() + m[(j, i)].abs()).max(1.0);
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(format!("proposal covariance is not symmetric at ({}, {})", i + 1, j + 1));
            }
        }
    }
    if Cholesky::new(m.clone()).is_none() {
        return Err("proposal covariance is not positive definite".into());
    }
    Ok(())
}

/// Log acceptance ratio for a symmetric proposal.
pub fn log_acceptance(prop_loglik: f64, prop_prior: f64, cur_loglik: f64, cur_prior: f64) -> f64 {
    let prop = prop_loglik + prop_prior;
    let cur = cur_loglik + cur_prior;
    if prop.is_nan() || prop == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if cur.is_nan() || cur == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        prop - cur
    }
}

pub const ADAPT_START: usize = 100;
pub const ADAPT_EPSILON: f64 = 1e-6;

/// Random-walk proposal whose covariance tracks the chain's empirical
/// covariance between [`ADAPT_START`] and the end of burn-in.
#[derive(Debug, Clone)]
pub struct ProposalAdapter {
    sigma: DMatrix<f64>,
    factor: DMatrix<f64>,
    adaptive: bool,
    burn_in: usize,
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl ProposalAdapter {
    pub fn new(sigma0: DMatrix<f64>, adaptive: bool, burn_in: usize) -> Self {
        let d = sigma0.nrows();
        let factor = Cholesky::new(sigma0.clone()).expect("validated covariance").l();
        ProposalAdapter {
            sigma: sigma0,
            factor,
            adaptive,
            burn_in,
            n: 0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }

    pub fn scale_factor(&self) -> f64 {
        2.38 * 2.38 / self.sigma.nrows() as f64
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn propose(&self, u: &DVector<f64>, rng: &mut RngState) -> DVector<f64> {
        let z = DVector::from_iterator(u.len(), (0..u.len()).map(|_| standard_normal(rng)));
        u + &self.factor * z
    }

    /// Record the chain's state after iteration `i` (1-based).
    pub fn observe(&mut self, i: usize, u: &DVector<f64>) {
        self.n += 1;
        let delta = u - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = u - &self.mean;
        self.m2 += &delta * delta2.transpose();
        if !self.adaptive || i < ADAPT_START || i >= self.burn_in || self.n < 2 {
            return;
        }
        let d = self.sigma.nrows();
        let mut cov = &self.m2 / (self.n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        let sigma = (cov + DMatrix::identity(d, d) * ADAPT_EPSILON) * self.scale_factor();
        if let Some(c) = Cholesky::new(sigma.clone()) {
            self.factor = c.l();
            self.sigma = sigma;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRow {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub accepted: bool,
    pub trajectory: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmmhChain {
    pub names: Vec<String>,
    pub rows: Vec<ChainRow>,
    pub iterations: usize,
    pub accepted: usize,
    /// Iterations whose likelihood evaluation failed numerically.
    pub failures: usize,
    pub proposal_cov: DMatrix<f64>,
}

impl PmmhChain {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.iterations as f64
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.theta[j]).collect()
    }
}

// Stream purposes.
const LIKELIHOOD: u64 = 1;
const REFRESH: u64 = 2;
const PROPOSE: u64 = 3;
const ACCEPT: u64 = 4;

pub struct Pmmh<'g, L> {
    graph: &'g ModelGraph,
    config: PmmhConfig,
    targets: Vec<NodeId>,
    /// Targets, their deterministic dependents and stochastic parameter
    /// dependents, in topological order.
    prior_nodes: Vec<NodeId>,
    likelihood: L,
}

impl<'g, L: MarginalLikelihood> Pmmh<'g, L> {
    pub fn new(graph: &'g ModelGraph, config: PmmhConfig, likelihood: L) -> Result<Self, PmmhError> {
        config.validate()?;
        let mut targets = Vec::new();
        for name in &config.targets {
            let id = graph.node_id(name)?;
            let node = graph.node(id);
            if node.role != Role::Parameter {
                return Err(PmmhError::Config(format!("{name} is not an unobserved top-level parameter ({:?})", node.role)));
            }
            if targets.contains(&id) {
                return Err(PmmhError::Config(format!("{name} listed twice")));
            }
            targets.push(id);
        }
        let mut prior_nodes: Vec<NodeId> = graph
            .dependencies_of_set(&targets, DepFilter::All)
            .into_iter()
            .filter(|&d| {
                let n = graph.node(d);
                !n.is_stochastic() || n.role == Role::Parameter
            })
            .collect();
        prior_nodes.extend(&targets);
        prior_nodes.sort_by_key(|&d| graph.topo_rank(d));
        Ok(Pmmh {
            graph,
            config,
            targets,
            prior_nodes,
            likelihood,
        })
    }

    fn transforms(&self, state: &ModelState) -> Vec<Transform> {
        self.targets
            .iter()
            .map(|&id| match self.config.scale {
                ParamScale::Raw => Transform::Identity,
                ParamScale::Transformed => {
                    let (spec, params) = runtime::resolve(self.graph, state, id).expect("stochastic");
                    Transform::for_support(spec.support(&params))
                }
            })
            .collect()
    }

    /// Set θ and return log p(θ) plus the log-Jacobian of the proposal scale.
    fn set_and_prior(&self, state: &mut ModelState, u: &DVector<f64>, tr: &[Transform]) -> f64 {
        for (j, &id) in self.targets.iter().enumerate() {
            state.set(id, tr[j].from_real(u[j]));
        }
        state.refresh_deterministic(self.graph);
        let lp = runtime::calculate(self.graph, state, &self.prior_nodes).unwrap_or(f64::NEG_INFINITY);
        let jac: f64 = tr.iter().zip(u.iter()).map(|(t, &v)| t.log_jacobian(v)).sum();
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp + jac
        }
    }

    /// Run the chain from the parameter values in `state`.
    pub fn run(&self, state: &ModelState, key: StreamKey) -> Result<PmmhChain, PmmhError> {
        let cfg = &self.config;
        let mut cur = state.clone();
        cur.refresh_deterministic(self.graph);
        let tr = self.transforms(&cur);
        let names: Vec<String> = self.targets.iter().map(|&id| self.graph.label(id)).collect();

        let mut u = DVector::zeros(self.targets.len());
        for (j, &id) in self.targets.iter().enumerate() {
            let v = cur.get(id);
            if !v.is_finite() || (cfg.scale == ParamScale::Transformed && !tr[j].contains(v)) {
                return Err(PmmhError::Start(format!("{} = {v} is outside its prior support", names[j])));
            }
            u[j] = tr[j].to_real(v);
        }
        let mut cur_prior = self.set_and_prior(&mut cur, &u, &tr);
        if cur_prior == f64::NEG_INFINITY {
            return Err(PmmhError::Start("initial values have zero prior density".into()));
        }
        let first = self
            .likelihood
            .estimate(&cur, key.child2(LIKELIHOOD, 0))
            .map_err(|e| if e.is_numerical() { e } else { PmmhError::Start(format!("likelihood at the initial values: {e}")) })?;
        let mut cur_ll = first.loglik;
        let mut cur_traj = first.trajectory;

        let mut adapter = ProposalAdapter::new(cfg.prop_cov.clone(), cfg.adaptive, cfg.burn_in);
        let mut rows = Vec::with_capacity(cfg.iterations / cfg.thin);
        let (mut accepted, mut failures) = (0, 0);
        for i in 1..=cfg.iterations {
            if cfg.pf_resample {
                cur_ll = match self.likelihood.estimate(&cur, key.child2(REFRESH, i as u64)) {
                    Ok(e) => e.loglik,
                    Err(e) if e.is_numerical() => {
                        warn!("iteration {i}: likelihood refresh failed ({e}); treating it as zero");
                        failures += 1;
                        f64::NEG_INFINITY
                    }
                    Err(e) => return Err(e),
                };
            }
            let u_star = adapter.propose(&u, &mut key.child2(PROPOSE, i as u64).rng());
            let mut prop = cur.clone();
            let prop_prior = self.set_and_prior(&mut prop, &u_star, &tr);
            let mut moved = false;
            if prop_prior > f64::NEG_INFINITY {
                match self.likelihood.estimate(&prop, key.child2(LIKELIHOOD, i as u64)) {
                    Ok(e) => {
                        let log_a = log_acceptance(e.loglik, prop_prior, cur_ll, cur_prior);
                        if log_a >= 0.0 || key.child2(ACCEPT, i as u64).rng().open01().ln() < log_a {
                            moved = true;
                            cur = prop;
                            u = u_star;
                            cur_prior = prop_prior;
                            cur_ll = e.loglik;
                            cur_traj = e.trajectory;
                        }
                    }
                    Err(e) if e.is_numerical() => {
                        warn!("iteration {i}: proposal rejected, likelihood failed ({e})");
                        failures += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            accepted += moved as usize;
            adapter.observe(i, &u);
            if i % cfg.thin == 0 {
                rows.push(ChainRow {
                    iteration: i,
                    theta: self.targets.iter().map(|&id| cur.get(id)).collect(),
                    loglik: cur_ll,
                    accepted: moved,
                    trajectory: cur_traj.clone(),
                });
            }
        }
        Ok(PmmhChain {
            names,
            rows,
            iterations: cfg.iterations,
            accepted,
            failures,
            proposal_cov: adapter.covariance().clone(),
        })
    }
}

/// PMMH with a bootstrap or auxiliary inner filter.
#[allow(clippy::too_many_arguments)]
pub fn pmmh_run(
    graph: &ModelGraph,
    latent: &str,
    config: PmmhConfig,
    inner: FilterKind,
    filter: FilterConfig,
    trajectories: bool,
    state: &ModelState,
    key: StreamKey,
) -> Result<PmmhChain, PmmhError> {
    let lik = ParticleLikelihood::new(graph, latent, inner, filter, trajectories)?;
    Pmmh::new(graph, config, lik)?.run(state, key)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::model::{bundled, compile, parse};

    fn build(src: &str, t: usize, data: Option<&[f64]>, inits: &[(&str, f64)]) -> ModelGraph {
        let consts = BTreeMap::from([("T".to_string(), t as f64)]);
        let data: BTreeMap<String, Vec<f64>> = data.map(|y| BTreeMap::from([("y".to_string(), y.to_vec())])).unwrap_or_default();
        let inits = inits.iter().map(|(k, v)| (k.to_string(), vec![*v])).collect();
        compile(&parse(src).unwrap(), &consts, &data, &inits).unwrap()
    }

    /// Forward-simulate y from the model with `a` fixed.
    fn simulate_y(a: f64, t: usize, seed: u64) -> Vec<f64> {
        let g = build(bundled::LINEAR_GAUSSIAN_UNKNOWN_A, t, None, &[("a", a)]);
        let s = ModelState::initialized(&g, &mut RngState::from_seed_u64(seed)).unwrap();
        g.variable("y").unwrap().iter().map(|&id| s.get(id)).collect()
    }

    /// Batch-means Monte Carlo standard error.
    fn mcse(x: &[f64], batches: usize) -> f64 {
        let b = x.len() / batches;
        let means: Vec<f64> = x.chunks_exact(b).map(|c| c.iter().sum::<f64>() / b as f64).collect();
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
        (var / means.len() as f64).sqrt()
    }

    fn two_params() -> ModelGraph {
        build("a ~ dnorm(0, sd = 1000)\nb ~ dnorm(0, sd = 1000)", 1, None, &[("a", 0.0), ("b", 0.0)])
    }

    #[test]
    fn thinning_keeps_floor_of_iterations_over_thin() {
        let g = two_params();
        let lik = FnLikelihood(|_: &ModelState| 0.0);
        for (iters, thin, rows) in [(10, 1, 10), (10, 10, 1), (10, 3, 3), (7, 8, 0), (20, 20, 1)] {
            let mut c = PmmhConfig::block(vec!["a".into(), "b".into()], DMatrix::identity(2, 2), iters);
            c.thin = thin;
            let chain = Pmmh::new(&g, c, &lik).unwrap().run(&ModelState::new(&g), StreamKey::root(1)).unwrap();
            assert_eq!(chain.rows.len(), rows, "{iters}/{thin}");
            let its: Vec<usize> = chain.rows.iter().map(|r| r.iteration).collect();
            assert_eq!(its, (1..=rows).map(|k| k * thin).collect::<Vec<_>>());
        }
    }

    #[test]
    fn config_errors() {
        let g = two_params();
        let lik = FnLikelihood(|_: &ModelState| 0.0);
        let ok = PmmhConfig::block(vec!["a".into(), "b".into()], DMatrix::identity(2, 2), 10);
        let bad = [
            PmmhConfig { iterations: 0, ..ok.clone() },
            PmmhConfig { thin: 0, ..ok.clone() },
            PmmhConfig { prop_cov: DMatrix::identity(3, 3), ..ok.clone() },
            PmmhConfig { prop_cov: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), ..ok.clone() },
            PmmhConfig { prop_cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), ..ok.clone() },
            PmmhConfig { targets: vec!["a".into(), "a".into()], ..ok.clone() },
            PmmhConfig { targets: vec![], ..ok.clone() },
        ];
        for c in bad {
            assert!(matches!(Pmmh::new(&g, c.clone(), &lik), Err(PmmhError::Config(_))), "{c:?}");
        }
        let c = PmmhConfig { targets: vec!["zz".into(), "a".into()], ..ok };
        assert!(matches!(Pmmh::new(&g, c, &lik), Err(PmmhError::Lookup(_))));
    }

    #[test]
    fn latent_and_data_nodes_are_not_targets() {
        let y = simulate_y(0.8, 5, 1);
        let g = build(bundled::LINEAR_GAUSSIAN_UNKNOWN_A, 5, Some(&y), &[("a", 0.5)]);
        let lik = FnLikelihood(|_: &ModelState| 0.0);
        for name in ["x[2]", "y[1]"] {
            let c = PmmhConfig::scalar(name, 0.1, 10);
            assert!(matches!(Pmmh::new(&g, c, &lik), Err(PmmhError::Config(_))), "{name}");
        }
    }

    #[test]
    fn inner_filter_must_estimate_likelihood() {
        let y = simulate_y(0.8, 5, 1);
        let g = build(bundled::LINEAR_GAUSSIAN_UNKNOWN_A, 5, Some(&y), &[("a", 0.5)]);
        for kind in [FilterKind::EnKF, FilterKind::LiuWest] {
            let err = ParticleLikelihood::new(&g, "x", kind, FilterConfig::default(), false).unwrap_err();
            assert!(matches!(err, PmmhError::Config(_)));
        }
    }

    #[test]
    fn adaptation_waits_for_warm_up_and_stays_positive_definite() {
        let sigma0 = DMatrix::identity(2, 2) * 0.3;
        let mut ad = ProposalAdapter::new(sigma0.clone(), true, 1000);
        let u = DVector::from_vec(vec![0.4, -1.0]);
        for i in 1..ADAPT_START {
            ad.observe(i, &u);
            assert_eq!(ad.covariance(), &sigma0);
        }
        for i in ADAPT_START..300 {
            ad.observe(i, &u);
        }
        let expect = DMatrix::identity(2, 2) * (ad.scale_factor() * ADAPT_EPSILON);
        assert!((ad.covariance() - expect).abs().max() < 1e-18);
        assert!(Cholesky::new(ad.covariance().clone()).is_some());
    }

    #[test]
    fn adaptation_freezes_after_burn_in() {
        let mut ad = ProposalAdapter::new(DMatrix::identity(1, 1), true, 150);
        let mut rng = RngState::from_seed_u64(9);
        for i in 1..150 {
            ad.observe(i, &DVector::from_element(1, standard_normal(&mut rng)));
        }
        let frozen = ad.covariance().clone();
        for i in 150..400 {
            ad.observe(i, &DVector::from_element(1, 10.0 * standard_normal(&mut rng)));
        }
        assert_eq!(ad.covariance(), &frozen);
        let off = ProposalAdapter::new(DMatrix::identity(1, 1), false, 150);
        assert_eq!(off.covariance(), &DMatrix::identity(1, 1));
    }

    #[test]
    fn adapted_covariance_approaches_scaled_target_covariance() {
        let g = two_params();
        let target = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.5]);
        let prec = target.clone().try_inverse().unwrap();
        let (a, b) = (g.node_id("a").unwrap(), g.node_id("b").unwrap());
        let lik = FnLikelihood(move |s: &ModelState| {
            let v = DVector::from_vec(vec![s.get(a) - 1.0, s.get(b) + 2.0]);
            -0.5 * (v.transpose() * &prec * &v)[0]
        });
        let mut c = PmmhConfig::block(vec!["a".into(), "b".into()], DMatrix::identity(2, 2) * 0.01, 20_000);
        c.adaptive = true;
        c.burn_in = 20_000;
        let chain = Pmmh::new(&g, c, &lik).unwrap().run(&ModelState::new(&g), StreamKey::root(4)).unwrap();
        // generalized eigenvalues of the adapted covariance against s_d * target
        let scaled = target * (2.38 * 2.38 / 2.0);
        let l = Cholesky::new(scaled).unwrap().l();
        let li = l.try_inverse().unwrap();
        let m = &li * &chain.proposal_cov * li.transpose();
        let eig = nalgebra::SymmetricEigen::new(m).eigenvalues;
        for e in eig.iter() {
            assert!(*e > 1.0 / 3.0 && *e < 3.0, "{eig}");
        }
        let rate = chain.acceptance_rate();
        assert!(rate > 0.15 && rate < 0.6, "{rate}");
    }

    // y[t] = x[t] + mu + noise: y is Gaussian with mean mu and a covariance
    // built here directly from the AR(1) structure, so the posterior of mu
    // under a normal prior is available in closed form.
    const OFFSET_MODEL: &str = "mu ~ dnorm(0, var = 4)\nx[1] ~ dnorm(0, var = 1)\ny[1] ~ dnorm(x[1] + mu, var = .5)\nfor(t in 2:T){\n x[t] ~ dnorm(.8 * x[t-1], var = 1)\n y[t] ~ dnorm(x[t] + mu, var = .5)\n}";

    fn offset_posterior(y: &[f64]) -> (f64, f64) {
        let n = y.len();
        let mut var = vec![1.0; n];
        for t in 1..n {
            var[t] = 0.64 * var[t - 1] + 1.0;
        }
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let (s, t) = (i.min(j), i.max(j));
            0.8f64.powi((t - s) as i32) * var[s] + if i == j { 0.5 } else { 0.0 }
        });
        let inv = cov.try_inverse().unwrap();
        let ones = DVector::from_element(n, 1.0);
        let yv = DVector::from_column_slice(y);
        let prec = 0.25 + (ones.transpose() * &inv * &ones)[0];
        ((ones.transpose() * &inv * yv)[0] / prec, (1.0 / prec).sqrt())
    }

    #[test]
    fn kalman_likelihood_gives_conjugate_posterior() {
        let y = [1.9, 0.7, 1.4, 2.6, 0.3, 1.1, 1.8, 2.2, 0.9, 1.5];
        let (m, sd) = offset_posterior(&y);
        let g = build(OFFSET_MODEL, y.len(), Some(&y), &[("mu", 0.0)]);
        let s = ModelState::new(&g);
        let lik = KalmanLikelihood::new(&g, "x", &s).unwrap();
        let c = PmmhConfig::scalar("mu", 2.38 * sd, 20_000);
        let chain = Pmmh::new(&g, c, lik).unwrap().run(&s, StreamKey::root(12)).unwrap();
        let draws = &chain.column(0)[1000..];
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sq: Vec<f64> = draws.iter().map(|v| (v - mean).powi(2)).collect();
        let var = sq.iter().sum::<f64>() / n;
        let se_mean = mcse(draws, 50);
        let se_sd = mcse(&sq, 50) / (2.0 * var.sqrt());
        assert!((mean - m).abs() < 3.0 * se_mean, "mean {mean} vs {m} (mcse {se_mean})");
        assert!((var.sqrt() - sd).abs() < 3.0 * se_sd, "sd {} vs {sd} (mcse {se_sd})", var.sqrt());
    }

    #[test]
    fn particle_pmmh_recovers_transition_coefficient() {
        let y = simulate_y(0.8, 50, 2024);
        let g = build(bundled::LINEAR_GAUSSIAN_UNKNOWN_A, 50, Some(&y), &[("a", 0.3)]);
        let c = PmmhConfig::scalar("a", 0.1, 2000);
        let filter = FilterConfig { particles: 300, ..FilterConfig::default() };
        let chain = pmmh_run(&g, "x", c, FilterKind::Bootstrap, filter, true, &ModelState::new(&g), StreamKey::root(3)).unwrap();
        let draws = &chain.column(0)[500..];
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 0.8).abs() < 3.0 * sd, "{mean} ± {sd}");
        let rate = chain.acceptance_rate();
        assert!(rate > 0.05 && rate < 0.6, "{rate}");
        let traj = chain.rows.last().unwrap().trajectory.as_ref().unwrap();
        assert_eq!(traj.len(), 50);
        assert_eq!(chain.failures, 0);
    }

    #[test]
    fn rejections_keep_the_previous_state_and_trajectory() {
        let y = simulate_y(0.8, 20, 5);
        let g = build(bundled::LINEAR_GAUSSIAN_UNKNOWN_A, 20, Some(&y), &[("a", 0.7)]);
        // a huge proposal scale forces most proposals to be rejected
        let c = PmmhConfig::scalar("a", 50.0, 200);
        let filter = FilterConfig { particles: 100, ..FilterConfig::default() };
        let chain = pmmh_run(&g, "x", c, FilterKind::Auxiliary, filter, true, &ModelState::new(&g), StreamKey::root(8)).unwrap();
        for w in chain.rows.windows(2) {
            if !w[1].accepted {
                assert_eq!(w[1].theta, w[0].theta);
                assert_eq!(w[1].loglik, w[0].loglik);
                assert_eq!(w[1].trajectory, w[0].trajectory);
            } else {
                assert_ne!(w[1].theta, w[0].theta);
            }
        }
        assert!(chain.accepted < 100);
    }

    #[test]
    fn refreshing_the_likelihood_changes_only_the_denominator() {
        let y = simulate_y(0.8, 20, 5);
        let g = build(bundled::LINEAR_GAUSSIAN_UNKNOWN_A, 20, Some(&y), &[("a", 0.7)]);
        let mut c = PmmhConfig::scalar("a", 50.0, 100);
        c.pf_resample = true;
        let filter = FilterConfig { particles: 100, ..FilterConfig::default() };
        let chain = pmmh_run(&g, "x", c, FilterKind::Bootstrap, filter, true, &ModelState::new(&g), StreamKey::root(8)).unwrap();
        let mut refreshed = false;
        for w in chain.rows.windows(2) {
            if !w[1].accepted {
                assert_eq!(w[1].theta, w[0].theta);
                assert_eq!(w[1].trajectory, w[0].trajectory);
                refreshed |= w[1].loglik != w[0].loglik;
            }
        }
        assert!(refreshed);
    }

    #[test]
    fn constrained_targets_stay_in_support() {
        let y: Vec<f64> = (0..15).map(|i| ((i as f64) * 0.9).sin()).collect();
        let consts = BTreeMap::from([("T".to_string(), 15.0)]);
        let data = BTreeMap::from([("y".to_string(), y)]);
        let inits = BTreeMap::from([
            ("phiStar".to_string(), vec![0.95]),
            ("sigmaSquaredInv".to_string(), vec![20.0]),
            ("betaSquaredInv".to_string(), vec![3.0]),
            ("x0".to_string(), vec![0.0]),
        ]);
        let g = compile(&parse(bundled::STOCHASTIC_VOLATILITY).unwrap(), &consts, &data, &inits).unwrap();
        let targets = vec!["betaSquaredInv".to_string(), "phiStar".to_string()];
        for scale in [ParamScale::Transformed, ParamScale::Raw] {
            let mut c = PmmhConfig::block(targets.clone(), DMatrix::identity(2, 2) * 0.1, 300);
            c.scale = scale;
            c.adaptive = true;
            let filter = FilterConfig { particles: 100, ..FilterConfig::default() };
            let chain = pmmh_run(&g, "x", c, FilterKind::Bootstrap, filter, false, &ModelState::new(&g), StreamKey::root(2)).unwrap();
            for r in &chain.rows {
                assert!(r.theta[0] > 0.0, "{scale:?}");
                assert!(r.theta[1] > 0.0 && r.theta[1] < 1.0, "{scale:?}");
                assert!(r.loglik.is_finite());
            }
        }
    }

    #[test]
    fn prior_includes_dependent_parameters_and_jacobian() {
        let consts = BTreeMap::from([("T".to_string(), 3.0)]);
        let data = BTreeMap::from([("y".to_string(), vec![0.1, -0.2, 0.3])]);
        let inits = BTreeMap::from([("sigmaSquaredInv".to_string(), vec![2.0]), ("x0".to_string(), vec![0.5]), ("phiStar".to_string(), vec![0.9]), ("betaSquaredInv".to_string(), vec![1.0])]);
        let g = compile(&parse(bundled::STOCHASTIC_VOLATILITY).unwrap(), &consts, &data, &inits).unwrap();
        let lik = FnLikelihood(|_: &ModelState| 0.0);
        let p = Pmmh::new(&g, PmmhConfig::scalar("sigmaSquaredInv", 0.1, 1), &lik).unwrap();
        let mut s = ModelState::new(&g);
        let tr = p.transforms(&s);
        assert_eq!(tr, [Transform::Log]);
        let u = DVector::from_element(1, 2.0f64.ln());
        let got = p.set_and_prior(&mut s, &u, &tr);
        // gamma(5, 20) at 2, x0 ~ N(1, precision 2) at 0.5, log-Jacobian ln 2
        let gamma = 5.0 * 20f64.ln() - statrs::function::gamma::ln_gamma(5.0) + 4.0 * 2f64.ln() - 40.0;
        let normal = -0.5 * (2.0 * std::f64::consts::PI / 2.0).ln() - 0.5 * 2.0 * 0.25;
        assert!((got - (gamma + normal + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn same_key_same_chain() {
        let y = simulate_y(0.8, 10, 6);
        let g = build(bundled::LINEAR_GAUSSIAN_UNKNOWN_A, 10, Some(&y), &[("a", 0.5)]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                let mut c = PmmhConfig::scalar("a", 0.2, 60);
                c.adaptive = true;
                c.pf_resample = true;
                let filter = FilterConfig { particles: 300, ..FilterConfig::default() };
                pmmh_run(&g, "x", c, FilterKind::Bootstrap, filter, true, &ModelState::new(&g), StreamKey::root(1)).unwrap()
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn start_outside_support_is_an_error() {
        let consts = BTreeMap::from([("T".to_string(), 3.0)]);
        let data = BTreeMap::from([("y".to_string(), vec![0.1, -0.2, 0.3])]);
        let inits = BTreeMap::from([("sigmaSquaredInv".to_string(), vec![-1.0]), ("x0".to_string(), vec![0.5]), ("phiStar".to_string(), vec![0.9]), ("betaSquaredInv".to_string(), vec![1.0])]);
        let g = compile(&parse(bundled::STOCHASTIC_VOLATILITY).unwrap(), &consts, &data, &inits).unwrap();
        let lik = FnLikelihood(|_: &ModelState| 0.0);
        let p = Pmmh::new(&g, PmmhConfig::scalar("sigmaSquaredInv", 0.1, 5), &lik).unwrap();
        assert!(matches!(p.run(&ModelState::new(&g), StreamKey::root(1)), Err(PmmhError::Start(_))));
    }

    proptest! {
        #[test]
        fn acceptance_is_the_log_posterior_difference(a in -1e3f64..1e3, b in -1e3f64..1e3, c in -1e3f64..1e3, d in -1e3f64..1e3) {
            prop_assert_eq!(log_acceptance(a, b, c, d), (a + b) - (c + d));
            if a + b > c + d {
                prop_assert!(log_acceptance(a, b, c, d) > 0.0);
            }
        }

        #[test]
        fn impossible_proposals_are_never_accepted(c in -1e3f64..1e3, d in -1e3f64..1e3) {
            prop_assert_eq!(log_acceptance(f64::NEG_INFINITY, 0.0, c, d), f64::NEG_INFINITY);
            prop_assert_eq!(log_acceptance(f64::NAN, 0.0, c, d), f64::NEG_INFINITY);
            prop_assert_eq!(log_acceptance(c, d, f64::NEG_INFINITY, 0.0), f64::INFINITY);
        }
    }
}
