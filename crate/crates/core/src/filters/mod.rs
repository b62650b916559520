//! Bootstrap, auxiliary, Liu–West and ensemble Kalman filters over a
//! compiled model graph.
//!
//! Every filter runs on a snapshot [`ModelState`] that fixes all non-latent
//! quantities. Per-particle work is spread over the rayon pool; each particle
//! draws from its own stream keyed by (purpose, time, particle), so results
//! do not depend on the number of worker threads.

mod auxiliary;
mod bootstrap;
pub mod chain;
mod enkf;
mod liu_west;
pub mod summary;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

pub use chain::ChainPlan;
pub use liu_west::{shrinkage, LiuWestSetup};

use crate::model::{LookupError, ModelGraph, NodeId};
use crate::resampling::{self, Method, WeightError};
use crate::rng::{RngState, StreamKey};
use crate::runtime::{self, ModelState, ParticleCloud, RuntimeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error("{node}: {reason}")]
    Chain { node: String, reason: String },
    #[error("{node} has no value; supply it as data or an init")]
    MissingValue { node: String },
    #[error("time {t}: all particle weights are zero")]
    Degenerate { t: usize },
    #[error("time {t}: {source}")]
    Model {
        t: usize,
        #[source]
        source: RuntimeError,
    },
    #[error("time {t}: {detail}")]
    Singular { t: usize, detail: String },
}

impl FilterError {
    /// Failures of the numerics at some time step, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, FilterError::Degenerate { .. } | FilterError::Model { .. } | FilterError::Singular { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Bootstrap,
    Auxiliary,
    LiuWest,
    EnKF,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Bootstrap => "bootstrap",
            FilterKind::Auxiliary => "auxiliary",
            FilterKind::LiuWest => "liu-west",
            FilterKind::EnKF => "enkf",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bootstrap" => Ok(FilterKind::Bootstrap),
            "auxiliary" => Ok(FilterKind::Auxiliary),
            "liu-west" | "liuwest" => Ok(FilterKind::LiuWest),
            "enkf" => Ok(FilterKind::EnKF),
            other => Err(FilterError::Config(format!("unknown filter `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Lookahead {
    Mean,
    #[default]
    Simulate,
}

impl FromStr for Lookahead {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Lookahead::Mean),
            "simulate" => Ok(Lookahead::Simulate),
            other => Err(FilterError::Config(format!("unknown lookahead `{other}` (expected mean or simulate)"))),
        }
    }
}

impl fmt::Display for Lookahead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lookahead::Mean => "mean",
            Lookahead::Simulate => "simulate",
        })
    }
}

/// Scale on which Liu–West perturbs parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParamScale {
    #[default]
    Transformed,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub particles: usize,
    pub save_all: bool,
    pub threshold: f64,
    pub method: Method,
    pub lookahead: Lookahead,
    pub discount: f64,
    /// Parameter nodes estimated by Liu–West.
    pub params: Vec<String>,
    pub param_scale: ParamScale,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            particles: 1000,
            save_all: false,
            threshold: 0.8,
            method: Method::Systematic,
            lookahead: Lookahead::Simulate,
            discount: 0.99,
            params: Vec::new(),
            param_scale: ParamScale::Transformed,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.particles < 1 {
            return Err(FilterError::Config("particle count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(FilterError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(FilterError::Config(format!("discount {} outside (0, 1]", self.discount)));
        }
        Ok(())
    }
}

/// Parameter particles from the Liu–West filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCloud {
    pub names: Vec<String>,
    pub weighted: ParticleCloud,
    pub equal: ParticleCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub kind: FilterKind,
    /// Time points (1-based) held by the clouds' slots.
    pub times: Vec<usize>,
    /// Weighted cloud; absent for the ensemble Kalman filter.
    pub weighted: Option<ParticleCloud>,
    /// Equally weighted cloud (the only cloud for the ensemble Kalman filter).
    pub equal: ParticleCloud,
    pub ess: Vec<f64>,
    pub resampled: Vec<bool>,
    pub loglik: Option<f64>,
    pub loglik_steps: Vec<f64>,
    /// For t ≥ 2, the parent in the weighted cloud at t−1 of each particle
    /// at t. Kept only when every time point is saved.
    pub ancestors: Vec<Vec<usize>>,
    pub params: Option<ParamCloud>,
    /// Ensemble gains, one per time point.
    pub gains: Vec<DMatrix<f64>>,
}

impl FilterResult {
    /// Path through the weighted clouds ending at final particle `l`.
    pub fn trajectory(&self, l: usize) -> Option<Vec<f64>> {
        let w = self.weighted.as_ref()?;
        let t_max = self.ancestors.len();
        if t_max == 0 || w.slots() != t_max {
            return None;
        }
        let mut path = vec![0.0; t_max];
        let mut idx = l;
        for t in (0..t_max).rev() {
            path[t] = w.row(t, idx).ok()?[0];
            if t > 0 {
                idx = self.ancestors[t][idx];
            }
        }
        Some(path)
    }

    /// Draw a final index from the last weights and trace its path.
    pub fn sample_trajectory(&self, rng: &mut RngState) -> Option<Vec<f64>> {
        let w = self.weighted.as_ref()?;
        let pi = w.weights(w.slots() - 1);
        let l = resampling::multinomial(&pi, 1, rng)[0];
        self.trajectory(l)
    }
}

// Stream purposes.
const PROPAGATE: u64 = 1;
const RESAMPLE: u64 = 2;
const OUTPUT: u64 = 3;
const LOOKAHEAD: u64 = 4;
const PERTURB: u64 = 5;
const OBS_NOISE: u64 = 6;
const PARAM_INIT: u64 = 7;

fn stream(key: StreamKey, purpose: u64, t: usize, k: usize) -> RngState {
    key.child2(purpose, t as u64).child(k as u64).rng()
}

fn step_rng(key: StreamKey, purpose: u64, t: usize) -> RngState {
    key.child2(purpose, t as u64).rng()
}

/// Apply `f` to every particle index with a per-worker scratch state.
/// The first error in index order wins.
fn par_particles<T, F>(k: usize, base: &ModelState, f: F) -> Result<Vec<T>, FilterError>
where
    T: Send,
    F: Fn(&mut ModelState, usize) -> Result<T, FilterError> + Sync + Send,
{
    let out: Vec<Result<T, FilterError>> = (0..k)
        .into_par_iter()
        .with_min_len(128)
        .map_init(|| base.clone(), |s, i| f(s, i))
        .collect();
    out.into_iter().collect()
}

fn model_err(t: usize) -> impl Fn(RuntimeError) -> FilterError {
    move |source| FilterError::Model { t: t + 1, source }
}

/// A filter bound to a graph and latent chain.
#[derive(Debug, Clone)]
pub struct ParticleFilter<'g> {
    graph: &'g ModelGraph,
    plan: ChainPlan,
    config: FilterConfig,
    kind: FilterKind,
    lw: Option<LiuWestSetup>,
    enkf: Option<enkf::EnkfSetup>,
}

impl<'g> ParticleFilter<'g> {
    pub fn new(graph: &'g ModelGraph, latent: &str, kind: FilterKind, config: FilterConfig) -> Result<Self, FilterError> {
        config.validate()?;
        let plan = ChainPlan::new(graph, latent)?;
        let mut lw = None;
        let mut ek = None;
        match kind {
            FilterKind::Bootstrap => {}
            FilterKind::Auxiliary => {
                if config.lookahead == Lookahead::Mean {
                    require_normal_transitions(graph, &plan, "mean lookahead needs normal transitions; use simulate lookahead")?;
                }
            }
            FilterKind::LiuWest => {
                require_normal_transitions(graph, &plan, "Liu–West needs normal transitions for its auxiliary state values")?;
                lw = Some(LiuWestSetup::new(graph, &plan, &config)?);
            }
            FilterKind::EnKF => {
                if config.particles < 2 {
                    return Err(FilterError::Config("the ensemble Kalman filter needs at least 2 particles".into()));
                }
                ek = Some(enkf::EnkfSetup::new(graph, &plan)?);
            }
        }
        Ok(ParticleFilter {
            graph,
            plan,
            config,
            kind,
            lw,
            enkf: ek,
        })
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn plan(&self) -> &ChainPlan {
        &self.plan
    }

    pub fn graph(&self) -> &ModelGraph {
        self.graph
    }

    /// Run the filter with every non-latent quantity taken from `state`.
    pub fn run(&self, state: &ModelState, key: StreamKey) -> Result<FilterResult, FilterError> {
        let mut base = state.clone();
        base.refresh_deterministic(self.graph);
        let estimated: Vec<NodeId> = self.lw.as_ref().map(|l| l.ids.clone()).unwrap_or_default();
        for &p in &self.plan.params {
            if !estimated.contains(&p) && !base.get(p).is_finite() {
                return Err(FilterError::MissingValue { node: self.graph.label(p) });
            }
        }
        match self.kind {
            FilterKind::Bootstrap => bootstrap::run(self, &base, key),
            FilterKind::Auxiliary => auxiliary::run(self, &base, key),
            FilterKind::LiuWest => liu_west::run(self, self.lw.as_ref().expect("setup"), &base, key),
            FilterKind::EnKF => enkf::run(self, self.enkf.as_ref().expect("setup"), &base, key),
        }
    }

    fn steps(&self) -> usize {
        self.plan.len()
    }

    /// Slot for time index `t` (0-based), if that time is stored.
    fn slot(&self, t: usize) -> Option<usize> {
        if self.config.save_all {
            Some(t)
        } else if t + 1 == self.steps() {
            Some(0)
        } else {
            None
        }
    }

    fn stored_times(&self) -> Vec<usize> {
        if self.config.save_all {
            (1..=self.steps()).collect()
        } else {
            vec![self.steps()]
        }
    }

    fn cloud(&self, width: usize, equal: bool) -> ParticleCloud {
        let slots = if self.config.save_all { self.steps() } else { 1 };
        ParticleCloud::new(self.config.particles, slots, width, equal).expect("validated particle count")
    }

    /// Put x[t-1] (when t > 0) in place and refresh what depends on it.
    fn set_previous(&self, s: &mut ModelState, t: usize, prev: f64) {
        if t > 0 {
            s.set(self.plan.latent[t - 1], prev);
            runtime::refresh(self.graph, s, &self.plan.det[t - 1]);
        }
    }

    /// Draw x[t] from its transition and return it.
    fn propagate(&self, s: &mut ModelState, t: usize, rng: &mut RngState) -> Result<f64, FilterError> {
        let x = self.plan.latent[t];
        runtime::simulate(self.graph, s, &[x], rng).map_err(model_err(t))?;
        Ok(s.get(x))
    }

    /// Set x[t] and return the observation log-density at t.
    fn observe(&self, s: &mut ModelState, t: usize, x: f64) -> Result<f64, FilterError> {
        s.set(self.plan.latent[t], x);
        runtime::refresh(self.graph, s, &self.plan.det[t]);
        runtime::calculate(self.graph, s, &self.plan.obs[t]).map_err(model_err(t))
    }

    /// Evaluate E(x[t] | x[t-1]) in the current scratch state.
    fn transition_mean(&self, s: &ModelState, t: usize) -> f64 {
        self.plan
            .normal_mean(self.graph, t)
            .expect("normal transition checked at build")
            .eval(s.values())
    }
}

fn require_normal_transitions(graph: &ModelGraph, plan: &ChainPlan, msg: &str) -> Result<(), FilterError> {
    for t in 0..plan.len() {
        if plan.normal_mean(graph, t).is_none() {
            return Err(FilterError::Config(format!("{}: {msg}", graph.label(plan.latent[t]))));
        }
    }
    Ok(())
}

/// Shared bookkeeping for the weighted filters.
struct Recorder {
    times: Vec<usize>,
    weighted: ParticleCloud,
    equal: ParticleCloud,
    ess: Vec<f64>,
    resampled: Vec<bool>,
    loglik_steps: Vec<f64>,
    ancestors: Vec<Vec<usize>>,
    save_all: bool,
}

impl Recorder {
    fn new(f: &ParticleFilter<'_>) -> Self {
        Recorder {
            times: f.stored_times(),
            weighted: f.cloud(1, false),
            equal: f.cloud(1, true),
            ess: Vec::with_capacity(f.steps()),
            resampled: Vec::with_capacity(f.steps()),
            loglik_steps: Vec::new(),
            ancestors: Vec::new(),
            save_all: f.config.save_all,
        }
    }

    /// Store time t's weighted particles and an equally weighted copy drawn
    /// with `ids`.
    fn store(&mut self, slot: Option<usize>, x: &[f64], log_pi: &[f64], ids: &[usize]) {
        if let Some(s) = slot {
            self.weighted.slot_values_mut(s).copy_from_slice(x);
            self.weighted.set_log_weights(s, log_pi).expect("row count");
            for (dst, &i) in self.equal.slot_values_mut(s).iter_mut().zip(ids) {
                *dst = x[i];
            }
        }
    }

    fn ancestors(&mut self, ids: Vec<usize>) {
        if self.save_all {
            self.ancestors.push(ids);
        }
    }

    fn finish(self, kind: FilterKind, loglik: bool, params: Option<ParamCloud>) -> FilterResult {
        let total = loglik.then(|| self.loglik_steps.iter().sum());
        FilterResult {
            kind,
            times: self.times,
            weighted: Some(self.weighted),
            equal: self.equal,
            ess: self.ess,
            resampled: self.resampled,
            loglik: total,
            loglik_steps: self.loglik_steps,
            ancestors: self.ancestors,
            params,
            gains: Vec::new(),
        }
    }
}

/// Normalized log-weights, or a degenerate-weights error at t.
fn log_normalize(lw: &[f64], t: usize) -> Result<(Vec<f64>, Vec<f64>, f64), FilterError> {
    let (pi, log_mean) = resampling::normalize(lw).map_err(|e| match e {
        WeightError::Degenerate => FilterError::Degenerate { t: t + 1 },
        other => FilterError::Config(other.to_string()),
    })?;
    let lse = log_mean + (lw.len() as f64).ln();
    let log_pi = lw.iter().map(|l| l - lse).collect();
    Ok((pi, log_pi, lse))
}

/// Convenience wrappers mirroring the four algorithms.
pub fn bootstrap_filter(graph: &ModelGraph, latent: &str, config: FilterConfig, state: &ModelState, key: StreamKey) -> Result<FilterResult, FilterError> {
    ParticleFilter::new(graph, latent, FilterKind::Bootstrap, config)?.run(state, key)
}

pub fn auxiliary_filter(graph: &ModelGraph, latent: &str, config: FilterConfig, state: &ModelState, key: StreamKey) -> Result<FilterResult, FilterError> {
    ParticleFilter::new(graph, latent, FilterKind::Auxiliary, config)?.run(state, key)
}

pub fn liu_west_filter(graph: &ModelGraph, latent: &str, config: FilterConfig, state: &ModelState, key: StreamKey) -> Result<FilterResult, FilterError> {
    ParticleFilter::new(graph, latent, FilterKind::LiuWest, config)?.run(state, key)
}

pub fn enkf(graph: &ModelGraph, latent: &str, config: FilterConfig, state: &ModelState, key: StreamKey) -> Result<FilterResult, FilterError> {
    ParticleFilter::new(graph, latent, FilterKind::EnKF, config)?.run(state, key)
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::collections::BTreeMap;

    use nalgebra::DVector;

    use crate::kalman::{kalman_filter, GaussianSSM, KalmanOutput};
    use crate::model::{bundled, compile, parse, ModelGraph};
    use crate::rng::StreamKey;
    use crate::runtime::ModelState;

    /// Simulated data from the linear-Gaussian model.
    pub fn lg_data(seed: u64, steps: usize) -> Vec<f64> {
        let mut rng = StreamKey::root(seed).rng();
        let mut x = crate::distributions::standard_normal(&mut rng);
        let mut y = Vec::with_capacity(steps);
        for t in 0..steps {
            if t > 0 {
                x = 0.8 * x + crate::distributions::standard_normal(&mut rng);
            }
            y.push(x + 0.5f64.sqrt() * crate::distributions::standard_normal(&mut rng));
        }
        y
    }

    pub fn lg_graph(y: &[f64]) -> ModelGraph {
        let data = BTreeMap::from([("y".to_string(), y.to_vec())]);
        compile(&parse(bundled::LINEAR_GAUSSIAN).unwrap(), &BTreeMap::new(), &data, &BTreeMap::new()).unwrap()
    }

    pub fn lg_oracle(y: &[f64]) -> KalmanOutput {
        let ys: Vec<DVector<f64>> = y.iter().map(|&v| DVector::from_element(1, v)).collect();
        kalman_filter(&GaussianSSM::scalar(0.8, 1.0, 1.0, 0.5, 0.0, 1.0, y.len()), &ys).unwrap()
    }

    pub fn state(g: &ModelGraph) -> ModelState {
        ModelState::new(g)
    }

    /// Five Monte Carlo standard errors of a tail quantile estimated from a
    /// cloud with effective size `ess`, for a normal target with sd `sd`.
    pub fn quantile_tolerance(p: f64, ess: f64, sd: f64) -> f64 {
        let z = crate::kalman::normal_quantile(0.0, 1.0, p);
        let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() / sd;
        0.02 + 5.0 * (p * (1.0 - p) / ess).sqrt() / density
    }
}
