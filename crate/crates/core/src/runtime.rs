//! Simulate, calculate and copy over a compiled graph, plus particle storage.

use thiserror::Error;

use crate::distributions::{self, DistError, DistSpec};
use crate::model::{ModelGraph, NodeId, NodeKind, Role};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("node {node}: {source}")]
    Domain {
        node: String,
        #[source]
        source: DistError,
    },
    #[error("cannot simulate {node}: {reason}")]
    NotSimulable { node: String, reason: &'static str },
    #[error("row {row} out of range for a cloud of {rows} particles")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("slot {slot} out of range for a cloud with {slots} time slots")]
    SlotOutOfRange { slot: usize, slots: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("particle count must be at least 1")]
    EmptyCloud,
}

/// Current value of every node in a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    values: Vec<f64>,
}

impl ModelState {
    /// State holding the graph's data, inits and derivable deterministic values.
    pub fn new(graph: &ModelGraph) -> Self {
        ModelState {
            values: graph.initial_values().to_vec(),
        }
    }

    /// Like [`ModelState::new`], then fill every unset stochastic, non-data
    /// node by ancestral simulation and refresh all deterministic nodes.
    pub fn initialized(graph: &ModelGraph, rng: &mut RngState) -> Result<Self, RuntimeError> {
        let mut s = Self::new(graph);
        for &id in graph.topological_order() {
            let node = graph.node(id);
            match node.kind {
                NodeKind::Deterministic(ref e) => s.values[id] = e.eval(&s.values),
                NodeKind::Stochastic { .. } if node.role != Role::Observation && s.values[id].is_nan() => {
                    simulate_node(graph, &mut s, id, rng)?;
                }
                _ => {}
            }
        }
        Ok(s)
    }

    #[inline]
    pub fn get(&self, id: NodeId) -> f64 {
        self.values[id]
    }

    #[inline]
    pub fn set(&mut self, id: NodeId, v: f64) {
        self.values[id] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Recompute every deterministic node in topological order.
    pub fn refresh_deterministic(&mut self, graph: &ModelGraph) {
        for &id in graph.topological_order() {
            if let NodeKind::Deterministic(e) = &graph.node(id).kind {
                self.values[id] = e.eval(&self.values);
            }
        }
    }
}

/// Resolved distribution and parameter values of a stochastic node.
#[inline]
pub fn resolve(graph: &ModelGraph, state: &ModelState, id: NodeId) -> Option<(DistSpec, [f64; 2])> {
    graph
        .node(id)
        .dist()
        .map(|(d, p)| (*d, [p[0].eval(&state.values), p[1].eval(&state.values)]))
}

fn domain(graph: &ModelGraph, id: NodeId, e: DistError) -> RuntimeError {
    RuntimeError::Domain {
        node: graph.label(id),
        source: e,
    }
}

/// Draw a fresh value for one stochastic node (data nodes are allowed here
/// only through [`ModelState::initialized`]'s callers; see [`simulate`]).
pub(crate) fn simulate_node(
    graph: &ModelGraph,
    state: &mut ModelState,
    id: NodeId,
    rng: &mut RngState,
) -> Result<(), RuntimeError> {
    let Some((spec, params)) = resolve(graph, state, id) else {
        return Err(RuntimeError::NotSimulable {
            node: graph.label(id),
            reason: "deterministic node",
        });
    };
    let v = distributions::sample(&spec, &params, rng).map_err(|e| domain(graph, id, e))?;
    state.values[id] = v;
    Ok(())
}

/// Draw fresh values for `nodes`, in the order given.
pub fn simulate(graph: &ModelGraph, state: &mut ModelState, nodes: &[NodeId], rng: &mut RngState) -> Result<(), RuntimeError> {
    for &id in nodes {
        if graph.node(id).is_data() {
            return Err(RuntimeError::NotSimulable {
                node: graph.label(id),
                reason: "data node",
            });
        }
        simulate_node(graph, state, id, rng)?;
    }
    Ok(())
}

/// Refresh deterministic nodes and sum the log-densities of stochastic ones.
pub fn calculate(graph: &ModelGraph, state: &mut ModelState, nodes: &[NodeId]) -> Result<f64, RuntimeError> {
    let mut total = 0.0;
    for &id in nodes {
        match &graph.node(id).kind {
            NodeKind::Deterministic(e) => state.values[id] = e.eval(&state.values),
            NodeKind::Stochastic { dist, params } => {
                let p = [params[0].eval(&state.values), params[1].eval(&state.values)];
                total += distributions::log_density(dist, state.values[id], &p).map_err(|e| domain(graph, id, e))?;
            }
        }
    }
    Ok(total)
}

/// Refresh deterministic nodes only.
#[inline]
pub fn refresh(graph: &ModelGraph, state: &mut ModelState, nodes: &[NodeId]) {
    for &id in nodes {
        if let NodeKind::Deterministic(e) = &graph.node(id).kind {
            state.values[id] = e.eval(&state.values);
        }
    }
}

/// Particle storage: `rows` particles of `width` values for each time slot,
/// with one log-weight per particle and slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    rows: usize,
    slots: usize,
    width: usize,
    values: Vec<f64>,
    log_weights: Vec<f64>,
    equally_weighted: bool,
}

impl ParticleCloud {
    pub fn new(rows: usize, slots: usize, width: usize, equally_weighted: bool) -> Result<Self, RuntimeError> {
        if rows < 1 {
            return Err(RuntimeError::EmptyCloud);
        }
        let lw = if equally_weighted { -(rows as f64).ln() } else { f64::NAN };
        Ok(ParticleCloud {
            rows,
            slots,
            width,
            values: vec![f64::NAN; rows * slots * width],
            log_weights: vec![lw; rows * slots],
            equally_weighted,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_equally_weighted(&self) -> bool {
        self.equally_weighted
    }

    /// Change the particle count. Contents are invalidated; the slot count
    /// and width are kept.
    pub fn resize(&mut self, rows: usize) -> Result<(), RuntimeError> {
        *self = ParticleCloud::new(rows, self.slots, self.width, self.equally_weighted)?;
        Ok(())
    }

    fn check(&self, slot: usize, row: usize) -> Result<(), RuntimeError> {
        if slot >= self.slots {
            return Err(RuntimeError::SlotOutOfRange { slot, slots: self.slots });
        }
        if row >= self.rows {
            return Err(RuntimeError::RowOutOfRange { row, rows: self.rows });
        }
        Ok(())
    }

    pub fn row(&self, slot: usize, row: usize) -> Result<&[f64], RuntimeError> {
        self.check(slot, row)?;
        let at = (slot * self.rows + row) * self.width;
        Ok(&self.values[at..at + self.width])
    }

    pub fn row_mut(&mut self, slot: usize, row: usize) -> Result<&mut [f64], RuntimeError> {
        self.check(slot, row)?;
        let at = (slot * self.rows + row) * self.width;
        Ok(&mut self.values[at..at + self.width])
    }

    /// Column `col` of every particle in a slot.
    pub fn column(&self, slot: usize, col: usize) -> Vec<f64> {
        let base = slot * self.rows * self.width;
        (0..self.rows).map(|r| self.values[base + r * self.width + col]).collect()
    }

    /// All particle values of a slot, row-major.
    pub fn slot_values(&self, slot: usize) -> &[f64] {
        let n = self.rows * self.width;
        &self.values[slot * n..(slot + 1) * n]
    }

    pub fn slot_values_mut(&mut self, slot: usize) -> &mut [f64] {
        let n = self.rows * self.width;
        &mut self.values[slot * n..(slot + 1) * n]
    }

    pub fn log_weights(&self, slot: usize) -> &[f64] {
        &self.log_weights[slot * self.rows..(slot + 1) * self.rows]
    }

    /// Set a slot's log-weights. Equally weighted clouds reject this.
    pub fn set_log_weights(&mut self, slot: usize, lw: &[f64]) -> Result<(), RuntimeError> {
        if self.equally_weighted {
            return Err(RuntimeError::Shape("equally weighted cloud has fixed weights".into()));
        }
        if lw.len() != self.rows {
            return Err(RuntimeError::Shape(format!("{} weights for {} rows", lw.len(), self.rows)));
        }
        self.log_weights[slot * self.rows..(slot + 1) * self.rows].copy_from_slice(lw);
        Ok(())
    }

    /// Normalized weights of a slot.
    pub fn weights(&self, slot: usize) -> Vec<f64> {
        let lw = self.log_weights(slot);
        let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = lw.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / sum).collect()
    }
}

/// Copy the given nodes' values from a state into a cloud row.
pub fn copy_state_to_cloud(
    state: &ModelState,
    nodes: &[NodeId],
    cloud: &mut ParticleCloud,
    slot: usize,
    row: usize,
) -> Result<(), RuntimeError> {
    let dst = cloud.row_mut(slot, row)?;
    if dst.len() != nodes.len() {
        return Err(RuntimeError::Shape(format!("{} nodes into width {}", nodes.len(), dst.len())));
    }
    for (d, &id) in dst.iter_mut().zip(nodes) {
        *d = state.values[id];
    }
    Ok(())
}

/// Copy a cloud row into the given nodes of a state.
pub fn copy_cloud_to_state(
    cloud: &ParticleCloud,
    slot: usize,
    row: usize,
    state: &mut ModelState,
    nodes: &[NodeId],
) -> Result<(), RuntimeError> {
    let src = cloud.row(slot, row)?;
    if src.len() != nodes.len() {
        return Err(RuntimeError::Shape(format!("width {} into {} nodes", src.len(), nodes.len())));
    }
    for (&v, &id) in src.iter().zip(nodes) {
        state.values[id] = v;
    }
    Ok(())
}

/// Copy row `row` of one cloud to row `row_to` of another (values only).
pub fn copy_cloud_to_cloud(
    from: &ParticleCloud,
    slot: usize,
    row: usize,
    to: &mut ParticleCloud,
    slot_to: usize,
    row_to: usize,
) -> Result<(), RuntimeError> {
    let src = from.row(slot, row)?.to_vec();
    let dst = to.row_mut(slot_to, row_to)?;
    if src.len() != dst.len() {
        return Err(RuntimeError::Shape(format!("width {} into width {}", src.len(), dst.len())));
    }
    dst.copy_from_slice(&src);
    Ok(())
}
