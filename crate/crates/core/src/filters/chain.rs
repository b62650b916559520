//! Per-time layout of a latent chain: its nodes, observations and the
//! deterministic nodes that must be refreshed around each step.

use crate::model::{DepFilter, ModelGraph, NodeId, NodeKind};

use super::FilterError;

#[derive(Debug, Clone)]
pub struct ChainPlan {
    /// Latent nodes x[1..T] in time order.
    pub latent: Vec<NodeId>,
    /// Observation nodes depending on x[t].
    pub obs: Vec<Vec<NodeId>>,
    /// Deterministic nodes downstream of x[t].
    pub det: Vec<Vec<NodeId>>,
    /// Stochastic non-chain nodes the chain's distributions read.
    pub params: Vec<NodeId>,
}

impl ChainPlan {
    /// Validate that `name` forms a first-order Markov chain whose
    /// observations each depend on a single time point.
    pub fn new(graph: &ModelGraph, name: &str) -> Result<Self, FilterError> {
        let latent = graph.latent_nodes(name)?;
        let mut pos = vec![usize::MAX; graph.len()];
        for (t, &id) in latent.iter().enumerate() {
            pos[id] = t;
        }
        let mut params = Vec::new();
        let mut obs = Vec::with_capacity(latent.len());
        let mut det = Vec::with_capacity(latent.len());
        for (t, &id) in latent.iter().enumerate() {
            for a in graph.stochastic_ancestors(id) {
                match pos[a] {
                    usize::MAX => params.push(a),
                    p if t > 0 && p == t - 1 => {}
                    _ => {
                        return Err(FilterError::Chain {
                            node: graph.label(id),
                            reason: format!("depends on {}, not only on the previous time point", graph.label(a)),
                        })
                    }
                }
            }
            let mut here = Vec::new();
            for d in graph.dependencies(id, DepFilter::All) {
                let n = graph.node(d);
                if !n.is_stochastic() || (pos[d] != usize::MAX && pos[d] == t + 1) {
                    continue;
                }
                if !n.is_data() {
                    return Err(FilterError::Chain {
                        node: graph.label(d),
                        reason: format!("unobserved stochastic node depends on {}", graph.label(id)),
                    });
                }
                for a in graph.stochastic_ancestors(d) {
                    if pos[a] == usize::MAX {
                        params.push(a);
                    } else if a != id {
                        return Err(FilterError::Chain {
                            node: graph.label(d),
                            reason: format!("observation depends on both {} and {}", graph.label(id), graph.label(a)),
                        });
                    }
                }
                here.push(d);
            }
            obs.push(here);
            det.push(graph.dependencies(id, DepFilter::DeterministicOnly));
        }
        params.sort_by_key(|&p| graph.topo_rank(p));
        params.dedup();
        Ok(ChainPlan { latent, obs, det, params })
    }

    pub fn len(&self) -> usize {
        self.latent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.is_empty()
    }

    /// Transition mean parameter expression of x[t], if the node is normal.
    pub fn normal_mean<'g>(&self, graph: &'g ModelGraph, t: usize) -> Option<&'g crate::model::NodeExpr> {
        let id = self.latent[t];
        match &graph.node(id).kind {
            NodeKind::Stochastic { params, .. } if graph.is_normal(id) => Some(&params[0]),
            _ => None,
        }
    }
}
