//! The compiled, unrolled node graph.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use super::ast::{BinOp, Func};
use crate::distributions::{DistKind, DistSpec};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Unobserved, indexed stochastic node (a member of a latent chain).
    Latent,
    /// Stochastic node with an observed value.
    Observation,
    /// Unobserved, unindexed stochastic node.
    Parameter,
    Deterministic,
}

/// Expression over node values with loop variables and constants folded in.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeExpr {
    Const(f64),
    Node(NodeId),
    Neg(Box<NodeExpr>),
    Binary(BinOp, Box<NodeExpr>, Box<NodeExpr>),
    Call(Func, Box<NodeExpr>),
}

impl NodeExpr {
    #[inline]
    pub fn eval(&self, values: &[f64]) -> f64 {
        match self {
            NodeExpr::Const(v) => *v,
            NodeExpr::Node(id) => values[*id],
            NodeExpr::Neg(e) => -e.eval(values),
            NodeExpr::Binary(op, l, r) => op.apply(l.eval(values), r.eval(values)),
            NodeExpr::Call(f, e) => f.apply(e.eval(values)),
        }
    }

    pub fn referenced_nodes(&self, out: &mut Vec<NodeId>) {
        match self {
            NodeExpr::Const(_) => {}
            NodeExpr::Node(id) => out.push(*id),
            NodeExpr::Neg(e) | NodeExpr::Call(_, e) => e.referenced_nodes(out),
            NodeExpr::Binary(_, l, r) => {
                l.referenced_nodes(out);
                r.referenced_nodes(out);
            }
        }
    }

    pub(crate) fn fold(self) -> NodeExpr {
        match self {
            NodeExpr::Neg(e) => match e.fold() {
                NodeExpr::Const(v) => NodeExpr::Const(-v),
                e => NodeExpr::Neg(Box::new(e)),
            },
            NodeExpr::Binary(op, l, r) => match (l.fold(), r.fold()) {
                (NodeExpr::Const(a), NodeExpr::Const(b)) => NodeExpr::Const(op.apply(a, b)),
                (l, r) => NodeExpr::Binary(op, Box::new(l), Box::new(r)),
            },
            NodeExpr::Call(f, e) => match e.fold() {
                NodeExpr::Const(v) => NodeExpr::Const(f.apply(v)),
                e => NodeExpr::Call(f, Box::new(e)),
            },
            e => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Stochastic { dist: DistSpec, params: Vec<NodeExpr> },
    Deterministic(NodeExpr),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub index: Option<i64>,
    pub role: Role,
    pub kind: NodeKind,
    pub parents: Vec<NodeId>,
    pub children: Vec<NodeId>,
}

impl Node {
    pub fn label(&self) -> String {
        match self.index {
            Some(i) => format!("{}[{}]", self.name, i),
            None => self.name.clone(),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, NodeKind::Stochastic { .. })
    }

    pub fn is_data(&self) -> bool {
        self.role == Role::Observation
    }

    pub fn dist(&self) -> Option<(&DistSpec, &[NodeExpr])> {
        match &self.kind {
            NodeKind::Stochastic { dist, params } => Some((dist, params)),
            NodeKind::Deterministic(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepFilter {
    DeterministicOnly,
    DataOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LookupError {
    #[error("no node or variable named `{0}`")]
    Unknown(String),
    #[error("`{name}` is not a latent chain: {reason}")]
    NotLatent { name: String, reason: String },
}

/// Dependency sets cached for every latent node.
#[derive(Debug, Clone, Default)]
pub struct DepCache {
    pub deterministic: Vec<NodeId>,
    pub data: Vec<NodeId>,
}

/// A compiled model: scalar nodes, roles, edges and initial values.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) topo: Vec<NodeId>,
    pub(crate) rank: Vec<usize>,
    pub(crate) labels: HashMap<String, NodeId>,
    pub(crate) variables: BTreeMap<String, Vec<NodeId>>,
    pub(crate) initial: Vec<f64>,
    pub(crate) observed: Vec<Option<f64>>,
    pub(crate) dep_cache: HashMap<NodeId, DepCache>,
}

impl ModelGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Node ids in topological order.
    pub fn topological_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn topo_rank(&self, id: NodeId) -> usize {
        self.rank[id]
    }

    /// Look up a scalar node by its label, e.g. `x[3]` or `phi`.
    pub fn node_id(&self, label: &str) -> Result<NodeId, LookupError> {
        let key: String = label.chars().filter(|c| !c.is_whitespace()).collect();
        self.labels.get(&key).copied().ok_or_else(|| LookupError::Unknown(label.to_string()))
    }

    pub fn label(&self, id: NodeId) -> String {
        self.nodes[id].label()
    }

    /// All node ids declared under a variable name, sorted by index.
    pub fn variable(&self, name: &str) -> Result<&[NodeId], LookupError> {
        self.variables
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| LookupError::Unknown(name.to_string()))
    }

    pub fn nodes_with_role(&self, role: Role) -> Vec<NodeId> {
        self.topo.iter().copied().filter(|&id| self.nodes[id].role == role).collect()
    }

    /// Values for data, inits and the deterministic nodes computable from them;
    /// NaN elsewhere.
    pub fn initial_values(&self) -> &[f64] {
        &self.initial
    }

    pub fn observed_value(&self, id: NodeId) -> Option<f64> {
        self.observed[id]
    }

    /// The time-ordered nodes of latent chain `name`.
    pub fn latent_nodes(&self, name: &str) -> Result<Vec<NodeId>, LookupError> {
        let ids = self.variable(name)?;
        for &id in ids {
            let n = &self.nodes[id];
            if n.index.is_none() || n.role != Role::Latent {
                return Err(LookupError::NotLatent {
                    name: name.to_string(),
                    reason: format!("{} is {:?}", n.label(), n.role),
                });
            }
        }
        Ok(ids.to_vec())
    }

    /// Downstream dependents of `id`, excluding itself, in topological order.
    ///
    /// Traversal passes through deterministic nodes and stops at stochastic
    /// ones.
    pub fn dependencies(&self, id: NodeId, filter: DepFilter) -> Vec<NodeId> {
        if filter != DepFilter::All {
            if let Some(c) = self.dep_cache.get(&id) {
                return match filter {
                    DepFilter::DeterministicOnly => c.deterministic.clone(),
                    _ => c.data.clone(),
                };
            }
        }
        self.dependencies_uncached(&[id], filter)
    }

    pub(crate) fn dependencies_uncached(&self, from: &[NodeId], filter: DepFilter) -> Vec<NodeId> {
        let mut seen = vec![false; self.nodes.len()];
        for &id in from {
            seen[id] = true;
        }
        let mut stack: Vec<NodeId> = from.to_vec();
        let mut out = Vec::new();
        while let Some(id) = stack.pop() {
            for &c in &self.nodes[id].children {
                if seen[c] {
                    continue;
                }
                seen[c] = true;
                let child = &self.nodes[c];
                let keep = match filter {
                    DepFilter::All => true,
                    DepFilter::DeterministicOnly => !child.is_stochastic(),
                    DepFilter::DataOnly => child.is_data(),
                };
                if keep {
                    out.push(c);
                }
                if !child.is_stochastic() {
                    stack.push(c);
                }
            }
        }
        out.sort_by_key(|&c| self.rank[c]);
        out
    }

    /// Union of the dependents of several nodes, excluding the nodes themselves.
    pub fn dependencies_of_set(&self, ids: &[NodeId], filter: DepFilter) -> Vec<NodeId> {
        let mut out = self.dependencies_uncached(ids, filter);
        out.retain(|c| !ids.contains(c));
        out
    }

    /// Every node the expression graph of `id` reaches upstream, stopping
    /// at stochastic nodes (which are included).
    pub fn stochastic_ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = self.nodes[id].parents.clone();
        let mut out = Vec::new();
        while let Some(p) = stack.pop() {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            if self.nodes[p].is_stochastic() {
                out.push(p);
            } else {
                stack.extend(self.nodes[p].parents.iter().copied());
            }
        }
        out.sort_by_key(|&c| self.rank[c]);
        out
    }

    /// Stochastic ancestors reachable from one expression.
    pub fn expr_stochastic_ancestors(&self, expr: &NodeExpr) -> Vec<NodeId> {
        let mut direct = Vec::new();
        expr.referenced_nodes(&mut direct);
        let mut out = Vec::new();
        for d in direct {
            if self.nodes[d].is_stochastic() {
                out.push(d);
            } else {
                out.extend(self.stochastic_ancestors(d));
            }
        }
        out.sort_by_key(|&c| self.rank[c]);
        out.dedup();
        out
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.nodes.iter().filter(|n| n.role == role).count()
    }

    /// True when the node's distribution is a normal.
    pub fn is_normal(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].dist(), Some((d, _)) if d.kind == DistKind::Normal)
    }
}

impl fmt::Display for ModelGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &id in &self.topo {
            writeln!(f, "{} ({:?})", self.nodes[id].label(), self.nodes[id].role)?;
        }
        Ok(())
    }
}
