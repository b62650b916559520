//! Unrolling of parsed model source into a [`ModelGraph`].

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use log::warn;
use thiserror::Error;

use super::ast::{Expr, ModelSource, Pos, Statement, Target};
use super::graph::{DepCache, DepFilter, ModelGraph, Node, NodeExpr, NodeId, NodeKind, Role};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompileError {
    #[error("{pos}: unresolved identifier `{name}`")]
    Unresolved { name: String, pos: Pos },
    #[error("{pos}: `{node}` is declared more than once")]
    Duplicate { node: String, pos: Pos },
    #[error("cyclic definition involving `{node}`")]
    Cycle { node: String },
    #[error("data provided for nonexistent node `{node}`")]
    DataForUnknownNode { node: String },
    #[error("data provided for deterministic node `{node}`")]
    DataForDeterministic { node: String },
    #[error("missing observation for `{node}`; empty data cells are not supported")]
    MissingObservation { node: String },
    #[error("{pos}: {detail}")]
    Index { detail: String, pos: Pos },
    #[error("`{name}` is both a model variable and a constant")]
    NameClash { name: String },
    #[error("init for `{name}`: {detail}")]
    Init { name: String, detail: String },
}

type Env = Vec<(String, i64)>;

struct Decl<'a> {
    name: String,
    index: Option<i64>,
    pos: Pos,
    env: Env,
    body: DeclBody<'a>,
}

enum DeclBody<'a> {
    Stochastic(&'a super::ast::DistCall),
    Deterministic(&'a Expr),
}

struct Ctx<'a> {
    constants: &'a BTreeMap<String, f64>,
}

impl Ctx<'_> {
    // Evaluate an expression that may only use loop variables and constants.
    fn eval_const(&self, e: &Expr, env: &Env, pos: Pos) -> Result<f64, CompileError> {
        Ok(match e {
            Expr::Num(v) => *v,
            Expr::Ident(n) => {
                if let Some((_, v)) = env.iter().rev().find(|(k, _)| k == n) {
                    *v as f64
                } else if let Some(v) = self.constants.get(n) {
                    *v
                } else {
                    return Err(CompileError::Unresolved { name: n.clone(), pos });
                }
            }
            Expr::Indexed(n, _) => {
                return Err(CompileError::Index {
                    detail: format!("`{n}[...]` used where a constant is required"),
                    pos,
                })
            }
            Expr::Neg(x) => -self.eval_const(x, env, pos)?,
            Expr::Binary(op, l, r) => op.apply(self.eval_const(l, env, pos)?, self.eval_const(r, env, pos)?),
            Expr::Call(f, x) => f.apply(self.eval_const(x, env, pos)?),
        })
    }

    fn eval_int(&self, e: &Expr, env: &Env, pos: Pos) -> Result<i64, CompileError> {
        let v = self.eval_const(e, env, pos)?;
        if v.fract() != 0.0 || !v.is_finite() || v.abs() > 1e15 {
            return Err(CompileError::Index {
                detail: format!("`{e}` evaluates to {v}, not an integer"),
                pos,
            });
        }
        Ok(v as i64)
    }

    fn unroll<'s>(&self, stmts: &'s [Statement], env: &mut Env, out: &mut Vec<Decl<'s>>) -> Result<(), CompileError> {
        for s in stmts {
            match s {
                Statement::For {
                    var, from, to, body, pos,
                } => {
                    let a = self.eval_int(from, env, *pos)?;
                    let b = self.eval_int(to, env, *pos)?;
                    for i in a..=b {
                        env.push((var.clone(), i));
                        self.unroll(body, env, out)?;
                        env.pop();
                    }
                }
                Statement::Stochastic { target, dist, pos } => {
                    out.push(self.decl(target, *pos, env, DeclBody::Stochastic(dist))?);
                }
                Statement::Deterministic { target, expr, pos } => {
                    out.push(self.decl(target, *pos, env, DeclBody::Deterministic(expr))?);
                }
            }
        }
        Ok(())
    }

    fn decl<'s>(&self, target: &Target, pos: Pos, env: &Env, body: DeclBody<'s>) -> Result<Decl<'s>, CompileError> {
        let index = match &target.index {
            Some(e) => Some(self.eval_int(e, env, pos)?),
            None => None,
        };
        Ok(Decl {
            name: target.name.clone(),
            index,
            pos,
            env: env.clone(),
            body,
        })
    }
}

fn label(name: &str, index: Option<i64>) -> String {
    match index {
        Some(i) => format!("{name}[{i}]"),
        None => name.to_string(),
    }
}

struct Resolver<'a> {
    ctx: &'a Ctx<'a>,
    labels: &'a HashMap<String, NodeId>,
    variables: &'a BTreeMap<String, Vec<NodeId>>,
}

impl Resolver<'_> {
    fn resolve(&self, e: &Expr, env: &Env, pos: Pos) -> Result<NodeExpr, CompileError> {
        Ok(match e {
            Expr::Num(v) => NodeExpr::Const(*v),
            Expr::Ident(n) => {
                if let Some((_, v)) = env.iter().rev().find(|(k, _)| k == n) {
                    NodeExpr::Const(*v as f64)
                } else if let Some(&id) = self.labels.get(n) {
                    NodeExpr::Node(id)
                } else if let Some(v) = self.ctx.constants.get(n) {
                    NodeExpr::Const(*v)
                } else if self.variables.contains_key(n) {
                    return Err(CompileError::Index {
                        detail: format!("`{n}` is indexed and must be used as `{n}[...]`"),
                        pos,
                    });
                } else {
                    return Err(CompileError::Unresolved { name: n.clone(), pos });
                }
            }
            Expr::Indexed(n, idx) => {
                let i = self.ctx.eval_int(idx, env, pos)?;
                let l = label(n, Some(i));
                match self.labels.get(&l) {
                    Some(&id) => NodeExpr::Node(id),
                    None => return Err(CompileError::Unresolved { name: l, pos }),
                }
            }
            Expr::Neg(x) => NodeExpr::Neg(Box::new(self.resolve(x, env, pos)?)),
            Expr::Binary(op, l, r) => NodeExpr::Binary(
                *op,
                Box::new(self.resolve(l, env, pos)?),
                Box::new(self.resolve(r, env, pos)?),
            ),
            Expr::Call(f, x) => NodeExpr::Call(*f, Box::new(self.resolve(x, env, pos)?)),
        })
    }
}

/// Unroll `src` into a scalar node graph.
///
/// `data` and `inits` map a variable name to its values: one value for an
/// unindexed node, or values for indices 1, 2, ... of an indexed variable.
pub fn compile(
    src: &ModelSource,
    constants: &BTreeMap<String, f64>,
    data: &BTreeMap<String, Vec<f64>>,
    inits: &BTreeMap<String, Vec<f64>>,
) -> Result<ModelGraph, CompileError> {
    let ctx = Ctx { constants };
    let mut decls = Vec::new();
    ctx.unroll(&src.statements, &mut Vec::new(), &mut decls)?;

    let mut labels: HashMap<String, NodeId> = HashMap::new();
    let mut variables: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();
    for (id, d) in decls.iter().enumerate() {
        let l = label(&d.name, d.index);
        if labels.insert(l.clone(), id).is_some() {
            return Err(CompileError::Duplicate { node: l, pos: d.pos });
        }
        variables.entry(d.name.clone()).or_default().push(id);
    }
    for (name, ids) in variables.iter_mut() {
        if constants.contains_key(name) {
            return Err(CompileError::NameClash { name: name.clone() });
        }
        let mixed = ids.iter().any(|&i| decls[i].index.is_some()) && ids.iter().any(|&i| decls[i].index.is_none());
        if mixed {
            return Err(CompileError::Index {
                detail: format!("`{name}` is declared both with and without an index"),
                pos: decls[ids[0]].pos,
            });
        }
        ids.sort_by_key(|&i| decls[i].index);
    }

    let resolver = Resolver {
        ctx: &ctx,
        labels: &labels,
        variables: &variables,
    };
    let mut nodes = Vec::with_capacity(decls.len());
    for d in &decls {
        let kind = match d.body {
            DeclBody::Stochastic(call) => NodeKind::Stochastic {
                dist: call.spec,
                params: call
                    .params
                    .iter()
                    .map(|p| resolver.resolve(p, &d.env, d.pos).map(NodeExpr::fold))
                    .collect::<Result<_, _>>()?,
            },
            DeclBody::Deterministic(e) => NodeKind::Deterministic(resolver.resolve(e, &d.env, d.pos)?.fold()),
        };
        let mut parents = Vec::new();
        match &kind {
            NodeKind::Stochastic { params, .. } => params.iter().for_each(|p| p.referenced_nodes(&mut parents)),
            NodeKind::Deterministic(e) => e.referenced_nodes(&mut parents),
        }
        parents.sort_unstable();
        parents.dedup();
        nodes.push(Node {
            name: d.name.clone(),
            index: d.index,
            role: Role::Parameter,
            kind,
            parents,
            children: Vec::new(),
        });
    }
    for id in 0..nodes.len() {
        for p in nodes[id].parents.clone() {
            nodes[p].children.push(id);
        }
    }

    // Observed values.
    let mut observed: Vec<Option<f64>> = vec![None; nodes.len()];
    for (name, values) in data {
        let ids = variables
            .get(name)
            .ok_or_else(|| CompileError::DataForUnknownNode { node: name.clone() })?;
        let targets = value_targets(name, values.len(), ids, &nodes, &labels)
            .map_err(|node| CompileError::DataForUnknownNode { node })?;
        for (id, &v) in targets.into_iter().zip(values) {
            if !nodes[id].is_stochastic() {
                return Err(CompileError::DataForDeterministic { node: nodes[id].label() });
            }
            if v.is_nan() {
                return Err(CompileError::MissingObservation { node: nodes[id].label() });
            }
            observed[id] = Some(v);
        }
    }
    for (id, n) in nodes.iter_mut().enumerate() {
        n.role = match (&n.kind, observed[id], n.index) {
            (NodeKind::Deterministic(_), _, _) => Role::Deterministic,
            (_, Some(_), _) => Role::Observation,
            (_, None, Some(_)) => Role::Latent,
            (_, None, None) => Role::Parameter,
        };
    }

    let topo = topological_order(&nodes)?;
    let mut rank = vec![0; nodes.len()];
    for (r, &id) in topo.iter().enumerate() {
        rank[id] = r;
    }

    let mut initial = vec![f64::NAN; nodes.len()];
    for (id, v) in observed.iter().enumerate() {
        if let Some(v) = v {
            initial[id] = *v;
        }
    }
    for (name, values) in inits {
        let Some(ids) = variables.get(name) else {
            return Err(CompileError::Init {
                name: name.clone(),
                detail: "no such variable in the model".into(),
            });
        };
        let targets = value_targets(name, values.len(), ids, &nodes, &labels).map_err(|node| CompileError::Init {
            name: name.clone(),
            detail: format!("no node `{node}`"),
        })?;
        for (id, &v) in targets.into_iter().zip(values) {
            match nodes[id].role {
                Role::Deterministic => {
                    warn!("ignoring init for deterministic node {}; it is recomputed from its parents", nodes[id].label());
                }
                Role::Observation => warn!("ignoring init for data node {}", nodes[id].label()),
                _ => initial[id] = v,
            }
        }
    }
    for &id in &topo {
        if let NodeKind::Deterministic(e) = &nodes[id].kind {
            initial[id] = e.eval(&initial);
        }
    }

    let mut graph = ModelGraph {
        nodes,
        topo,
        rank,
        labels,
        variables,
        initial,
        observed,
        dep_cache: HashMap::new(),
    };
    let latent = graph.nodes_with_role(Role::Latent);
    let mut cache = HashMap::with_capacity(latent.len());
    for id in latent {
        cache.insert(
            id,
            DepCache {
                deterministic: graph.dependencies_uncached(&[id], DepFilter::DeterministicOnly),
                data: graph.dependencies_uncached(&[id], DepFilter::DataOnly),
            },
        );
    }
    graph.dep_cache = cache;
    Ok(graph)
}

// Map a value vector for variable `name` onto node ids; Err carries the
// label of the first missing node.
fn value_targets(
    name: &str,
    len: usize,
    ids: &[NodeId],
    nodes: &[Node],
    labels: &HashMap<String, NodeId>,
) -> Result<Vec<NodeId>, String> {
    if ids.len() == 1 && nodes[ids[0]].index.is_none() {
        return if len == 1 { Ok(vec![ids[0]]) } else { Err(label(name, Some(2))) };
    }
    (1..=len as i64)
        .map(|i| {
            let l = label(name, Some(i));
            labels.get(&l).copied().ok_or(l)
        })
        .collect()
}

// Kahn's algorithm; ties broken by declaration order.
fn topological_order(nodes: &[Node]) -> Result<Vec<NodeId>, CompileError> {
    let mut indeg: Vec<usize> = nodes.iter().map(|n| n.parents.len()).collect();
    let mut ready: BinaryHeap<Reverse<NodeId>> = indeg
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| Reverse(i))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for &c in &nodes[id].children {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() < nodes.len() {
        let stuck = (0..nodes.len()).find(|&i| indeg[i] > 0).unwrap_or(0);
        return Err(CompileError::Cycle { node: nodes[stuck].label() });
    }
    Ok(order)
}
