//! The declarative model language: parsing, compilation and the node graph.

pub mod ast;
pub mod compile;
pub mod graph;
pub mod parse;

pub use ast::{ModelSource, Pos};
pub use compile::{compile, CompileError};
pub use graph::{DepFilter, LookupError, ModelGraph, Node, NodeExpr, NodeId, NodeKind, Role};
pub use parse::{parse, ParseError};

/// Model sources bundled with the crate.
pub mod bundled {
    /// Linear-Gaussian model with ten time points and known parameters.
    pub const LINEAR_GAUSSIAN: &str = include_str!("../../models/linear_gaussian.mod");
    /// Stochastic volatility model; needs the constant `T`.
    pub const STOCHASTIC_VOLATILITY: &str = include_str!("../../models/stochastic_volatility.mod");
    /// Linear-Gaussian model with the transition coefficient `a` unknown;
    /// needs the constant `T`.
    pub const LINEAR_GAUSSIAN_UNKNOWN_A: &str = include_str!("../../models/linear_gaussian_unknown_a.mod");
}
