//! Abstract syntax of the model language and its pretty-printer.

use std::fmt;

use crate::distributions::{DistSpec, ScaleTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Pow => a.powf(b),
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => PREC_ADD,
            BinOp::Mul | BinOp::Div => PREC_MUL,
            BinOp::Pow => PREC_POW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Sqrt => x.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Ident(String),
    Indexed(String, Box<Expr>),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_UNARY: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, _, _) => op.precedence(),
            Expr::Neg(_) => PREC_UNARY,
            _ => PREC_ATOM,
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Ident(n) => f.write_str(n),
            Expr::Indexed(n, i) => write!(f, "{n}[{i}]"),
            Expr::Neg(e) => {
                f.write_str("-")?;
                write_child(f, e, e.precedence() < PREC_UNARY)
            }
            Expr::Binary(op, l, r) => {
                let p = op.precedence();
                if *op == BinOp::Pow {
                    // right associative; unary minus allowed on the right
                    write_child(f, l, l.precedence() <= PREC_POW)?;
                    f.write_str("^")?;
                    write_child(f, r, r.precedence() < PREC_UNARY)
                } else {
                    write_child(f, l, l.precedence() < p)?;
                    write!(f, " {} ", op.symbol())?;
                    write_child(f, r, r.precedence() <= p)
                }
            }
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}

/// Left-hand side of a declaration: `name` or `name[index]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub name: String,
    pub index: Option<Expr>,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.index {
            Some(i) => write!(f, "{}[{i}]", self.name),
            None => f.write_str(&self.name),
        }
    }
}

/// A distribution call with arguments placed in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct DistCall {
    pub spec: DistSpec,
    pub params: Vec<Expr>,
}

impl fmt::Display for DistCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}, ", self.spec.kind.source_name(), self.params[0])?;
        match self.spec.scale {
            Some(ScaleTag::Variance) => write!(f, "var = {})", self.params[1]),
            Some(ScaleTag::Sd) => write!(f, "sd = {})", self.params[1]),
            _ => write!(f, "{})", self.params[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Statement {
    Stochastic {
        target: Target,
        dist: DistCall,
        pos: Pos,
    },
    Deterministic {
        target: Target,
        expr: Expr,
        pos: Pos,
    },
    For {
        var: String,
        from: Expr,
        to: Expr,
        body: Vec<Statement>,
        pos: Pos,
    },
}

impl Statement {
    pub fn pos(&self) -> Pos {
        match self {
            Statement::Stochastic { pos, .. }
            | Statement::Deterministic { pos, .. }
            | Statement::For { pos, .. } => *pos,
        }
    }

    fn write_indented(&self, f: &mut fmt::Formatter<'_>, depth: usize) -> fmt::Result {
        let pad = "  ".repeat(depth);
        match self {
            Statement::Stochastic { target, dist, .. } => writeln!(f, "{pad}{target} ~ {dist}"),
            Statement::Deterministic { target, expr, .. } => writeln!(f, "{pad}{target} <- {expr}"),
            Statement::For { var, from, to, body, .. } => {
                writeln!(f, "{pad}for({var} in {from}:{to}) {{")?;
                for s in body {
                    s.write_indented(f, depth + 1)?;
                }
                writeln!(f, "{pad}}}")
            }
        }
    }
}

/// A parsed model: the ordered list of top-level statements.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSource {
    pub statements: Vec<Statement>,
}

impl fmt::Display for ModelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.statements {
            s.write_indented(f, 0)?;
        }
        Ok(())
    }
}
