//! Lexer and recursive-descent parser for model source text.
//!
//! Grammar (newlines end statements unless inside brackets or after a
//! binary operator; `;` also ends a statement; `#` starts a comment):
//!
//! ```text
//! model     := '{'? statement* '}'?
//! statement := target '~' dist | target '<-' expr
//!            | 'for' '(' ident 'in' expr ':' expr ')' (block | statement)
//! target    := ident ('[' expr ']')?
//! dist      := ident '(' arg (',' arg)* ')'      arg := (ident '=')? expr
//! expr      := term (('+' | '-') term)*
//! term      := unary (('*' | '/') unary)*
//! unary     := ('-' | '+') unary | power
//! power     := primary ('^' unary)?
//! primary   := number | ident | ident '[' expr ']' | func '(' expr ')' | '(' expr ')'
//! ```

use thiserror::Error;

use super::ast::{BinOp, DistCall, Expr, Func, ModelSource, Pos, Statement, Target};
use crate::distributions::{DistKind, DistSpec, ScaleTag};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("{pos}: unexpected character {ch:?}")]
    Lexical { pos: Pos, ch: char },
    #[error("{pos}: expected {expected}, found {found}")]
    Syntax {
        pos: Pos,
        expected: String,
        found: String,
    },
    #[error("{pos}: unknown distribution `{name}`")]
    UnknownDistribution { pos: Pos, name: String },
    #[error("{pos}: unknown function `{name}`")]
    UnknownFunction { pos: Pos, name: String },
    #[error("{pos}: bad argument to {dist}: {detail}")]
    Argument {
        pos: Pos,
        dist: String,
        detail: String,
    },
}

impl ParseError {
    pub fn pos(&self) -> Pos {
        match self {
            ParseError::Lexical { pos, .. }
            | ParseError::Syntax { pos, .. }
            | ParseError::UnknownDistribution { pos, .. }
            | ParseError::UnknownFunction { pos, .. }
            | ParseError::Argument { pos, .. } => *pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Tilde,
    Arrow,
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Colon,
    Semi,
    Assign,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    Newline,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Newline => "end of line".into(),
            Tok::Eof => "end of input".into(),
            other => format!("`{}`", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Tok::Tilde => "~",
            Tok::Arrow => "<-",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::LBracket => "[",
            Tok::RBracket => "]",
            Tok::Comma => ",",
            Tok::Colon => ":",
            Tok::Semi => ";",
            Tok::Assign => "=",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::Caret => "^",
            _ => "?",
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        let advance = |n: usize, i: &mut usize, col: &mut usize| {
            *i += n;
            *col += n;
        };
        match c {
            '\n' => {
                out.push((Tok::Newline, pos));
                i += 1;
                line += 1;
                col = 1;
            }
            ' ' | '\t' | '\r' => advance(1, &mut i, &mut col),
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '<' if chars.get(i + 1) == Some(&'-') => {
                out.push((Tok::Arrow, pos));
                advance(2, &mut i, &mut col);
            }
            c if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s: String = chars[start..i].iter().collect();
                let v: f64 = s.parse().map_err(|_| ParseError::Syntax {
                    pos,
                    expected: "a number".into(),
                    found: format!("`{s}`"),
                })?;
                col += i - start;
                out.push((Tok::Num(v), pos));
            }
            c if c.is_alphabetic() || c == '_' || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                col += i - start;
                out.push((Tok::Ident(chars[start..i].iter().collect()), pos));
            }
            _ => {
                let tok = match c {
                    '~' => Tok::Tilde,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    ',' => Tok::Comma,
                    ':' => Tok::Colon,
                    ';' => Tok::Semi,
                    '=' => Tok::Assign,
                    '+' => Tok::Plus,
                    '-' => Tok::Minus,
                    '*' => Tok::Star,
                    '/' => Tok::Slash,
                    '^' => Tok::Caret,
                    ch => return Err(ParseError::Lexical { pos, ch }),
                };
                out.push((tok, pos));
                advance(1, &mut i, &mut col);
            }
        }
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    // bracket nesting; newlines are insignificant while > 0
    depth: usize,
}

impl Parser {
    fn peek(&mut self) -> &Tok {
        if self.depth > 0 {
            while self.toks[self.at].0 == Tok::Newline {
                self.at += 1;
            }
        }
        &self.toks[self.at].0
    }

    fn pos(&mut self) -> Pos {
        self.peek();
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, Pos) {
        self.peek();
        let t = self.toks[self.at].clone();
        if t.0 != Tok::Eof {
            self.at += 1;
        }
        t
    }

    fn skip_newlines(&mut self) {
        while matches!(self.toks[self.at].0, Tok::Newline | Tok::Semi) {
            self.at += 1;
        }
    }

    fn skip_line_breaks(&mut self) {
        while self.toks[self.at].0 == Tok::Newline {
            self.at += 1;
        }
    }

    fn error(&mut self, expected: &str) -> ParseError {
        let pos = self.pos();
        let found = self.peek().describe();
        ParseError::Syntax {
            pos,
            expected: expected.to_string(),
            found,
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<Pos, ParseError> {
        if *self.peek() == tok {
            Ok(self.bump().1)
        } else {
            Err(self.error(&format!("`{}`", tok.symbol())))
        }
    }

    fn open(&mut self, tok: Tok) -> Result<Pos, ParseError> {
        let p = self.expect(tok)?;
        self.depth += 1;
        Ok(p)
    }

    fn close(&mut self, tok: Tok) -> Result<Pos, ParseError> {
        let p = self.expect(tok)?;
        self.depth -= 1;
        Ok(p)
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let pos = self.bump().1;
                Ok((s, pos))
            }
            _ => Err(self.error(what)),
        }
    }

    fn model(&mut self) -> Result<ModelSource, ParseError> {
        self.skip_newlines();
        let braced = *self.peek() == Tok::LBrace;
        if braced {
            self.bump();
        }
        let statements = self.statements(braced)?;
        if braced {
            self.expect(Tok::RBrace)?;
            self.skip_newlines();
        }
        if *self.peek() != Tok::Eof {
            return Err(self.error("end of input"));
        }
        Ok(ModelSource { statements })
    }

    fn statements(&mut self, until_brace: bool) -> Result<Vec<Statement>, ParseError> {
        let mut out = Vec::new();
        loop {
            self.skip_newlines();
            match self.peek() {
                Tok::RBrace if until_brace => return Ok(out),
                Tok::Eof if !until_brace => return Ok(out),
                Tok::Eof => return Err(self.error("`}`")),
                _ => out.push(self.statement()?),
            }
        }
    }

    fn end_of_statement(&mut self) -> Result<(), ParseError> {
        match self.toks[self.at].0 {
            Tok::Newline | Tok::Semi | Tok::Eof | Tok::RBrace => Ok(()),
            _ => Err(self.error("end of statement")),
        }
    }

    fn statement(&mut self) -> Result<Statement, ParseError> {
        let pos = self.pos();
        if *self.peek() == Tok::Ident("for".into()) {
            return self.for_loop(pos);
        }
        let target = self.target()?;
        match self.peek().clone() {
            Tok::Tilde => {
                self.bump();
                let dist = self.dist()?;
                self.end_of_statement()?;
                Ok(Statement::Stochastic { target, dist, pos })
            }
            Tok::Arrow => {
                self.bump();
                self.skip_line_breaks();
                let expr = self.expr()?;
                self.end_of_statement()?;
                Ok(Statement::Deterministic { target, expr, pos })
            }
            _ => Err(self.error("`~` or `<-`")),
        }
    }

    fn for_loop(&mut self, pos: Pos) -> Result<Statement, ParseError> {
        self.bump();
        self.open(Tok::LParen)?;
        let (var, _) = self.ident("a loop variable")?;
        match self.peek() {
            Tok::Ident(s) if s == "in" => {
                self.bump();
            }
            _ => return Err(self.error("`in`")),
        }
        let from = self.expr()?;
        self.expect(Tok::Colon)?;
        let to = self.expr()?;
        self.close(Tok::RParen)?;
        self.skip_line_breaks();
        let body = if *self.peek() == Tok::LBrace {
            self.bump();
            let body = self.statements(true)?;
            self.expect(Tok::RBrace)?;
            body
        } else {
            vec![self.statement()?]
        };
        Ok(Statement::For {
            var,
            from,
            to,
            body,
            pos,
        })
    }

    fn target(&mut self) -> Result<Target, ParseError> {
        let (name, _) = self.ident("a node name")?;
        let index = if *self.peek() == Tok::LBracket {
            self.open(Tok::LBracket)?;
            let e = self.expr()?;
            self.close(Tok::RBracket)?;
            Some(e)
        } else {
            None
        };
        Ok(Target { name, index })
    }

    fn dist(&mut self) -> Result<DistCall, ParseError> {
        let (name, pos) = self.ident("a distribution")?;
        let kind = DistKind::from_source_name(&name).ok_or_else(|| ParseError::UnknownDistribution {
            pos,
            name: name.clone(),
        })?;
        self.open(Tok::LParen)?;
        let mut args: Vec<(Option<String>, Expr, Pos)> = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                let apos = self.pos();
                let named = match (self.peek().clone(), &self.toks.get(self.at + 1).map(|t| &t.0)) {
                    (Tok::Ident(n), Some(Tok::Assign)) => Some(n),
                    _ => None,
                };
                if named.is_some() {
                    self.bump();
                    self.bump();
                    if matches!(self.peek(), Tok::Comma | Tok::RParen) {
                        return Err(ParseError::Argument {
                            pos: apos,
                            dist: name,
                            detail: "named argument is missing its value".into(),
                        });
                    }
                }
                let e = self.expr()?;
                args.push((named, e, apos));
                if *self.peek() == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.close(Tok::RParen)?;
        resolve_args(kind, &name, pos, args)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.toks_here() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            self.skip_line_breaks();
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.toks_here() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            self.skip_line_breaks();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Tok::Minus => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Tok::Plus => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.toks_here() == Tok::Caret {
            self.bump();
            self.skip_line_breaks();
            let exp = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    // Next token without skipping newlines at depth zero: a newline there
    // ends the expression.
    fn toks_here(&mut self) -> Tok {
        if self.depth > 0 {
            self.peek().clone()
        } else {
            self.toks[self.at].0.clone()
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.open(Tok::LParen)?;
                let e = self.expr()?;
                self.close(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let pos = self.bump().1;
                match self.toks_here() {
                    Tok::LBracket => {
                        self.open(Tok::LBracket)?;
                        let i = self.expr()?;
                        self.close(Tok::RBracket)?;
                        Ok(Expr::Indexed(name, Box::new(i)))
                    }
                    Tok::LParen => {
                        let func = Func::from_name(&name).ok_or(ParseError::UnknownFunction { pos, name })?;
                        self.open(Tok::LParen)?;
                        let e = self.expr()?;
                        self.close(Tok::RParen)?;
                        Ok(Expr::Call(func, Box::new(e)))
                    }
                    _ => Ok(Expr::Ident(name)),
                }
            }
            _ => Err(self.error("an expression")),
        }
    }
}

fn resolve_args(
    kind: DistKind,
    name: &str,
    pos: Pos,
    args: Vec<(Option<String>, Expr, Pos)>,
) -> Result<DistCall, ParseError> {
    let bad = |pos: Pos, detail: String| ParseError::Argument {
        pos,
        dist: name.to_string(),
        detail,
    };
    // Each slot accepts a set of names; for dnorm the second slot's name
    // also fixes the scale parameterization.
    let slot_of = |arg: &str| -> Option<(usize, Option<ScaleTag>)> {
        match (kind, arg) {
            (DistKind::Normal, "mean" | "mu") => Some((0, None)),
            (DistKind::Normal, "tau") => Some((1, Some(ScaleTag::Precision))),
            (DistKind::Normal, "var") => Some((1, Some(ScaleTag::Variance))),
            (DistKind::Normal, "sd") => Some((1, Some(ScaleTag::Sd))),
            (DistKind::Beta, "shape1") => Some((0, None)),
            (DistKind::Beta, "shape2") => Some((1, None)),
            (DistKind::Gamma, "shape") => Some((0, None)),
            (DistKind::Gamma, "rate") => Some((1, None)),
            (DistKind::Uniform, "min" | "lower") => Some((0, None)),
            (DistKind::Uniform, "max" | "upper") => Some((1, None)),
            _ => None,
        }
    };
    let mut slots: [Option<Expr>; 2] = [None, None];
    let mut tag = None;
    let mut next_positional = 0usize;
    let mut seen_named = false;
    for (arg_name, expr, apos) in args {
        let slot = match arg_name {
            Some(n) => {
                seen_named = true;
                let (slot, t) = slot_of(&n).ok_or_else(|| bad(apos, format!("unknown argument `{n}`")))?;
                if t.is_some() {
                    tag = t;
                }
                slot
            }
            None => {
                if seen_named {
                    return Err(bad(apos, "positional argument after a named one".into()));
                }
                let s = next_positional;
                next_positional += 1;
                if s >= 2 {
                    return Err(bad(apos, "too many arguments".into()));
                }
                s
            }
        };
        if slots[slot].is_some() {
            return Err(bad(apos, format!("argument {} given twice", slot + 1)));
        }
        slots[slot] = Some(expr);
    }
    let [a, b] = slots;
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(bad(pos, "expected exactly two parameters".into())),
    };
    let spec = match kind {
        DistKind::Normal => DistSpec::normal(tag.unwrap_or(ScaleTag::Precision)),
        _ => DistSpec { kind, scale: None },
    };
    Ok(DistCall {
        spec,
        params: vec![a, b],
    })
}

/// Parse model source text.
pub fn parse(text: &str) -> Result<ModelSource, ParseError> {
    let toks = lex(text)?;
    Parser { toks, at: 0, depth: 0 }.model()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const LINEAR_GAUSSIAN: &str = "\
x[1] ~ dnorm(0, var = 1)
y[1] ~ dnorm(x[1], var = .5)
for(t in 2:10){
  x[t] ~ dnorm(.8 * x[t-1], var = 1)
  y[t] ~ dnorm(x[t], var = .5)
}
";

    pub const STOCH_VOL: &str = "{
  x[1] ~ dnorm(phi * x0, sigmaSquaredInv)
  y[1] ~ dnorm(0, var = betaSquared * exp(x[1]))
  for(t in 2:T){
    x[t] ~ dnorm(phi * x[t-1],  sigmaSquaredInv)
    y[t] ~ dnorm(0, var = betaSquared * exp(x[t]))
  }

  x0 ~ dnorm(1, sigmaSquaredInv)
  phi <- 2 * phiStar - 1
  phiStar ~ dbeta(18, 1)
  sigmaSquaredInv ~ dgamma(5, 20)
  betaSquared <- 1 / betaSquaredInv
  betaSquaredInv ~ dgamma(5, 20)
}";

    #[test]
    fn stochastic_with_variance_tag() {
        let m = parse("x[1] ~ dnorm(0, var = 1)").unwrap();
        match &m.statements[0] {
            Statement::Stochastic { target, dist, .. } => {
                assert_eq!(target.name, "x");
                assert_eq!(target.index, Some(Expr::Num(1.0)));
                assert_eq!(dist.spec, DistSpec::normal(ScaleTag::Variance));
                assert_eq!(dist.params, vec![Expr::Num(0.0), Expr::Num(1.0)]);
            }
            s => panic!("unexpected {s:?}"),
        }
    }

    #[test]
    fn deterministic_expression_tree() {
        let m = parse("phi <- 2 * phiStar - 1").unwrap();
        let expected = Expr::Binary(
            BinOp::Sub,
            Box::new(Expr::Binary(
                BinOp::Mul,
                Box::new(Expr::Num(2.0)),
                Box::new(Expr::Ident("phiStar".into())),
            )),
            Box::new(Expr::Num(1.0)),
        );
        match &m.statements[0] {
            Statement::Deterministic { target, expr, .. } => {
                assert_eq!(target.name, "phi");
                assert_eq!(*expr, expected);
            }
            s => panic!("unexpected {s:?}"),
        }
    }

    #[test]
    fn unknown_distribution_is_named() {
        let err = parse("x[t] ~ dfoo(1)").unwrap_err();
        assert!(matches!(&err, ParseError::UnknownDistribution { name, .. } if name == "dfoo"));
        assert!(err.to_string().contains("dfoo"));
    }

    #[test]
    fn positional_normal_scale_is_precision() {
        let m = parse("x0 ~ dnorm(1, sigmaSquaredInv)").unwrap();
        match &m.statements[0] {
            Statement::Stochastic { dist, .. } => assert_eq!(dist.spec.scale, Some(ScaleTag::Precision)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn malformed_named_arguments() {
        assert!(matches!(parse("a ~ dnorm(0, foo = 1)"), Err(ParseError::Argument { .. })));
        assert!(matches!(parse("a ~ dnorm(0, var = )"), Err(ParseError::Argument { .. })));
        assert!(matches!(parse("a ~ dnorm(0, var = 1, sd = 2)"), Err(ParseError::Argument { .. })));
        assert!(matches!(parse("a ~ dnorm(mean = 0, 1)"), Err(ParseError::Argument { .. })));
        assert!(matches!(parse("a ~ dgamma(1)"), Err(ParseError::Argument { .. })));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse("x[1] ~ dnorm(0, var = 1)\ny[1] dnorm(x[1], 1)").unwrap_err();
        assert_eq!(err.pos(), Pos { line: 2, col: 6 });
        let err = parse("a <- 1 $ 2").unwrap_err();
        assert!(matches!(err, ParseError::Lexical { ch: '$', pos: Pos { line: 1, col: 8 } }));
    }

    #[test]
    fn precedence_and_associativity() {
        let m = parse("a <- -2^2\nb <- 2^3^2\nc <- 1 - 2 - 3\nd <- (1 + 2) * 3").unwrap();
        let texts: Vec<String> = m.statements.iter().map(|s| match s {
            Statement::Deterministic { expr, .. } => expr.to_string(),
            _ => unreachable!(),
        }).collect();
        assert_eq!(texts, ["-2^2", "2^3^2", "1 - 2 - 3", "(1 + 2) * 3"]);
        match &m.statements[0] {
            Statement::Deterministic { expr: Expr::Neg(inner), .. } => {
                assert!(matches!(**inner, Expr::Binary(BinOp::Pow, _, _)))
            }
            _ => panic!("unary minus must bind looser than ^"),
        }
    }

    #[test]
    fn continuation_after_operator_and_inside_parens() {
        let m = parse("a <- 1 +\n  2\nb ~ dnorm(0,\n  var = 1)").unwrap();
        assert_eq!(m.statements.len(), 2);
    }

    #[test]
    fn listings_round_trip_through_printer() {
        for src in [LINEAR_GAUSSIAN, STOCH_VOL] {
            let once = parse(src).unwrap().to_string();
            let twice = parse(&once).unwrap().to_string();
            assert_eq!(once, twice);
            assert_eq!(parse(&once).unwrap().statements.len(), parse(src).unwrap().statements.len());
        }
    }

    #[test]
    fn single_statement_loop_body() {
        let m = parse("for (i in 1:3) z[i] ~ dnorm(0, 1)").unwrap();
        assert!(matches!(&m.statements[0], Statement::For { body, .. } if body.len() == 1));
    }
}
