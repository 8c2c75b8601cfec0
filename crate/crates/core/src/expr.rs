//! Coefficient expression language.
//!
//! Expressions are parsed once into an AST and evaluated at `(t, x, z)`.
//! The grammar is documented in `docs/coefficients.md`.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Tanh,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    /// Spatial coordinate, 0-based (`x1` is `X(0)`).
    X(usize),
    /// Jump mark coordinate, 0-based (`z1` is `Z(0)`).
    Z(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Param(String, f64),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Names an expression may refer to.
#[derive(Debug, Clone, Default)]
pub struct Scope {
    pub dim: usize,
    pub jump_dim: usize,
    pub params: BTreeMap<String, f64>,
}

impl Scope {
    pub fn new(dim: usize) -> Self {
        Scope { dim, jump_dim: 0, params: BTreeMap::new() }
    }

    pub fn with_jumps(mut self, jump_dim: usize) -> Self {
        self.jump_dim = jump_dim;
        self
    }

    pub fn with_params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.params = params;
        self
    }

    /// Scope of a function of time only.
    pub fn time_only() -> Self {
        Scope::new(0)
    }
}

/// A parsed coefficient: the original text plus its AST.
#[derive(Debug, Clone)]
pub struct CoefficientExpr {
    source: String,
    root: Node,
}

impl PartialEq for CoefficientExpr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl fmt::Display for CoefficientExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source)
    }
}

pub fn parse_coefficient(source: &str, scope: &Scope) -> Result<CoefficientExpr> {
    CoefficientExpr::parse(source, scope)
}

impl CoefficientExpr {
    pub fn parse(source: &str, scope: &Scope) -> Result<Self> {
        if source.trim().is_empty() {
            return Err(Error::Syntax { pos: 0, msg: "empty expression".into() });
        }
        let tokens = lex(source)?;
        let mut p = Parser { tokens, pos: 0, scope, end: source.len() };
        let root = p.expr()?;
        if let Some(tok) = p.peek() {
            return Err(Error::Syntax { pos: tok.pos, msg: format!("unexpected `{}`", tok.text()) });
        }
        Ok(CoefficientExpr { source: source.to_string(), root })
    }

    pub fn constant(value: f64) -> Self {
        CoefficientExpr { source: pretty_num(value), root: Node::Num(value) }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn from_node(root: Node) -> Self {
        let source = pretty(&root);
        CoefficientExpr { source, root }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Fully parenthesised rendering that re-parses to the same AST.
    pub fn pretty(&self) -> String {
        pretty(&self.root)
    }

    pub fn eval(&self, t: f64, x: &[f64], z: &[f64]) -> Result<f64> {
        let v = eval(&self.root, t, x, z)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Eval(format!("`{}` is not finite at t={t}, x={x:?}", self.source)))
        }
    }

    pub fn eval_t(&self, t: f64) -> Result<f64> {
        self.eval(t, &[], &[])
    }

    /// Value of a variable-free expression.
    pub fn as_constant(&self) -> Option<f64> {
        if uses(&self.root, &|_| true) {
            None
        } else {
            eval(&self.root, 0.0, &[], &[]).ok().filter(|v| v.is_finite())
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_constant() == Some(0.0)
    }

    pub fn depends_on_x(&self) -> bool {
        uses(&self.root, &|v| matches!(v, Var::X(_)))
    }

    pub fn depends_on_t(&self) -> bool {
        uses(&self.root, &|v| matches!(v, Var::T))
    }

    pub fn depends_on_z(&self) -> bool {
        uses(&self.root, &|v| matches!(v, Var::Z(_)))
    }

    /// Polynomial degree in the spatial variables, or `None` if not polynomial.
    pub fn x_degree(&self) -> Option<u32> {
        degree(&self.root)
    }
}

fn uses(node: &Node, pred: &dyn Fn(&Var) -> bool) -> bool {
    match node {
        Node::Num(_) | Node::Param(..) => false,
        Node::Var(v) => pred(v),
        Node::Neg(a) => uses(a, pred),
        Node::Bin(_, a, b) => uses(a, pred) || uses(b, pred),
        Node::Call(_, args) => args.iter().any(|a| uses(a, pred)),
    }
}

fn degree(node: &Node) -> Option<u32> {
    let has_x = |n: &Node| uses(n, &|v| matches!(v, Var::X(_)));
    match node {
        Node::Num(_) | Node::Param(..) => Some(0),
        Node::Var(Var::X(_)) => Some(1),
        Node::Var(_) => Some(0),
        Node::Neg(a) => degree(a),
        Node::Bin(BinOp::Add | BinOp::Sub, a, b) => Some(degree(a)?.max(degree(b)?)),
        Node::Bin(BinOp::Mul, a, b) => Some(degree(a)? + degree(b)?),
        Node::Bin(BinOp::Div, a, b) => {
            if has_x(b) {
                None
            } else {
                degree(a)
            }
        }
        Node::Bin(BinOp::Pow, a, b) => {
            if !has_x(a) {
                return if has_x(b) { None } else { Some(0) };
            }
            match b.as_ref() {
                Node::Num(k) if *k >= 0.0 && k.fract() == 0.0 && *k <= 16.0 => Some(degree(a)? * (*k as u32)),
                _ => None,
            }
        }
        Node::Call(_, args) => {
            if args.iter().any(has_x) {
                None
            } else {
                Some(0)
            }
        }
    }
}

fn eval(node: &Node, t: f64, x: &[f64], z: &[f64]) -> Result<f64> {
    Ok(match node {
        Node::Num(v) => *v,
        Node::Param(_, v) => *v,
        Node::Var(Var::T) => t,
        Node::Var(Var::X(k)) => *x
            .get(*k)
            .ok_or_else(|| Error::Eval(format!("x{} not supplied", k + 1)))?,
        Node::Var(Var::Z(k)) => *z
            .get(*k)
            .ok_or_else(|| Error::Eval(format!("z{} not supplied", k + 1)))?,
        Node::Neg(a) => -eval(a, t, x, z)?,
        Node::Bin(op, a, b) => {
            let l = eval(a, t, x, z)?;
            let r = eval(b, t, x, z)?;
            match op {
                BinOp::Add => l + r,
                BinOp::Sub => l - r,
                BinOp::Mul => l * r,
                BinOp::Div => {
                    if r == 0.0 {
                        return Err(Error::Eval("division by zero".into()));
                    }
                    l / r
                }
                BinOp::Pow => {
                    let v = l.powf(r);
                    if v.is_nan() {
                        return Err(Error::Eval(format!("{l}^{r} is undefined")));
                    }
                    v
                }
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], t, x, z)?;
            match f {
                Func::Exp => a.exp(),
                Func::Log => {
                    if a <= 0.0 {
                        return Err(Error::Eval(format!("log of non-positive value {a}")));
                    }
                    a.ln()
                }
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Sqrt => {
                    if a < 0.0 {
                        return Err(Error::Eval(format!("sqrt of negative value {a}")));
                    }
                    a.sqrt()
                }
                Func::Abs => a.abs(),
                Func::Tanh => a.tanh(),
                Func::Min => a.min(eval(&args[1], t, x, z)?),
                Func::Max => a.max(eval(&args[1], t, x, z)?),
            }
        }
    })
}

fn pretty_num(v: f64) -> String {
    format!("{v:?}")
}

fn pretty(node: &Node) -> String {
    match node {
        Node::Num(v) => pretty_num(*v),
        Node::Var(Var::T) => "t".into(),
        Node::Var(Var::X(k)) => format!("x{}", k + 1),
        Node::Var(Var::Z(k)) => format!("z{}", k + 1),
        Node::Param(name, _) => name.clone(),
        Node::Neg(a) => format!("(-{})", pretty(a)),
        Node::Bin(op, a, b) => format!("({} {} {})", pretty(a), op.symbol(), pretty(b)),
        Node::Call(f, args) => {
            let inner: Vec<String> = args.iter().map(pretty).collect();
            format!("{}({})", f.name(), inner.join(", "))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

impl Token {
    fn text(&self) -> String {
        match &self.tok {
            Tok::Num(v) => v.to_string(),
            Tok::Ident(s) => s.clone(),
            Tok::Sym(c) => c.to_string(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit())) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text
                .parse()
                .map_err(|_| Error::Syntax { pos: start, msg: format!("malformed number `{text}`") })?;
            if !v.is_finite() {
                return Err(Error::Syntax { pos: start, msg: format!("number `{text}` overflows") });
            }
            out.push(Token { tok: Tok::Num(v), pos: start });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(src[start..i].to_string()), pos: start });
        } else if "+-*/^(),".contains(c) {
            out.push(Token { tok: Tok::Sym(c), pos: i });
            i += 1;
        } else {
            return Err(Error::Syntax { pos: i, msg: format!("unexpected character `{c}`") });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    scope: &'a Scope,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if matches!(self.peek(), Some(Token { tok: Tok::Sym(s), .. }) if *s == c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Syntax { pos: self.here(), msg: format!("expected `{c}`") })
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinOp::Add
            } else if self.eat('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                BinOp::Mul
            } else if self.eat('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let Some(tok) = self.peek().cloned() else {
            return Err(Error::Syntax { pos: self.end, msg: "unexpected end of expression".into() });
        };
        self.pos += 1;
        match tok.tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::Sym('(') => {
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Tok::Sym(c) => Err(Error::Syntax { pos: tok.pos, msg: format!("unexpected `{c}`") }),
            Tok::Ident(name) => {
                if let Some(f) = Func::from_name(&name) {
                    self.expect('(')?;
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if args.len() != f.arity() {
                        return Err(Error::Syntax {
                            pos: tok.pos,
                            msg: format!("{} takes {} argument(s), got {}", name, f.arity(), args.len()),
                        });
                    }
                    return Ok(Node::Call(f, args));
                }
                self.resolve(&name, tok.pos)
            }
        }
    }

    fn resolve(&self, name: &str, pos: usize) -> Result<Node> {
        if name == "t" {
            return Ok(Node::Var(Var::T));
        }
        if let Some(v) = self.scope.params.get(name) {
            return Ok(Node::Param(name.to_string(), *v));
        }
        let indexed = |prefix: char, limit: usize| -> Option<usize> {
            let rest = name.strip_prefix(prefix)?;
            if rest.starts_with('0') {
                return None;
            }
            let k: usize = rest.parse().ok()?;
            (k >= 1 && k <= limit).then_some(k - 1)
        };
        if let Some(k) = indexed('x', self.scope.dim) {
            return Ok(Node::Var(Var::X(k)));
        }
        if let Some(k) = indexed('z', self.scope.jump_dim) {
            return Ok(Node::Var(Var::Z(k)));
        }
        Err(Error::UnknownIdentifier { name: name.to_string(), pos })
    }
}
