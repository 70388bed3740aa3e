//! Arithmetic expression DSL for user-defined scenario fields.
//!
//! Fields like the external velocity `V(t, x)`, interaction kernels `W(t, x)` /
//! `W'(t, x)` and mobilities `v(rho_1, ..., rho_S)` are written as plain
//! expression strings inside scenario files and parsed into [`FieldExpr`] trees.
//! Evaluation is deterministic IEEE double arithmetic; out-of-domain inputs
//! (log of a non-positive number, sqrt of a negative, division by zero, a
//! negative base raised to a fractional power, overflow to infinity) are
//! reported as errors instead of letting NaN/Inf propagate silently.
//!
//! Grammar: numbers (decimal and scientific), variables, `+ - * / ^`, unary
//! minus, parentheses, the constant `pi` and the functions `sin cos exp log
//! abs sign sqrt min max pow pos sinc`. Precedence `^` (right-assoc) > unary
//! minus > `* /` > `+ -`, so `-x^2` is `-(x^2)`. `log` is the natural
//! logarithm, `pos(y) = max(y, 0)`, `sign(0) = 0` and `sinc(y) = sin(pi y)/(pi y)`
//! with `sinc(0) = 1`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at offset {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at offset {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("function `{name}` expects {expected} argument(s), got {got} (offset {pos})")]
    WrongArity {
        name: String,
        expected: usize,
        got: usize,
        pos: usize,
    },
    #[error("expected {expected} binding(s), got {got}")]
    MissingBinding { expected: usize, got: usize },
    #[error("no binding supplied for variable `{0}`")]
    UnboundVariable(String),
    #[error("domain error in `{op}`: {msg}")]
    Domain { op: &'static str, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func1 {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sign,
    Sqrt,
    Pos,
    Sinc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func2 {
    Min,
    Max,
    Pow,
}

impl Func1 {
    fn name(self) -> &'static str {
        match self {
            Func1::Sin => "sin",
            Func1::Cos => "cos",
            Func1::Exp => "exp",
            Func1::Log => "log",
            Func1::Abs => "abs",
            Func1::Sign => "sign",
            Func1::Sqrt => "sqrt",
            Func1::Pos => "pos",
            Func1::Sinc => "sinc",
        }
    }
}

impl Func2 {
    fn name(self) -> &'static str {
        match self {
            Func2::Min => "min",
            Func2::Max => "max",
            Func2::Pow => "pow",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Num(f64),
    /// Index into the expression's variable list.
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

/// A parsed arithmetic expression over a fixed set of variables.
///
/// Immutable after parsing; evaluation is reentrant, so one `FieldExpr` can be
/// shared across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldExpr {
    root: Node,
    vars: Vec<String>,
}

impl FieldExpr {
    /// Parse `source` over the permitted variables `free_vars` (order defines
    /// the binding slots used by [`FieldExpr::eval`]).
    pub fn parse(source: &str, free_vars: &[&str]) -> Result<FieldExpr, ExprError> {
        let vars: Vec<String> = free_vars.iter().map(|s| s.to_string()).collect();
        let tokens = lex(source)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            vars: &vars,
            src_len: source.len(),
        };
        let root = p.expr()?;
        if p.pos < p.tokens.len() {
            let (_, at) = p.tokens[p.pos];
            return Err(ExprError::Syntax {
                pos: at,
                msg: "unexpected trailing input".into(),
            });
        }
        Ok(FieldExpr { root, vars })
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    /// True if the expression references the named variable anywhere.
    pub fn depends_on(&self, var: &str) -> bool {
        match self.vars.iter().position(|v| v == var) {
            Some(ix) => node_uses(&self.root, ix),
            None => false,
        }
    }

    /// Evaluate with positional bindings (one value per declared variable).
    pub fn eval(&self, values: &[f64]) -> Result<f64, ExprError> {
        if values.len() != self.vars.len() {
            return Err(ExprError::MissingBinding {
                expected: self.vars.len(),
                got: values.len(),
            });
        }
        eval_node(&self.root, values)
    }

    /// Evaluate with named bindings; every declared variable must be covered.
    pub fn eval_named(&self, bindings: &[(&str, f64)]) -> Result<f64, ExprError> {
        let mut values = Vec::with_capacity(self.vars.len());
        for v in &self.vars {
            match bindings.iter().find(|(name, _)| name == v) {
                Some((_, x)) => values.push(*x),
                None => return Err(ExprError::UnboundVariable(v.clone())),
            }
        }
        eval_node(&self.root, &values)
    }

    pub fn root(&self) -> &Node {
        &self.root
    }
}

impl fmt::Display for FieldExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root, &self.vars, 0)
    }
}

fn node_uses(n: &Node, ix: usize) -> bool {
    match n {
        Node::Num(_) => false,
        Node::Var(i) => *i == ix,
        Node::Neg(a) => node_uses(a, ix),
        Node::Bin(_, a, b) | Node::Call2(_, a, b) => node_uses(a, ix) || node_uses(b, ix),
        Node::Call1(_, a) => node_uses(a, ix),
    }
}

fn finite(op: &'static str, v: f64) -> Result<f64, ExprError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ExprError::Domain {
            op,
            msg: "non-finite result".into(),
        })
    }
}

fn pow_checked(x: f64, y: f64) -> Result<f64, ExprError> {
    if x < 0.0 && y.fract() != 0.0 {
        return Err(ExprError::Domain {
            op: "pow",
            msg: format!("negative base {x} with non-integer exponent {y}"),
        });
    }
    if x == 0.0 && y < 0.0 {
        return Err(ExprError::Domain {
            op: "pow",
            msg: "zero base with negative exponent".into(),
        });
    }
    finite("pow", x.powf(y))
}

fn eval_node(n: &Node, vals: &[f64]) -> Result<f64, ExprError> {
    match n {
        Node::Num(v) => Ok(*v),
        Node::Var(i) => Ok(vals[*i]),
        Node::Neg(a) => Ok(-eval_node(a, vals)?),
        Node::Bin(op, a, b) => {
            let x = eval_node(a, vals)?;
            let y = eval_node(b, vals)?;
            match op {
                BinOp::Add => finite("+", x + y),
                BinOp::Sub => finite("-", x - y),
                BinOp::Mul => finite("*", x * y),
                BinOp::Div => {
                    if y == 0.0 {
                        Err(ExprError::Domain {
                            op: "/",
                            msg: "division by zero".into(),
                        })
                    } else {
                        finite("/", x / y)
                    }
                }
                BinOp::Pow => pow_checked(x, y),
            }
        }
        Node::Call1(f, a) => {
            let x = eval_node(a, vals)?;
            match f {
                Func1::Sin => Ok(x.sin()),
                Func1::Cos => Ok(x.cos()),
                Func1::Exp => finite("exp", x.exp()),
                Func1::Log => {
                    if x <= 0.0 {
                        Err(ExprError::Domain {
                            op: "log",
                            msg: format!("log of non-positive value {x}"),
                        })
                    } else {
                        Ok(x.ln())
                    }
                }
                Func1::Abs => Ok(x.abs()),
                Func1::Sign => Ok(if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }),
                Func1::Sqrt => {
                    if x < 0.0 {
                        Err(ExprError::Domain {
                            op: "sqrt",
                            msg: format!("sqrt of negative value {x}"),
                        })
                    } else {
                        Ok(x.sqrt())
                    }
                }
                Func1::Pos => Ok(if x > 0.0 { x } else { 0.0 }),
                Func1::Sinc => {
                    if x == 0.0 {
                        Ok(1.0)
                    } else {
                        let p = std::f64::consts::PI * x;
                        Ok(p.sin() / p)
                    }
                }
            }
        }
        Node::Call2(f, a, b) => {
            let x = eval_node(a, vals)?;
            let y = eval_node(b, vals)?;
            match f {
                Func2::Min => Ok(x.min(y)),
                Func2::Max => Ok(x.max(y)),
                Func2::Pow => pow_checked(x, y),
            }
        }
    }
}

// Precedence levels used for parsing and for minimal-parenthesis printing.
const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn prec(n: &Node) -> u8 {
    match n {
        Node::Num(_) | Node::Var(_) | Node::Call1(..) | Node::Call2(..) => PREC_ATOM,
        Node::Neg(_) => PREC_NEG,
        Node::Bin(BinOp::Pow, ..) => PREC_POW,
        Node::Bin(BinOp::Mul, ..) | Node::Bin(BinOp::Div, ..) => PREC_MUL,
        Node::Bin(BinOp::Add, ..) | Node::Bin(BinOp::Sub, ..) => PREC_ADD,
    }
}

fn write_node(
    f: &mut fmt::Formatter<'_>,
    n: &Node,
    vars: &[String],
    _depth: usize,
) -> fmt::Result {
    let paren = |f: &mut fmt::Formatter<'_>, child: &Node, need: bool| -> fmt::Result {
        if need {
            write!(f, "(")?;
            write_node(f, child, vars, 0)?;
            write!(f, ")")
        } else {
            write_node(f, child, vars, 0)
        }
    };
    match n {
        Node::Num(v) => write!(f, "{v}"),
        Node::Var(i) => write!(f, "{}", vars[*i]),
        Node::Neg(a) => {
            write!(f, "-")?;
            paren(f, a, prec(a) < PREC_NEG)
        }
        Node::Bin(op, a, b) => {
            let (sym, p) = match op {
                BinOp::Add => ("+", PREC_ADD),
                BinOp::Sub => ("-", PREC_ADD),
                BinOp::Mul => ("*", PREC_MUL),
                BinOp::Div => ("/", PREC_MUL),
                BinOp::Pow => ("^", PREC_POW),
            };
            if *op == BinOp::Pow {
                // Right-associative; the exponent is parsed at unary level.
                paren(f, a, prec(a) <= p)?;
                write!(f, "{sym}")?;
                paren(f, b, prec(b) < PREC_NEG)
            } else {
                paren(f, a, prec(a) < p)?;
                write!(f, " {sym} ")?;
                paren(f, b, prec(b) <= p)
            }
        }
        Node::Call1(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(f, a, vars, 0)?;
            write!(f, ")")
        }
        Node::Call2(func, a, b) => {
            write!(f, "{}(", func.name())?;
            write_node(f, a, vars, 0)?;
            write!(f, ", ")?;
            write_node(f, b, vars, 0)?;
            write!(f, ")")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push((Tok::Plus, i));
                i += 1;
            }
            '-' => {
                out.push((Tok::Minus, i));
                i += 1;
            }
            '*' => {
                out.push((Tok::Star, i));
                i += 1;
            }
            '/' => {
                out.push((Tok::Slash, i));
                i += 1;
            }
            '^' => {
                out.push((Tok::Caret, i));
                i += 1;
            }
            '(' => {
                out.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                out.push((Tok::RParen, i));
                i += 1;
            }
            ',' => {
                out.push((Tok::Comma, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
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
                let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                    pos: start,
                    msg: format!("invalid number literal `{text}`"),
                })?;
                out.push((Tok::Num(v), start));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
            }
            _ => {
                return Err(ExprError::Syntax {
                    pos: i,
                    msg: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
    vars: &'a [String],
    src_len: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn here(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|&(_, p)| p)
            .unwrap_or(self.src_len)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: &Tok, what: &str) -> Result<(), ExprError> {
        match self.peek() {
            Some(tok) if tok == t => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(ExprError::Syntax {
                pos: self.here(),
                msg: format!("expected {what}"),
            }),
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Node::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Node::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Node::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Node::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if let Some(Tok::Minus) = self.peek() {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.pos += 1;
            // Right-associative; allow a unary minus in the exponent.
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let at = self.here();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Node::Num(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if let Some(Tok::LParen) = self.peek() {
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while let Some(Tok::Comma) = self.peek() {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(&Tok::RParen, "`)`")?;
                    return make_call(&name, args, at);
                }
                if name == "pi" {
                    return Ok(Node::Num(std::f64::consts::PI));
                }
                match self.vars.iter().position(|v| v == &name) {
                    Some(ix) => Ok(Node::Var(ix)),
                    None => Err(ExprError::UnknownIdentifier { name, pos: at }),
                }
            }
            _ => Err(ExprError::Syntax {
                pos: at,
                msg: "expected a number, variable, function call or `(`".into(),
            }),
        }
    }
}

fn make_call(name: &str, mut args: Vec<Node>, at: usize) -> Result<Node, ExprError> {
    let f1 = match name {
        "sin" => Some(Func1::Sin),
        "cos" => Some(Func1::Cos),
        "exp" => Some(Func1::Exp),
        "log" => Some(Func1::Log),
        "abs" => Some(Func1::Abs),
        "sign" => Some(Func1::Sign),
        "sqrt" => Some(Func1::Sqrt),
        "pos" => Some(Func1::Pos),
        "sinc" => Some(Func1::Sinc),
        _ => None,
    };
    if let Some(f) = f1 {
        if args.len() != 1 {
            return Err(ExprError::WrongArity {
                name: name.into(),
                expected: 1,
                got: args.len(),
                pos: at,
            });
        }
        return Ok(Node::Call1(f, Box::new(args.pop().unwrap())));
    }
    let f2 = match name {
        "min" => Some(Func2::Min),
        "max" => Some(Func2::Max),
        "pow" => Some(Func2::Pow),
        _ => None,
    };
    if let Some(f) = f2 {
        if args.len() != 2 {
            return Err(ExprError::WrongArity {
                name: name.into(),
                expected: 2,
                got: args.len(),
                pos: at,
            });
        }
        let b = args.pop().unwrap();
        let a = args.pop().unwrap();
        return Ok(Node::Call2(f, Box::new(a), Box::new(b)));
    }
    Err(ExprError::UnknownIdentifier {
        name: name.into(),
        pos: at,
    })
}
