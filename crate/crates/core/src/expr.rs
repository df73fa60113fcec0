//! Scalar expressions in `x, y, t, u` with exact symbolic `u`-derivatives.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'pi' | var | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-u^2`
//! means `-(u^2)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    Y,
    T,
    U,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Tanh,
    Abs,
    /// Derivative of `abs`; not exposed by the parser.
    Sign,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Sign => "sign",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Arc<Expr>),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    Pow(Arc<Expr>, Arc<Expr>),
    Call(Func, Arc<Expr>),
}

/// Evaluation point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Env {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub u: f64,
}

impl Env {
    pub fn new(x: [f64; 2], t: f64, u: f64) -> Self {
        Self {
            x: x[0],
            y: x[1],
            t,
            u,
        }
    }
}

fn c(v: f64) -> Expr {
    Expr::Const(v)
}

fn arc(e: Expr) -> Arc<Expr> {
    Arc::new(e)
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let mut p = Parser { src, pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < src.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn constant(v: f64) -> Expr {
        c(v)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.depends_on(var) || b.depends_on(var),
        }
    }

    pub fn eval(&self, env: &Env) -> std::result::Result<f64, String> {
        Ok(match self {
            Expr::Const(v) => *v,
            Expr::Var(Var::X) => env.x,
            Expr::Var(Var::Y) => env.y,
            Expr::Var(Var::T) => env.t,
            Expr::Var(Var::U) => env.u,
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Add(a, b) => a.eval(env)? + b.eval(env)?,
            Expr::Sub(a, b) => a.eval(env)? - b.eval(env)?,
            Expr::Mul(a, b) => a.eval(env)? * b.eval(env)?,
            Expr::Div(a, b) => {
                let d = b.eval(env)?;
                if d == 0.0 {
                    return Err("division by zero".into());
                }
                a.eval(env)? / d
            }
            Expr::Pow(a, b) => {
                let base = a.eval(env)?;
                if let Some(n) = b.as_const().filter(|n| n.fract() == 0.0 && n.abs() < 1e6) {
                    if base == 0.0 && n < 0.0 {
                        return Err("zero to a negative power".into());
                    }
                    base.powi(n as i32)
                } else {
                    let e = b.eval(env)?;
                    if base < 0.0 && e.fract() != 0.0 {
                        return Err("negative base to a fractional power".into());
                    }
                    if base == 0.0 && e < 0.0 {
                        return Err("zero to a negative power".into());
                    }
                    base.powf(e)
                }
            }
            Expr::Call(f, a) => {
                let v = a.eval(env)?;
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Ln => {
                        if v <= 0.0 {
                            return Err(format!("ln of nonpositive value {v}"));
                        }
                        v.ln()
                    }
                    Func::Tanh => v.tanh(),
                    Func::Abs => v.abs(),
                    Func::Sign => {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                }
            }
        })
    }

    /// Symbolic derivative with respect to `var`, simplified.
    pub fn derivative(&self, var: Var) -> Expr {
        if !self.depends_on(var) {
            return c(0.0);
        }
        
        match self {
            Expr::Const(_) => c(0.0),
            Expr::Var(v) => c(if *v == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.derivative(var)),
            Expr::Add(a, b) => add(a.derivative(var), b.derivative(var)),
            Expr::Sub(a, b) => sub(a.derivative(var), b.derivative(var)),
            Expr::Mul(a, b) => add(
                mul(a.derivative(var), (**b).clone()),
                mul((**a).clone(), b.derivative(var)),
            ),
            Expr::Div(a, b) => {
                let num = sub(
                    mul(a.derivative(var), (**b).clone()),
                    mul((**a).clone(), b.derivative(var)),
                );
                div(num, pow((**b).clone(), c(2.0)))
            }
            Expr::Pow(a, b) => {
                if !b.depends_on(var) {
                    // d(a^n) = n a^(n-1) a'
                    let n = (**b).clone();
                    let nm1 = sub(n.clone(), c(1.0));
                    mul(mul(n, pow((**a).clone(), nm1)), a.derivative(var))
                } else {
                    // d(a^b) = a^b (b' ln a + b a'/a)
                    let lna = call(Func::Ln, (**a).clone());
                    let inner = add(
                        mul(b.derivative(var), lna),
                        div(mul((**b).clone(), a.derivative(var)), (**a).clone()),
                    );
                    mul(self.clone(), inner)
                }
            }
            Expr::Call(f, a) => {
                let inner = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, inner),
                    Func::Cos => neg(call(Func::Sin, inner)),
                    Func::Exp => call(Func::Exp, inner),
                    Func::Ln => div(c(1.0), inner),
                    Func::Tanh => sub(c(1.0), pow(call(Func::Tanh, inner), c(2.0))),
                    Func::Abs => call(Func::Sign, inner),
                    Func::Sign => c(0.0),
                };
                mul(outer, a.derivative(var))
            }
        }
    }

    /// Replaces every occurrence of `var` by `with`.
    pub fn substitute(&self, var: Var, with: &Expr) -> Expr {
        match self {
            Expr::Const(_) => self.clone(),
            Expr::Var(v) => {
                if *v == var {
                    with.clone()
                } else {
                    self.clone()
                }
            }
            Expr::Neg(a) => neg(a.substitute(var, with)),
            Expr::Add(a, b) => add(a.substitute(var, with), b.substitute(var, with)),
            Expr::Sub(a, b) => sub(a.substitute(var, with), b.substitute(var, with)),
            Expr::Mul(a, b) => mul(a.substitute(var, with), b.substitute(var, with)),
            Expr::Div(a, b) => div(a.substitute(var, with), b.substitute(var, with)),
            Expr::Pow(a, b) => pow(a.substitute(var, with), b.substitute(var, with)),
            Expr::Call(f, a) => call(*f, a.substitute(var, with)),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Neg(a) | Expr::Call(_, a) => 1 + a.node_count(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => 1 + a.node_count() + b.node_count(),
        }
    }
}

// Smart constructors with light simplification: constant folding and the
// 0/1 identities. Enough to keep repeated u-derivatives of polynomials small.

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(v) => c(-v),
        Expr::Neg(inner) => (*inner).clone(),
        _ => Expr::Neg(arc(a)),
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => c(x + y),
        (Some(0.0), _) => b,
        (_, Some(0.0)) => a,
        _ => Expr::Add(arc(a), arc(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => c(x - y),
        (Some(0.0), _) => neg(b),
        (_, Some(0.0)) => a,
        _ => Expr::Sub(arc(a), arc(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => c(x * y),
        (Some(0.0), _) | (_, Some(0.0)) => c(0.0),
        (Some(1.0), _) => b,
        (_, Some(1.0)) => a,
        (Some(-1.0), _) => neg(b),
        (_, Some(-1.0)) => neg(a),
        // fold constant factors: k * (m * e) = (k m) * e
        (Some(x), None) => match &b {
            Expr::Mul(l, r) if l.as_const().is_some() => {
                mul(c(x * l.as_const().unwrap_or(1.0)), (**r).clone())
            }
            _ => Expr::Mul(arc(a), arc(b)),
        },
        (None, Some(_)) => mul(b, a),
        _ => Expr::Mul(arc(a), arc(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) if y != 0.0 => c(x / y),
        (Some(0.0), _) => c(0.0),
        (_, Some(1.0)) => a,
        _ => Expr::Div(arc(a), arc(b)),
    }
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) if x > 0.0 || y.fract() == 0.0 => c(x.powf(y)),
        (_, Some(0.0)) => c(1.0),
        (_, Some(1.0)) => a,
        _ => Expr::Pow(arc(a), arc(b)),
    }
}

pub fn call(f: Func, a: Expr) -> Expr {
    match (f, a.as_const()) {
        (Func::Ln, Some(v)) if v <= 0.0 => Expr::Call(f, arc(a)),
        (_, Some(v)) => c(Expr::Call(f, arc(c(v)))
            .eval(&Env::default())
            .unwrap_or(f64::NAN)),
        _ => Expr::Call(f, arc(a)),
    }
}

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) | Expr::Div(..) => 2,
        Expr::Neg(_) => 3,
        Expr::Pow(..) => 4,
        Expr::Const(v) if *v < 0.0 => 3,
        _ => 5,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| -> fmt::Result {
            if prec(e) < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Const(v) => {
                if *v == std::f64::consts::PI {
                    write!(f, "pi")
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Var(v) => write!(
                f,
                "{}",
                match v {
                    Var::X => "x",
                    Var::Y => "y",
                    Var::T => "t",
                    Var::U => "u",
                }
            ),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, 4)
            }
            Expr::Add(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " + ")?;
                wrap(f, b, 2)
            }
            Expr::Sub(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " - ")?;
                wrap(f, b, 2)
            }
            Expr::Mul(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "*")?;
                wrap(f, b, 3)
            }
            Expr::Div(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "/")?;
                wrap(f, b, 4)
            }
            Expr::Pow(a, b) => {
                wrap(f, a, 5)?;
                write!(f, "^")?;
                wrap(f, b, 4)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(ch) = self.src[self.pos..].chars().next() {
            if ch.is_whitespace() {
                self.pos += ch.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, ch: char) -> bool {
        if self.peek() == Some(ch) {
            self.pos += ch.len_utf8();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(arc(lhs), arc(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(arc(lhs), arc(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(arc(lhs), arc(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(arc(lhs), arc(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(neg(self.unary()?));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Expr::Pow(arc(base), arc(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some(ch) = self.peek() else {
            return Err(self.err("unexpected end of input"));
        };
        if ch == '(' {
            self.pos += 1;
            let e = self.expr()?;
            if !self.eat(')') {
                return Err(self.err("expected ')'"));
            }
            return Ok(e);
        }
        if ch.is_ascii_digit() || ch == '.' {
            return self.number();
        }
        if ch.is_ascii_alphabetic() || ch == '_' {
            let start = self.pos;
            while let Some(ch) = self.src[self.pos..].chars().next() {
                if ch.is_ascii_alphanumeric() || ch == '_' {
                    self.pos += 1;
                } else {
                    break;
                }
            }
            let name = &self.src[start..self.pos];
            return match name {
                "x" => Ok(Expr::Var(Var::X)),
                "y" => Ok(Expr::Var(Var::Y)),
                "t" => Ok(Expr::Var(Var::T)),
                "u" => Ok(Expr::Var(Var::U)),
                "pi" => Ok(c(std::f64::consts::PI)),
                _ => {
                    let Some(func) = Func::from_name(name) else {
                        self.pos = start;
                        return Err(self.err(&format!("unknown identifier '{name}'")));
                    };
                    if !self.eat('(') {
                        return Err(self.err("expected '(' after function name"));
                    }
                    let arg = self.expr()?;
                    if !self.eat(')') {
                        return Err(self.err("expected ')'"));
                    }
                    Ok(Expr::Call(func, arc(arg)))
                }
            };
        }
        Err(self.err(&format!("unexpected character '{ch}'")))
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
            i += 1;
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                j += 1;
            }
            if j < bytes.len() && bytes[j].is_ascii_digit() {
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = &self.src[start..i];
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = i;
                Ok(c(v))
            }
            Err(_) => Err(self.err(&format!("malformed number '{text}'"))),
        }
    }
}
