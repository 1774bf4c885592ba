//! A small expression language for user-supplied potentials, fields and
//! actions.
//!
//! Expressions are parsed into an [`Expr`] tree over the variables `t`,
//! `q1..qs` (aliases `x`, `y`, `z` when `s <= 3`), `p1..ps` and, for complete
//! integrals, the constants `b1..bs`. Trees can be evaluated against
//! [`Bindings`] and differentiated symbolically with [`Expr::derivative`].

use std::fmt;

use crate::error::{Error, Result};

/// A free variable of an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    /// Zero-based coordinate index.
    Q(usize),
    /// Zero-based momentum index.
    P(usize),
    /// Zero-based index into the constants of a complete integral.
    B(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => write!(f, "t"),
            Var::Q(i) => write!(f, "q{}", i + 1),
            Var::P(i) => write!(f, "p{}", i + 1),
            Var::B(i) => write!(f, "b{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
    /// Internal only: produced by differentiating `abs`, `min` and `max`.
    Sign,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Sign => "sign",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// The identifiers an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Symbols {
    pub dims: usize,
    pub momenta: bool,
    pub betas: bool,
}

impl Symbols {
    /// `t`, `q1..qs` and `p1..ps`.
    pub fn phase(dims: usize) -> Self {
        Symbols {
            dims,
            momenta: true,
            betas: false,
        }
    }

    /// Phase-space symbols plus the complete-integral constants `b1..bs`.
    pub fn with_betas(dims: usize) -> Self {
        Symbols {
            dims,
            momenta: true,
            betas: true,
        }
    }

    fn resolve(&self, name: &str) -> Option<Var> {
        if name == "t" {
            return Some(Var::T);
        }
        if self.dims <= 3 {
            match name {
                "x" => return Some(Var::Q(0)),
                "y" if self.dims >= 2 => return Some(Var::Q(1)),
                "z" if self.dims >= 3 => return Some(Var::Q(2)),
                _ => {}
            }
        }
        let (family, digits) = name.split_at(1.min(name.len()));
        let index: usize = digits.parse().ok()?;
        if index == 0 || index > self.dims || digits.starts_with('0') {
            return None;
        }
        match family {
            "q" => Some(Var::Q(index - 1)),
            "p" if self.momenta => Some(Var::P(index - 1)),
            "b" if self.betas => Some(Var::B(index - 1)),
            _ => None,
        }
    }
}

/// Values for the free variables of an expression.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings<'a> {
    pub t: f64,
    pub q: &'a [f64],
    pub p: &'a [f64],
    pub beta: &'a [f64],
}

impl<'a> Bindings<'a> {
    pub fn new(t: f64, q: &'a [f64], p: &'a [f64]) -> Self {
        Bindings {
            t,
            q,
            p,
            beta: &[],
        }
    }

    pub fn with_beta(mut self, beta: &'a [f64]) -> Self {
        self.beta = beta;
        self
    }

    fn get(&self, var: Var) -> Result<f64> {
        let found = match var {
            Var::T => Some(self.t),
            Var::Q(i) => self.q.get(i).copied(),
            Var::P(i) => self.p.get(i).copied(),
            Var::B(i) => self.beta.get(i).copied(),
        };
        found.ok_or_else(|| Error::Unbound(var.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer<'s> {
    src: &'s str,
    pos: usize,
}

impl<'s> Lexer<'s> {
    fn tokens(src: &'s str) -> Result<Vec<(Tok, usize)>> {
        let mut lx = Lexer { src, pos: 0 };
        let mut out = Vec::new();
        loop {
            let (tok, at) = lx.next()?;
            let end = tok == Tok::End;
            out.push((tok, at));
            if end {
                return Ok(out);
            }
        }
    }

    fn next(&mut self) -> Result<(Tok, usize)> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(self.pos) else {
            return Ok((Tok::End, start));
        };
        if c.is_ascii_digit() || c == b'.' {
            return self.number(start);
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while self.pos < bytes.len()
                && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_')
            {
                self.pos += 1;
            }
            return Ok((Tok::Ident(self.src[start..self.pos].to_string()), start));
        }
        self.pos += 1;
        let tok = match c {
            b'+' | b'-' | b'*' | b'/' | b'^' => Tok::Op(c as char),
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            _ => {
                let ch = self.src[start..].chars().next().unwrap_or('?');
                return Err(Error::Parse {
                    offset: start,
                    msg: format!("unexpected character `{ch}`"),
                });
            }
        };
        Ok((tok, start))
    }

    fn number(&mut self, start: usize) -> Result<(Tok, usize)> {
        let bytes = self.src.as_bytes();
        let digits = |pos: &mut usize| {
            while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
                *pos += 1;
            }
        };
        digits(&mut self.pos);
        if self.pos < bytes.len() && bytes[self.pos] == b'.' {
            self.pos += 1;
            digits(&mut self.pos);
        }
        if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
            let mut look = self.pos + 1;
            if look < bytes.len() && (bytes[look] == b'+' || bytes[look] == b'-') {
                look += 1;
            }
            if look < bytes.len() && bytes[look].is_ascii_digit() {
                self.pos = look;
                digits(&mut self.pos);
            }
        }
        let text = &self.src[start..self.pos];
        text.parse::<f64>()
            .map(|v| (Tok::Num(v), start))
            .map_err(|_| Error::Parse {
                offset: start,
                msg: format!("malformed number `{text}`"),
            })
    }
}

struct Parser<'s> {
    toks: Vec<(Tok, usize)>,
    at: usize,
    symbols: Symbols,
    src: &'s str,
}

impl<'s> Parser<'s> {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn offset(&self) -> usize {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.offset(),
            msg: msg.into(),
        })
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Tok::Op(op @ ('+' | '-')) = *self.peek() {
            self.bump();
            let rhs = self.term()?;
            lhs = if op == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Tok::Op(op @ ('*' | '/')) = *self.peek() {
            self.bump();
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if *self.peek() == Tok::Op('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if *self.peek() == Tok::Op('+') {
            self.bump();
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            // right-associative; the exponent may carry its own sign
            let exponent = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        let (tok, at) = self.bump();
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                if *self.peek() != Tok::RParen {
                    return self.fail("expected `)`");
                }
                self.bump();
                Ok(inner)
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    return self.call(&name, at);
                }
                if name == "pi" {
                    return Ok(Expr::Num(std::f64::consts::PI));
                }
                match self.symbols.resolve(&name) {
                    Some(var) => Ok(Expr::Var(var)),
                    None => Err(Error::Parse {
                        offset: at,
                        msg: format!("unknown identifier `{name}`"),
                    }),
                }
            }
            Tok::End => Err(Error::Parse {
                offset: at,
                msg: "unexpected end of expression".into(),
            }),
            other => Err(Error::Parse {
                offset: at,
                msg: format!("unexpected token {}", describe(&other, self.src, at)),
            }),
        }
    }

    fn call(&mut self, name: &str, at: usize) -> Result<Expr> {
        let Some(func) = Func::lookup(name) else {
            return Err(Error::Parse {
                offset: at,
                msg: format!("unknown function `{name}`"),
            });
        };
        self.bump(); // (
        let mut args = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                args.push(self.expr()?);
                match self.peek() {
                    Tok::Comma => {
                        self.bump();
                    }
                    Tok::RParen => break,
                    _ => return self.fail("expected `,` or `)` in argument list"),
                }
            }
        }
        self.bump(); // )
        if args.len() != func.arity() {
            return Err(Error::Parse {
                offset: at,
                msg: format!(
                    "function `{name}` takes {} argument(s), got {}",
                    func.arity(),
                    args.len()
                ),
            });
        }
        Ok(Expr::Call(func, args))
    }
}

fn describe(tok: &Tok, src: &str, at: usize) -> String {
    match tok {
        Tok::Op(c) => format!("`{c}`"),
        Tok::RParen => "`)`".into(),
        Tok::Comma => "`,`".into(),
        _ => format!("near `{}`", &src[at..src.len().min(at + 8)]),
    }
}

/// Parses `text` against the given symbol table.
///
/// Precedence from tightest: `^` (right-associative), unary minus, `* /`,
/// `+ -`. Errors carry the byte offset of the fault.
pub fn parse(text: &str, symbols: Symbols) -> Result<Expr> {
    let toks = Lexer::tokens(text)?;
    let mut parser = Parser {
        toks,
        at: 0,
        symbols,
        src: text,
    };
    let e = parser.expr()?;
    if *parser.peek() != Tok::End {
        let at = parser.offset();
        let tok = parser.peek().clone();
        return Err(Error::Parse {
            offset: at,
            msg: format!("trailing input: unexpected token {}", describe(&tok, text, at)),
        });
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Evaluation

impl Expr {
    pub fn eval(&self, b: &Bindings<'_>) -> Result<f64> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(v) => b.get(*v)?,
            Expr::Neg(a) => -a.eval(b)?,
            Expr::Add(l, r) => l.eval(b)? + r.eval(b)?,
            Expr::Sub(l, r) => l.eval(b)? - r.eval(b)?,
            Expr::Mul(l, r) => l.eval(b)? * r.eval(b)?,
            Expr::Div(l, r) => l.eval(b)? / r.eval(b)?,
            Expr::Pow(l, r) => pow(l.eval(b)?, r.eval(b)?),
            Expr::Call(f, args) => {
                let x = args[0].eval(b)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Tan => x.tan(),
                    Func::Exp => x.exp(),
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(Error::Domain {
                                func: "log",
                                value: x,
                            });
                        }
                        x.ln()
                    }
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(Error::Domain {
                                func: "sqrt",
                                value: x,
                            });
                        }
                        x.sqrt()
                    }
                    Func::Abs => x.abs(),
                    Func::Sign => {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    Func::Min => x.min(args[1].eval(b)?),
                    Func::Max => x.max(args[1].eval(b)?),
                }
            }
        })
    }

    /// True when the tree references `var`.
    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) => a.depends_on(var),
            Expr::Add(l, r) | Expr::Sub(l, r) | Expr::Mul(l, r) | Expr::Div(l, r) | Expr::Pow(l, r) => {
                l.depends_on(var) || r.depends_on(var)
            }
            Expr::Call(_, args) => args.iter().any(|a| a.depends_on(var)),
        }
    }

    /// Symbolic partial derivative with respect to `var`, lightly simplified.
    pub fn derivative(&self, var: Var) -> Expr {
        use Expr::*;
        if !self.depends_on(var) {
            return Num(0.0);
        }
        match self {
            Num(_) => Num(0.0),
            Var(v) => Num(if *v == var { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.derivative(var)),
            Add(l, r) => add(l.derivative(var), r.derivative(var)),
            Sub(l, r) => sub(l.derivative(var), r.derivative(var)),
            Mul(l, r) => add(
                mul(l.derivative(var), (**r).clone()),
                mul((**l).clone(), r.derivative(var)),
            ),
            Div(l, r) => {
                // (l' r - l r') / r^2
                let num = sub(
                    mul(l.derivative(var), (**r).clone()),
                    mul((**l).clone(), r.derivative(var)),
                );
                div(num, pow_e((**r).clone(), Num(2.0)))
            }
            Pow(base, exponent) => {
                if !exponent.depends_on(var) {
                    // c u^(c-1) u'
                    let reduced = sub((**exponent).clone(), Num(1.0));
                    mul(
                        mul((**exponent).clone(), pow_e((**base).clone(), reduced)),
                        base.derivative(var),
                    )
                } else {
                    // u^v (v' ln u + v u'/u)
                    let log_term = mul(
                        exponent.derivative(var),
                        call(Func::Log, vec![(**base).clone()]),
                    );
                    let ratio = div(
                        mul((**exponent).clone(), base.derivative(var)),
                        (**base).clone(),
                    );
                    mul(self.clone(), add(log_term, ratio))
                }
            }
            Call(f, args) => {
                let u = &args[0];
                let du = u.derivative(var);
                let outer = match f {
                    Func::Sin => call(Func::Cos, vec![u.clone()]),
                    Func::Cos => neg(call(Func::Sin, vec![u.clone()])),
                    Func::Tan => add(Num(1.0), pow_e(call(Func::Tan, vec![u.clone()]), Num(2.0))),
                    Func::Exp => call(Func::Exp, vec![u.clone()]),
                    Func::Log => div(Num(1.0), u.clone()),
                    Func::Sqrt => div(Num(0.5), call(Func::Sqrt, vec![u.clone()])),
                    Func::Abs => call(Func::Sign, vec![u.clone()]),
                    Func::Sign => return Num(0.0),
                    Func::Min | Func::Max => {
                        // (a'+b')/2 -+ sign(a-b)(a'-b')/2
                        let v = &args[1];
                        let dv = v.derivative(var);
                        let mean = mul(Num(0.5), add(du.clone(), dv.clone()));
                        let jump = mul(
                            mul(Num(0.5), call(Func::Sign, vec![sub(u.clone(), v.clone())])),
                            sub(du, dv),
                        );
                        return if *f == Func::Max {
                            add(mean, jump)
                        } else {
                            sub(mean, jump)
                        };
                    }
                };
                mul(outer, du)
            }
        }
    }
}

fn pow(base: f64, exponent: f64) -> f64 {
    if exponent == 2.0 {
        base * base
    } else if exponent.fract() == 0.0 && exponent.abs() <= 64.0 {
        base.powi(exponent as i32)
    } else {
        base.powf(exponent)
    }
}

fn as_num(e: &Expr) -> Option<f64> {
    match e {
        Expr::Num(v) => Some(*v),
        _ => None,
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn add(l: Expr, r: Expr) -> Expr {
    match (as_num(&l), as_num(&r)) {
        (Some(a), Some(b)) => Expr::Num(a + b),
        (Some(a), _) if a == 0.0 => r,
        (_, Some(b)) if b == 0.0 => l,
        _ => Expr::Add(Box::new(l), Box::new(r)),
    }
}

fn sub(l: Expr, r: Expr) -> Expr {
    match (as_num(&l), as_num(&r)) {
        (Some(a), Some(b)) => Expr::Num(a - b),
        (Some(a), _) if a == 0.0 => neg(r),
        (_, Some(b)) if b == 0.0 => l,
        _ => Expr::Sub(Box::new(l), Box::new(r)),
    }
}

fn mul(l: Expr, r: Expr) -> Expr {
    match (as_num(&l), as_num(&r)) {
        (Some(a), Some(b)) => Expr::Num(a * b),
        (Some(a), _) if a == 0.0 => Expr::Num(0.0),
        (_, Some(b)) if b == 0.0 => Expr::Num(0.0),
        (Some(a), _) if a == 1.0 => r,
        (_, Some(b)) if b == 1.0 => l,
        (Some(a), _) if a == -1.0 => neg(r),
        (_, Some(b)) if b == -1.0 => neg(l),
        _ => Expr::Mul(Box::new(l), Box::new(r)),
    }
}

fn div(l: Expr, r: Expr) -> Expr {
    match (as_num(&l), as_num(&r)) {
        (Some(a), _) if a == 0.0 => Expr::Num(0.0),
        (_, Some(b)) if b == 1.0 => l,
        _ => Expr::Div(Box::new(l), Box::new(r)),
    }
}

fn pow_e(base: Expr, exponent: Expr) -> Expr {
    match (as_num(&base), as_num(&exponent)) {
        (_, Some(e)) if e == 0.0 => Expr::Num(1.0),
        (_, Some(e)) if e == 1.0 => base,
        (Some(b), Some(e)) => Expr::Num(pow(b, e)),
        _ => Expr::Pow(Box::new(base), Box::new(exponent)),
    }
}

fn call(f: Func, args: Vec<Expr>) -> Expr {
    Expr::Call(f, args)
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if *v < 0.0 {
                    write!(f, "({v:?})")
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(l, r) => write!(f, "({l} + {r})"),
            Expr::Sub(l, r) => write!(f, "({l} - {r})"),
            Expr::Mul(l, r) => write!(f, "({l} * {r})"),
            Expr::Div(l, r) => write!(f, "({l} / {r})"),
            Expr::Pow(l, r) => write!(f, "({l} ^ {r})"),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(text: &str, x: f64) -> f64 {
        let e = parse(text, Symbols::phase(1)).unwrap();
        e.eval(&Bindings::new(0.0, &[x], &[0.0])).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval1("x^2/2", 2.0), 2.0);
        assert_eq!(eval1("-x^2", 3.0), -9.0);
        assert_eq!(eval1("2^3^2", 0.0), 512.0);
        assert_eq!(eval1("1 - 2 - 3", 0.0), -4.0);
        assert_eq!(eval1("8 / 4 / 2", 0.0), 1.0);
        assert_eq!(eval1("2^-1", 0.0), 0.5);
        assert_eq!(eval1("-(1+2)*3", 0.0), -9.0);
        assert_eq!(eval1("1.5e1 + .5", 0.0), 15.5);
    }

    #[test]
    fn constants_and_functions() {
        assert!((eval1("sin(pi/2)", 0.0) - 1.0).abs() < 1e-15);
        assert_eq!(eval1("max(x, 1) + min(x, 1)", 3.0), 4.0);
        assert_eq!(eval1("abs(x)", -2.5), 2.5);
        assert!((eval1("log(exp(x))", 1.25) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn unknown_identifier_names_it() {
        let err = parse("x + q7", Symbols::phase(3)).unwrap_err();
        match err {
            Error::Parse { offset, msg } => {
                assert_eq!(offset, 4);
                assert!(msg.contains("q7"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse("y", Symbols::phase(1)).is_err());
        assert!(parse("b1", Symbols::phase(1)).is_err());
        assert!(parse("b1", Symbols::with_betas(1)).is_ok());
        assert!(parse("q01", Symbols::phase(2)).is_err());
    }

    #[test]
    fn arity_and_syntax_errors_carry_offsets() {
        let err = parse("1 + sin(x, x)", Symbols::phase(1)).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 4, .. }), "{err}");
        let err = parse("(x + 1", Symbols::phase(1)).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 6, .. }), "{err}");
        let err = parse("x $ 2", Symbols::phase(1)).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 2, .. }), "{err}");
        let err = parse("x 2", Symbols::phase(1)).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 2, .. }), "{err}");
        assert!(parse("foo(x)", Symbols::phase(1)).is_err());
    }

    #[test]
    fn domain_errors_report_value() {
        let e = parse("sqrt(x)", Symbols::phase(1)).unwrap();
        match e.eval(&Bindings::new(0.0, &[-4.0], &[])) {
            Err(Error::Domain { func, value }) => {
                assert_eq!(func, "sqrt");
                assert_eq!(value, -4.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        let e = parse("log(x)", Symbols::phase(1)).unwrap();
        assert!(matches!(
            e.eval(&Bindings::new(0.0, &[0.0], &[])),
            Err(Error::Domain { func: "log", .. })
        ));
    }

    #[test]
    fn unbound_variable() {
        let e = parse("p1 + q1", Symbols::phase(1)).unwrap();
        assert!(matches!(
            e.eval(&Bindings::new(0.0, &[1.0], &[])),
            Err(Error::Unbound(ref name)) if name == "p1"
        ));
    }

    #[test]
    fn derivative_examples() {
        let s = Symbols::phase(1);
        let d = parse("x^2/2", s).unwrap().derivative(Var::Q(0));
        assert_eq!(d.eval(&Bindings::new(0.0, &[3.0], &[])).unwrap(), 3.0);

        let d = parse("exp(-t)*x", s).unwrap().derivative(Var::T);
        assert_eq!(d.eval(&Bindings::new(0.0, &[2.0], &[])).unwrap(), -2.0);

        let d = parse("sin(x)", s).unwrap().derivative(Var::Q(0));
        let sym = d.eval(&Bindings::new(0.0, &[1.0], &[])).unwrap();
        let h = 1e-5;
        let fd = ((1.0f64 + h).sin() - (1.0f64 - h).sin()) / (2.0 * h);
        assert!((sym - fd).abs() < 1e-6);
        assert!((sym - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn derivative_of_variable_power() {
        let e = parse("x^x", Symbols::phase(1)).unwrap();
        let d = e.derivative(Var::Q(0));
        let x: f64 = 1.7;
        let expected = x.powf(x) * (x.ln() + 1.0);
        let got = d.eval(&Bindings::new(0.0, &[x], &[])).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn display_reparses_to_same_value() {
        let e = parse("-x^2 + 3*sin(x)/(1 + x) - max(x, -2)", Symbols::phase(1)).unwrap();
        let again = parse(&e.to_string(), Symbols::phase(1)).unwrap();
        let b = Bindings::new(0.0, &[0.7], &[]);
        assert_eq!(e.eval(&b).unwrap(), again.eval(&b).unwrap());
    }
}
