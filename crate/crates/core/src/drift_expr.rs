//! Drift specifications `q(x)`.
//!
//! A drift is either one of the builtin families (`const:a` for `q(x) = a`,
//! `linear:a` for `q(x) = a x`) or an arithmetic expression in `x` using
//! `+ - * / ^`, parentheses and the functions `exp`, `log`, `sqrt`.
//! The diffusion is `dX = dB - q(X) dt`, so `-q` is the drift proper.

use std::fmt;

use crate::error::{QsdError, Result};

/// Probe cap used when validating parsed expressions.
pub const DEFAULT_X_CAP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Exp => v.exp(),
            Func::Log => {
                if v > 0.0 {
                    v.ln()
                } else {
                    f64::NAN
                }
            }
            Func::Sqrt => {
                if v >= 0.0 {
                    v.sqrt()
                } else {
                    f64::NAN
                }
            }
        }
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
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Expression tree over `x`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    X,
    Num(f64),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Expr::X => x,
            Expr::Num(v) => *v,
            Expr::Neg(e) => -e.eval(x),
            Expr::Bin(op, l, r) => {
                let (a, b) = (l.eval(x), r.eval(x));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
            Expr::Call(f, e) => f.apply(e.eval(x)),
        }
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::X => write!(f, "x"),
            Expr::Num(v) => {
                if *v < 0.0 {
                    write!(f, "({v:?})")
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftKind {
    /// `q(x) = a`
    Constant(f64),
    /// `q(x) = a x`
    Linear(f64),
    Expression(Expr),
}

/// Validated drift `q`. Immutable and cheap to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSpec {
    kind: DriftKind,
}

impl DriftSpec {
    pub fn constant(a: f64) -> Self {
        DriftSpec { kind: DriftKind::Constant(a) }
    }

    pub fn linear(a: f64) -> Self {
        DriftSpec { kind: DriftKind::Linear(a) }
    }

    /// Brownian motion, the negative control.
    pub fn zero() -> Self {
        DriftSpec::constant(0.0)
    }

    pub fn kind(&self) -> &DriftKind {
        &self.kind
    }

    /// Builtin parameter `a`, if any.
    pub fn parameter(&self) -> Option<f64> {
        match self.kind {
            DriftKind::Constant(a) | DriftKind::Linear(a) => Some(a),
            DriftKind::Expression(_) => None,
        }
    }

    /// Unchecked evaluation; may return NaN or infinities outside the
    /// validated range.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match &self.kind {
            DriftKind::Constant(a) => *a,
            DriftKind::Linear(a) => a * x,
            DriftKind::Expression(e) => e.eval(x),
        }
    }
}

impl fmt::Display for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            DriftKind::Constant(a) => write!(f, "const:{a:?}"),
            DriftKind::Linear(a) => write!(f, "linear:{a:?}"),
            DriftKind::Expression(e) => write!(f, "{e}"),
        }
    }
}

/// Parses a drift with the default probe cap.
pub fn parse_drift(text: &str) -> Result<DriftSpec> {
    parse_drift_with_cap(text, DEFAULT_X_CAP)
}

/// Parses a drift and checks it evaluates to finite values on `[0, x_cap]`.
pub fn parse_drift_with_cap(text: &str, x_cap: f64) -> Result<DriftSpec> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(QsdError::Syntax { pos: 0, msg: "empty drift".into() });
    }
    let offset = text.len() - text.trim_start().len();
    let spec = if let Some(rest) = trimmed.strip_prefix("const:") {
        DriftSpec::constant(parse_param(rest, offset + 6)?)
    } else if let Some(rest) = trimmed.strip_prefix("linear:") {
        DriftSpec::linear(parse_param(rest, offset + 7)?)
    } else {
        let mut parser = Parser::new(text)?;
        let expr = parser.expression()?;
        parser.expect_end()?;
        DriftSpec { kind: DriftKind::Expression(expr) }
    };
    validate_range(&spec, x_cap)?;
    Ok(spec)
}

fn parse_param(s: &str, pos: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| QsdError::Syntax {
        pos,
        msg: format!("expected a number, found `{}`", s.trim()),
    })?;
    if !v.is_finite() {
        return Err(QsdError::Syntax { pos, msg: "parameter must be finite".into() });
    }
    Ok(v)
}

/// Probe points used for parse-time validation: a geometric ladder towards
/// the origin plus a uniform grid up to the cap.
fn probe_points(x_cap: f64) -> Vec<f64> {
    let mut pts = vec![0.0];
    pts.extend((4..=20).rev().map(|k| 2f64.powi(-k)));
    let n = 1024;
    pts.extend((1..=n).map(|i| x_cap * i as f64 / n as f64));
    pts
}

fn validate_range(spec: &DriftSpec, x_cap: f64) -> Result<()> {
    if !(x_cap > 0.0) {
        return Err(QsdError::InvalidArgument(format!("x_cap must be positive, got {x_cap}")));
    }
    for x in probe_points(x_cap) {
        if !spec.value(x).is_finite() {
            return Err(QsdError::DriftUndefined { x });
        }
    }
    Ok(())
}

/// Checked evaluation of `q(x)` for `x >= 0`.
pub fn eval_drift(spec: &DriftSpec, x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(QsdError::InvalidArgument(format!("x must be >= 0, got {x}")));
    }
    let v = spec.value(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(QsdError::DriftUndefined { x })
    }
}

/// Outcome of the numerical C¹ probe. Advisory: a finite grid cannot
/// certify smoothness.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessVerdict {
    pub pass: bool,
    /// Worst ratio of a jump in the difference quotient to its neighbours'.
    pub jump_estimate: f64,
    /// Drift of the difference quotient along `2^-k`, `k = 4..20`, relative
    /// to its value at `2^-4`.
    pub origin_blowup: f64,
    pub threshold: f64,
}

pub const SMOOTHNESS_THRESHOLD: f64 = 1e2;

pub fn check_smoothness(spec: &DriftSpec, x_cap: f64) -> SmoothnessVerdict {
    let threshold = SMOOTHNESS_THRESHOLD;

    // Near the origin: difference quotients at x = 2^-k must settle.
    let dq = |x: f64, h: f64| (spec.value(x + h) - spec.value(x - h)) / (2.0 * h);
    let near: Vec<f64> = (4..=20).map(|k| {
        let x = 2f64.powi(-k);
        dq(x, x / 4.0)
    }).collect();
    let d0 = near[0];
    let origin_blowup = near
        .iter()
        .map(|d| (d - d0).abs() / (1.0 + d0.abs()))
        .fold(0.0, f64::max);

    // Uniform grid: a kink shows up as an isolated jump of the difference
    // quotient that does not shrink with its neighbours.
    let n = 4096;
    let h = x_cap / n as f64;
    let xs: Vec<f64> = (1..n).map(|i| i as f64 * h).collect();
    let d: Vec<f64> = xs.iter().map(|&x| dq(x, h / 4.0)).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| spec.value(x)).collect();
    let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let qmax = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let jumps = |v: &[f64], floor: f64| -> f64 {
        let dv: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let mut worst = 0.0f64;
        for i in 1..dv.len().saturating_sub(1) {
            let neighbour = dv[i - 1].max(dv[i + 1]);
            worst = worst.max(dv[i] / (neighbour + floor));
        }
        worst
    };
    let jump_estimate = jumps(&d, 1e-6 * (1.0 + dmax)).max(jumps(&vals, 1e-6 * (1.0 + qmax)));

    let finite = origin_blowup.is_finite() && jump_estimate.is_finite();
    SmoothnessVerdict {
        pass: finite && origin_blowup <= threshold && jump_estimate <= threshold,
        jump_estimate,
        origin_blowup,
        threshold,
    }
}

// ---------------------------------------------------------------------------
// Recursive-descent parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self> {
        Ok(Parser { toks: lex(text)?, pos: 0, end: text.len() })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect_end(&self) -> Result<()> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(QsdError::Syntax {
                pos: self.here(),
                msg: format!("unexpected token {t:?}"),
            }),
        }
    }

    fn expression(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    // Right associative; binds tighter than unary minus on its left.
    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let pos = self.here();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::Ident(name)) => {
                if name == "x" {
                    return Ok(Expr::X);
                }
                let func = match name.as_str() {
                    "exp" => Func::Exp,
                    "log" => Func::Log,
                    "sqrt" => Func::Sqrt,
                    _ => return Err(QsdError::UnknownIdentifier { pos, name }),
                };
                match self.bump() {
                    Some(Tok::LParen) => {}
                    _ => {
                        return Err(QsdError::Syntax {
                            pos: self.toks.get(self.pos - 1).map(|(p, _)| *p).unwrap_or(self.end),
                            msg: format!("expected `(` after `{name}`"),
                        })
                    }
                }
                let arg = self.expression()?;
                self.closing()?;
                Ok(Expr::Call(func, Box::new(arg)))
            }
            Some(Tok::LParen) => {
                let e = self.expression()?;
                self.closing()?;
                Ok(e)
            }
            Some(t) => Err(QsdError::Syntax { pos, msg: format!("unexpected token {t:?}") }),
            None => Err(QsdError::Syntax { pos, msg: "unexpected end of input".into() }),
        }
    }

    fn closing(&mut self) -> Result<()> {
        let pos = self.here();
        match self.bump() {
            Some(Tok::RParen) => Ok(()),
            _ => Err(QsdError::Syntax { pos, msg: "expected `)`".into() }),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            // exponent part, only when followed by digits
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
            let s = &text[start..i];
            let v: f64 = s.parse().map_err(|_| QsdError::Syntax {
                pos: start,
                msg: format!("malformed number `{s}`"),
            })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(text[start..i].to_string())));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => {
                    return Err(QsdError::Syntax {
                        pos: start,
                        msg: format!("unexpected character `{c}`"),
                    })
                }
            };
            out.push((start, tok));
            i += c.len_utf8();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_shorthands() {
        let c = parse_drift("const:1.0").unwrap();
        assert_eq!(c.kind(), &DriftKind::Constant(1.0));
        let l = parse_drift("linear:2.5").unwrap();
        assert_eq!(l.kind(), &DriftKind::Linear(2.5));
        assert_eq!(parse_drift("  const: -1 ").unwrap().parameter(), Some(-1.0));
    }

    #[test]
    fn expression_substitution() {
        let s = parse_drift("x*x + 1").unwrap();
        assert_eq!(eval_drift(&s, 2.0).unwrap(), 5.0);
        let s = parse_drift("2^3^2").unwrap();
        assert_eq!(s.value(0.0), 512.0);
        let s = parse_drift("-x^2").unwrap();
        assert_eq!(s.value(3.0), -9.0);
        let s = parse_drift("1.5e-1*x + sqrt(4) - log(exp(2))").unwrap();
        assert!((s.value(10.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn builtin_evaluation() {
        assert_eq!(eval_drift(&DriftSpec::constant(1.0), 7.3).unwrap(), 1.0);
        assert_eq!(eval_drift(&DriftSpec::linear(2.0), 3.0).unwrap(), 6.0);
        let e = parse_drift("exp(x)-1").unwrap();
        assert_eq!(eval_drift(&e, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn negative_argument_rejected() {
        assert!(matches!(
            eval_drift(&DriftSpec::constant(1.0), -0.5),
            Err(QsdError::InvalidArgument(_))
        ));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        match parse_drift("x + * 2") {
            Err(QsdError::Syntax { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("{other:?}"),
        }
        match parse_drift("(x + 1") {
            Err(QsdError::Syntax { pos, .. }) => assert_eq!(pos, 6),
            other => panic!("{other:?}"),
        }
        match parse_drift("x $ 1") {
            Err(QsdError::Syntax { pos, .. }) => assert_eq!(pos, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_drift("   "), Err(QsdError::Syntax { .. })));
        assert!(matches!(parse_drift("const:abc"), Err(QsdError::Syntax { pos: 6, .. })));
    }

    #[test]
    fn unknown_identifier() {
        match parse_drift("2*y") {
            Err(QsdError::UnknownIdentifier { pos, name }) => {
                assert_eq!(pos, 2);
                assert_eq!(name, "y");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_drift("sin(x)"), Err(QsdError::UnknownIdentifier { .. })));
    }

    #[test]
    fn undefined_on_probe_range() {
        assert!(matches!(parse_drift("log(x)"), Err(QsdError::DriftUndefined { x }) if x == 0.0));
        assert!(matches!(parse_drift("1/x"), Err(QsdError::DriftUndefined { .. })));
        assert!(matches!(parse_drift("exp(x*x)"), Err(QsdError::DriftUndefined { .. })));
        // fine when the cap is small
        assert!(parse_drift_with_cap("exp(x*x)", 5.0).is_ok());
    }

    #[test]
    fn smoothness_of_builtins() {
        let v = check_smoothness(&DriftSpec::constant(1.0), 50.0);
        assert!(v.pass);
        assert_eq!(v.jump_estimate, 0.0);
        assert_eq!(v.origin_blowup, 0.0);
        assert!(check_smoothness(&DriftSpec::linear(1.0), 50.0).pass);
        assert!(check_smoothness(&parse_drift("x^3 - 2*x + exp(x/10)").unwrap(), 50.0).pass);
    }

    #[test]
    fn sqrt_fails_smoothness() {
        // Oracle: difference quotients of sqrt at 2^-k grow like 2^(k/2 - 1).
        let quotients: Vec<f64> = (4..=20)
            .map(|k| {
                let x = 2f64.powi(-k);
                let h = x / 4.0;
                ((x + h).sqrt() - (x - h).sqrt()) / (2.0 * h)
            })
            .collect();
        assert!(quotients.windows(2).all(|w| w[1] > w[0]));
        assert!(quotients[16] / quotients[0] > 200.0);

        let v = check_smoothness(&parse_drift("sqrt(x)").unwrap(), 50.0);
        assert!(!v.pass, "{v:?}");
        assert!(v.origin_blowup > SMOOTHNESS_THRESHOLD);
    }

    #[test]
    fn kink_fails_smoothness() {
        let v = check_smoothness(&parse_drift("sqrt((x-1.3)^2)").unwrap(), 50.0);
        assert!(!v.pass, "{v:?}");
    }

    #[test]
    fn display_round_trip_exact() {
        for text in ["const:1.0", "linear:-0.25", "x*x + 1", "-(x - 3)^2/7 + exp(-x)", "0.1*x^1.5 + 2"] {
            let a = parse_drift(text).unwrap();
            let b = parse_drift(&a.to_string()).unwrap();
            for i in 0..200 {
                let x = i as f64 * 0.25;
                assert_eq!(a.value(x).to_bits(), b.value(x).to_bits(), "{text} at {x}");
            }
        }
    }
}
