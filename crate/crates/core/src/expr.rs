//! Closed-form scalar expressions for conformal factors and potentials.
//!
//! Grammar (whitespace is ignored):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary ('*' unary)*
//! unary  := '-' unary | atom
//! atom   := number | call | '(' expr ')'
//! call   := name '(' arg (',' arg)* ')'
//! arg    := expr | point
//! point  := 'p' | '[' number (',' number)* ']'
//! ```
//!
//! Points are either the marked point `p` or fractional torus coordinates.
//! Radii are physical lengths measured with the torus distance. Every
//! primitive is at least C².
//!
//! | primitive                              | value at torus distance ρ from `c`                      |
//! |----------------------------------------|---------------------------------------------------------|
//! | `const(a)`                             | `a`                                                     |
//! | `plateau(c, r0, r1, a)`                | `a` for ρ ≤ r0, quintic smoothstep down to 0 at r1      |
//! | `ramp(c, r0, r1, a)`                   | 0 for ρ ≤ r0, quintic smoothstep up to `a` at r1        |
//! | `smoothstep_bump(c, r0, r1, a)`        | `a·64 t³(1−t)³`, t = (ρ−r0)/(r1−r0), zero off (r0, r1) |
//! | `cos_mode([k1,..,kn], a)`              | `a·cos(2π k·x / L)`                                     |

use std::fmt;

use crate::error::{MassError, Result};
use crate::grid::{ScalarField, TorusGrid, MAX_DIM};

/// Quintic smoothstep `10t³ − 15t⁴ + 6t⁵` clamped to `[0, 1]`.
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

pub fn smoothstep_d1(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    30.0 * t * t * (1.0 - t) * (1.0 - t)
}

pub fn smoothstep_d2(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    60.0 * t * (1.0 - t) * (1.0 - 2.0 * t)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Center {
    Marked,
    Fractional(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Plateau {
        center: Center,
        r0: f64,
        r1: f64,
        amplitude: f64,
    },
    Ramp {
        center: Center,
        r0: f64,
        r1: f64,
        amplitude: f64,
    },
    Bump {
        center: Center,
        r0: f64,
        r1: f64,
        amplitude: f64,
    },
    CosMode {
        wave: Vec<i64>,
        amplitude: f64,
    },
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(MassError::Expression(format!(
                "unexpected trailing input at token {} in {src:?}",
                p.pos
            )));
        }
        Ok(e)
    }

    pub fn zero() -> Self {
        Expr::Const(0.0)
    }

    /// Checks that points have the grid's dimension and radii are ordered.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Expr::Const(c) => finite(*c),
            Expr::Plateau {
                center,
                r0,
                r1,
                amplitude,
            }
            | Expr::Ramp {
                center,
                r0,
                r1,
                amplitude,
            }
            | Expr::Bump {
                center,
                r0,
                r1,
                amplitude,
            } => {
                if let Center::Fractional(x) = center {
                    if x.len() != dim {
                        return Err(MassError::Expression(format!(
                            "point has {} coordinates on a {dim}-dimensional torus",
                            x.len()
                        )));
                    }
                }
                finite(*amplitude)?;
                if !(*r0 >= 0.0 && r1 > r0 && r1.is_finite()) {
                    return Err(MassError::Expression(format!(
                        "radii must satisfy 0 <= r0 < r1, got {r0}, {r1}"
                    )));
                }
                Ok(())
            }
            Expr::CosMode { wave, amplitude } => {
                finite(*amplitude)?;
                if wave.len() != dim {
                    return Err(MassError::Expression(format!(
                        "wave vector has {} entries on a {dim}-dimensional torus",
                        wave.len()
                    )));
                }
                Ok(())
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.validate(dim)?;
                b.validate(dim)
            }
            Expr::Neg(a) => a.validate(dim),
        }
    }

    pub fn eval(&self, grid: &TorusGrid, linear: usize) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Plateau {
                center,
                r0,
                r1,
                amplitude,
            } => {
                let rho = center_distance(center, grid, linear);
                amplitude * (1.0 - smoothstep((rho - r0) / (r1 - r0)))
            }
            Expr::Ramp {
                center,
                r0,
                r1,
                amplitude,
            } => {
                let rho = center_distance(center, grid, linear);
                amplitude * smoothstep((rho - r0) / (r1 - r0))
            }
            Expr::Bump {
                center,
                r0,
                r1,
                amplitude,
            } => {
                let rho = center_distance(center, grid, linear);
                let t = (rho - r0) / (r1 - r0);
                if t <= 0.0 || t >= 1.0 {
                    0.0
                } else {
                    let s = t * (1.0 - t);
                    amplitude * 64.0 * s * s * s
                }
            }
            Expr::CosMode { wave, amplitude } => {
                let h = grid.spacing();
                let l = grid.side();
                let phase: f64 = wave
                    .iter()
                    .enumerate()
                    .map(|(axis, &k)| k as f64 * grid.coord(linear, axis) as f64 * h)
                    .sum();
                amplitude * (2.0 * std::f64::consts::PI * phase / l).cos()
            }
            Expr::Add(a, b) => a.eval(grid, linear) + b.eval(grid, linear),
            Expr::Sub(a, b) => a.eval(grid, linear) - b.eval(grid, linear),
            Expr::Mul(a, b) => a.eval(grid, linear) * b.eval(grid, linear),
            Expr::Neg(a) => -a.eval(grid, linear),
        }
    }

    pub fn sample(&self, grid: &TorusGrid) -> Result<ScalarField> {
        self.validate(grid.dim())?;
        let values: Vec<f64> = (0..grid.len()).map(|i| self.eval(grid, i)).collect();
        ScalarField::from_values(grid, values)
    }

    /// `true` for the literal constant zero.
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }
}

fn finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(MassError::Expression(format!("non-finite literal {x}")))
    }
}

fn center_distance(center: &Center, grid: &TorusGrid, linear: usize) -> f64 {
    let mut d = [0.0; MAX_DIM];
    let dim = grid.dim();
    match center {
        Center::Marked => grid.displacement(linear, &mut d[..dim]),
        Center::Fractional(x) => {
            let origin: Vec<f64> = x.iter().map(|v| v * grid.side()).collect();
            grid.displacement_from(&origin, linear, &mut d[..dim]);
        }
    }
    d[..dim].iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl fmt::Display for Center {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Center::Marked => write!(f, "p"),
            Center::Fractional(x) => {
                write!(f, "[")?;
                for (i, v) in x.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v:?}")?;
                }
                write!(f, "]")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "const({c:?})"),
            Expr::Plateau {
                center,
                r0,
                r1,
                amplitude,
            } => {
                write!(f, "plateau({center}, {r0:?}, {r1:?}, {amplitude:?})")
            }
            Expr::Ramp {
                center,
                r0,
                r1,
                amplitude,
            } => {
                write!(f, "ramp({center}, {r0:?}, {r1:?}, {amplitude:?})")
            }
            Expr::Bump {
                center,
                r0,
                r1,
                amplitude,
            } => {
                write!(
                    f,
                    "smoothstep_bump({center}, {r0:?}, {r1:?}, {amplitude:?})"
                )
            }
            Expr::CosMode { wave, amplitude } => {
                write!(f, "cos_mode([")?;
                for (i, k) in wave.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{k}")?;
                }
                write!(f, "], {amplitude:?})")
            }
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Neg(a) => write!(f, "-{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Plus,
    Minus,
    Star,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '[' => {
                out.push(Token::LBracket);
                i += 1;
            }
            ']' => {
                out.push(Token::RBracket);
                i += 1;
            }
            ',' => {
                out.push(Token::Comma);
                i += 1;
            }
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                // exponent, possibly signed
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
                let text: String = chars[start..i].iter().collect();
                let v = text
                    .parse::<f64>()
                    .map_err(|_| MassError::Expression(format!("bad number {text:?}")))?;
                out.push(Token::Num(v));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token::Ident(chars[start..i].iter().collect()));
            }
            other => {
                return Err(MassError::Expression(format!(
                    "unexpected character {other:?}"
                )));
            }
        }
    }
    Ok(out)
}

enum Arg {
    Expr(Expr),
    Point(Center),
    Ints(Vec<f64>),
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Token) -> Result<()> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            other => Err(MassError::Expression(format!(
                "expected {want:?}, found {other:?}"
            ))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Token::Star) = self.peek() {
            self.pos += 1;
            lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Token::Minus) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Expr::Const(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(e)
            }
            Some(Token::Ident(name)) => self.call(&name),
            other => Err(MassError::Expression(format!("unexpected token {other:?}"))),
        }
    }

    fn arg(&mut self) -> Result<Arg> {
        match self.peek() {
            Some(Token::Ident(name)) if name == "p" => {
                self.pos += 1;
                Ok(Arg::Point(Center::Marked))
            }
            Some(Token::LBracket) => {
                self.pos += 1;
                let mut xs = Vec::new();
                loop {
                    let neg = matches!(self.peek(), Some(Token::Minus));
                    if neg {
                        self.pos += 1;
                    }
                    match self.next() {
                        Some(Token::Num(v)) => xs.push(if neg { -v } else { v }),
                        other => {
                            return Err(MassError::Expression(format!(
                                "expected number in point, found {other:?}"
                            )))
                        }
                    }
                    match self.next() {
                        Some(Token::Comma) => continue,
                        Some(Token::RBracket) => break,
                        other => {
                            return Err(MassError::Expression(format!(
                                "expected ',' or ']' in point, found {other:?}"
                            )))
                        }
                    }
                }
                Ok(Arg::Ints(xs))
            }
            _ => Ok(Arg::Expr(self.expr()?)),
        }
    }

    fn call(&mut self, name: &str) -> Result<Expr> {
        self.expect(Token::LParen)?;
        let mut args = vec![self.arg()?];
        loop {
            match self.next() {
                Some(Token::Comma) => args.push(self.arg()?),
                Some(Token::RParen) => break,
                other => {
                    return Err(MassError::Expression(format!(
                        "expected ',' or ')' in call to {name}, found {other:?}"
                    )))
                }
            }
        }
        match name {
            "const" => {
                let [a] = take::<1>(name, args)?;
                Ok(Expr::Const(number(name, a)?))
            }
            "plateau" | "ramp" | "smoothstep_bump" => {
                let [c, r0, r1, a] = take::<4>(name, args)?;
                let center = match c {
                    Arg::Point(c) => c,
                    Arg::Ints(x) => Center::Fractional(x),
                    Arg::Expr(_) => {
                        return Err(MassError::Expression(format!(
                            "{name}: first argument must be p or [x, ..]"
                        )))
                    }
                };
                let (r0, r1, amplitude) = (number(name, r0)?, number(name, r1)?, number(name, a)?);
                Ok(match name {
                    "plateau" => Expr::Plateau {
                        center,
                        r0,
                        r1,
                        amplitude,
                    },
                    "ramp" => Expr::Ramp {
                        center,
                        r0,
                        r1,
                        amplitude,
                    },
                    _ => Expr::Bump {
                        center,
                        r0,
                        r1,
                        amplitude,
                    },
                })
            }
            "cos_mode" => {
                let [k, a] = take::<2>(name, args)?;
                let wave = match k {
                    Arg::Ints(xs) if xs.iter().all(|x| x.fract() == 0.0) => {
                        xs.iter().map(|&x| x as i64).collect()
                    }
                    _ => {
                        return Err(MassError::Expression(
                            "cos_mode: first argument must be an integer vector".into(),
                        ))
                    }
                };
                Ok(Expr::CosMode {
                    wave,
                    amplitude: number(name, a)?,
                })
            }
            other => Err(MassError::Expression(format!(
                "unknown primitive {other:?}"
            ))),
        }
    }
}

fn take<const K: usize>(name: &str, args: Vec<Arg>) -> Result<[Arg; K]> {
    let n = args.len();
    args.try_into()
        .map_err(|_| MassError::Expression(format!("{name} takes {K} arguments, got {n}")))
}

/// Numeric arguments may be constant sub-expressions such as `-0.5` or `2*0.1`.
fn number(name: &str, a: Arg) -> Result<f64> {
    fn fold(e: &Expr) -> Option<f64> {
        match e {
            Expr::Const(c) => Some(*c),
            Expr::Neg(a) => fold(a).map(|v| -v),
            Expr::Add(a, b) => Some(fold(a)? + fold(b)?),
            Expr::Sub(a, b) => Some(fold(a)? - fold(b)?),
            Expr::Mul(a, b) => Some(fold(a)? * fold(b)?),
            _ => None,
        }
    }
    match a {
        Arg::Expr(e) => fold(&e)
            .ok_or_else(|| MassError::Expression(format!("{name}: argument must be constant"))),
        _ => Err(MassError::Expression(format!("{name}: expected a number"))),
    }
}
