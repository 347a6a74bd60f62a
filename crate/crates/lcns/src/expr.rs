//! Tiny closed expression grammar for manufactured fields in configs.
//!
//! Grammar (precedence low to high):
//!   expr   := term (('+' | '-') term)*
//!   term   := factor (('*' | '/') factor)*
//!   factor := atom ('^' integer)?
//!   atom   := number | 'pi' | 'x' | 'y' | 'z' | 't'
//!           | 'sin' '(' expr ')' | 'cos' '(' expr ')' | 'exp' '(' expr ')'
//!           | '(' expr ')' | '-' atom
//!
//! Expressions are parsed once into a small AST and evaluated pointwise.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize), // 0..=2 space, 3 time
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let mut p = Parser { src: src.as_bytes(), pos: 0 };
        p.skip_ws();
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(Error::ExprParse(format!(
                "trailing input at byte {} in `{src}`",
                p.pos
            )));
        }
        Ok(e)
    }

    pub fn eval(&self, x: [f64; 3], t: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(3) => t,
            Expr::Var(i) => x[*i],
            Expr::Add(a, b) => a.eval(x, t) + b.eval(x, t),
            Expr::Sub(a, b) => a.eval(x, t) - b.eval(x, t),
            Expr::Mul(a, b) => a.eval(x, t) * b.eval(x, t),
            Expr::Div(a, b) => a.eval(x, t) / b.eval(x, t),
            Expr::Pow(a, k) => a.eval(x, t).powi(*k),
            Expr::Neg(a) => -a.eval(x, t),
            Expr::Sin(a) => a.eval(x, t).sin(),
            Expr::Cos(a) => a.eval(x, t).cos(),
            Expr::Exp(a) => a.eval(x, t).exp(),
        }
    }

    /// True if the expression never references `t`.
    pub fn is_steady(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::Var(i) => *i != 3,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.is_steady() && b.is_steady()
            }
            Expr::Pow(a, _) | Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) => {
                a.is_steady()
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::ExprParse(format!(
                "expected `{}` at byte {}",
                c as char, self.pos
            )))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut e = self.term()?;
        loop {
            if self.eat(b'+') {
                e = Expr::Add(Box::new(e), Box::new(self.term()?));
            } else if self.eat(b'-') {
                e = Expr::Sub(Box::new(e), Box::new(self.term()?));
            } else {
                return Ok(e);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut e = self.factor()?;
        loop {
            if self.eat(b'*') {
                e = Expr::Mul(Box::new(e), Box::new(self.factor()?));
            } else if self.eat(b'/') {
                e = Expr::Div(Box::new(e), Box::new(self.factor()?));
            } else {
                return Ok(e);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let start = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == start {
                return Err(Error::ExprParse(format!(
                    "expected integer exponent at byte {start}"
                )));
            }
            let k: i32 = std::str::from_utf8(&self.src[start..self.pos])
                .unwrap()
                .parse()
                .map_err(|e| Error::ExprParse(format!("bad exponent: {e}")))?;
            self.skip_ws();
            return Ok(Expr::Pow(Box::new(base), k));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            // unary minus binds looser than `^`: -x^2 == -(x^2)
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        if self.eat(b'(') {
            let e = self.expr()?;
            self.expect(b')')?;
            return Ok(e);
        }
        let c = self.peek().ok_or_else(|| {
            Error::ExprParse("unexpected end of expression".into())
        })?;
        if c.is_ascii_digit() || c == b'.' {
            let start = self.pos;
            while self
                .peek()
                .is_some_and(|c| c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E')
            {
                // allow a sign right after an exponent marker
                self.pos += 1;
                if matches!(self.src.get(self.pos - 1), Some(b'e') | Some(b'E'))
                    && matches!(self.peek(), Some(b'+') | Some(b'-'))
                {
                    self.pos += 1;
                }
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
            let v: f64 = text
                .parse()
                .map_err(|_| Error::ExprParse(format!("bad number `{text}`")))?;
            self.skip_ws();
            return Ok(Expr::Num(v));
        }
        if c.is_ascii_alphabetic() {
            let start = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_alphanumeric()) {
                self.pos += 1;
            }
            let word = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
            self.skip_ws();
            return match word.as_str() {
                "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                "x" => Ok(Expr::Var(0)),
                "y" => Ok(Expr::Var(1)),
                "z" => Ok(Expr::Var(2)),
                "t" => Ok(Expr::Var(3)),
                "sin" | "cos" | "exp" => {
                    self.expect(b'(')?;
                    let e = self.expr()?;
                    self.expect(b')')?;
                    Ok(match word.as_str() {
                        "sin" => Expr::Sin(Box::new(e)),
                        "cos" => Expr::Cos(Box::new(e)),
                        _ => Expr::Exp(Box::new(e)),
                    })
                }
                _ => Err(Error::ExprParse(format!("unknown symbol `{word}`"))),
            };
        }
        Err(Error::ExprParse(format!(
            "unexpected character `{}` at byte {}",
            c as char, self.pos
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ev(src: &str, x: [f64; 3], t: f64) -> f64 {
        Expr::parse(src).unwrap().eval(x, t)
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(ev("1 + 2 * 3", [0.0; 3], 0.0), 7.0);
        assert_eq!(ev("(1 + 2) * 3", [0.0; 3], 0.0), 9.0);
        assert_eq!(ev("2^3 * 2", [0.0; 3], 0.0), 16.0);
        assert_eq!(ev("-x^2", [3.0, 0.0, 0.0], 0.0), -9.0);
        assert_eq!(ev("1 - 2 - 3", [0.0; 3], 0.0), -4.0);
        assert_eq!(ev("8 / 2 / 2", [0.0; 3], 0.0), 2.0);
    }

    #[test]
    fn variables_and_functions() {
        let v = ev("2 + sin(pi*x)", [0.5, 0.0, 0.0], 0.0);
        assert!((v - 3.0).abs() < 1e-12);
        let v = ev("sin(pi*x)^2 * sin(2*pi*y)", [0.25, 0.25, 0.0], 0.0);
        assert!((v - 0.5) < 1e-12);
        let v = ev("cos(t) * z", [0.0, 0.0, 2.0], 0.0);
        assert_eq!(v, 2.0);
        let v = ev("exp(1)", [0.0; 3], 0.0);
        assert!((v - std::f64::consts::E).abs() < 1e-12);
        assert!((ev("pi", [0.0; 3], 0.0) - PI).abs() < 1e-15);
    }

    #[test]
    fn scientific_numbers() {
        assert_eq!(ev("1e-3", [0.0; 3], 0.0), 1e-3);
        assert_eq!(ev("2.5E2", [0.0; 3], 0.0), 250.0);
    }

    #[test]
    fn steadiness() {
        assert!(Expr::parse("sin(pi*x) + y^2").unwrap().is_steady());
        assert!(!Expr::parse("sin(pi*x) * cos(t)").unwrap().is_steady());
    }

    #[test]
    fn parse_errors() {
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("sin 1").is_err());
        assert!(Expr::parse("foo(x)").is_err());
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse("x^y").is_err());
        assert!(Expr::parse("(1+2").is_err());
    }
}
