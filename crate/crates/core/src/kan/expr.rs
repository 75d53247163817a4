//! Parser and evaluator for rendered closed-form expressions.
//!
//! Grammar: sums and products of numbers, variables, `^` powers, calls to
//! `sin`, `exp`, `log`, `silu`, and tabulated edges `spline[l,j,p](..)`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ParsedExpr {
    Num(f64),
    Var(String),
    Neg(Box<ParsedExpr>),
    Add(Box<ParsedExpr>, Box<ParsedExpr>),
    Sub(Box<ParsedExpr>, Box<ParsedExpr>),
    Mul(Box<ParsedExpr>, Box<ParsedExpr>),
    Div(Box<ParsedExpr>, Box<ParsedExpr>),
    Pow(Box<ParsedExpr>, Box<ParsedExpr>),
    Call(String, Box<ParsedExpr>),
    Spline([usize; 3], Box<ParsedExpr>),
}

impl ParsedExpr {
    /// Evaluates with variable bindings and a lookup for tabulated edges.
    pub fn eval(&self, vars: &[(&str, f64)], spline: &dyn Fn([usize; 3], f64) -> f64) -> Result<f64> {
        use ParsedExpr::*;
        Ok(match self {
            Num(v) => *v,
            Var(name) => vars
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Parse(format!("unbound variable {name}")))?,
            Neg(e) => -e.eval(vars, spline)?,
            Add(a, b) => a.eval(vars, spline)? + b.eval(vars, spline)?,
            Sub(a, b) => a.eval(vars, spline)? - b.eval(vars, spline)?,
            Mul(a, b) => a.eval(vars, spline)? * b.eval(vars, spline)?,
            Div(a, b) => a.eval(vars, spline)? / b.eval(vars, spline)?,
            Pow(a, b) => {
                let base = a.eval(vars, spline)?;
                let exp = b.eval(vars, spline)?;
                if exp == 2.0 {
                    base * base
                } else if exp == 3.0 {
                    base * base * base
                } else {
                    base.powf(exp)
                }
            }
            Call(f, e) => {
                let x = e.eval(vars, spline)?;
                match f.as_str() {
                    "sin" => x.sin(),
                    "exp" => x.exp(),
                    "log" => x.ln(),
                    "silu" => crate::scalar::silu(x),
                    other => return Err(Error::Parse(format!("unknown function {other}"))),
                }
            }
            Spline(idx, e) => spline(*idx, e.eval(vars, spline)?),
        })
    }
}

pub fn parse_expression(text: &str) -> Result<ParsedExpr> {
    let mut p = Parser {
        s: text.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.s.len() {
        return Err(p.err("trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse(format!("{msg} at offset {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn expr(&mut self) -> Result<ParsedExpr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = ParsedExpr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = ParsedExpr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<ParsedExpr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = ParsedExpr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = ParsedExpr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<ParsedExpr> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(ParsedExpr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ParsedExpr> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(ParsedExpr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn number(&mut self) -> Result<f64> {
        let start = self.pos;
        while self.pos < self.s.len() {
            let c = self.s[self.pos];
            let exp_sign = (c == b'-' || c == b'+')
                && self.pos > start
                && matches!(self.s[self.pos - 1], b'e' | b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.s[start..self.pos]).map_err(|_| self.err("bad utf-8"))?;
        text.parse::<f64>().map_err(|_| self.err(&format!("bad number '{text}'")))
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.s.len() && (self.s[self.pos].is_ascii_alphanumeric() || self.s[self.pos] == b'_') {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.s[start..self.pos]).into_owned()
    }

    fn index(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.s[start..self.pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| self.err("expected index"))
    }

    fn atom(&mut self) -> Result<ParsedExpr> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(ParsedExpr::Num(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => {
                let name = self.ident();
                if name == "spline" {
                    self.expect(b'[')?;
                    let l = self.index()?;
                    self.expect(b',')?;
                    let j = self.index()?;
                    self.expect(b',')?;
                    let p = self.index()?;
                    self.expect(b']')?;
                    self.expect(b'(')?;
                    let arg = self.expr()?;
                    self.expect(b')')?;
                    return Ok(ParsedExpr::Spline([l, j, p], Box::new(arg)));
                }
                if self.peek() == Some(b'(') {
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect(b')')?;
                    return Ok(ParsedExpr::Call(name, Box::new(arg)));
                }
                Ok(ParsedExpr::Var(name))
            }
            _ => Err(self.err("unexpected token")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_spline(_: [usize; 3], _: f64) -> f64 {
        f64::NAN
    }

    #[test]
    fn precedence_and_unary_minus() {
        let e = parse_expression("-2^2 + 3*4 - 1/2").unwrap();
        assert_eq!(e.eval(&[], &no_spline).unwrap(), -4.0 + 12.0 - 0.5);
    }

    #[test]
    fn variables_and_calls() {
        let e = parse_expression("0.0243*s - 0.4535*a - 0.2538*(s + 0.1338)^2 + 0.6791").unwrap();
        let (a, s) = (0.5, -0.25);
        let expected = 0.0243 * s - 0.4535 * a - 0.2538 * (s + 0.1338f64).powi(2) + 0.6791;
        assert!((e.eval(&[("a", a), ("s", s)], &no_spline).unwrap() - expected).abs() < 1e-15);
        let f = parse_expression("sin(2*x) + exp(x) + log(x + 3) + silu(x)").unwrap();
        assert!(f.eval(&[("x", 0.1)], &no_spline).unwrap().is_finite());
    }

    #[test]
    fn exponent_numbers_and_spline_terms() {
        let e = parse_expression("1.5e-3 + -2E+1 * spline[0,1,2](x)").unwrap();
        let v = e.eval(&[("x", 4.0)], &|idx, x| (idx[0] + idx[1] + idx[2]) as f64 * x).unwrap();
        assert_eq!(v, 1.5e-3 - 20.0 * 12.0);
    }

    #[test]
    fn errors_are_reported() {
        assert!(parse_expression("1 +").is_err());
        assert!(parse_expression("(1").is_err());
        assert!(parse_expression("1 2").is_err());
        let e = parse_expression("q + 1").unwrap();
        assert!(e.eval(&[], &no_spline).is_err());
    }
}
