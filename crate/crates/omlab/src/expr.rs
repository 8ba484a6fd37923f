//! Closed-form expression strings for scalar fields and path functionals.
//!
//! The grammar is deliberately small and fully documented here:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := unary ('^' factor)?            -- '^' is right-associative
//! unary  := '-' unary | atom
//! atom   := number | ident | func '(' expr (',' expr)? ')' | '(' expr ')'
//! ```
//!
//! Functions: `sin`, `cos`, `exp`, `tanh`, `abs` (one argument) and
//! `min`, `max` (two arguments). Constants: numeric literals plus `pi`
//! and `e`.
//!
//! Identifiers are resolved against a caller-supplied variable list:
//!
//! - fields on grids and atom sets bind `x1..xn` (ambient coordinates);
//! - path functionals bind `wT` (terminal value of the path) and `intw`
//!   (trapezoidal integral of the path over the time grid);
//! - path-center curves bind `t` (lattice time).

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num(f64),
    Ident(usize, usize), // byte span into the source
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func1 {
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func2 {
    Min,
    Max,
}

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

/// A parsed expression bound to a fixed variable list.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    root: Node,
    source: String,
    n_vars: usize,
}

impl CompiledExpr {
    /// A constant expression that ignores its variables.
    pub fn constant(value: f64) -> Self {
        CompiledExpr {
            root: Node::Const(value),
            source: format!("{value:?}"),
            n_vars: 0,
        }
    }

    /// Parse `source` with identifiers resolved against `vars` (in order).
    pub fn parse(source: &str, vars: &[&str]) -> Result<Self> {
        let toks = lex(source)?;
        let mut p = Parser {
            src: source,
            toks: &toks,
            pos: 0,
            vars,
        };
        let root = p.expr()?;
        if p.pos != p.toks.len() {
            return Err(Error::Expr(format!(
                "unexpected trailing input in `{source}`"
            )));
        }
        Ok(CompiledExpr {
            root,
            source: source.to_string(),
            n_vars: vars.len(),
        })
    }

    /// Evaluate with one value per bound variable (extra values ignored).
    pub fn eval(&self, vals: &[f64]) -> f64 {
        debug_assert!(vals.len() >= self.n_vars);
        eval_node(&self.root, vals)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// True when the expression references no variables at all.
    pub fn is_constant(&self) -> bool {
        fn scan(n: &Node) -> bool {
            match n {
                Node::Const(_) => true,
                Node::Var(_) => false,
                Node::Neg(a) | Node::Call1(_, a) => scan(a),
                Node::Add(a, b)
                | Node::Sub(a, b)
                | Node::Mul(a, b)
                | Node::Div(a, b)
                | Node::Pow(a, b)
                | Node::Call2(_, a, b) => scan(a) && scan(b),
            }
        }
        scan(&self.root)
    }
}

fn eval_node(n: &Node, vals: &[f64]) -> f64 {
    match n {
        Node::Const(c) => *c,
        Node::Var(i) => vals[*i],
        Node::Neg(a) => -eval_node(a, vals),
        Node::Add(a, b) => eval_node(a, vals) + eval_node(b, vals),
        Node::Sub(a, b) => eval_node(a, vals) - eval_node(b, vals),
        Node::Mul(a, b) => eval_node(a, vals) * eval_node(b, vals),
        Node::Div(a, b) => eval_node(a, vals) / eval_node(b, vals),
        Node::Pow(a, b) => eval_node(a, vals).powf(eval_node(b, vals)),
        Node::Call1(f, a) => {
            let x = eval_node(a, vals);
            match f {
                Func1::Sin => x.sin(),
                Func1::Cos => x.cos(),
                Func1::Exp => x.exp(),
                Func1::Tanh => x.tanh(),
                Func1::Abs => x.abs(),
            }
        }
        Node::Call2(f, a, b) => {
            let x = eval_node(a, vals);
            let y = eval_node(b, vals);
            match f {
                Func2::Min => x.min(y),
                Func2::Max => x.max(y),
            }
        }
    }
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                toks.push(Tok::Plus);
                i += 1;
            }
            // Accept the ASCII hyphen; configs are plain text.
            '-' => {
                toks.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                toks.push(Tok::Star);
                i += 1;
            }
            '/' => {
                toks.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                toks.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            ',' => {
                toks.push(Tok::Comma);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, '0'..='9' | '.' | 'e' | 'E')
                {
                    // Consume exponent sign directly after e/E.
                    if matches!(bytes[i] as char, 'e' | 'E')
                        && i + 1 < bytes.len()
                        && matches!(bytes[i + 1] as char, '+' | '-')
                    {
                        i += 1;
                    }
                    i += 1;
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::Expr(format!("bad number `{text}`")))?;
                toks.push(Tok::Num(v));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                toks.push(Tok::Ident(start, i));
            }
            other => {
                return Err(Error::Expr(format!(
                    "unexpected character `{other}` at byte {i}"
                )))
            }
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    src: &'a str,
    toks: &'a [Tok],
    pos: usize,
    vars: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.peek();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(t) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Expr(format!("expected {what} in `{}`", self.src)))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Node> {
        let base = self.unary()?;
        if self.peek() == Some(Tok::Caret) {
            self.pos += 1;
            let exp = self.factor()?; // right-assoc
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek() == Some(Tok::Minus) {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Node> {
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Node::Const(v)),
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::Ident(a, b)) => {
                let name = &self.src[a..b];
                if self.peek() == Some(Tok::LParen) {
                    self.pos += 1;
                    return self.call(name);
                }
                match name {
                    "pi" => Ok(Node::Const(std::f64::consts::PI)),
                    "e" => Ok(Node::Const(std::f64::consts::E)),
                    _ => {
                        if let Some(i) = self.vars.iter().position(|v| *v == name) {
                            Ok(Node::Var(i))
                        } else {
                            Err(Error::Expr(format!(
                                "unknown identifier `{name}` (available: {})",
                                self.vars.join(", ")
                            )))
                        }
                    }
                }
            }
            _ => Err(Error::Expr(format!("unexpected end of `{}`", self.src))),
        }
    }

    fn call(&mut self, name: &str) -> Result<Node> {
        let one = |f: Func1, p: &mut Self| -> Result<Node> {
            let a = p.expr()?;
            p.expect(Tok::RParen, "`)`")?;
            Ok(Node::Call1(f, Box::new(a)))
        };
        let two = |f: Func2, p: &mut Self| -> Result<Node> {
            let a = p.expr()?;
            p.expect(Tok::Comma, "`,`")?;
            let b = p.expr()?;
            p.expect(Tok::RParen, "`)`")?;
            Ok(Node::Call2(f, Box::new(a), Box::new(b)))
        };
        match name {
            "sin" => one(Func1::Sin, self),
            "cos" => one(Func1::Cos, self),
            "exp" => one(Func1::Exp, self),
            "tanh" => one(Func1::Tanh, self),
            "abs" => one(Func1::Abs, self),
            "min" => two(Func2::Min, self),
            "max" => two(Func2::Max, self),
            other => Err(Error::Expr(format!("unknown function `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, vars: &[&str], vals: &[f64]) -> f64 {
        CompiledExpr::parse(src, vars).unwrap().eval(vals)
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(ev("1+2*3", &[], &[]), 7.0);
        assert_eq!(ev("(1+2)*3", &[], &[]), 9.0);
        assert_eq!(ev("2^3^2", &[], &[]), 512.0); // right-assoc
        assert_eq!(ev("-2^2", &[], &[]), -4.0); // unary binds looser than ^
        assert_eq!(ev("6/3/2", &[], &[]), 1.0);
    }

    #[test]
    fn variables_and_functions() {
        let v = ev("0.3*sin(x1)+0.5*(x1^2+x2^2)", &["x1", "x2"], &[1.0, 2.0]);
        let want = 0.3 * 1f64.sin() + 0.5 * 5.0;
        assert!((v - want).abs() < 1e-15);
        assert_eq!(ev("min(3,x1)", &["x1"], &[7.0]), 3.0);
        assert_eq!(ev("max(abs(-4),2)", &[], &[]), 4.0);
        assert!((ev("exp(tanh(0))", &[], &[]) - 1.0).abs() < 1e-15);
        assert!((ev("pi", &[], &[]) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn path_functional_identifiers() {
        let e = CompiledExpr::parse("0.5*tanh(wT)", &["wT", "intw"]).unwrap();
        let v = e.eval(&[0.5, 0.2]);
        assert!((v - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn rejects_unknown_identifier_and_syntax() {
        assert!(CompiledExpr::parse("y1+1", &["x1"]).is_err());
        assert!(CompiledExpr::parse("sin(", &[]).is_err());
        assert!(CompiledExpr::parse("1 2", &[]).is_err());
        assert!(CompiledExpr::parse("min(1)", &[]).is_err());
        assert!(CompiledExpr::parse("floor(1.5)", &[]).is_err());
    }

    #[test]
    fn constant_detection() {
        assert!(CompiledExpr::parse("exp(2)-pi", &["x1"])
            .unwrap()
            .is_constant());
        assert!(!CompiledExpr::parse("x1", &["x1"]).unwrap().is_constant());
    }
}
