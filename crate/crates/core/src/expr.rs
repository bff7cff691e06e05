//! Arithmetic expressions for drivers and terminal data declared in scenario
//! files.
//!
//! ```text
//! expr  := term (("+" | "-") term)*
//! term  := unary (("*" | "/") unary)*
//! unary := "-" unary | power
//! power := atom ("^" unary)?
//! atom  := number | name | name "(" expr ("," expr)* ")" | "(" expr ")" | "|" expr "|"
//! ```
//!
//! Names: `t`, `y`, `x` (= `x1`), `x1`..`x9`, `z` (= `z1`), `z1`..`z9`,
//! and the constants `pi`, `e`, `inf`. Functions: `abs`, `min`, `max`, `exp`,
//! `log`, `sqrt`, `sin`, `cos`. Evaluation follows the tree left to right.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    T,
    Y,
    X(usize),
    Z(usize),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Abs,
    Min,
    Max,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "abs" => (Func::Abs, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            "exp" => (Func::Exp, 1),
            "log" => (Func::Log, 1),
            "sqrt" => (Func::Sqrt, 1),
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            _ => return None,
        })
    }
}

/// A parsed expression in the variables `t, x, y, z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
    max_x: usize,
    max_z: usize,
    uses_t: bool,
    uses_y: bool,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            source,
        };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.error("unexpected trailing input"));
        }
        let mut e = Expr {
            source: source.to_string(),
            root,
            max_x: 0,
            max_z: 0,
            uses_t: false,
            uses_y: false,
        };
        let root = e.root.clone();
        e.scan(&root);
        Ok(e)
    }

    fn scan(&mut self, n: &Node) {
        match n {
            Node::T => self.uses_t = true,
            Node::Y => self.uses_y = true,
            Node::X(i) => self.max_x = self.max_x.max(i + 1),
            Node::Z(i) => self.max_z = self.max_z.max(i + 1),
            Node::Neg(a) => self.scan(a),
            Node::Bin(_, a, b) => {
                self.scan(a);
                self.scan(b);
            }
            Node::Call(_, args) => args.iter().for_each(|a| self.scan(a)),
            Node::Num(_) => {}
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses_t(&self) -> bool {
        self.uses_t
    }

    pub fn uses_y(&self) -> bool {
        self.uses_y
    }

    pub fn uses_x(&self) -> bool {
        self.max_x > 0
    }

    pub fn uses_z(&self) -> bool {
        self.max_z > 0
    }

    /// Number of `x` components referenced (highest index).
    pub fn x_arity(&self) -> usize {
        self.max_x
    }

    pub fn z_arity(&self) -> usize {
        self.max_z
    }

    /// Missing `x`/`z` components evaluate as 0.
    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        eval(&self.root, t, x, y, z)
    }
}

fn eval(n: &Node, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::T => t,
        Node::Y => y,
        Node::X(i) => x.get(*i).copied().unwrap_or(0.0),
        Node::Z(i) => z.get(*i).copied().unwrap_or(0.0),
        Node::Neg(a) => -eval(a, t, x, y, z),
        Node::Bin(op, a, b) => {
            let a = eval(a, t, x, y, z);
            let b = eval(b, t, x, y, z);
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Pow => pow(a, b),
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], t, x, y, z);
            match f {
                Func::Abs => a.abs(),
                Func::Min => a.min(eval(&args[1], t, x, y, z)),
                Func::Max => a.max(eval(&args[1], t, x, y, z)),
                Func::Exp => a.exp(),
                Func::Log => a.ln(),
                Func::Sqrt => a.sqrt(),
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
            }
        }
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b == 2.0 {
        a * a
    } else if b.fract() == 0.0 && b.abs() <= 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Name(String),
    Sym(char),
}

fn tokenize(s: &str) -> Result<Vec<(Tok, usize)>> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
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
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text
                .parse()
                .map_err(|_| Error::Expression(format!("bad number '{text}' at {start} in '{s}'")))?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Name(chars[start..i].iter().collect()), start));
        } else if "+-*/^()|,".contains(c) {
            out.push((Tok::Sym(c), i));
            i += 1;
        } else {
            return Err(Error::Expression(format!(
                "unexpected character '{c}' at {i} in '{s}'"
            )));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
    source: &'a str,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        let at = self
            .tokens
            .get(self.pos)
            .map_or(self.source.len(), |(_, p)| *p);
        Error::Expression(format!("{msg} at {at} in '{}'", self.source))
    }

    fn peek_sym(&self) -> Option<char> {
        match self.tokens.get(self.pos) {
            Some((Tok::Sym(c), _)) => Some(*c),
            _ => None,
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek_sym() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{c}'")))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_sym() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == '+' { Op::Add } else { Op::Sub };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek_sym() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == '*' { Op::Mul } else { Op::Div };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek_sym() == Some('-') {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.peek_sym() == Some('+') {
            self.pos += 1;
            return self.unary();
        }
        let base = self.atom()?;
        if self.peek_sym() == Some('^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let Some((tok, _)) = self.tokens.get(self.pos).cloned() else {
            return Err(self.error("unexpected end of expression"));
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::Sym('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Sym('|') => {
                let e = self.expr()?;
                self.expect('|')?;
                Ok(Node::Call(Func::Abs, vec![e]))
            }
            Tok::Name(name) => {
                if self.peek_sym() == Some('(') {
                    let (f, arity) = Func::lookup(&name).ok_or_else(|| {
                        self.pos -= 1;
                        self.error(&format!("unknown function '{name}'"))
                    })?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek_sym() == Some(',') {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if args.len() != arity {
                        return Err(Error::Expression(format!(
                            "'{name}' takes {arity} argument(s), got {} in '{}'",
                            args.len(),
                            self.source
                        )));
                    }
                    return Ok(Node::Call(f, args));
                }
                variable(&name).ok_or_else(|| {
                    self.pos -= 1;
                    self.error(&format!("unknown name '{name}'"))
                })
            }
            Tok::Sym(c) => {
                self.pos -= 1;
                Err(self.error(&format!("unexpected '{c}'")))
            }
        }
    }
}

fn variable(name: &str) -> Option<Node> {
    Some(match name {
        "t" => Node::T,
        "y" => Node::Y,
        "x" => Node::X(0),
        "z" => Node::Z(0),
        "pi" => Node::Num(std::f64::consts::PI),
        "e" => Node::Num(std::f64::consts::E),
        "inf" => Node::Num(f64::INFINITY),
        _ => {
            let (head, idx) = name.split_at(1);
            let k: usize = idx.parse().ok()?;
            if !(1..=9).contains(&k) {
                return None;
            }
            match head {
                "x" => Node::X(k - 1),
                "z" => Node::Z(k - 1),
                _ => return None,
            }
        }
    })
}
