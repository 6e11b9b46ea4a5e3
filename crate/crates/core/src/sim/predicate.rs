//! Success-predicate expressions over environment state.
//!
//! Grammar:
//!
//! ```text
//! expr    := and ( "||" and )*
//! and     := unary ( "&&" unary )*
//! unary   := "!" unary | "(" expr ")" | "true" | "false" | test
//! test    := key ( cmp literal | "contains" literal )?
//! cmp     := "==" | "!=" | "<" | "<=" | ">" | ">="
//! literal := "string" | number | true | false
//! ```
//!
//! A bare key tests the key for truthiness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

const MAX_DEPTH: usize = 64;

/// A value stored in environment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateValue {
    Bool(bool),
    Num(f64),
    Str(String),
    List(Vec<String>),
}

impl StateValue {
    pub fn truthy(&self) -> bool {
        match self {
            Self::Bool(b) => *b,
            Self::Num(n) => *n != 0.0,
            Self::Str(s) => !s.is_empty(),
            Self::List(l) => !l.is_empty(),
        }
    }

    /// Plain text rendering used for widget text interpolation.
    pub fn display(&self) -> String {
        match self {
            Self::Bool(b) => b.to_string(),
            Self::Num(n) if n.fract() == 0.0 && n.abs() < 1e15 => format!("{}", *n as i64),
            Self::Num(n) => n.to_string(),
            Self::Str(s) => s.clone(),
            Self::List(l) => l.join(", "),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn as_str(self) -> &'static str {
        match self {
            Self::Eq => "==",
            Self::Ne => "!=",
            Self::Lt => "<",
            Self::Le => "<=",
            Self::Gt => ">",
            Self::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Bool(bool),
    Num(f64),
    Str(String),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bool(b) => write!(f, "{b}"),
            Self::Num(n) => write!(f, "{n}"),
            Self::Str(s) => write!(f, "{s:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Const(bool),
    Truthy(String),
    Compare { key: String, op: CmpOp, value: Literal },
    Contains { key: String, value: Literal },
    Not(Box<Predicate>),
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("predicate error at byte {offset}: {message}")]
pub struct PredicateError {
    pub offset: usize,
    pub message: String,
}

impl Predicate {
    pub fn parse(src: &str) -> Result<Self, PredicateError> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, depth: 0, len: src.len() };
        let expr = p.expr()?;
        if let Some((tok, at)) = p.tokens.get(p.pos) {
            return Err(PredicateError { offset: *at, message: format!("unexpected {tok:?}") });
        }
        Ok(expr)
    }

    /// Every state key the expression reads.
    pub fn keys(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_keys(&mut out);
        out
    }

    fn collect_keys<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Self::Const(_) => {}
            Self::Truthy(k) | Self::Compare { key: k, .. } | Self::Contains { key: k, .. } => {
                out.insert(k);
            }
            Self::Not(p) => p.collect_keys(out),
            Self::And(ps) | Self::Or(ps) => ps.iter().for_each(|p| p.collect_keys(out)),
        }
    }

    /// Evaluates against a state map. Missing keys make tests false.
    pub fn eval(&self, state: &BTreeMap<String, StateValue>) -> bool {
        match self {
            Self::Const(b) => *b,
            Self::Truthy(k) => state.get(k).is_some_and(StateValue::truthy),
            Self::Compare { key, op, value } => state.get(key).is_some_and(|v| compare(v, *op, value)),
            Self::Contains { key, value } => match (state.get(key), value) {
                (Some(StateValue::List(items)), Literal::Str(s)) => items.iter().any(|i| i == s),
                (Some(StateValue::Str(hay)), Literal::Str(s)) => hay.contains(s.as_str()),
                _ => false,
            },
            Self::Not(p) => !p.eval(state),
            Self::And(ps) => ps.iter().all(|p| p.eval(state)),
            Self::Or(ps) => ps.iter().any(|p| p.eval(state)),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Const(b) => write!(f, "{b}"),
            Self::Truthy(k) => f.write_str(k),
            Self::Compare { key, op, value } => write!(f, "{key} {} {value}", op.as_str()),
            Self::Contains { key, value } => write!(f, "{key} contains {value}"),
            Self::Not(p) => write!(f, "!({p})"),
            Self::And(ps) | Self::Or(ps) => {
                let sep = if matches!(self, Self::And(_)) { " && " } else { " || " };
                f.write_str("(")?;
                for (i, p) in ps.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    write!(f, "{p}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn compare(v: &StateValue, op: CmpOp, lit: &Literal) -> bool {
    match (v, lit) {
        (StateValue::Num(a), Literal::Num(b)) => match op {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        },
        (StateValue::Str(a), Literal::Str(b)) => match op {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            _ => false,
        },
        (StateValue::Bool(a), Literal::Bool(b)) => match op {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            _ => false,
        },
        _ => matches!(op, CmpOp::Ne),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Str(String),
    Num(f64),
    Cmp(CmpOp),
    And,
    Or,
    Not,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<(Token, usize)>, PredicateError> {
    let err = |offset, message: &str| PredicateError { offset, message: message.to_string() };
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'(' => {
                out.push((Token::LParen, start));
                i += 1;
            }
            b')' => {
                out.push((Token::RParen, start));
                i += 1;
            }
            b'&' | b'|' => {
                if bytes.get(i + 1) != Some(&c) {
                    return Err(err(start, "expected && or ||"));
                }
                out.push((if c == b'&' { Token::And } else { Token::Or }, start));
                i += 2;
            }
            b'=' | b'!' | b'<' | b'>' => {
                let eq = bytes.get(i + 1) == Some(&b'=');
                let tok = match (c, eq) {
                    (b'=', true) => Token::Cmp(CmpOp::Eq),
                    (b'=', false) => return Err(err(start, "use == for equality")),
                    (b'!', true) => Token::Cmp(CmpOp::Ne),
                    (b'!', false) => Token::Not,
                    (b'<', true) => Token::Cmp(CmpOp::Le),
                    (b'<', false) => Token::Cmp(CmpOp::Lt),
                    (b'>', true) => Token::Cmp(CmpOp::Ge),
                    _ => Token::Cmp(CmpOp::Gt),
                };
                i += if eq { 2 } else { 1 };
                out.push((tok, start));
            }
            b'"' => {
                i += 1;
                let mut s = String::new();
                loop {
                    let rest = src.get(i..).ok_or_else(|| err(start, "bad string"))?;
                    let ch = rest.chars().next().ok_or_else(|| err(start, "unterminated string"))?;
                    i += ch.len_utf8();
                    match ch {
                        '"' => break,
                        '\\' => {
                            let esc = src[i..].chars().next().ok_or_else(|| err(start, "unterminated string"))?;
                            i += esc.len_utf8();
                            match esc {
                                '"' | '\\' => s.push(esc),
                                'n' => s.push('\n'),
                                _ => return Err(err(i, "unknown escape")),
                            }
                        }
                        _ => s.push(ch),
                    }
                }
                out.push((Token::Str(s), start));
            }
            b'0'..=b'9' | b'-' => {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                let n: f64 = src[start..i].parse().map_err(|_| err(start, "bad number"))?;
                out.push((Token::Num(n), start));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || matches!(bytes[i], b'_' | b'.' | b'-')) {
                    i += 1;
                }
                out.push((Token::Ident(src[start..i].to_string()), start));
            }
            _ => return Err(err(start, "unexpected character")),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    depth: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.len, |(_, o)| *o)
    }

    fn fail<T>(&self, message: &str) -> Result<T, PredicateError> {
        Err(PredicateError { offset: self.offset(), message: message.to_string() })
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Predicate, PredicateError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return self.fail("expression nested too deeply");
        }
        let mut parts = vec![self.and()?];
        while self.peek() == Some(&Token::Or) {
            self.pos += 1;
            parts.push(self.and()?);
        }
        self.depth -= 1;
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Predicate::Or(parts) })
    }

    fn and(&mut self) -> Result<Predicate, PredicateError> {
        let mut parts = vec![self.unary()?];
        while self.peek() == Some(&Token::And) {
            self.pos += 1;
            parts.push(self.unary()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Predicate::And(parts) })
    }

    fn unary(&mut self) -> Result<Predicate, PredicateError> {
        match self.peek() {
            Some(Token::Not) => {
                self.pos += 1;
                self.depth += 1;
                if self.depth > MAX_DEPTH {
                    return self.fail("expression nested too deeply");
                }
                let inner = self.unary()?;
                self.depth -= 1;
                Ok(Predicate::Not(Box::new(inner)))
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.next() != Some(Token::RParen) {
                    self.pos -= 1;
                    return self.fail("expected )");
                }
                Ok(inner)
            }
            Some(Token::Ident(_)) => {
                let Some(Token::Ident(name)) = self.next() else { unreachable!() };
                match name.as_str() {
                    "true" => return Ok(Predicate::Const(true)),
                    "false" => return Ok(Predicate::Const(false)),
                    _ => {}
                }
                match self.peek() {
                    Some(Token::Cmp(op)) => {
                        let op = *op;
                        self.pos += 1;
                        let value = self.literal()?;
                        Ok(Predicate::Compare { key: name, op, value })
                    }
                    Some(Token::Ident(w)) if w == "contains" => {
                        self.pos += 1;
                        let value = self.literal()?;
                        Ok(Predicate::Contains { key: name, value })
                    }
                    _ => Ok(Predicate::Truthy(name)),
                }
            }
            _ => self.fail("expected a test, ! or ("),
        }
    }

    fn literal(&mut self) -> Result<Literal, PredicateError> {
        match self.next() {
            Some(Token::Str(s)) => Ok(Literal::Str(s)),
            Some(Token::Num(n)) => Ok(Literal::Num(n)),
            Some(Token::Ident(w)) if w == "true" => Ok(Literal::Bool(true)),
            Some(Token::Ident(w)) if w == "false" => Ok(Literal::Bool(false)),
            _ => {
                self.pos -= 1;
                self.fail("expected a literal")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> BTreeMap<String, StateValue> {
        let mut s = BTreeMap::new();
        s.insert("wifi".into(), StateValue::Bool(true));
        s.insert("brightness".into(), StateValue::Num(40.0));
        s.insert("cart".into(), StateValue::List(vec!["phone-b".into()]));
        s.insert("mode".into(), StateValue::Str("photo".into()));
        s
    }

    #[test]
    fn evaluates_operators() {
        let s = state();
        let cases = [
            ("wifi", true),
            ("!wifi", false),
            ("brightness > 30 && brightness <= 40", true),
            ("brightness >= 41 || mode == \"photo\"", true),
            ("cart contains \"phone-b\"", true),
            ("cart contains \"phone-a\"", false),
            ("!(mode != \"photo\")", true),
            ("true", true),
            ("missing == 3", false),
        ];
        for (src, want) in cases {
            assert_eq!(Predicate::parse(src).unwrap().eval(&s), want, "{src}");
        }
    }

    #[test]
    fn reports_keys() {
        let p = Predicate::parse("a && (b == 1 || !c contains \"x\")").unwrap();
        assert_eq!(p.keys().into_iter().collect::<Vec<_>>(), vec!["a", "b", "c"]);
    }

    #[test]
    fn rejects_malformed() {
        for src in ["", "a ==", "(a", "a = 1", "a & b", "\"open", "a == b c", "#"] {
            assert!(Predicate::parse(src).is_err(), "{src}");
        }
    }

    #[test]
    fn deep_nesting_is_an_error_not_a_crash() {
        let src = format!("{}a{}", "(".repeat(10_000), ")".repeat(10_000));
        assert!(Predicate::parse(&src).is_err());
        let nots = format!("{}a", "!".repeat(10_000));
        assert!(Predicate::parse(&nots).is_err());
    }

    #[test]
    fn display_reparses() {
        let p = Predicate::parse("a && (b == 1 || !(c contains \"x\\\"y\"))").unwrap();
        assert_eq!(Predicate::parse(&p.to_string()).unwrap(), p);
    }
}
