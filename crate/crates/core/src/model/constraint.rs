//! Boundary-constraint language for business scenarios.
//!
//! A constraint is a single line of infix text; the grammar lives in
//! `docs/constraint-grammar.ebnf`. Examples:
//!
//! ```text
//! count(service temp-sensing level >= 1) >= 1
//! NOT (sensing/temperature/polling_rate > 100) AND online
//! sensing/temperature/mode@RPI3_B_ARM_01 = eco OR charge_pct >= 40
//! ```
//!
//! A field comparison without `@device` must hold for every device in the
//! evaluated state map; with `@device` it applies to that device only.
//! Evaluation is total: a missing device, an unknown path or a type mismatch
//! is an [`EvalError`], never a silent `false`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::state::DeviceState;
use crate::value::{FieldPath, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn apply<T: Ord>(self, a: &T, b: &T) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }
    }

    fn is_equality(self) -> bool {
        matches!(self, CmpOp::Eq | CmpOp::Ne)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// State field a comparison reads.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum StateField {
    Online,
    Charge,
    Value(FieldPath),
}

impl fmt::Display for StateField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateField::Online => f.write_str("online"),
            StateField::Charge => f.write_str("charge_pct"),
            StateField::Value(p) => f.write_str(p.as_str()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Constraint {
    Literal(bool),
    Compare {
        field: StateField,
        device: Option<String>,
        op: CmpOp,
        value: Value,
    },
    /// `count(service S level >= L) op N`
    ServiceCount {
        service: String,
        min_level: u8,
        op: CmpOp,
        threshold: i64,
    },
    Not(Box<Constraint>),
    And(Vec<Constraint>),
    Or(Vec<Constraint>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("device {0} is not present in the evaluated states")]
    MissingDevice(String),
    #[error("device {device} has no field {field}")]
    UnknownPath { device: String, field: String },
    #[error("cannot compare {field} = {found} with {expected} using {op}")]
    TypeMismatch {
        field: String,
        found: Value,
        expected: Value,
        op: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("constraint parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl Constraint {
    pub fn parse(text: &str) -> Result<Constraint, ParseError> {
        let tokens = lex(text)?;
        let mut parser = Parser { tokens, pos: 0 };
        let expr = parser.or_expr()?;
        match parser.peek() {
            None => Ok(expr),
            Some(t) => Err(ParseError {
                offset: t.offset,
                message: format!("unexpected {:?}", t.tok),
            }),
        }
    }

    /// Devices named explicitly with `@device`.
    pub fn referenced_devices(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk(&mut |c| {
            if let Constraint::Compare { device: Some(d), .. } = c {
                out.push(d.as_str());
            }
        });
        out.sort_unstable();
        out.dedup();
        out
    }

    fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Constraint)) {
        f(self);
        match self {
            Constraint::Not(inner) => inner.walk(f),
            Constraint::And(items) | Constraint::Or(items) => items.iter().for_each(|c| c.walk(f)),
            _ => {}
        }
    }

    pub fn evaluate(&self, states: &BTreeMap<String, DeviceState>) -> Result<bool, EvalError> {
        match self {
            Constraint::Literal(b) => Ok(*b),
            Constraint::Compare {
                field,
                device,
                op,
                value,
            } => match device {
                Some(d) => {
                    let state = states.get(d).ok_or_else(|| EvalError::MissingDevice(d.clone()))?;
                    compare(state, field, *op, value)
                }
                None => {
                    for state in states.values() {
                        if !compare(state, field, *op, value)? {
                            return Ok(false);
                        }
                    }
                    Ok(true)
                }
            },
            Constraint::ServiceCount {
                service,
                min_level,
                op,
                threshold,
            } => {
                let n = states
                    .values()
                    .filter(|s| s.service_level(service) >= *min_level)
                    .count() as i64;
                Ok(op.apply(&n, threshold))
            }
            Constraint::Not(inner) => Ok(!inner.evaluate(states)?),
            // evaluate every operand so model errors are never masked by
            // short-circuiting
            Constraint::And(items) => {
                let mut all = true;
                for c in items {
                    all &= c.evaluate(states)?;
                }
                Ok(all)
            }
            Constraint::Or(items) => {
                let mut any = false;
                for c in items {
                    any |= c.evaluate(states)?;
                }
                Ok(any)
            }
        }
    }
}

fn compare(state: &DeviceState, field: &StateField, op: CmpOp, expected: &Value) -> Result<bool, EvalError> {
    let found = match field {
        StateField::Online => Value::Bool(state.online),
        StateField::Charge => Value::Int(i64::from(state.charge_pct)),
        StateField::Value(path) => state
            .current_values
            .get(path)
            .cloned()
            .ok_or_else(|| EvalError::UnknownPath {
                device: state.device_id.clone(),
                field: path.to_string(),
            })?,
    };
    let mismatch = || EvalError::TypeMismatch {
        field: field.to_string(),
        found: found.clone(),
        expected: expected.clone(),
        op: op.symbol(),
    };
    match (&found, expected) {
        (Value::Int(a), Value::Int(b)) => Ok(op.apply(a, b)),
        (Value::Bool(a), Value::Bool(b)) if op.is_equality() => Ok(op.apply(a, b)),
        (Value::Text(a), Value::Text(b)) if op.is_equality() => Ok(op.apply(a, b)),
        (Value::Set(a), Value::Set(b)) if op.is_equality() => Ok(op.apply(a, b)),
        _ => Err(mismatch()),
    }
}

// ---------------------------------------------------------------- printing

fn write_word_or_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    let bare = is_bare_word(s) && !is_keyword(s) && s.parse::<i64>().is_err();
    if bare {
        f.write_str(s)
    } else {
        write!(f, "{s:?}")
    }
}

fn is_bare_word(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(is_word_char)
}

fn is_keyword(s: &str) -> bool {
    matches!(s, "AND" | "OR" | "NOT" | "true" | "false" | "count" | "service" | "level")
}

fn write_literal(f: &mut fmt::Formatter<'_>, v: &Value) -> fmt::Result {
    match v {
        Value::Text(s) => write!(f, "{s:?}"),
        other => write!(f, "{other}"),
    }
}

impl Constraint {
    fn precedence(&self) -> u8 {
        match self {
            Constraint::Or(_) => 0,
            Constraint::And(_) => 1,
            _ => 2,
        }
    }

    fn write_child(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        if self.precedence() < min {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Literal(b) => write!(f, "{b}"),
            Constraint::Compare {
                field,
                device,
                op,
                value,
            } => {
                write!(f, "{field}")?;
                if let Some(d) = device {
                    write!(f, "@{d}")?;
                }
                write!(f, " {} ", op.symbol())?;
                write_literal(f, value)
            }
            Constraint::ServiceCount {
                service,
                min_level,
                op,
                threshold,
            } => {
                f.write_str("count(service ")?;
                write_word_or_quoted(f, service)?;
                write!(f, " level >= {min_level}) {} {threshold}", op.symbol())
            }
            Constraint::Not(inner) => {
                f.write_str("NOT ")?;
                inner.write_child(f, 2)
            }
            Constraint::And(items) => {
                for (i, c) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" AND ")?;
                    }
                    c.write_child(f, 2)?;
                }
                Ok(())
            }
            Constraint::Or(items) => {
                for (i, c) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" OR ")?;
                    }
                    c.write_child(f, 1)?;
                }
                Ok(())
            }
        }
    }
}

impl Serialize for Constraint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Constraint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Constraint::parse(&text).map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for Constraint {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Constraint::parse(s)
    }
}

// ---------------------------------------------------------------- lexing

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    LParen,
    RParen,
    At,
    Op(CmpOp),
    Int(i64),
    Str(String),
    Word(String),
}

#[derive(Clone, Debug)]
struct Spanned {
    tok: Tok,
    offset: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '/' | '.' | ':' | '-')
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut out = Vec::new();
    let mut it = text.char_indices().peekable();
    let err = |offset: usize, message: &str| ParseError {
        offset,
        message: message.to_string(),
    };
    while let Some(&(i, c)) = it.peek() {
        let tok = match c {
            c if c.is_whitespace() => {
                it.next();
                continue;
            }
            '(' => {
                it.next();
                Tok::LParen
            }
            ')' => {
                it.next();
                Tok::RParen
            }
            '@' => {
                it.next();
                Tok::At
            }
            '≠' => {
                it.next();
                Tok::Op(CmpOp::Ne)
            }
            '≤' => {
                it.next();
                Tok::Op(CmpOp::Le)
            }
            '≥' => {
                it.next();
                Tok::Op(CmpOp::Ge)
            }
            '=' | '!' | '<' | '>' => {
                it.next();
                let followed_by_eq = matches!(it.peek(), Some((_, '=')));
                if followed_by_eq {
                    it.next();
                }
                Tok::Op(match (c, followed_by_eq) {
                    ('=', _) => CmpOp::Eq,
                    ('!', true) => CmpOp::Ne,
                    ('<', false) => CmpOp::Lt,
                    ('<', true) => CmpOp::Le,
                    ('>', false) => CmpOp::Gt,
                    ('>', true) => CmpOp::Ge,
                    _ => return Err(err(i, "expected != after !")),
                })
            }
            '"' => {
                it.next();
                let mut s = String::new();
                loop {
                    match it.next() {
                        None => return Err(err(i, "unterminated string")),
                        Some((_, '"')) => break,
                        Some((_, '\\')) => match it.next() {
                            Some((_, 'n')) => s.push('\n'),
                            Some((_, 't')) => s.push('\t'),
                            Some((_, ch)) => s.push(ch),
                            None => return Err(err(i, "unterminated escape")),
                        },
                        Some((_, ch)) => s.push(ch),
                    }
                }
                Tok::Str(s)
            }
            c if c.is_ascii_digit() || c == '-' => {
                let mut s = String::new();
                s.push(c);
                it.next();
                while let Some(&(_, d)) = it.peek() {
                    if d.is_ascii_digit() {
                        s.push(d);
                        it.next();
                    } else {
                        break;
                    }
                }
                Tok::Int(s.parse().map_err(|_| err(i, "invalid integer"))?)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&(_, d)) = it.peek() {
                    if is_word_char(d) {
                        s.push(d);
                        it.next();
                    } else {
                        break;
                    }
                }
                Tok::Word(s)
            }
            other => return Err(err(i, &format!("unexpected character {other:?}"))),
        };
        out.push(Spanned { tok, offset: i });
    }
    Ok(out)
}

// ---------------------------------------------------------------- parsing

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Spanned> {
        self.tokens.get(self.pos)
    }

    fn offset(&self) -> usize {
        self.peek()
            .map(|t| t.offset)
            .or_else(|| self.tokens.last().map(|t| t.offset + 1))
            .unwrap_or(0)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).map(|s| s.tok.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn at_word(&self, w: &str) -> bool {
        matches!(self.peek(), Some(Spanned { tok: Tok::Word(x), .. }) if x == w)
    }

    fn expect_word(&mut self, w: &str) -> Result<(), ParseError> {
        if self.at_word(w) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(format!("expected `{w}`"))
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if self.peek().map(|t| &t.tok) == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(format!("expected {tok:?}"))
        }
    }

    fn op(&mut self) -> Result<CmpOp, ParseError> {
        match self.peek().map(|t| &t.tok) {
            Some(Tok::Op(op)) => {
                let op = *op;
                self.pos += 1;
                Ok(op)
            }
            _ => self.error("expected comparison operator"),
        }
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        match self.peek().map(|t| &t.tok) {
            Some(Tok::Int(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => self.error("expected integer"),
        }
    }

    fn or_expr(&mut self) -> Result<Constraint, ParseError> {
        let mut items = vec![self.and_expr()?];
        while self.at_word("OR") {
            self.pos += 1;
            items.push(self.and_expr()?);
        }
        Ok(flatten(items, true))
    }

    fn and_expr(&mut self) -> Result<Constraint, ParseError> {
        let mut items = vec![self.not_expr()?];
        while self.at_word("AND") {
            self.pos += 1;
            items.push(self.not_expr()?);
        }
        Ok(flatten(items, false))
    }

    fn not_expr(&mut self) -> Result<Constraint, ParseError> {
        if self.at_word("NOT") {
            self.pos += 1;
            return Ok(Constraint::Not(Box::new(self.not_expr()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Constraint, ParseError> {
        let Some(start) = self.peek().cloned() else {
            return self.error("unexpected end of constraint");
        };
        match start.tok {
            Tok::LParen => {
                self.pos += 1;
                let inner = self.or_expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Tok::Word(ref w) if w == "true" || w == "false" => {
                self.pos += 1;
                Ok(Constraint::Literal(w == "true"))
            }
            Tok::Word(ref w) if w == "count" => self.count(),
            Tok::Word(ref w) if !is_keyword(w) => {
                self.pos += 1;
                let field = match w.as_str() {
                    "online" => StateField::Online,
                    "charge_pct" => StateField::Charge,
                    other => match FieldPath::parse(other) {
                        Ok(p) => StateField::Value(p),
                        Err(e) => {
                            return Err(ParseError {
                                offset: start.offset,
                                message: e.to_string(),
                            })
                        }
                    },
                };
                let device = if matches!(self.peek().map(|t| &t.tok), Some(Tok::At)) {
                    self.pos += 1;
                    match self.next() {
                        Some(Tok::Word(d)) => Some(d),
                        Some(Tok::Str(d)) => Some(d),
                        _ => return self.error("expected device id after @"),
                    }
                } else {
                    None
                };
                if !matches!(self.peek().map(|t| &t.tok), Some(Tok::Op(_))) {
                    // bare field: shorthand for `field = true`
                    return Ok(Constraint::Compare {
                        field,
                        device,
                        op: CmpOp::Eq,
                        value: Value::Bool(true),
                    });
                }
                let op = self.op()?;
                let value = match self.next() {
                    Some(Tok::Int(v)) => Value::Int(v),
                    Some(Tok::Str(s)) => Value::Text(s),
                    Some(Tok::Word(w)) if w == "true" => Value::Bool(true),
                    Some(Tok::Word(w)) if w == "false" => Value::Bool(false),
                    Some(Tok::Word(w)) if !is_keyword(&w) => Value::Text(w),
                    _ => {
                        self.pos = self.pos.saturating_sub(1);
                        return self.error("expected literal");
                    }
                };
                Ok(Constraint::Compare {
                    field,
                    device,
                    op,
                    value,
                })
            }
            other => Err(ParseError {
                offset: start.offset,
                message: format!("unexpected {other:?}"),
            }),
        }
    }

    fn count(&mut self) -> Result<Constraint, ParseError> {
        self.expect_word("count")?;
        self.expect(Tok::LParen)?;
        self.expect_word("service")?;
        let service = match self.next() {
            Some(Tok::Word(w)) if !is_keyword(&w) => w,
            Some(Tok::Str(s)) => s,
            _ => {
                self.pos = self.pos.saturating_sub(1);
                return self.error("expected service name");
            }
        };
        self.expect_word("level")?;
        if self.op()? != CmpOp::Ge {
            return self.error("service level bound must use >=");
        }
        let level = self.int()?;
        if !(0..=i64::from(super::state::MAX_SERVICE_LEVEL)).contains(&level) {
            return self.error("service level must lie in 0..=10");
        }
        self.expect(Tok::RParen)?;
        let op = self.op()?;
        let threshold = self.int()?;
        Ok(Constraint::ServiceCount {
            service,
            min_level: level as u8,
            op,
            threshold,
        })
    }
}

fn flatten(items: Vec<Constraint>, or: bool) -> Constraint {
    if items.len() == 1 {
        return items.into_iter().next().expect("one item");
    }
    let mut flat = Vec::new();
    for item in items {
        match (item, or) {
            (Constraint::Or(inner), true) | (Constraint::And(inner), false) => flat.extend(inner),
            (other, _) => flat.push(other),
        }
    }
    if or {
        Constraint::Or(flat)
    } else {
        Constraint::And(flat)
    }
}
