//! Document filter language.
//!
//! ```text
//! expr    := and ( "||" and )*
//! and     := unary ( "&&" unary )*
//! unary   := "!" unary | "(" expr ")" | field op literal
//! field   := [A-Za-z_][A-Za-z0-9_]*        (not `true` / `false`)
//! op      := "==" | "!=" | "<" | "<=" | ">" | ">="
//! literal := JSON string | decimal number | true | false
//! ```
//!
//! Evaluation never fails. A comparison against a missing field, across
//! types, or with an ordering operator on booleans is `false`. See
//! `docs/grammar.md` for the full table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::DocId;

const MAX_DEPTH: usize = 256;

/// A document field value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarValue {
    Bool(bool),
    Number(f64),
    String(String),
}

impl ScalarValue {
    /// Converts a JSON value, rejecting anything that is not a finite scalar.
    pub fn from_json(value: &serde_json::Value) -> Option<Self> {
        match value {
            serde_json::Value::Bool(b) => Some(Self::Bool(*b)),
            serde_json::Value::Number(n) => n.as_f64().filter(|f| f.is_finite()).map(Self::Number),
            serde_json::Value::String(s) => Some(Self::String(s.clone())),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        !matches!(self, Self::Number(n) if !n.is_finite())
    }
}

impl From<&str> for ScalarValue {
    fn from(s: &str) -> Self {
        Self::String(s.to_string())
    }
}

impl From<String> for ScalarValue {
    fn from(s: String) -> Self {
        Self::String(s)
    }
}

impl From<f64> for ScalarValue {
    fn from(n: f64) -> Self {
        Self::Number(n)
    }
}

impl From<bool> for ScalarValue {
    fn from(b: bool) -> Self {
        Self::Bool(b)
    }
}

impl fmt::Display for ScalarValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bool(b) => write!(f, "{b}"),
            Self::Number(n) => write!(f, "{n}"),
            Self::String(s) => f.write_str(&serde_json::to_string(s).map_err(|_| fmt::Error)?),
        }
    }
}

/// Flat document body.
pub type Fields = BTreeMap<String, ScalarValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub const ALL: [CmpOp; 6] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
        }
    }
}

/// Parsed filter expression. `And`/`Or` built by the parser always have at
/// least two children.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryExpr {
    Or(Vec<QueryExpr>),
    And(Vec<QueryExpr>),
    Not(Box<QueryExpr>),
    Cmp {
        field: String,
        op: CmpOp,
        literal: ScalarValue,
    },
}

impl QueryExpr {
    pub fn cmp(field: impl Into<String>, op: CmpOp, literal: impl Into<ScalarValue>) -> Self {
        QueryExpr::Cmp {
            field: field.into(),
            op,
            literal: literal.into(),
        }
    }

    /// Negation, so `!expr` reads naturally at call sites.
    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        QueryExpr::Not(Box::new(self))
    }

    /// Field names referenced anywhere in the expression.
    pub fn fields(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_fields(&mut out);
        out
    }

    fn collect_fields<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            QueryExpr::Or(xs) | QueryExpr::And(xs) => xs.iter().for_each(|x| x.collect_fields(out)),
            QueryExpr::Not(x) => x.collect_fields(out),
            QueryExpr::Cmp { field, .. } => {
                out.insert(field.as_str());
            }
        }
    }
}

impl fmt::Display for QueryExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryExpr::Cmp { field, op, literal } => write!(f, "({field} {} {literal})", op.symbol()),
            QueryExpr::Not(x) => write!(f, "!{x}"),
            QueryExpr::And(xs) | QueryExpr::Or(xs) => {
                let sep = if matches!(self, QueryExpr::And(_)) {
                    " && "
                } else {
                    " || "
                };
                f.write_str("(")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    write!(f, "{x}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Canonical, fully parenthesized text of `expr`.
pub fn print(expr: &QueryExpr) -> String {
    expr.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SyntaxError: at byte {offset}: expected {expected}")]
pub struct SyntaxError {
    pub offset: usize,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    Bool(bool),
    Op(CmpOp),
    And,
    Or,
    Not,
    LParen,
    RParen,
    Eof,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err<T>(&self, offset: usize, expected: &str) -> Result<T, SyntaxError> {
        Err(SyntaxError {
            offset,
            expected: expected.to_string(),
        })
    }

    fn next(&mut self) -> Result<(usize, Tok), SyntaxError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(start) else {
            return Ok((start, Tok::Eof));
        };
        let peek = bytes.get(start + 1).copied();
        let (len, tok) = match c {
            b'(' => (1, Tok::LParen),
            b')' => (1, Tok::RParen),
            b'&' if peek == Some(b'&') => (2, Tok::And),
            b'|' if peek == Some(b'|') => (2, Tok::Or),
            b'=' if peek == Some(b'=') => (2, Tok::Op(CmpOp::Eq)),
            b'!' if peek == Some(b'=') => (2, Tok::Op(CmpOp::Ne)),
            b'!' => (1, Tok::Not),
            b'<' if peek == Some(b'=') => (2, Tok::Op(CmpOp::Le)),
            b'<' => (1, Tok::Op(CmpOp::Lt)),
            b'>' if peek == Some(b'=') => (2, Tok::Op(CmpOp::Ge)),
            b'>' => (1, Tok::Op(CmpOp::Gt)),
            b'"' => return self.string(start),
            b'-' | b'0'..=b'9' => return self.number(start),
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let len = bytes[start..]
                    .iter()
                    .take_while(|b| b.is_ascii_alphanumeric() || **b == b'_')
                    .count();
                let word = &self.src[start..start + len];
                let tok = match word {
                    "true" => Tok::Bool(true),
                    "false" => Tok::Bool(false),
                    _ => Tok::Ident(word.to_string()),
                };
                (len, tok)
            }
            _ => return self.err(start, "a token"),
        };
        self.pos += len;
        Ok((start, tok))
    }

    fn string(&mut self, start: usize) -> Result<(usize, Tok), SyntaxError> {
        let bytes = self.src.as_bytes();
        let mut i = start + 1;
        loop {
            match bytes.get(i) {
                None => return self.err(i, "closing '\"'"),
                Some(b'\\') => i += 2,
                Some(b'"') => break,
                Some(_) => i += 1,
            }
        }
        let end = i + 1;
        // Byte scanning above only stops on ASCII, so `end` is a char boundary.
        match serde_json::from_str::<String>(&self.src[start..end]) {
            Ok(s) => {
                self.pos = end;
                Ok((start, Tok::Str(s)))
            }
            Err(_) => self.err(start, "a valid string literal"),
        }
    }

    fn number(&mut self, start: usize) -> Result<(usize, Tok), SyntaxError> {
        let bytes = self.src.as_bytes();
        let digits = |from: usize| {
            bytes[from.min(bytes.len())..]
                .iter()
                .take_while(|b| b.is_ascii_digit())
                .count()
        };
        let mut i = start;
        if bytes[i] == b'-' {
            i += 1;
        }
        let n = digits(i);
        if n == 0 {
            return self.err(i, "a digit");
        }
        i += n;
        if bytes.get(i) == Some(&b'.') {
            let n = digits(i + 1);
            if n == 0 {
                return self.err(i + 1, "a digit after '.'");
            }
            i += 1 + n;
        }
        if matches!(bytes.get(i), Some(b'e' | b'E')) {
            let mut j = i + 1;
            if matches!(bytes.get(j), Some(b'+' | b'-')) {
                j += 1;
            }
            let n = digits(j);
            if n == 0 {
                return self.err(j, "an exponent digit");
            }
            i = j + n;
        }
        match self.src[start..i].parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos = i;
                Ok((start, Tok::Num(v)))
            }
            _ => self.err(start, "a finite number"),
        }
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    peeked: Option<(usize, Tok)>,
    depth: usize,
}

impl<'a> Parser<'a> {
    fn peek(&mut self) -> Result<&(usize, Tok), SyntaxError> {
        if self.peeked.is_none() {
            self.peeked = Some(self.lexer.next()?);
        }
        Ok(self.peeked.as_ref().expect("peeked"))
    }

    fn bump(&mut self) -> Result<(usize, Tok), SyntaxError> {
        self.peek()?;
        Ok(self.peeked.take().expect("peeked"))
    }

    fn fail<T>(offset: usize, expected: &str) -> Result<T, SyntaxError> {
        Err(SyntaxError {
            offset,
            expected: expected.to_string(),
        })
    }

    fn or(&mut self) -> Result<QueryExpr, SyntaxError> {
        let mut items = vec![self.and()?];
        while self.peek()?.1 == Tok::Or {
            self.bump()?;
            items.push(self.and()?);
        }
        Ok(if items.len() == 1 {
            items.pop().expect("one")
        } else {
            QueryExpr::Or(items)
        })
    }

    fn and(&mut self) -> Result<QueryExpr, SyntaxError> {
        let mut items = vec![self.unary()?];
        while self.peek()?.1 == Tok::And {
            self.bump()?;
            items.push(self.unary()?);
        }
        Ok(if items.len() == 1 {
            items.pop().expect("one")
        } else {
            QueryExpr::And(items)
        })
    }

    fn unary(&mut self) -> Result<QueryExpr, SyntaxError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            let offset = self.peek()?.0;
            return Self::fail(offset, "shallower nesting");
        }
        let (offset, tok) = self.bump()?;
        let out = match tok {
            Tok::Not => self.unary()?.not(),
            Tok::LParen => {
                let inner = self.or()?;
                match self.bump()? {
                    (_, Tok::RParen) => inner,
                    (at, _) => return Self::fail(at, "')'"),
                }
            }
            Tok::Ident(field) => {
                let op = match self.bump()? {
                    (_, Tok::Op(op)) => op,
                    (at, _) => return Self::fail(at, "a comparison operator"),
                };
                let literal = match self.bump()? {
                    (_, Tok::Str(s)) => ScalarValue::String(s),
                    (_, Tok::Num(n)) => ScalarValue::Number(n),
                    (_, Tok::Bool(b)) => ScalarValue::Bool(b),
                    (at, _) => return Self::fail(at, "a literal"),
                };
                QueryExpr::Cmp { field, op, literal }
            }
            _ => return Self::fail(offset, "a field name, '!' or '('"),
        };
        self.depth -= 1;
        Ok(out)
    }
}

/// Parses filter text into an expression tree.
pub fn parse(text: &str) -> Result<QueryExpr, SyntaxError> {
    let mut parser = Parser {
        lexer: Lexer { src: text, pos: 0 },
        peeked: None,
        depth: 0,
    };
    let expr = parser.or()?;
    match parser.bump()? {
        (_, Tok::Eof) => Ok(expr),
        (at, _) => Parser::fail(at, "end of input"),
    }
}

/// Parses raw bytes; invalid UTF-8 is reported as a syntax error.
pub fn parse_bytes(bytes: &[u8]) -> Result<QueryExpr, SyntaxError> {
    match std::str::from_utf8(bytes) {
        Ok(s) => parse(s),
        Err(e) => Parser::fail(e.valid_up_to(), "valid UTF-8"),
    }
}

fn compare(value: &ScalarValue, op: CmpOp, literal: &ScalarValue) -> bool {
    match (value, literal) {
        (ScalarValue::String(a), ScalarValue::String(b)) => op.holds(a.as_str().cmp(b.as_str())),
        (ScalarValue::Number(a), ScalarValue::Number(b)) => a.partial_cmp(b).is_some_and(|ord| op.holds(ord)),
        (ScalarValue::Bool(a), ScalarValue::Bool(b)) => match op {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            _ => false,
        },
        _ => false,
    }
}

/// Truth value of `expr` against a document's fields.
pub fn evaluate(expr: &QueryExpr, fields: &Fields) -> bool {
    match expr {
        QueryExpr::Or(xs) => xs.iter().any(|x| evaluate(x, fields)),
        QueryExpr::And(xs) => xs.iter().all(|x| evaluate(x, fields)),
        QueryExpr::Not(x) => !evaluate(x, fields),
        QueryExpr::Cmp { field, op, literal } => fields.get(field).is_some_and(|value| compare(value, *op, literal)),
    }
}

/// Read access to a document collection and its inverted indices, as needed
/// to resolve a filter.
pub trait IndexView {
    fn is_indexed(&self, field: &str) -> bool;
    /// Ids of documents holding `field`; `None` if the field is not indexed.
    fn ids_with_field(&self, field: &str) -> Option<BTreeSet<DocId>>;
    /// Ids of documents whose `field` equals `value`; `None` if not indexed.
    fn ids_with_value(&self, field: &str, value: &ScalarValue) -> Option<BTreeSet<DocId>>;
    fn all_ids(&self) -> BTreeSet<DocId>;
    /// Runs `f` on the fields of `id`, returning `None` if the id is not live.
    fn with_fields(&self, id: DocId, f: &mut dyn FnMut(&Fields) -> bool) -> Option<bool>;
}

/// Documents matching a filter.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Candidates {
    pub ids: BTreeSet<DocId>,
    /// Some referenced field had no inverted index, so resolution fell back
    /// to scanning every document.
    pub full_scan: bool,
}

fn superset<V: IndexView + ?Sized>(expr: &QueryExpr, view: &V) -> Option<BTreeSet<DocId>> {
    match expr {
        QueryExpr::Cmp {
            field,
            op: CmpOp::Eq,
            literal,
        } => view.ids_with_value(field, literal),
        QueryExpr::Cmp { field, .. } => view.ids_with_field(field),
        QueryExpr::And(xs) => xs
            .iter()
            .filter_map(|x| superset(x, view))
            .reduce(|a, b| a.intersection(&b).copied().collect()),
        QueryExpr::Or(xs) => xs.iter().try_fold(BTreeSet::new(), |mut acc, x| {
            acc.extend(superset(x, view)?);
            Some(acc)
        }),
        // A negated comparison matches documents lacking the field.
        QueryExpr::Not(_) => None,
    }
}

/// Exactly the ids for which `evaluate(expr, doc)` holds. Inverted indices
/// narrow the set that has to be evaluated; they never change the answer.
pub fn candidates<V: IndexView + ?Sized>(expr: &QueryExpr, view: &V) -> Candidates {
    let full_scan = expr.fields().iter().any(|f| !view.is_indexed(f));
    let pool = superset(expr, view).unwrap_or_else(|| view.all_ids());
    let ids = pool
        .into_iter()
        .filter(|&id| view.with_fields(id, &mut |fields| evaluate(expr, fields)) == Some(true))
        .collect();
    Candidates { ids, full_scan }
}
