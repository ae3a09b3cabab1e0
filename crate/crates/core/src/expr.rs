//! The small typed expression language shared by SCXML conditions, assignments,
//! JANI guards and properties.
//!
//! Integers are bounded and checked, there are no strings and no function calls.
//! Every construct maps onto a JANI expression one to one (integer division is
//! emitted as `floor(a / b)`).

use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};

use thiserror::Error;

/// Range used for `int` declarations without explicit bounds.
pub const DEFAULT_INT_RANGE: IntRange = IntRange {
    lo: -32768,
    hi: 32767,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IntRange {
    pub lo: i64,
    pub hi: i64,
}

impl IntRange {
    pub fn new(lo: i64, hi: i64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: i64) -> bool {
        self.lo <= v && v <= self.hi
    }

    /// Smallest range covering both.
    pub fn hull(&self, other: &IntRange) -> IntRange {
        IntRange::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }
}

/// Declared type of a variable or payload field.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Type {
    Bool,
    Int(IntRange),
    Real,
    IntArray { len: usize, range: IntRange },
}

/// Coarse static type used by the type checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Bool,
    Int,
    Real,
    IntArray,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Bool => "bool",
            Kind::Int => "int",
            Kind::Real => "real",
            Kind::IntArray => "int array",
        })
    }
}

impl Type {
    pub fn int() -> Self {
        Type::Int(DEFAULT_INT_RANGE)
    }

    pub fn kind(&self) -> Kind {
        match self {
            Type::Bool => Kind::Bool,
            Type::Int(_) => Kind::Int,
            Type::Real => Kind::Real,
            Type::IntArray { .. } => Kind::IntArray,
        }
    }

    /// Whether `value` is a member of this type, bounds included.
    pub fn admits(&self, value: &Value) -> bool {
        match (self, value) {
            (Type::Bool, Value::Bool(_)) => true,
            (Type::Int(r), Value::Int(v)) => r.contains(*v),
            (Type::Real, Value::Real(_)) => true,
            (Type::Real, Value::Int(_)) => true,
            (Type::IntArray { len, range }, Value::Array(items)) => {
                items.len() == *len && items.iter().all(|v| range.contains(*v))
            }
            _ => false,
        }
    }

    /// Coerce a value to this type's representation (ints widen to reals).
    pub fn coerce(&self, value: Value) -> Value {
        match (self, value) {
            (Type::Real, Value::Int(v)) => Value::Real(v as f64),
            (_, v) => v,
        }
    }

    /// The value used to initialise synthesized variables of this type.
    pub fn default_value(&self) -> Value {
        match self {
            Type::Bool => Value::Bool(false),
            Type::Int(r) => Value::Int(0i64.clamp(r.lo, r.hi)),
            Type::Real => Value::Real(0.0),
            Type::IntArray { len, range } => Value::Array(vec![0i64.clamp(range.lo, range.hi); *len]),
        }
    }

    /// Parse the type syntax used in documents and manifests:
    /// `bool`, `real`, `int`, `int[lo..hi]`, `int[N]`, `int[lo..hi][N]`.
    pub fn parse(text: &str) -> Result<Type, ExprError> {
        let s: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || ExprError::Syntax(format!("invalid type `{text}`"));
        match s.as_str() {
            "bool" | "boolean" => return Ok(Type::Bool),
            "real" | "float" | "double" => return Ok(Type::Real),
            "int" | "integer" => return Ok(Type::int()),
            _ => {}
        }
        let rest = s.strip_prefix("int").ok_or_else(bad)?;
        let mut groups = Vec::new();
        let mut cur = rest;
        while !cur.is_empty() {
            let inner = cur.strip_prefix('[').ok_or_else(bad)?;
            let close = inner.find(']').ok_or_else(bad)?;
            groups.push(&inner[..close]);
            cur = &inner[close + 1..];
        }
        let parse_range = |g: &str| -> Result<IntRange, ExprError> {
            let (lo, hi) = g.split_once("..").ok_or_else(bad)?;
            let lo: i64 = lo.parse().map_err(|_| bad())?;
            let hi: i64 = hi.parse().map_err(|_| bad())?;
            if lo > hi {
                return Err(ExprError::Syntax(format!("empty range in type `{text}`")));
            }
            Ok(IntRange::new(lo, hi))
        };
        let parse_len = |g: &str| -> Result<usize, ExprError> {
            let n: usize = g.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(ExprError::Syntax(format!("zero-length array in `{text}`")));
            }
            Ok(n)
        };
        match groups.as_slice() {
            [g] if g.contains("..") => Ok(Type::Int(parse_range(g)?)),
            [g] => Ok(Type::IntArray {
                len: parse_len(g)?,
                range: DEFAULT_INT_RANGE,
            }),
            [r, n] => Ok(Type::IntArray {
                len: parse_len(n)?,
                range: parse_range(r)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Bool => f.write_str("bool"),
            Type::Real => f.write_str("real"),
            Type::Int(r) if *r == DEFAULT_INT_RANGE => f.write_str("int"),
            Type::Int(r) => write!(f, "int[{}..{}]", r.lo, r.hi),
            Type::IntArray { len, range } if *range == DEFAULT_INT_RANGE => write!(f, "int[{len}]"),
            Type::IntArray { len, range } => write!(f, "int[{}..{}][{len}]", range.lo, range.hi),
        }
    }
}

/// A runtime value.
#[derive(Debug, Clone)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Real(f64),
    Array(Vec<i64>),
}

impl Value {
    pub fn kind(&self) -> Kind {
        match self {
            Value::Bool(_) => Kind::Bool,
            Value::Int(_) => Kind::Int,
            Value::Real(_) => Kind::Real,
            Value::Array(_) => Kind::IntArray,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    fn as_real(&self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(*v as f64),
            Value::Real(v) => Some(*v),
            _ => None,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Real(a), Value::Real(b)) => a.to_bits() == b.to_bits(),
            (Value::Array(a), Value::Array(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            Value::Bool(b) => b.hash(state),
            Value::Int(v) => v.hash(state),
            Value::Real(v) => v.to_bits().hash(state),
            Value::Array(v) => v.hash(state),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(v) => write!(f, "{v}"),
            Value::Real(v) => write!(f, "{v:?}"),
            Value::Array(items) => {
                f.write_str("[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str("]")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    /// Real division, or floor division when both operands are integers.
    Div,
    /// Floor division on integers; produced by [`resolve_int_division`].
    IntDiv,
    Mod,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
    Implies,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Implies => 1,
            BinOp::Or => 2,
            BinOp::And => 3,
            BinOp::Eq | BinOp::Ne => 4,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 5,
            BinOp::Add | BinOp::Sub => 6,
            BinOp::Mul | BinOp::Div | BinOp::IntDiv | BinOp::Mod => 7,
        }
    }

    fn right_assoc(self) -> bool {
        matches!(self, BinOp::Implies)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div | BinOp::IntDiv => "/",
            BinOp::Mod => "%",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "&&",
            BinOp::Or => "||",
            BinOp::Implies => "=>",
        }
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Bool(bool),
    Int(i64),
    Real(f64),
    ArrayLit(Vec<Expr>),
    Var(String),
    /// Payload field of the event that triggered the current transition.
    EventField(String),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    /// `array[index]`; the array operand is always a variable.
    Index(String, Box<Expr>),
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn bin(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(e: Expr) -> Expr {
        Expr::Unary(UnOp::Not, Box::new(e))
    }

    pub fn and(lhs: Expr, rhs: Expr) -> Expr {
        Expr::bin(BinOp::And, lhs, rhs)
    }

    pub fn or(lhs: Expr, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Or, lhs, rhs)
    }

    pub fn eq(lhs: Expr, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Eq, lhs, rhs)
    }

    /// Disjunction of all items; `false` when empty.
    pub fn any(items: impl IntoIterator<Item = Expr>) -> Expr {
        items
            .into_iter()
            .reduce(Expr::or)
            .unwrap_or(Expr::Bool(false))
    }

    pub fn parse(text: &str) -> Result<Expr, ExprError> {
        let mut p = Parser::new(text)?;
        let e = p.expr()?;
        p.expect_end()?;
        Ok(e)
    }

    pub fn is_true(&self) -> bool {
        matches!(self, Expr::Bool(true))
    }

    /// Visit every node, parents first.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::ArrayLit(items) => items.iter().for_each(|e| e.walk(f)),
            Expr::Unary(_, e) | Expr::Index(_, e) => e.walk(f),
            Expr::Binary(_, l, r) => {
                l.walk(f);
                r.walk(f);
            }
            _ => {}
        }
    }

    /// Variable names read by the expression (array names included).
    pub fn vars(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| match e {
            Expr::Var(n) | Expr::Index(n, _) => {
                out.insert(n.as_str());
            }
            _ => {}
        });
        out
    }

    pub fn event_fields(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| {
            if let Expr::EventField(n) = e {
                out.insert(n.as_str());
            }
        });
        out
    }

    /// Rebuild the tree bottom-up, letting `f` replace any node.
    pub fn rewrite(&self, f: &mut impl FnMut(&Expr) -> Option<Expr>) -> Expr {
        if let Some(e) = f(self) {
            return e;
        }
        match self {
            Expr::ArrayLit(items) => Expr::ArrayLit(items.iter().map(|e| e.rewrite(f)).collect()),
            Expr::Unary(op, e) => Expr::Unary(*op, Box::new(e.rewrite(f))),
            Expr::Binary(op, l, r) => Expr::Binary(*op, Box::new(l.rewrite(f)), Box::new(r.rewrite(f))),
            Expr::Index(n, i) => Expr::Index(n.clone(), Box::new(i.rewrite(f))),
            other => other.clone(),
        }
    }

    /// Rename variables (array names included).
    pub fn rename_vars(&self, f: &impl Fn(&str) -> Option<String>) -> Expr {
        self.rewrite(&mut |e| match e {
            Expr::Var(n) => f(n).map(Expr::Var),
            Expr::Index(n, i) => f(n).map(|m| Expr::Index(m, Box::new(i.rename_vars(f)))),
            _ => None,
        })
    }

    /// Replace event payload references.
    pub fn replace_event_fields(&self, f: &impl Fn(&str) -> Expr) -> Expr {
        self.rewrite(&mut |e| match e {
            Expr::EventField(n) => Some(f(n)),
            _ => None,
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, _, _) => op.precedence(),
            Expr::Int(v) if *v < 0 => 8,
            Expr::Real(v) if *v < 0.0 => 8,
            Expr::Unary(..) => 8,
            _ => 9,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Int(v) => write!(f, "{v}"),
            Expr::Real(v) => write!(f, "{v:?}"),
            Expr::ArrayLit(items) => {
                f.write_str("[")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{e}")?;
                }
                f.write_str("]")
            }
            Expr::Var(n) => f.write_str(n),
            Expr::EventField(n) => write!(f, "_event.{n}"),
            Expr::Unary(UnOp::Not, e) => {
                if e.precedence() < 8 {
                    write!(f, "!({e})")
                } else {
                    write!(f, "!{e}")
                }
            }
            Expr::Binary(op, l, r) => {
                let p = op.precedence();
                let (lp, rp) = (l.precedence(), r.precedence());
                let wrap_l = lp < p || (lp == p && op.right_assoc());
                let wrap_r = rp < p || (rp == p && !op.right_assoc());
                if wrap_l {
                    write!(f, "({l})")?;
                } else {
                    write!(f, "{l}")?;
                }
                write!(f, " {} ", op.symbol())?;
                if wrap_r {
                    write!(f, "({r})")
                } else {
                    write!(f, "{r}")
                }
            }
            Expr::Index(n, i) => write!(f, "{n}[{i}]"),
        }
    }
}

/// Target of an assignment.
#[derive(Debug, Clone, PartialEq)]
pub enum LValue {
    Var(String),
    Index(String, Expr),
}

impl LValue {
    pub fn parse(text: &str) -> Result<LValue, ExprError> {
        match Expr::parse(text)? {
            Expr::Var(n) => Ok(LValue::Var(n)),
            Expr::Index(n, i) => Ok(LValue::Index(n, *i)),
            _ => Err(ExprError::Syntax(format!(
                "`{text}` is not an assignable location"
            ))),
        }
    }

    /// The variable written by this location.
    pub fn name(&self) -> &str {
        match self {
            LValue::Var(n) | LValue::Index(n, _) => n,
        }
    }

    pub fn to_expr(&self) -> Expr {
        match self {
            LValue::Var(n) => Expr::Var(n.clone()),
            LValue::Index(n, i) => Expr::Index(n.clone(), Box::new(i.clone())),
        }
    }

    pub fn map_exprs(&self, f: impl Fn(&Expr) -> Expr) -> LValue {
        match self {
            LValue::Var(n) => LValue::Var(n.clone()),
            LValue::Index(n, i) => LValue::Index(n.clone(), f(i)),
        }
    }

    pub fn rename(&self, f: &impl Fn(&str) -> Option<String>) -> LValue {
        match self {
            LValue::Var(n) => LValue::Var(f(n).unwrap_or_else(|| n.clone())),
            LValue::Index(n, i) => {
                LValue::Index(f(n).unwrap_or_else(|| n.clone()), i.rename_vars(f))
            }
        }
    }
}

impl fmt::Display for LValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_expr())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("division by constant zero")]
    ZeroDivisor,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypeError {
    #[error("unknown variable `{0}`")]
    UnknownVar(String),
    #[error("unknown event field `{0}`")]
    UnknownField(String),
    #[error("operator `{op}` cannot be applied to {lhs} and {rhs}")]
    Binary { op: &'static str, lhs: Kind, rhs: Kind },
    #[error("expected {expected}, found {found}")]
    Mismatch { expected: Kind, found: Kind },
    #[error("`{0}` is not an array")]
    NotArray(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("unbound event field `{0}`")]
    UnboundField(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow")]
    Overflow,
    #[error("index {index} out of range for `{array}` of length {len}")]
    IndexOutOfRange { array: String, index: i64, len: usize },
    #[error("type error: {0}")]
    Type(String),
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Int(i64),
    Real(f64),
    Ident(String),
    Sym(&'static str),
}

fn tokenize(text: &str) -> Result<Vec<Tok>, ExprError> {
    const SYMS: [&str; 24] = [
        "=>", "==", "!=", "<=", ">=", "&&", "||", "+", "-", "*", "/", "%", "<", ">", "!", "(",
        ")", "[", "]", ",", ".", "=", "&", "|",
    ];
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let mut real = false;
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                real = true;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    real = true;
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lit = &text[start..i];
            if real {
                let v = lit
                    .parse()
                    .map_err(|_| ExprError::Syntax(format!("bad number `{lit}`")))?;
                out.push(Tok::Real(v));
            } else {
                let v = lit
                    .parse()
                    .map_err(|_| ExprError::Syntax(format!("integer literal `{lit}` out of range")))?;
                out.push(Tok::Int(v));
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Tok::Ident(text[start..i].to_string()));
        } else {
            let sym = SYMS
                .iter()
                .find(|s| text[i..].starts_with(**s))
                .ok_or_else(|| ExprError::Syntax(format!("unexpected character `{c}`")))?;
            // single `=`, `&`, `|` are accepted as their doubled forms
            let canon = match *sym {
                "=" => "==",
                "&" => "&&",
                "|" => "||",
                s => s,
            };
            out.push(Tok::Sym(canon));
            i += sym.len();
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, ExprError> {
        Ok(Self {
            toks: tokenize(text)?,
            pos: 0,
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(x)) if *x == s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), ExprError> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(ExprError::Syntax(format!(
                "expected `{s}`, found {}",
                self.describe_next()
            )))
        }
    }

    fn describe_next(&self) -> String {
        match self.peek() {
            None => "end of input".into(),
            Some(Tok::Int(v)) => format!("`{v}`"),
            Some(Tok::Real(v)) => format!("`{v}`"),
            Some(Tok::Ident(s)) => format!("`{s}`"),
            Some(Tok::Sym(s)) => format!("`{s}`"),
        }
    }

    fn expect_end(&self) -> Result<(), ExprError> {
        if self.pos < self.toks.len() {
            Err(ExprError::Syntax(format!(
                "unexpected {} after expression",
                self.describe_next()
            )))
        } else {
            Ok(())
        }
    }

    fn peek_binop(&self) -> Option<BinOp> {
        match self.peek()? {
            Tok::Sym(s) => Some(match *s {
                "=>" => BinOp::Implies,
                "||" => BinOp::Or,
                "&&" => BinOp::And,
                "==" => BinOp::Eq,
                "!=" => BinOp::Ne,
                "<" => BinOp::Lt,
                "<=" => BinOp::Le,
                ">" => BinOp::Gt,
                ">=" => BinOp::Ge,
                "+" => BinOp::Add,
                "-" => BinOp::Sub,
                "*" => BinOp::Mul,
                "/" => BinOp::Div,
                "%" => BinOp::Mod,
                _ => return None,
            }),
            Tok::Ident(s) => match s.as_str() {
                "and" => Some(BinOp::And),
                "or" => Some(BinOp::Or),
                _ => None,
            },
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        self.binary(1)
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.peek_binop() {
            let p = op.precedence();
            if p < min_prec {
                break;
            }
            self.pos += 1;
            let next_min = if op.right_assoc() { p } else { p + 1 };
            let rhs = self.binary(next_min)?;
            if matches!(op, BinOp::Div | BinOp::Mod) && is_zero_literal(&rhs) {
                return Err(ExprError::ZeroDivisor);
            }
            lhs = Expr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat_sym("!") || matches!(self.peek(), Some(Tok::Ident(s)) if s == "not") && {
            self.pos += 1;
            true
        } {
            let e = self.unary()?;
            return Ok(Expr::not(e));
        }
        if self.eat_sym("-") {
            let e = self.unary()?;
            return Ok(match e {
                Expr::Int(v) => Expr::Int(v.checked_neg().ok_or(ExprError::Syntax(
                    "integer literal out of range".into(),
                ))?),
                Expr::Real(v) => Expr::Real(-v),
                other => Expr::bin(BinOp::Sub, Expr::Int(0), other),
            });
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, ExprError> {
        let e = self.primary()?;
        if let Expr::Var(name) = &e {
            if self.eat_sym("[") {
                let idx = self.expr()?;
                self.expect_sym("]")?;
                return Ok(Expr::Index(name.clone(), Box::new(idx)));
            }
        }
        Ok(e)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        match self.next() {
            Some(Tok::Int(v)) => Ok(Expr::Int(v)),
            Some(Tok::Real(v)) => Ok(Expr::Real(v)),
            Some(Tok::Sym("(")) => {
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Sym("[")) => {
                let mut items = Vec::new();
                if !self.eat_sym("]") {
                    loop {
                        items.push(self.expr()?);
                        if self.eat_sym("]") {
                            break;
                        }
                        self.expect_sym(",")?;
                    }
                }
                Ok(Expr::ArrayLit(items))
            }
            Some(Tok::Ident(s)) => match s.as_str() {
                "true" => Ok(Expr::Bool(true)),
                "false" => Ok(Expr::Bool(false)),
                "_event" | "_msg" | "_res" | "_req" | "_goal" | "_result" | "_feedback" => {
                    self.event_path()
                }
                _ => Ok(Expr::Var(s)),
            },
            _ => {
                self.pos -= 1;
                Err(ExprError::Syntax(format!(
                    "expected an expression, found {}",
                    self.describe_next()
                )))
            }
        }
    }

    /// `_event.field` or `_event.data.field`.
    fn event_path(&mut self) -> Result<Expr, ExprError> {
        let mut parts = Vec::new();
        while self.eat_sym(".") {
            match self.next() {
                Some(Tok::Ident(s)) => parts.push(s),
                _ => return Err(ExprError::Syntax("expected a field name after `.`".into())),
            }
        }
        match parts.as_slice() {
            [f] => Ok(Expr::EventField(f.clone())),
            [d, f] if d == "data" => Ok(Expr::EventField(f.clone())),
            _ => Err(ExprError::Syntax(
                "event payload references take the form `_event.<field>`".into(),
            )),
        }
    }
}

fn is_zero_literal(e: &Expr) -> bool {
    match e {
        Expr::Int(0) => true,
        Expr::Real(v) => *v == 0.0,
        _ => false,
    }
}

/// A temporal formula over a single run.
#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    Until(Expr, Expr),
    Eventually(Expr),
}

impl Formula {
    /// Parse `lhs U rhs`, `F rhs` or `eventually rhs`.
    pub fn parse(text: &str) -> Result<Formula, ExprError> {
        let mut p = Parser::new(text)?;
        if matches!(p.peek(), Some(Tok::Ident(s)) if s == "F" || s == "eventually")
            && p.toks.len() > 1
            && !matches!(p.toks.get(1), Some(Tok::Sym(s)) if p_is_binop(s))
        {
            p.pos += 1;
            let rhs = p.expr()?;
            p.expect_end()?;
            return Ok(Formula::Eventually(rhs));
        }
        let lhs = p.expr()?;
        match p.next() {
            Some(Tok::Ident(s)) if s == "U" => {}
            None => {
                return Err(ExprError::Syntax(
                    "expected `lhs U rhs` or `F rhs`".into(),
                ))
            }
            Some(_) => {
                p.pos -= 1;
                return Err(ExprError::Syntax(format!(
                    "expected `U`, found {}",
                    p.describe_next()
                )));
            }
        }
        let rhs = p.expr()?;
        p.expect_end()?;
        Ok(Formula::Until(lhs, rhs))
    }

    pub fn lhs(&self) -> Option<&Expr> {
        match self {
            Formula::Until(l, _) => Some(l),
            Formula::Eventually(_) => None,
        }
    }

    pub fn rhs(&self) -> &Expr {
        match self {
            Formula::Until(_, r) | Formula::Eventually(r) => r,
        }
    }
}

fn p_is_binop(s: &str) -> bool {
    matches!(
        s,
        "=>" | "||" | "&&" | "==" | "!=" | "<" | "<=" | ">" | ">=" | "+" | "-" | "*" | "/" | "%" | "["
    )
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Until(l, r) => write!(f, "({l}) U ({r})"),
            Formula::Eventually(r) => write!(f, "F ({r})"),
        }
    }
}

// ---------------------------------------------------------------------------
// Type checking

/// Static information available to the type checker.
pub trait TypeEnv {
    fn var_type(&self, name: &str) -> Option<Type>;
    fn field_type(&self, _name: &str) -> Option<Type> {
        None
    }
}

impl<F: Fn(&str) -> Option<Type>> TypeEnv for F {
    fn var_type(&self, name: &str) -> Option<Type> {
        self(name)
    }
}

fn numeric(k: Kind) -> bool {
    matches!(k, Kind::Int | Kind::Real)
}

pub fn typecheck(expr: &Expr, env: &dyn TypeEnv) -> Result<Kind, TypeError> {
    Ok(match expr {
        Expr::Bool(_) => Kind::Bool,
        Expr::Int(_) => Kind::Int,
        Expr::Real(_) => Kind::Real,
        Expr::ArrayLit(items) => {
            for e in items {
                let k = typecheck(e, env)?;
                if k != Kind::Int {
                    return Err(TypeError::Mismatch {
                        expected: Kind::Int,
                        found: k,
                    });
                }
            }
            Kind::IntArray
        }
        Expr::Var(n) => env
            .var_type(n)
            .ok_or_else(|| TypeError::UnknownVar(n.clone()))?
            .kind(),
        Expr::EventField(n) => env
            .field_type(n)
            .ok_or_else(|| TypeError::UnknownField(n.clone()))?
            .kind(),
        Expr::Index(n, idx) => {
            let t = env
                .var_type(n)
                .ok_or_else(|| TypeError::UnknownVar(n.clone()))?;
            if t.kind() != Kind::IntArray {
                return Err(TypeError::NotArray(n.clone()));
            }
            expect(typecheck(idx, env)?, Kind::Int)?;
            Kind::Int
        }
        Expr::Unary(UnOp::Not, e) => {
            expect(typecheck(e, env)?, Kind::Bool)?;
            Kind::Bool
        }
        Expr::Binary(op, l, r) => {
            let (lk, rk) = (typecheck(l, env)?, typecheck(r, env)?);
            let err = || TypeError::Binary {
                op: op.symbol(),
                lhs: lk,
                rhs: rk,
            };
            match op {
                BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => {
                    if !numeric(lk) || !numeric(rk) {
                        return Err(err());
                    }
                    if lk == Kind::Int && rk == Kind::Int {
                        Kind::Int
                    } else {
                        Kind::Real
                    }
                }
                BinOp::IntDiv | BinOp::Mod => {
                    if lk != Kind::Int || rk != Kind::Int {
                        return Err(err());
                    }
                    Kind::Int
                }
                BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                    if !numeric(lk) || !numeric(rk) {
                        return Err(err());
                    }
                    Kind::Bool
                }
                BinOp::Eq | BinOp::Ne => {
                    let ok = (numeric(lk) && numeric(rk)) || (lk == Kind::Bool && rk == Kind::Bool);
                    if !ok {
                        return Err(err());
                    }
                    Kind::Bool
                }
                BinOp::And | BinOp::Or | BinOp::Implies => {
                    if lk != Kind::Bool || rk != Kind::Bool {
                        return Err(err());
                    }
                    Kind::Bool
                }
            }
        }
    })
}

fn expect(found: Kind, expected: Kind) -> Result<(), TypeError> {
    if found == expected {
        Ok(())
    } else {
        Err(TypeError::Mismatch { expected, found })
    }
}

/// Turn `Div` nodes whose operands are both integers into `IntDiv`.
pub fn resolve_int_division(expr: &Expr, env: &dyn TypeEnv) -> Expr {
    expr.rewrite(&mut |e| match e {
        Expr::Binary(BinOp::Div, l, r) => {
            let l2 = resolve_int_division(l, env);
            let r2 = resolve_int_division(r, env);
            let ints = typecheck(&l2, env) == Ok(Kind::Int) && typecheck(&r2, env) == Ok(Kind::Int);
            let op = if ints { BinOp::IntDiv } else { BinOp::Div };
            Some(Expr::bin(op, l2, r2))
        }
        _ => None,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Bindings available during evaluation.
pub trait Env {
    fn var(&self, name: &str) -> Option<Value>;
    fn field(&self, _name: &str) -> Option<Value> {
        None
    }
}

impl Env for std::collections::BTreeMap<String, Value> {
    fn var(&self, name: &str) -> Option<Value> {
        self.get(name).cloned()
    }
}

impl Env for std::collections::HashMap<String, Value> {
    fn var(&self, name: &str) -> Option<Value> {
        self.get(name).cloned()
    }
}

/// Evaluate an expression. Pure: never mutates the environment.
pub fn eval(expr: &Expr, env: &dyn Env) -> Result<Value, EvalError> {
    match expr {
        Expr::Bool(b) => Ok(Value::Bool(*b)),
        Expr::Int(v) => Ok(Value::Int(*v)),
        Expr::Real(v) => Ok(Value::Real(*v)),
        Expr::ArrayLit(items) => {
            let mut out = Vec::with_capacity(items.len());
            for e in items {
                out.push(int_of(eval(e, env)?)?);
            }
            Ok(Value::Array(out))
        }
        Expr::Var(n) => env.var(n).ok_or_else(|| EvalError::Unbound(n.clone())),
        Expr::EventField(n) => env.field(n).ok_or_else(|| EvalError::UnboundField(n.clone())),
        Expr::Index(n, idx) => {
            let arr = env.var(n).ok_or_else(|| EvalError::Unbound(n.clone()))?;
            let i = int_of(eval(idx, env)?)?;
            match arr {
                Value::Array(items) => index(&items, n, i),
                other => Err(EvalError::Type(format!("`{n}` is {} not an array", other.kind()))),
            }
        }
        Expr::Unary(UnOp::Not, e) => Ok(Value::Bool(!bool_of(eval(e, env)?)?)),
        Expr::Binary(op, l, r) => {
            // short-circuit the boolean connectives
            match op {
                BinOp::And => {
                    return Ok(Value::Bool(
                        bool_of(eval(l, env)?)? && bool_of(eval(r, env)?)?,
                    ))
                }
                BinOp::Or => {
                    return Ok(Value::Bool(
                        bool_of(eval(l, env)?)? || bool_of(eval(r, env)?)?,
                    ))
                }
                BinOp::Implies => {
                    return Ok(Value::Bool(
                        !bool_of(eval(l, env)?)? || bool_of(eval(r, env)?)?,
                    ))
                }
                _ => {}
            }
            apply_binary(*op, eval(l, env)?, eval(r, env)?)
        }
    }
}

pub(crate) fn index(items: &[i64], name: &str, i: i64) -> Result<Value, EvalError> {
    usize::try_from(i)
        .ok()
        .and_then(|u| items.get(u))
        .map(|v| Value::Int(*v))
        .ok_or(EvalError::IndexOutOfRange {
            array: name.to_string(),
            index: i,
            len: items.len(),
        })
}

pub(crate) fn bool_of(v: Value) -> Result<bool, EvalError> {
    v.as_bool()
        .ok_or_else(|| EvalError::Type(format!("expected bool, found {}", v.kind())))
}

pub(crate) fn int_of(v: Value) -> Result<i64, EvalError> {
    v.as_int()
        .ok_or_else(|| EvalError::Type(format!("expected int, found {}", v.kind())))
}

/// Floor division on integers.
pub fn floor_div(a: i64, b: i64) -> Result<i64, EvalError> {
    if b == 0 {
        return Err(EvalError::DivisionByZero);
    }
    let q = a.checked_div(b).ok_or(EvalError::Overflow)?;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        Ok(q - 1)
    } else {
        Ok(q)
    }
}

/// Remainder matching [`floor_div`]: `a - b * floor(a / b)`.
pub fn floor_mod(a: i64, b: i64) -> Result<i64, EvalError> {
    let q = floor_div(a, b)?;
    b.checked_mul(q)
        .and_then(|m| a.checked_sub(m))
        .ok_or(EvalError::Overflow)
}

pub(crate) fn apply_binary(op: BinOp, l: Value, r: Value) -> Result<Value, EvalError> {
    use Value::*;
    let type_err = |l: &Value, r: &Value| {
        EvalError::Type(format!(
            "operator `{}` cannot be applied to {} and {}",
            op.symbol(),
            l.kind(),
            r.kind()
        ))
    };
    match op {
        BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div | BinOp::IntDiv | BinOp::Mod => {
            match (&l, &r) {
                (Int(a), Int(b)) => {
                    let (a, b) = (*a, *b);
                    let v = match op {
                        BinOp::Add => a.checked_add(b).ok_or(EvalError::Overflow)?,
                        BinOp::Sub => a.checked_sub(b).ok_or(EvalError::Overflow)?,
                        BinOp::Mul => a.checked_mul(b).ok_or(EvalError::Overflow)?,
                        BinOp::Div | BinOp::IntDiv => floor_div(a, b)?,
                        _ => floor_mod(a, b)?,
                    };
                    Ok(Int(v))
                }
                _ => {
                    if matches!(op, BinOp::IntDiv | BinOp::Mod) {
                        return Err(type_err(&l, &r));
                    }
                    let (a, b) = (
                        l.as_real().ok_or_else(|| type_err(&l, &r))?,
                        r.as_real().ok_or_else(|| type_err(&l, &r))?,
                    );
                    let v = match op {
                        BinOp::Add => a + b,
                        BinOp::Sub => a - b,
                        BinOp::Mul => a * b,
                        _ => {
                            if b == 0.0 {
                                return Err(EvalError::DivisionByZero);
                            }
                            a / b
                        }
                    };
                    Ok(Real(v))
                }
            }
        }
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = match (&l, &r) {
                (Int(a), Int(b)) => a.partial_cmp(b),
                _ => {
                    let a = l.as_real().ok_or_else(|| type_err(&l, &r))?;
                    let b = r.as_real().ok_or_else(|| type_err(&l, &r))?;
                    a.partial_cmp(&b)
                }
            };
            let Some(ord) = ord else {
                return Ok(Bool(false));
            };
            Ok(Bool(match op {
                BinOp::Lt => ord.is_lt(),
                BinOp::Le => ord.is_le(),
                BinOp::Gt => ord.is_gt(),
                _ => ord.is_ge(),
            }))
        }
        BinOp::Eq | BinOp::Ne => {
            let eq = match (&l, &r) {
                (Bool(a), Bool(b)) => a == b,
                (Int(a), Int(b)) => a == b,
                _ => {
                    let a = l.as_real().ok_or_else(|| type_err(&l, &r))?;
                    let b = r.as_real().ok_or_else(|| type_err(&l, &r))?;
                    a == b
                }
            };
            Ok(Bool(if op == BinOp::Eq { eq } else { !eq }))
        }
        BinOp::And => Ok(Bool(bool_of(l)? && bool_of(r)?)),
        BinOp::Or => Ok(Bool(bool_of(l)? || bool_of(r)?)),
        BinOp::Implies => Ok(Bool(!bool_of(l)? || bool_of(r)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn env(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn adds_one() {
        let e = Expr::parse("a + 1").unwrap();
        assert_eq!(eval(&e, &env(&[("a", Value::Int(2))])), Ok(Value::Int(3)));
    }

    #[test]
    fn boundary_comparison_is_false() {
        let e = Expr::parse("true && (x < 5)").unwrap();
        assert_eq!(eval(&e, &env(&[("x", Value::Int(5))])), Ok(Value::Bool(false)));
    }

    #[test]
    fn timeout_guard_shape() {
        // 3 < 1 + 2 is false
        let e = Expr::parse("t_curr < t_abort + t_timeout").unwrap();
        let env = env(&[
            ("t_curr", Value::Int(3)),
            ("t_abort", Value::Int(1)),
            ("t_timeout", Value::Int(2)),
        ]);
        assert_eq!(eval(&e, &env), Ok(Value::Bool(false)));
    }

    #[test]
    fn precedence_and_associativity() {
        let e = Expr::parse("1 - 2 - 3 * 2").unwrap();
        assert_eq!(eval(&e, &BTreeMap::new()), Ok(Value::Int(-7)));
        let e = Expr::parse("false => false => false").unwrap();
        // right associative: false => (false => false)
        assert_eq!(eval(&e, &BTreeMap::new()), Ok(Value::Bool(true)));
        let e = Expr::parse("not a or b and c").unwrap();
        let env = env(&[
            ("a", Value::Bool(true)),
            ("b", Value::Bool(true)),
            ("c", Value::Bool(false)),
        ]);
        assert_eq!(eval(&e, &env), Ok(Value::Bool(false)));
    }

    #[test]
    fn floor_semantics() {
        assert_eq!(floor_div(-7, 2), Ok(-4));
        assert_eq!(floor_mod(-7, 2), Ok(1));
        assert_eq!(floor_div(7, -2), Ok(-4));
        assert_eq!(floor_mod(7, -2), Ok(-1));
        assert_eq!(floor_div(6, 3), Ok(2));
    }

    #[test]
    fn literal_zero_divisor_rejected() {
        assert_eq!(Expr::parse("x / 0"), Err(ExprError::ZeroDivisor));
        assert_eq!(Expr::parse("x % 0"), Err(ExprError::ZeroDivisor));
        assert!(Expr::parse("x / (1 - 1)").is_ok());
    }

    #[test]
    fn runtime_errors() {
        let e = Expr::parse("x / y").unwrap();
        let env1 = env(&[("x", Value::Int(1)), ("y", Value::Int(0))]);
        assert_eq!(eval(&e, &env1), Err(EvalError::DivisionByZero));
        assert_eq!(
            eval(&Expr::parse("z + 1").unwrap(), &env1),
            Err(EvalError::Unbound("z".into()))
        );
        let arr = env(&[("a", Value::Array(vec![1, 2]))]);
        assert!(matches!(
            eval(&Expr::parse("a[2]").unwrap(), &arr),
            Err(EvalError::IndexOutOfRange { index: 2, .. })
        ));
        assert_eq!(eval(&Expr::parse("a[1]").unwrap(), &arr), Ok(Value::Int(2)));
        let big = env(&[("x", Value::Int(i64::MAX))]);
        assert_eq!(eval(&Expr::parse("x + 1").unwrap(), &big), Err(EvalError::Overflow));
    }

    #[test]
    fn event_paths() {
        assert_eq!(Expr::parse("_event.data.x").unwrap(), Expr::EventField("x".into()));
        assert_eq!(Expr::parse("_msg.data").unwrap(), Expr::EventField("data".into()));
        assert!(Expr::parse("_event").is_err());
    }

    #[test]
    fn types_parse() {
        assert_eq!(Type::parse("int[0..10]").unwrap(), Type::Int(IntRange::new(0, 10)));
        assert_eq!(
            Type::parse("int[-1..1][3]").unwrap(),
            Type::IntArray {
                len: 3,
                range: IntRange::new(-1, 1)
            }
        );
        assert_eq!(Type::parse("int").unwrap(), Type::int());
        assert!(Type::parse("int[3..1]").is_err());
        assert!(Type::parse("string").is_err());
        for t in ["bool", "real", "int", "int[0..10]", "int[4]", "int[0..3][2]"] {
            assert_eq!(Type::parse(t).unwrap().to_string(), t);
        }
    }

    #[test]
    fn typecheck_rules() {
        let env = |n: &str| match n {
            "x" => Some(Type::int()),
            "r" => Some(Type::Real),
            "b" => Some(Type::Bool),
            "a" => Some(Type::IntArray {
                len: 2,
                range: DEFAULT_INT_RANGE,
            }),
            _ => None,
        };
        let k = |s: &str| typecheck(&Expr::parse(s).unwrap(), &env);
        assert_eq!(k("x + 1"), Ok(Kind::Int));
        assert_eq!(k("x + r"), Ok(Kind::Real));
        assert_eq!(k("x / 2"), Ok(Kind::Int));
        assert_eq!(k("b && x < 3"), Ok(Kind::Bool));
        assert_eq!(k("a[x] + 1"), Ok(Kind::Int));
        assert!(k("b + 1").is_err());
        assert!(k("r % 2").is_err());
        assert!(k("x[0]").is_err());
        assert_eq!(k("y"), Err(TypeError::UnknownVar("y".into())));
        let resolved = resolve_int_division(&Expr::parse("x / 2 + r / 2").unwrap(), &env);
        assert_eq!(resolved.to_string(), "x / 2 + r / 2");
        assert!(matches!(resolved, Expr::Binary(BinOp::Add, ref l, _) if matches!(**l, Expr::Binary(BinOp::IntDiv, _, _))));
    }

    #[test]
    fn formulas() {
        let f = Formula::parse("(abort => t_curr < t_abort + t_timeout) U (success || recovery)")
            .unwrap();
        assert!(matches!(f, Formula::Until(..)));
        assert_eq!(Formula::parse("F done").unwrap(), Formula::Eventually(Expr::var("done")));
        assert_eq!(
            Formula::parse("eventually true").unwrap(),
            Formula::Eventually(Expr::Bool(true))
        );
        // a variable that happens to be called F
        assert!(matches!(Formula::parse("F && x U y").unwrap(), Formula::Until(..)));
        assert!(Formula::parse("x").is_err());
    }

    mod props {
        use super::super::*;
        use std::collections::BTreeMap;
        use proptest::prelude::*;

        fn arb_expr() -> impl Strategy<Value = Expr> {
            let leaf = prop_oneof![
                (-50i64..50).prop_map(Expr::Int),
                any::<bool>().prop_map(Expr::Bool),
                prop::sample::select(vec!["a", "b", "c"]).prop_map(Expr::var),
                prop::sample::select(vec!["f", "g"]).prop_map(|s| Expr::EventField(s.into())),
            ];
            leaf.prop_recursive(4, 32, 2, |inner| {
                prop_oneof![
                    inner.clone().prop_map(Expr::not),
                    (
                        prop::sample::select(vec![
                            BinOp::Add,
                            BinOp::Sub,
                            BinOp::Mul,
                            BinOp::Lt,
                            BinOp::Le,
                            BinOp::Eq,
                            BinOp::Ne,
                            BinOp::And,
                            BinOp::Or,
                            BinOp::Implies,
                        ]),
                        inner.clone(),
                        inner.clone()
                    )
                        .prop_map(|(op, l, r)| Expr::bin(op, l, r)),
                    inner.prop_map(|i| Expr::Index("arr".into(), Box::new(i))),
                ]
            })
        }

        proptest! {
            #[test]
            fn display_reparses_identically(e in arb_expr()) {
                let text = e.to_string();
                prop_assert_eq!(Expr::parse(&text).unwrap(), e);
            }

            #[test]
            fn evaluation_is_pure(a in -100i64..100, b in -100i64..100) {
                let env: BTreeMap<String, Value> =
                    [("a".to_string(), Value::Int(a)), ("b".to_string(), Value::Int(b))].into();
                let before = env.clone();
                let e = Expr::parse("a * b - a % 7 > 0 || (a < b && b != 0 => a / (b * b + 1) > 0)").ok();
                if let Some(e) = e {
                    let r1 = eval(&e, &env);
                    let r2 = eval(&e, &env);
                    prop_assert_eq!(r1, r2);
                }
                prop_assert_eq!(env, before);
            }
        }
    }
}
