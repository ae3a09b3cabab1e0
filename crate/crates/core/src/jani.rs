//! Network of MDPs and its JANI (JSON) serialization.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use num_rational::Rational64;
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::diag::Diagnostic;
use crate::expr::{typecheck, BinOp, Expr, Formula, IntRange, Kind, LValue, Type, TypeEnv, UnOp, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub constants: Vec<Constant>,
    pub globals: Vec<VarDecl>,
    pub automata: Vec<Automaton>,
    pub syncs: Vec<SyncVector>,
    pub properties: Vec<Property>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constant {
    pub name: String,
    pub ty: Type,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarDecl {
    pub name: String,
    pub ty: Type,
    pub init: Value,
}

/// Scheduling class of a location; see the simulator for how it is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LocationKind {
    /// Only moves when nothing else can.
    Idle,
    Normal,
    /// Intermediate location of a transition body; drained first.
    Transient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub name: String,
    pub kind: LocationKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Automaton {
    pub name: String,
    pub locals: Vec<VarDecl>,
    pub locations: Vec<Location>,
    pub initial: String,
    pub edges: Vec<Edge>,
}

impl Automaton {
    /// Action labels used by the edges, sorted.
    pub fn actions(&self) -> BTreeSet<&str> {
        self.edges.iter().filter_map(|e| e.action.as_deref()).collect()
    }

    pub fn location(&self, name: &str) -> Option<&Location> {
        self.locations.iter().find(|l| l.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub location: String,
    /// `None` for silent (unsynchronized) edges.
    pub action: Option<String>,
    pub guard: Expr,
    pub destinations: Vec<Destination>,
    /// Self-loop discarding a pending event; scheduled as if the automaton
    /// were in a stable location.
    pub dismiss: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Destination {
    pub probability: Rational64,
    pub location: String,
    pub assignments: Vec<Assignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub target: LValue,
    pub value: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncVector {
    /// One slot per automaton, in automaton order.
    pub participants: Vec<Option<String>>,
    pub result: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    Pmin,
    Pmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub name: String,
    pub query: Query,
    pub formula: Formula,
    /// Step cutoff applied when checking by simulation.
    pub step_bound: Option<u64>,
}

impl Network {
    pub fn automaton(&self, name: &str) -> Option<&Automaton> {
        self.automata.iter().find(|a| a.name == name)
    }

    pub fn automaton_index(&self, name: &str) -> Option<usize> {
        self.automata.iter().position(|a| a.name == name)
    }

    pub fn property(&self, name: &str) -> Option<&Property> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&VarDecl> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn constant(&self, name: &str) -> Option<&Constant> {
        self.constants.iter().find(|c| c.name == name)
    }
}

// ---------------------------------------------------------------------------
// Validation

struct NetEnv<'a> {
    net: &'a Network,
    locals: &'a [VarDecl],
}

impl TypeEnv for NetEnv<'_> {
    fn var_type(&self, name: &str) -> Option<Type> {
        self.locals
            .iter()
            .chain(&self.net.globals)
            .find(|v| v.name == name)
            .map(|v| v.ty.clone())
            .or_else(|| self.net.constant(name).map(|c| c.ty.clone()))
    }
}

fn assigned_globals<'a>(net: &'a Network, a: &'a Automaton, action: &str) -> BTreeSet<&'a str> {
    let locals: HashSet<&str> = a.locals.iter().map(|v| v.name.as_str()).collect();
    let mut out = BTreeSet::new();
    for e in a.edges.iter().filter(|e| e.action.as_deref() == Some(action)) {
        for d in &e.destinations {
            for asg in &d.assignments {
                let n = asg.target.name();
                if !locals.contains(n) && net.global(n).is_some() {
                    out.insert(n);
                }
            }
        }
    }
    out
}

/// Check structural and typing invariants. Empty result means valid.
pub fn validate_network(net: &Network) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut names = HashSet::new();
    for a in &net.automata {
        if !names.insert(a.name.as_str()) {
            out.push(Diagnostic::error(format!("duplicate automaton `{}`", a.name)));
        }
    }
    let mut gnames = HashSet::new();
    for g in &net.globals {
        if !gnames.insert(g.name.as_str()) || net.constant(&g.name).is_some() {
            out.push(Diagnostic::error(format!("variable `{}` declared twice", g.name)));
        }
        if !g.ty.admits(&g.init) {
            out.push(Diagnostic::error(format!(
                "initial value {} of `{}` is outside {}",
                g.init, g.name, g.ty
            )));
        }
    }
    for a in &net.automata {
        let ctx = |m: String| Diagnostic::error(format!("automaton `{}`: {m}", a.name));
        let mut locs = HashSet::new();
        for l in &a.locations {
            if !locs.insert(l.name.as_str()) {
                out.push(ctx(format!("duplicate location `{}`", l.name)));
            }
        }
        if !locs.contains(a.initial.as_str()) {
            out.push(ctx(format!("initial location `{}` does not exist", a.initial)));
        }
        for v in &a.locals {
            if gnames.contains(v.name.as_str()) {
                out.push(ctx(format!("local `{}` is also declared globally", v.name)));
            }
            if !v.ty.admits(&v.init) {
                out.push(ctx(format!("initial value {} of `{}` is outside {}", v.init, v.name, v.ty)));
            }
        }
        let env = NetEnv { net, locals: &a.locals };
        for e in &a.edges {
            if !locs.contains(e.location.as_str()) {
                out.push(ctx(format!("edge source `{}` does not exist", e.location)));
            }
            match typecheck(&e.guard, &env) {
                Ok(Kind::Bool) => {}
                Ok(k) => out.push(ctx(format!("guard `{}` has type {k}", e.guard))),
                Err(err) => out.push(ctx(format!("guard `{}`: {err}", e.guard))),
            }
            if e.destinations.is_empty() {
                out.push(ctx(format!("edge from `{}` has no destinations", e.location)));
            }
            let mut sum = Rational64::new(0, 1);
            for d in &e.destinations {
                sum += d.probability;
                if d.probability <= Rational64::new(0, 1) {
                    out.push(ctx(format!("non-positive probability {}", d.probability)));
                }
                if !locs.contains(d.location.as_str()) {
                    out.push(ctx(format!("edge target `{}` does not exist", d.location)));
                }
                for asg in &d.assignments {
                    let lhs = env.var_type(asg.target.name());
                    let Some(lhs) = lhs else {
                        out.push(ctx(format!("assignment to undeclared `{}`", asg.target.name())));
                        continue;
                    };
                    if net.constant(asg.target.name()).is_some() {
                        out.push(ctx(format!("assignment to constant `{}`", asg.target.name())));
                    }
                    let want = match &asg.target {
                        LValue::Var(_) => lhs.kind(),
                        LValue::Index(_, i) => {
                            if let Err(err) = typecheck(i, &env) {
                                out.push(ctx(err.to_string()));
                            }
                            Kind::Int
                        }
                    };
                    match typecheck(&asg.value, &env) {
                        Ok(k) if k == want || (want == Kind::Real && k == Kind::Int) => {}
                        Ok(k) => out.push(ctx(format!(
                            "cannot assign {k} to `{}` of type {want}",
                            asg.target
                        ))),
                        Err(err) => out.push(ctx(format!("`{}`: {err}", asg.value))),
                    }
                }
            }
            if !e.destinations.is_empty() && sum != Rational64::new(1, 1) {
                out.push(ctx(format!(
                    "probabilities of edge from `{}` sum to {sum}",
                    e.location
                )));
            }
        }
    }
    for (i, s) in net.syncs.iter().enumerate() {
        let ctx = |m: String| Diagnostic::error(format!("sync vector {i} (`{}`): {m}", s.result));
        if s.participants.len() != net.automata.len() {
            out.push(ctx(format!(
                "has {} slots for {} automata",
                s.participants.len(),
                net.automata.len()
            )));
            continue;
        }
        if s.participants.iter().all(Option::is_none) {
            out.push(ctx("has no participants".into()));
        }
        for (a, slot) in net.automata.iter().zip(&s.participants) {
            if let Some(act) = slot {
                if !a.actions().contains(act.as_str()) {
                    out.push(ctx(format!("action `{act}` does not belong to `{}`", a.name)));
                }
            }
        }
        let writers: Vec<(&str, BTreeSet<&str>)> = net
            .automata
            .iter()
            .zip(&s.participants)
            .filter_map(|(a, slot)| slot.as_ref().map(|act| (a.name.as_str(), assigned_globals(net, a, act))))
            .collect();
        for (x, (an, aw)) in writers.iter().enumerate() {
            for (bn, bw) in &writers[x + 1..] {
                if let Some(v) = aw.intersection(bw).next() {
                    out.push(ctx(format!("`{an}` and `{bn}` both write global `{v}`")));
                }
            }
        }
    }
    let genv = NetEnv { net, locals: &[] };
    let mut pnames = HashSet::new();
    for p in &net.properties {
        if !pnames.insert(p.name.as_str()) {
            out.push(Diagnostic::error(format!("duplicate property `{}`", p.name)));
        }
        for e in p.formula.lhs().into_iter().chain([p.formula.rhs()]) {
            match typecheck(e, &genv) {
                Ok(Kind::Bool) => {}
                Ok(k) => out.push(Diagnostic::error(format!(
                    "property `{}`: `{e}` has type {k}",
                    p.name
                ))),
                Err(err) => out.push(Diagnostic::error(format!("property `{}`: {err}", p.name))),
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Emission

#[derive(Debug, Error)]
pub enum JaniError {
    #[error("cannot serialize `{0}` to JANI")]
    Unserializable(String),
    #[error("invalid JANI document: {0}")]
    Format(String),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_err(msg: impl Into<String>) -> JaniError {
    JaniError::Format(msg.into())
}

fn op_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "+",
        BinOp::Sub => "-",
        BinOp::Mul => "*",
        BinOp::Div | BinOp::IntDiv => "/",
        BinOp::Mod => "%",
        BinOp::Lt => "<",
        BinOp::Le => "≤",
        BinOp::Gt => ">",
        BinOp::Ge => "≥",
        BinOp::Eq => "=",
        BinOp::Ne => "≠",
        BinOp::And => "∧",
        BinOp::Or => "∨",
        BinOp::Implies => "⇒",
    }
}

fn op_from_name(s: &str) -> Option<BinOp> {
    Some(match s {
        "+" => BinOp::Add,
        "-" => BinOp::Sub,
        "*" => BinOp::Mul,
        "/" => BinOp::Div,
        "%" => BinOp::Mod,
        "<" => BinOp::Lt,
        "≤" => BinOp::Le,
        ">" => BinOp::Gt,
        "≥" => BinOp::Ge,
        "=" => BinOp::Eq,
        "≠" => BinOp::Ne,
        "∧" => BinOp::And,
        "∨" => BinOp::Or,
        "⇒" => BinOp::Implies,
        _ => return None,
    })
}

#[derive(Default)]
struct Features {
    derived: bool,
    arrays: bool,
}

fn expr_json(e: &Expr, f: &mut Features) -> Result<Json, JaniError> {
    Ok(match e {
        Expr::Bool(b) => json!(b),
        Expr::Int(i) => json!(i),
        Expr::Real(r) => serde_json::Number::from_f64(*r)
            .map(Json::Number)
            .ok_or_else(|| JaniError::Unserializable(e.to_string()))?,
        Expr::Var(n) => json!(n),
        Expr::EventField(_) => return Err(JaniError::Unserializable(e.to_string())),
        Expr::ArrayLit(items) => {
            f.arrays = true;
            let els = items
                .iter()
                .map(|x| expr_json(x, f))
                .collect::<Result<Vec<_>, _>>()?;
            json!({"op": "av", "elements": els})
        }
        Expr::Index(n, i) => {
            f.arrays = true;
            json!({"op": "aa", "exp": n, "index": expr_json(i, f)?})
        }
        Expr::Unary(UnOp::Not, x) => json!({"op": "¬", "exp": expr_json(x, f)?}),
        Expr::Binary(op, l, r) => {
            if *op == BinOp::Implies {
                f.derived = true;
            }
            let inner = json!({"op": op_name(*op), "left": expr_json(l, f)?, "right": expr_json(r, f)?});
            if *op == BinOp::IntDiv {
                json!({"op": "floor", "exp": inner})
            } else {
                inner
            }
        }
    })
}

fn type_json(t: &Type, f: &mut Features) -> Json {
    let bounded = |r: &IntRange| {
        json!({"kind": "bounded", "base": "int", "lower-bound": r.lo, "upper-bound": r.hi})
    };
    match t {
        Type::Bool => json!("bool"),
        Type::Real => json!("real"),
        Type::Int(r) => bounded(r),
        Type::IntArray { range, .. } => {
            f.arrays = true;
            json!({"kind": "array", "base": bounded(range)})
        }
    }
}

fn value_json(v: &Value, f: &mut Features) -> Json {
    match v {
        Value::Bool(b) => json!(b),
        Value::Int(i) => json!(i),
        Value::Real(r) => serde_json::Number::from_f64(*r)
            .map(Json::Number)
            .unwrap_or(Json::Null),
        Value::Array(items) => {
            f.arrays = true;
            json!({"op": "av", "elements": items})
        }
    }
}

fn var_json(v: &VarDecl, f: &mut Features) -> Json {
    json!({"name": v.name, "type": type_json(&v.ty, f), "initial-value": value_json(&v.init, f)})
}

fn prob_json(p: Rational64) -> Json {
    if *p.denom() == 1 {
        json!(p.numer())
    } else {
        json!({"op": "/", "left": p.numer(), "right": p.denom()})
    }
}

/// Serialize to JANI text: sorted keys, two-space indent, trailing newline.
pub fn emit_jani(net: &Network) -> Result<String, JaniError> {
    let mut f = Features::default();
    let mut actions: BTreeSet<&str> = BTreeSet::new();
    let mut automata = Vec::new();
    for a in &net.automata {
        actions.extend(a.actions());
        let locations: Vec<Json> = a
            .locations
            .iter()
            .map(|l| {
                let mut m = Map::new();
                m.insert("name".into(), json!(l.name));
                match l.kind {
                    LocationKind::Normal => {}
                    LocationKind::Transient => {
                        m.insert("comment".into(), json!("transient"));
                    }
                    LocationKind::Idle => {
                        m.insert("comment".into(), json!("idle"));
                    }
                }
                Json::Object(m)
            })
            .collect();
        let mut edges = Vec::new();
        for e in &a.edges {
            let mut m = Map::new();
            m.insert("location".into(), json!(e.location));
            if let Some(act) = &e.action {
                m.insert("action".into(), json!(act));
            }
            if !e.guard.is_true() {
                m.insert("guard".into(), json!({"exp": expr_json(&e.guard, &mut f)?}));
            }
            if e.dismiss {
                m.insert("comment".into(), json!("dismiss"));
            }
            let mut dests = Vec::new();
            for d in &e.destinations {
                let mut dm = Map::new();
                dm.insert("location".into(), json!(d.location));
                if d.probability != Rational64::new(1, 1) {
                    dm.insert("probability".into(), json!({"exp": prob_json(d.probability)}));
                }
                if !d.assignments.is_empty() {
                    let asg = d
                        .assignments
                        .iter()
                        .map(|x| {
                            Ok(json!({"ref": expr_json(&x.target.to_expr(), &mut f)?, "value": expr_json(&x.value, &mut f)?}))
                        })
                        .collect::<Result<Vec<_>, JaniError>>()?;
                    dm.insert("assignments".into(), Json::Array(asg));
                }
                dests.push(Json::Object(dm));
            }
            m.insert("destinations".into(), Json::Array(dests));
            edges.push(Json::Object(m));
        }
        let locals: Vec<Json> = a.locals.iter().map(|v| var_json(v, &mut f)).collect();
        let mut am = Map::new();
        am.insert("name".into(), json!(a.name));
        am.insert("locations".into(), Json::Array(locations));
        am.insert("initial-locations".into(), json!([a.initial]));
        am.insert("edges".into(), Json::Array(edges));
        if !locals.is_empty() {
            am.insert("variables".into(), Json::Array(locals));
        }
        automata.push(Json::Object(am));
    }
    for s in &net.syncs {
        actions.insert(&s.result);
    }
    let syncs: Vec<Json> = net
        .syncs
        .iter()
        .map(|s| json!({"synchronise": s.participants, "result": s.result}))
        .collect();
    let mut properties = Vec::new();
    for p in &net.properties {
        let mut path = match &p.formula {
            Formula::Until(l, r) => {
                json!({"op": "U", "left": expr_json(l, &mut f)?, "right": expr_json(r, &mut f)?})
            }
            Formula::Eventually(r) => {
                f.derived = true;
                json!({"op": "F", "exp": expr_json(r, &mut f)?})
            }
        };
        if let Some(n) = p.step_bound {
            path["step-bounds"] = json!({"upper": n});
        }
        let q = match p.query {
            Query::Pmin => "Pmin",
            Query::Pmax => "Pmax",
        };
        properties.push(json!({
            "name": p.name,
            "expression": {
                "op": "filter",
                "fun": "values",
                "values": {"op": q, "exp": path},
                "states": {"op": "initial"}
            }
        }));
    }
    let constants: Vec<Json> = net
        .constants
        .iter()
        .map(|c| json!({"name": c.name, "type": type_json(&c.ty, &mut f), "value": value_json(&c.value, &mut f)}))
        .collect();
    let globals: Vec<Json> = net.globals.iter().map(|v| var_json(v, &mut f)).collect();
    let mut features = Vec::new();
    if f.arrays {
        features.push("arrays");
    }
    if f.derived {
        features.push("derived-operators");
    }
    let mut doc = Map::new();
    doc.insert("jani-version".into(), json!(1));
    doc.insert("name".into(), json!(net.name));
    doc.insert("type".into(), json!("mdp"));
    if !features.is_empty() {
        doc.insert("features".into(), json!(features));
    }
    doc.insert(
        "actions".into(),
        Json::Array(actions.iter().map(|a| json!({"name": a})).collect()),
    );
    doc.insert("constants".into(), Json::Array(constants));
    doc.insert("variables".into(), Json::Array(globals));
    doc.insert("automata".into(), Json::Array(automata));
    doc.insert(
        "system".into(),
        json!({
            "elements": net.automata.iter().map(|a| json!({"automaton": a.name})).collect::<Vec<_>>(),
            "syncs": syncs
        }),
    );
    doc.insert("properties".into(), Json::Array(properties));
    let mut text = serde_json::to_string_pretty(&Json::Object(doc))?;
    text.push('\n');
    Ok(text)
}

// ---------------------------------------------------------------------------
// Loading

fn field<'a>(v: &'a Json, key: &str, what: &str) -> Result<&'a Json, JaniError> {
    v.get(key)
        .ok_or_else(|| fmt_err(format!("{what} is missing `{key}`")))
}

fn string(v: &Json, key: &str, what: &str) -> Result<String, JaniError> {
    field(v, key, what)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| fmt_err(format!("`{key}` of {what} must be a string")))
}

fn array<'a>(v: &'a Json, key: &str, what: &str) -> Result<&'a Vec<Json>, JaniError> {
    match v.get(key) {
        None => Ok(EMPTY.get_or_init(Vec::new)),
        Some(Json::Array(a)) => Ok(a),
        Some(_) => Err(fmt_err(format!("`{key}` of {what} must be an array"))),
    }
}

static EMPTY: std::sync::OnceLock<Vec<Json>> = std::sync::OnceLock::new();

fn load_expr(v: &Json) -> Result<Expr, JaniError> {
    match v {
        Json::Bool(b) => Ok(Expr::Bool(*b)),
        Json::Number(n) => {
            if let Some(i) = n.as_i64() {
                Ok(Expr::Int(i))
            } else {
                n.as_f64()
                    .map(Expr::Real)
                    .ok_or_else(|| fmt_err(format!("unsupported number {n}")))
            }
        }
        Json::String(s) => Ok(Expr::Var(s.clone())),
        Json::Object(_) => {
            let op = string(v, "op", "expression")?;
            match op.as_str() {
                "av" => Ok(Expr::ArrayLit(
                    array(v, "elements", "array value")?
                        .iter()
                        .map(load_expr)
                        .collect::<Result<_, _>>()?,
                )),
                "aa" => {
                    let name = string(v, "exp", "array access")?;
                    Ok(Expr::Index(name, Box::new(load_expr(field(v, "index", "array access")?)?)))
                }
                "¬" => Ok(Expr::not(load_expr(field(v, "exp", "negation")?)?)),
                "floor" => match load_expr(field(v, "exp", "floor")?)? {
                    Expr::Binary(BinOp::Div, l, r) => Ok(Expr::Binary(BinOp::IntDiv, l, r)),
                    other => Err(fmt_err(format!("unsupported floor operand `{other}`"))),
                },
                other => {
                    let bop = op_from_name(other)
                        .ok_or_else(|| fmt_err(format!("unsupported operator `{other}`")))?;
                    Ok(Expr::bin(
                        bop,
                        load_expr(field(v, "left", "binary expression")?)?,
                        load_expr(field(v, "right", "binary expression")?)?,
                    ))
                }
            }
        }
        other => Err(fmt_err(format!("unsupported expression {other}"))),
    }
}

fn load_type(v: &Json, init: Option<&Json>) -> Result<Type, JaniError> {
    let bounded = |b: &Json| -> Result<IntRange, JaniError> {
        if b.get("kind").and_then(Json::as_str) != Some("bounded")
            || b.get("base").and_then(Json::as_str) != Some("int")
        {
            return Err(fmt_err(format!("unsupported type {b}")));
        }
        let lo = field(b, "lower-bound", "bounded type")?
            .as_i64()
            .ok_or_else(|| fmt_err("lower-bound must be an integer literal"))?;
        let hi = field(b, "upper-bound", "bounded type")?
            .as_i64()
            .ok_or_else(|| fmt_err("upper-bound must be an integer literal"))?;
        Ok(IntRange::new(lo, hi))
    };
    match v {
        Json::String(s) if s == "bool" => Ok(Type::Bool),
        Json::String(s) if s == "real" => Ok(Type::Real),
        Json::String(s) if s == "int" => Ok(Type::int()),
        Json::Object(o) if o.get("kind").and_then(Json::as_str) == Some("array") => {
            let range = bounded(field(v, "base", "array type")?)?;
            let len = init
                .and_then(|i| i.get("elements"))
                .and_then(Json::as_array)
                .map(Vec::len)
                .ok_or_else(|| fmt_err("array variables need an array initial value"))?;
            Ok(Type::IntArray { len, range })
        }
        Json::Object(_) => Ok(Type::Int(bounded(v)?)),
        other => Err(fmt_err(format!("unsupported type {other}"))),
    }
}

fn load_value(v: &Json) -> Result<Value, JaniError> {
    let e = load_expr(v)?;
    crate::scxml::const_value(&e).map_err(fmt_err)
}

fn load_var(v: &Json) -> Result<VarDecl, JaniError> {
    let name = string(v, "name", "variable")?;
    let init_json = v.get("initial-value");
    let ty = load_type(field(v, "type", "variable")?, init_json)?;
    let init = match init_json {
        Some(i) => ty.coerce(load_value(i)?),
        None => ty.default_value(),
    };
    Ok(VarDecl { name, ty, init })
}

fn load_prob(v: &Json) -> Result<Rational64, JaniError> {
    match load_expr(v)? {
        Expr::Int(n) => Ok(Rational64::from_integer(n)),
        Expr::Binary(BinOp::Div, l, r) => match (*l, *r) {
            (Expr::Int(n), Expr::Int(d)) if d != 0 => Ok(Rational64::new(n, d)),
            _ => Err(fmt_err("probabilities must be integer fractions")),
        },
        Expr::Real(x) => crate::scxml::parse_probability(&x.to_string())
            .ok_or_else(|| fmt_err(format!("unsupported probability {x}"))),
        other => Err(fmt_err(format!("unsupported probability `{other}`"))),
    }
}

fn load_lvalue(v: &Json) -> Result<LValue, JaniError> {
    match load_expr(v)? {
        Expr::Var(n) => Ok(LValue::Var(n)),
        Expr::Index(n, i) => Ok(LValue::Index(n, *i)),
        other => Err(fmt_err(format!("`{other}` is not assignable"))),
    }
}

/// Read a JANI document of the subset produced by [`emit_jani`].
pub fn load_jani(text: &str) -> Result<Network, JaniError> {
    let doc: Json = serde_json::from_str(text)?;
    if doc.get("type").and_then(Json::as_str) != Some("mdp") {
        return Err(fmt_err("only models of type `mdp` are supported"));
    }
    let name = doc
        .get("name")
        .and_then(Json::as_str)
        .unwrap_or("model")
        .to_string();
    let mut constants = Vec::new();
    for c in array(&doc, "constants", "model")? {
        let cname = string(c, "name", "constant")?;
        let vj = field(c, "value", "constant")?;
        let ty = load_type(field(c, "type", "constant")?, Some(vj))?;
        let value = ty.coerce(load_value(vj)?);
        constants.push(Constant { name: cname, ty, value });
    }
    let globals = array(&doc, "variables", "model")?
        .iter()
        .map(load_var)
        .collect::<Result<Vec<_>, _>>()?;
    let mut by_name = BTreeMap::new();
    for a in array(&doc, "automata", "model")? {
        let aname = string(a, "name", "automaton")?;
        let locals = array(a, "variables", "automaton")?
            .iter()
            .map(load_var)
            .collect::<Result<Vec<_>, _>>()?;
        let mut locations = Vec::new();
        for l in array(a, "locations", "automaton")? {
            let kind = match l.get("comment").and_then(Json::as_str) {
                Some("transient") => LocationKind::Transient,
                Some("idle") => LocationKind::Idle,
                _ => LocationKind::Normal,
            };
            locations.push(Location {
                name: string(l, "name", "location")?,
                kind,
            });
        }
        let initial = array(a, "initial-locations", "automaton")?
            .first()
            .and_then(Json::as_str)
            .ok_or_else(|| fmt_err(format!("automaton `{aname}` has no initial location")))?
            .to_string();
        let mut edges = Vec::new();
        for e in array(a, "edges", "automaton")? {
            let guard = match e.get("guard") {
                Some(g) => load_expr(field(g, "exp", "guard")?)?,
                None => Expr::Bool(true),
            };
            let mut destinations = Vec::new();
            for d in array(e, "destinations", "edge")? {
                let probability = match d.get("probability") {
                    Some(p) => load_prob(field(p, "exp", "probability")?)?,
                    None => Rational64::new(1, 1),
                };
                let assignments = array(d, "assignments", "destination")?
                    .iter()
                    .map(|x| {
                        Ok(Assignment {
                            target: load_lvalue(field(x, "ref", "assignment")?)?,
                            value: load_expr(field(x, "value", "assignment")?)?,
                        })
                    })
                    .collect::<Result<Vec<_>, JaniError>>()?;
                destinations.push(Destination {
                    probability,
                    location: string(d, "location", "destination")?,
                    assignments,
                });
            }
            edges.push(Edge {
                location: string(e, "location", "edge")?,
                action: e.get("action").and_then(Json::as_str).map(str::to_string),
                guard,
                destinations,
                dismiss: e.get("comment").and_then(Json::as_str) == Some("dismiss"),
            });
        }
        by_name.insert(
            aname.clone(),
            Automaton {
                name: aname,
                locals,
                locations,
                initial,
                edges,
            },
        );
    }
    let system = field(&doc, "system", "model")?;
    let mut automata = Vec::new();
    for el in array(system, "elements", "system")? {
        let n = string(el, "automaton", "system element")?;
        let a = by_name
            .get(&n)
            .ok_or_else(|| fmt_err(format!("system references unknown automaton `{n}`")))?;
        automata.push(a.clone());
    }
    let mut syncs = Vec::new();
    for s in array(system, "syncs", "system")? {
        let participants = array(s, "synchronise", "sync")?
            .iter()
            .map(|p| match p {
                Json::Null => Ok(None),
                Json::String(a) => Ok(Some(a.clone())),
                other => Err(fmt_err(format!("invalid sync slot {other}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let result = match s.get("result") {
            Some(Json::String(r)) => r.clone(),
            _ => participants
                .iter()
                .flatten()
                .next()
                .cloned()
                .unwrap_or_default(),
        };
        syncs.push(SyncVector { participants, result });
    }
    let mut properties = Vec::new();
    for p in array(&doc, "properties", "model")? {
        let pname = string(p, "name", "property")?;
        let mut e = field(p, "expression", "property")?;
        if e.get("op").and_then(Json::as_str) == Some("filter") {
            e = field(e, "values", "filter")?;
        }
        let query = match e.get("op").and_then(Json::as_str) {
            Some("Pmin") => Query::Pmin,
            Some("Pmax") => Query::Pmax,
            other => return Err(fmt_err(format!("property `{pname}`: unsupported query {other:?}"))),
        };
        let path = field(e, "exp", "query")?;
        let step_bound = path
            .get("step-bounds")
            .and_then(|b| b.get("upper"))
            .and_then(Json::as_u64);
        let formula = match path.get("op").and_then(Json::as_str) {
            Some("U") => Formula::Until(
                load_expr(field(path, "left", "until")?)?,
                load_expr(field(path, "right", "until")?)?,
            ),
            Some("F") => Formula::Eventually(load_expr(field(path, "exp", "eventually")?)?),
            other => return Err(fmt_err(format!("property `{pname}`: unsupported path operator {other:?}"))),
        };
        properties.push(Property {
            name: pname,
            query,
            formula,
            step_bound,
        });
    }
    Ok(Network {
        name,
        constants,
        globals,
        automata,
        syncs,
        properties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str) -> Automaton {
        Automaton {
            name: name.into(),
            locals: vec![],
            locations: vec![Location {
                name: "l".into(),
                kind: LocationKind::Normal,
            }],
            initial: "l".into(),
            edges: vec![],
        }
    }

    fn net(automata: Vec<Automaton>) -> Network {
        Network {
            name: "n".into(),
            constants: vec![],
            globals: vec![],
            automata,
            syncs: vec![],
            properties: vec![],
        }
    }

    #[test]
    fn minimal_document() {
        let n = net(vec![single("a")]);
        assert!(validate_network(&n).is_empty());
        let text = emit_jani(&n).unwrap();
        let v: Json = serde_json::from_str(&text).unwrap();
        assert_eq!(v["jani-version"], 1);
        assert_eq!(v["type"], "mdp");
        assert_eq!(v["automata"][0]["initial-locations"][0], "l");
        assert!(text.ends_with("}\n"));
        assert_eq!(load_jani(&text).unwrap(), n);
    }

    #[test]
    fn half_half_edge() {
        let mut a = single("coin");
        a.locations.push(Location {
            name: "h".into(),
            kind: LocationKind::Transient,
        });
        a.edges.push(Edge {
            location: "l".into(),
            action: None,
            guard: Expr::Bool(true),
            destinations: vec![
                Destination {
                    probability: Rational64::new(1, 2),
                    location: "h".into(),
                    assignments: vec![],
                },
                Destination {
                    probability: Rational64::new(1, 2),
                    location: "l".into(),
                    assignments: vec![],
                },
            ],
            dismiss: false,
        });
        let n = net(vec![a]);
        assert!(validate_network(&n).is_empty());
        let v: Json = serde_json::from_str(&emit_jani(&n).unwrap()).unwrap();
        let p = &v["automata"][0]["edges"][0]["destinations"][0]["probability"]["exp"];
        assert_eq!(p, &json!({"op": "/", "left": 1, "right": 2}));
    }

    #[test]
    fn sync_with_foreign_action() {
        let mut n = net(vec![single("a"), single("b")]);
        n.syncs.push(SyncVector {
            participants: vec![Some("x".into()), None],
            result: "x".into(),
        });
        let d = validate_network(&n);
        assert_eq!(d.len(), 1, "{d:?}");
    }

    #[test]
    fn write_conflict() {
        let writer = |name: &str| {
            let mut a = single(name);
            a.edges.push(Edge {
                location: "l".into(),
                action: Some("go".into()),
                guard: Expr::Bool(true),
                destinations: vec![Destination {
                    probability: Rational64::new(1, 1),
                    location: "l".into(),
                    assignments: vec![Assignment {
                        target: LValue::Var("g".into()),
                        value: Expr::Int(1),
                    }],
                }],
                dismiss: false,
            });
            a
        };
        let mut n = net(vec![writer("a"), writer("b")]);
        n.globals.push(VarDecl {
            name: "g".into(),
            ty: Type::int(),
            init: Value::Int(0),
        });
        n.syncs.push(SyncVector {
            participants: vec![Some("go".into()), Some("go".into())],
            result: "go".into(),
        });
        let d = validate_network(&n);
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("`g`"));
    }

    #[test]
    fn expressions_round_trip() {
        let mut f = Features::default();
        for s in [
            "a / b",
            "!(x => y) || z && w",
            "arr[i + 1] % 3 >= -2",
            "[1, 2, 3]",
            "1.5 * r != 0 - q",
        ] {
            let e = Expr::parse(s).unwrap();
            assert_eq!(load_expr(&expr_json(&e, &mut f).unwrap()).unwrap(), e, "{s}");
        }
        let e = Expr::bin(BinOp::IntDiv, Expr::var("a"), Expr::Int(2));
        let j = expr_json(&e, &mut f).unwrap();
        assert_eq!(j["op"], "floor");
        assert_eq!(load_expr(&j).unwrap(), e);
        assert!(expr_json(&Expr::EventField("x".into()), &mut f).is_err());
    }
}
