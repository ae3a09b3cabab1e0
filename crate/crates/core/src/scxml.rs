//! Flat SCXML state machines: intermediate representation, parser, serializer
//! and system-level validation.
//!
//! Supported subset: `<datamodel>`/`<data>`, flat `<state>`/`<final>`,
//! `<onentry>`/`<onexit>`, `<transition event cond target>`, `<assign>`,
//! `<send>` with `<param>`. Extension attributes and elements live in the
//! [`EXT_NS`] namespace: `scope="global"` on data, `priority="idle"` on states,
//! `type` on params and `<branch prob target>` inside transitions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use num_rational::Rational64;

use crate::diag::{Diagnostic, Diagnostics};
use crate::expr::{eval, typecheck, Expr, Kind, LValue, Type, TypeEnv, Value};
use crate::registry::{EventRegistry, Schemas};
use crate::xml::{self, elements, err, req_attr};

pub const SCXML_NS: &str = "http://www.w3.org/2005/07/scxml";
pub const EXT_NS: &str = "urn:scjani:ext";

#[derive(Debug, Clone, PartialEq)]
pub struct StateMachine {
    pub name: String,
    pub data: Vec<DataDecl>,
    pub states: Vec<State>,
    pub initial: String,
    /// Grouped by source state, document order within each state.
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataDecl {
    pub id: String,
    pub ty: Type,
    pub init: Expr,
    /// Shared by every machine declaring it instead of private to this one.
    pub global: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub id: String,
    pub onentry: Vec<Op>,
    pub onexit: Vec<Op>,
    /// Transitions out of an idle state only run when nothing else can.
    pub idle: bool,
}

impl State {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            onentry: Vec::new(),
            onexit: Vec::new(),
            idle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub source: String,
    /// `None` for targetless transitions (no exit/entry content runs).
    pub target: Option<String>,
    pub event: Option<String>,
    pub cond: Expr,
    pub body: Vec<Op>,
    /// Probabilistic outcomes; when present `body` is empty and `target` unused.
    pub branches: Vec<Branch>,
}

impl Transition {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: Some(target.into()),
            event: None,
            cond: Expr::Bool(true),
            body: Vec::new(),
            branches: Vec::new(),
        }
    }

    pub fn on(mut self, event: impl Into<String>) -> Self {
        self.event = Some(event.into());
        self
    }

    pub fn when(mut self, cond: Expr) -> Self {
        self.cond = cond;
        self
    }

    pub fn with_body(mut self, body: Vec<Op>) -> Self {
        self.body = body;
        self
    }

    /// Every operation sequence owned by the transition.
    pub fn op_lists(&self) -> impl Iterator<Item = &Vec<Op>> {
        std::iter::once(&self.body).chain(self.branches.iter().map(|b| &b.body))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub probability: Rational64,
    pub target: Option<String>,
    pub body: Vec<Op>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Assign { location: LValue, expr: Expr },
    Send { event: String, params: Vec<Param> },
}

impl Op {
    pub fn assign(var: impl Into<String>, expr: Expr) -> Op {
        Op::Assign {
            location: LValue::Var(var.into()),
            expr,
        }
    }

    pub fn send(event: impl Into<String>, params: Vec<Param>) -> Op {
        Op::Send {
            event: event.into(),
            params,
        }
    }

    /// Expressions read by the operation.
    pub fn exprs(&self) -> Vec<&Expr> {
        match self {
            Op::Assign { location, expr } => {
                let mut v = vec![expr];
                if let LValue::Index(_, i) = location {
                    v.push(i);
                }
                v
            }
            Op::Send { params, .. } => params.iter().map(|p| &p.expr).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub expr: Expr,
    /// Declared payload type; inferred from `expr` when absent.
    pub ty: Option<Type>,
}

impl Param {
    pub fn new(name: impl Into<String>, expr: Expr) -> Self {
        Self {
            name: name.into(),
            expr,
            ty: None,
        }
    }

    pub fn typed(name: impl Into<String>, expr: Expr, ty: Type) -> Self {
        Self {
            name: name.into(),
            expr,
            ty: Some(ty),
        }
    }
}

impl StateMachine {
    pub fn new(name: impl Into<String>, initial: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            data: Vec::new(),
            states: Vec::new(),
            initial: initial.into(),
            transitions: Vec::new(),
        }
    }

    pub fn state(&self, id: &str) -> Option<&State> {
        self.states.iter().find(|s| s.id == id)
    }

    pub fn data_decl(&self, id: &str) -> Option<&DataDecl> {
        self.data.iter().find(|d| d.id == id)
    }

    pub fn transitions_from<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Transition> + 'a {
        self.transitions.iter().filter(move |t| t.source == id)
    }

    /// Every operation in the machine with the transition it belongs to
    /// (`None` for onentry/onexit content).
    pub fn all_ops(&self) -> Vec<(Option<&Transition>, &Op)> {
        let mut out = Vec::new();
        for s in &self.states {
            for op in s.onentry.iter().chain(&s.onexit) {
                out.push((None, op));
            }
        }
        for t in &self.transitions {
            for list in t.op_lists() {
                for op in list {
                    out.push((Some(t), op));
                }
            }
        }
        out
    }

    /// Events this machine sends, in first-occurrence order.
    pub fn sent_events(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (_, op) in self.all_ops() {
            if let Op::Send { event, .. } = op {
                if seen.insert(event.as_str()) {
                    out.push(event.as_str());
                }
            }
        }
        out
    }

    /// Events this machine reacts to, in first-occurrence order.
    pub fn received_events(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.transitions {
            if let Some(e) = &t.event {
                if seen.insert(e.as_str()) {
                    out.push(e.as_str());
                }
            }
        }
        out
    }

    /// Put transitions into canonical order: grouped by source state in
    /// state order, preserving relative order within each state.
    pub fn group_transitions(&mut self) {
        let order: BTreeMap<&str, usize> = self
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut ts = std::mem::take(&mut self.transitions);
        ts.sort_by_key(|t| order.get(t.source.as_str()).copied().unwrap_or(usize::MAX));
        self.transitions = ts;
    }
}

// ---------------------------------------------------------------------------
// Parsing

/// Parse a probability written as `n/d` or as a decimal like `0.25`.
pub fn parse_probability(text: &str) -> Option<Rational64> {
    let t = text.trim();
    if let Some((n, d)) = t.split_once('/') {
        let n: i64 = n.trim().parse().ok()?;
        let d: i64 = d.trim().parse().ok()?;
        if d == 0 {
            return None;
        }
        return Some(Rational64::new(n, d));
    }
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if frac.len() > 15 || !frac.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let int: i64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let den = 10i64.pow(frac.len() as u32);
    let num = if frac.is_empty() { 0 } else { frac.parse::<i64>().ok()? };
    Some(Rational64::new(int.checked_mul(den)?.checked_add(num)?, den))
}

fn is_ext(node: roxmltree::Node<'_, '_>) -> bool {
    node.tag_name().namespace() == Some(EXT_NS)
}

fn is_scxml(node: roxmltree::Node<'_, '_>) -> bool {
    matches!(node.tag_name().namespace(), None | Some(SCXML_NS))
}

const REJECTED: [&str; 12] = [
    "parallel", "history", "invoke", "script", "if", "elseif", "else", "foreach", "raise", "log",
    "cancel", "initial",
];

/// Prefix of the placeholder send that marks a blocking call: the rest of
/// the transition body waits for the named reply event. Control characters
/// cannot appear in XML attributes, so user events never collide with it.
pub(crate) const AWAIT: &str = "\u{1}await:";

/// Hooks for elements outside the SCXML and extension namespaces.
pub(crate) trait Extension {
    /// Top-level element; returns false if not recognized.
    fn declaration(&mut self, node: roxmltree::Node<'_, '_>, diags: &mut Vec<Diagnostic>) -> bool;
    /// Transition-like element inside a state: the event it reacts to and a
    /// condition added to its own.
    fn trigger(
        &mut self,
        node: roxmltree::Node<'_, '_>,
        diags: &mut Vec<Diagnostic>,
    ) -> Option<(String, Expr)>;
    /// Executable content.
    fn op(
        &mut self,
        node: roxmltree::Node<'_, '_>,
        p: &mut MachineParser<'_>,
        ctx: PayloadCtx,
    ) -> Option<Vec<Op>>;
}

/// Where payload (`_event.*`) references are allowed.
#[derive(Clone, Copy, PartialEq)]
pub(crate) enum PayloadCtx {
    Allowed,
    NoTrigger,
    StateContent,
}

pub(crate) struct MachineParser<'e> {
    pub(crate) diags: Vec<Diagnostic>,
    vars: BTreeSet<String>,
    ext: Option<&'e mut dyn Extension>,
}

impl MachineParser<'_> {
    pub(crate) fn expr(&mut self, node: roxmltree::Node<'_, '_>, text: &str, ctx: PayloadCtx) -> Expr {
        match Expr::parse(text) {
            Ok(e) => {
                self.check_refs(node, &e, ctx);
                e
            }
            Err(e) => {
                self.diags.push(err(node, format!("in `{text}`: {e}")));
                Expr::Bool(false)
            }
        }
    }

    fn check_refs(&mut self, node: roxmltree::Node<'_, '_>, e: &Expr, ctx: PayloadCtx) {
        for v in e.vars() {
            if !self.vars.contains(v) {
                self.diags
                    .push(err(node, format!("undeclared variable `{v}`")));
            }
        }
        if let Some(f) = e.event_fields().into_iter().next() {
            match ctx {
                PayloadCtx::Allowed => {}
                PayloadCtx::NoTrigger => self.diags.push(err(
                    node,
                    format!("`_event.{f}` used in a transition without an event"),
                )),
                PayloadCtx::StateContent => self.diags.push(err(
                    node,
                    format!("`_event.{f}` is only available in the triggering transition, not in onentry/onexit"),
                )),
            }
        }
    }

    /// `<param name expr>` children (any namespace), with optional `type`.
    pub(crate) fn params(&mut self, n: roxmltree::Node<'_, '_>, ctx: PayloadCtx) -> Vec<Param> {
        let mut params = Vec::new();
        for p in elements(n) {
            if !matches!(p.tag_name().name(), "param" | "field") {
                self.diags.push(err(
                    p,
                    format!("unsupported element <{}> in <{}>", p.tag_name().name(), n.tag_name().name()),
                ));
                continue;
            }
            let (name, ex) = match (req_attr(p, "name"), req_attr(p, "expr")) {
                (Ok(a), Ok(b)) => (a, b),
                (a, b) => {
                    self.diags.extend(a.err().into_iter().chain(b.err()));
                    continue;
                }
            };
            if params.iter().any(|q: &Param| q.name == name) {
                self.diags.push(err(p, format!("duplicate param `{name}`")));
            }
            let expr = self.expr(p, ex, ctx);
            let ty = match p
                .attribute((EXT_NS, "type"))
                .or_else(|| p.attribute("type"))
                .map(Type::parse)
            {
                None => None,
                Some(Ok(t)) => Some(t),
                Some(Err(e)) => {
                    self.diags.push(err(p, e.to_string()));
                    None
                }
            };
            params.push(Param {
                name: name.to_string(),
                expr,
                ty,
            });
        }
        params
    }

    pub(crate) fn ops(&mut self, parent: roxmltree::Node<'_, '_>, mut ctx: PayloadCtx) -> Vec<Op> {
        let mut out = Vec::new();
        xml::check_no_text(parent, &mut self.diags);
        for n in elements(parent) {
            if is_ext(n) && n.tag_name().name() == "branch" {
                continue;
            }
            if !is_ext(n) && !is_scxml(n) {
                if let Some(ext) = self.ext.take() {
                    let r = ext.op(n, self, ctx);
                    self.ext = Some(ext);
                    if let Some(ops) = r {
                        let blocking = ops
                            .iter()
                            .any(|o| matches!(o, Op::Send { event, .. } if event.starts_with(AWAIT)));
                        if blocking {
                            if ctx == PayloadCtx::StateContent {
                                self.diags.push(err(n, "blocking calls are not allowed in onentry/onexit"));
                            }
                            // what follows runs on the reply
                            ctx = PayloadCtx::Allowed;
                        }
                        out.extend(ops);
                        continue;
                    }
                }
            }
            if !is_scxml(n) {
                self.diags.push(err(n, format!("unsupported element <{}>", n.tag_name().name())));
                continue;
            }
            match n.tag_name().name() {
                "assign" => {
                    let (loc, ex) = match (req_attr(n, "location"), req_attr(n, "expr")) {
                        (Ok(l), Ok(e)) => (l, e),
                        (a, b) => {
                            self.diags.extend(a.err().into_iter().chain(b.err()));
                            continue;
                        }
                    };
                    let location = match LValue::parse(loc) {
                        Ok(l) => l,
                        Err(e) => {
                            self.diags.push(err(n, format!("in `{loc}`: {e}")));
                            continue;
                        }
                    };
                    self.check_refs(n, &location.to_expr(), ctx);
                    let expr = self.expr(n, ex, ctx);
                    out.push(Op::Assign { location, expr });
                }
                "send" => {
                    let event = match req_attr(n, "event") {
                        Ok(e) => e.to_string(),
                        Err(d) => {
                            self.diags.push(d);
                            continue;
                        }
                    };
                    let params = self.params(n, ctx);
                    out.push(Op::Send { event, params });
                }
                other if REJECTED.contains(&other) => self.diags.push(err(
                    n,
                    format!("<{other}> is not supported; only flat machines with assign/send content are accepted"),
                )),
                other => self.diags.push(err(n, format!("unknown element <{other}>"))),
            }
        }
        out
    }
}

/// Parse one SCXML document.
pub fn parse_scxml(text: &str) -> Result<StateMachine, Diagnostics> {
    parse_machine(text, None)
}

pub(crate) fn parse_machine(
    text: &str,
    ext: Option<&mut dyn Extension>,
) -> Result<StateMachine, Diagnostics> {
    let doc = xml::parse_doc(text)?;
    let root = doc.root_element();
    if root.tag_name().name() != "scxml" || !is_scxml(root) {
        return Err(err(root, "root element must be <scxml>").into());
    }
    let mut p = MachineParser {
        diags: Vec::new(),
        vars: BTreeSet::new(),
        ext,
    };
    let name = match req_attr(root, "name") {
        Ok(n) => n.to_string(),
        Err(d) => {
            p.diags.push(d);
            String::new()
        }
    };
    if let Some(dm) = root.attribute("datamodel") {
        if dm != "null" && dm != "scjani" {
            p.diags.push(err(root, format!("datamodel `{dm}` is not supported")));
        }
    }

    // data first, so expressions can be resolved regardless of element order
    let mut data = Vec::new();
    for dm in elements(root).filter(|n| n.tag_name().name() == "datamodel" && is_scxml(*n)) {
        for d in elements(dm) {
            if d.tag_name().name() != "data" {
                p.diags.push(err(d, format!("unknown element <{}> in <datamodel>", d.tag_name().name())));
                continue;
            }
            if let Some(decl) = parse_data(d, &mut p.diags) {
                if !p.vars.insert(decl.id.clone()) {
                    p.diags.push(err(d, format!("duplicate data id `{}`", decl.id)));
                }
                data.push(decl);
            }
        }
    }

    let mut states = Vec::new();
    let mut transitions = Vec::new();
    let mut state_pos = BTreeMap::new();
    let mut targets = Vec::new();
    for n in elements(root) {
        let tag = n.tag_name().name();
        if !is_scxml(n) {
            if !is_ext(n) {
                if let Some(ext) = p.ext.as_deref_mut() {
                    if ext.declaration(n, &mut p.diags) {
                        continue;
                    }
                }
            }
            p.diags.push(err(n, format!("unknown element <{tag}>")));
            continue;
        }
        match tag {
            "datamodel" => {}
            "state" | "final" => {
                let id = match req_attr(n, "id") {
                    Ok(id) => id.to_string(),
                    Err(d) => {
                        p.diags.push(d);
                        continue;
                    }
                };
                if state_pos.insert(id.clone(), xml::pos(n)).is_some() {
                    p.diags.push(err(n, format!("duplicate state id `{id}`")));
                }
                let mut st = State::new(&id);
                st.idle = match n.attribute((EXT_NS, "priority")) {
                    None | Some("normal") => false,
                    Some("idle") => true,
                    Some(other) => {
                        p.diags.push(err(n, format!("unknown priority `{other}`")));
                        false
                    }
                };
                xml::check_no_text(n, &mut p.diags);
                for c in elements(n) {
                    let ctag = c.tag_name().name();
                    if !is_scxml(c) {
                        if !is_ext(c) {
                            let trig = match p.ext.as_deref_mut() {
                                Some(ext) => ext.trigger(c, &mut p.diags),
                                None => None,
                            };
                            if let Some((event, extra)) = trig {
                                if let Some(mut t) = parse_transition(&mut p, c, &id, &mut targets, Some(event)) {
                                    if !extra.is_true() {
                                        t.cond = if t.cond.is_true() { extra } else { Expr::and(extra, t.cond) };
                                    }
                                    transitions.push(t);
                                }
                                continue;
                            }
                        }
                        p.diags.push(err(c, format!("unknown element <{ctag}>")));
                        continue;
                    }
                    match ctag {
                        "onentry" => {
                            let ops = p.ops(c, PayloadCtx::StateContent);
                            st.onentry.extend(ops);
                        }
                        "onexit" => {
                            let ops = p.ops(c, PayloadCtx::StateContent);
                            st.onexit.extend(ops);
                        }
                        "transition" => {
                            if let Some(t) = parse_transition(&mut p, c, &id, &mut targets, None) {
                                transitions.push(t);
                            }
                        }
                        "state" | "parallel" | "final" => p.diags.push(err(
                            c,
                            "nested states are not supported; machines must be flat",
                        )),
                        other if REJECTED.contains(&other) => p.diags.push(err(
                            c,
                            format!("<{other}> is not supported"),
                        )),
                        other => p.diags.push(err(c, format!("unknown element <{other}>"))),
                    }
                }
                states.push(st);
            }
            other if REJECTED.contains(&other) => {
                p.diags.push(err(n, format!("<{other}> is not supported; only flat machines are accepted")))
            }
            other => p.diags.push(err(n, format!("unknown element <{other}>"))),
        }
    }

    let initial = match root.attribute("initial") {
        Some(i) => {
            if !state_pos.contains_key(i) {
                p.diags.push(err(root, format!("initial state `{i}` does not exist")));
            }
            i.to_string()
        }
        None => match states.first() {
            Some(s) => s.id.clone(),
            None => {
                p.diags.push(err(root, "machine has no states"));
                String::new()
            }
        },
    };
    for (node_pos, target) in targets {
        if !state_pos.contains_key(&target) {
            let (l, c) = node_pos;
            p.diags
                .push(Diagnostic::error(format!("unknown target state `{target}`")).at(l, c));
        }
    }

    if p.diags.iter().any(Diagnostic::is_error) {
        return Err(Diagnostics(p.diags));
    }
    Ok(StateMachine {
        name,
        data,
        states,
        initial,
        transitions,
    })
}

fn parse_data(d: roxmltree::Node<'_, '_>, diags: &mut Vec<Diagnostic>) -> Option<DataDecl> {
    let id = match req_attr(d, "id") {
        Ok(id) => id.to_string(),
        Err(e) => {
            diags.push(e);
            return None;
        }
    };
    let declared = match d.attribute("type").map(Type::parse) {
        None => None,
        Some(Ok(t)) => Some(t),
        Some(Err(e)) => {
            diags.push(err(d, e.to_string()));
            return None;
        }
    };
    let init = match d.attribute("expr").map(Expr::parse) {
        None => None,
        Some(Ok(e)) => Some(e),
        Some(Err(e)) => {
            diags.push(err(d, format!("in initial value of `{id}`: {e}")));
            return None;
        }
    };
    let global = match d.attribute((EXT_NS, "scope")) {
        None | Some("local") => false,
        Some("global") => true,
        Some(other) => {
            diags.push(err(d, format!("unknown scope `{other}`")));
            false
        }
    };
    let (ty, init) = match (declared, init) {
        (Some(t), Some(e)) => (t, e),
        (Some(t), None) => {
            let v = t.default_value();
            (t, value_to_expr(&v))
        }
        (None, Some(e)) => {
            let v = match const_value(&e) {
                Ok(v) => v,
                Err(msg) => {
                    diags.push(err(d, format!("initial value of `{id}`: {msg}")));
                    return None;
                }
            };
            let t = match v {
                Value::Bool(_) => Type::Bool,
                Value::Int(_) => Type::int(),
                Value::Real(_) => Type::Real,
                Value::Array(ref a) => Type::IntArray {
                    len: a.len(),
                    range: crate::expr::DEFAULT_INT_RANGE,
                },
            };
            (t, e)
        }
        (None, None) => {
            diags.push(err(d, format!("data `{id}` needs a `type` or an `expr`")));
            return None;
        }
    };
    match const_value(&init) {
        Ok(v) if ty.admits(&v) => {}
        Ok(v) => diags.push(err(d, format!("initial value {v} of `{id}` is outside type {ty}"))),
        Err(msg) => diags.push(err(d, format!("initial value of `{id}`: {msg}"))),
    }
    Some(DataDecl { id, ty, init, global })
}

/// Evaluate an expression that must not reference variables or payload.
pub fn const_value(e: &Expr) -> Result<Value, String> {
    if let Some(v) = e.vars().into_iter().next() {
        return Err(format!("must be constant but references `{v}`"));
    }
    if !e.event_fields().is_empty() {
        return Err("must be constant but references the event payload".into());
    }
    eval(e, &BTreeMap::<String, Value>::new()).map_err(|e| e.to_string())
}

pub fn value_to_expr(v: &Value) -> Expr {
    match v {
        Value::Bool(b) => Expr::Bool(*b),
        Value::Int(i) => Expr::Int(*i),
        Value::Real(r) => Expr::Real(*r),
        Value::Array(a) => Expr::ArrayLit(a.iter().map(|i| Expr::Int(*i)).collect()),
    }
}

fn parse_transition(
    p: &mut MachineParser<'_>,
    n: roxmltree::Node<'_, '_>,
    source: &str,
    targets: &mut Vec<((u32, u32), String)>,
    trigger: Option<String>,
) -> Option<Transition> {
    let explicit = trigger.is_some();
    let event = trigger.or_else(|| n.attribute("event").map(str::to_string));
    if let Some(e) = event.as_ref().filter(|_| !explicit) {
        if e.split_whitespace().count() != 1 || e.contains('*') {
            p.diags.push(err(
                n,
                format!("event `{e}`: exactly one event name without wildcards is supported"),
            ));
        }
    }
    let ctx = if event.is_some() {
        PayloadCtx::Allowed
    } else {
        PayloadCtx::NoTrigger
    };
    let cond = match n.attribute("cond") {
        Some(c) => p.expr(n, c, ctx),
        None => Expr::Bool(true),
    };
    if let Some(tt) = n.attribute("type") {
        if tt != "external" {
            p.diags.push(err(n, format!("transition type `{tt}` is not supported")));
        }
    }
    let target = parse_target(p, n, targets);
    let body = p.ops(n, ctx);
    let mut branches = Vec::new();
    for b in elements(n).filter(|b| is_ext(*b)) {
        if b.tag_name().name() != "branch" {
            p.diags.push(err(b, format!("unknown element <{}>", b.tag_name().name())));
            continue;
        }
        let prob = match req_attr(b, "prob") {
            Ok(t) => match parse_probability(t) {
                Some(r) => r,
                None => {
                    p.diags.push(err(b, format!("invalid probability `{t}`")));
                    continue;
                }
            },
            Err(d) => {
                p.diags.push(d);
                continue;
            }
        };
        let target = parse_target(p, b, targets);
        let body = p.ops(b, ctx);
        branches.push(Branch {
            probability: prob,
            target,
            body,
        });
    }
    if !branches.is_empty() {
        if !body.is_empty() {
            p.diags.push(err(
                n,
                "a transition with <branch> children must keep its content inside the branches",
            ));
        }
        if target.is_some() {
            p.diags.push(err(n, "a transition with <branch> children takes its targets from the branches"));
        }
    }
    Some(Transition {
        source: source.to_string(),
        target,
        event,
        cond,
        body,
        branches,
    })
}

fn parse_target(
    p: &mut MachineParser<'_>,
    n: roxmltree::Node<'_, '_>,
    targets: &mut Vec<((u32, u32), String)>,
) -> Option<String> {
    let t = n.attribute("target")?;
    if t.split_whitespace().count() != 1 {
        p.diags.push(err(n, format!("target `{t}`: exactly one target state is supported")));
        return None;
    }
    targets.push((xml::pos(n), t.to_string()));
    Some(t.to_string())
}

// ---------------------------------------------------------------------------
// Serialization

/// Serialize to SCXML text that [`parse_scxml`] reads back identically.
pub fn to_scxml(m: &StateMachine) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<scxml xmlns=\"{SCXML_NS}\" xmlns:sj=\"{EXT_NS}\" version=\"1.0\" datamodel=\"scjani\" name=\"{}\" initial=\"{}\">",
        xml::escape_attr(&m.name),
        xml::escape_attr(&m.initial)
    );
    if !m.data.is_empty() {
        out.push_str("  <datamodel>\n");
        for d in &m.data {
            let scope = if d.global { " sj:scope=\"global\"" } else { "" };
            let _ = writeln!(
                out,
                "    <data id=\"{}\" type=\"{}\" expr=\"{}\"{scope}/>",
                xml::escape_attr(&d.id),
                d.ty,
                xml::escape_attr(&d.init.to_string())
            );
        }
        out.push_str("  </datamodel>\n");
    }
    for s in &m.states {
        let idle = if s.idle { " sj:priority=\"idle\"" } else { "" };
        let _ = writeln!(out, "  <state id=\"{}\"{idle}>", xml::escape_attr(&s.id));
        if !s.onentry.is_empty() {
            out.push_str("    <onentry>\n");
            write_ops(&mut out, &s.onentry, 6);
            out.push_str("    </onentry>\n");
        }
        if !s.onexit.is_empty() {
            out.push_str("    <onexit>\n");
            write_ops(&mut out, &s.onexit, 6);
            out.push_str("    </onexit>\n");
        }
        for t in m.transitions_from(&s.id) {
            out.push_str("    <transition");
            if let Some(e) = &t.event {
                let _ = write!(out, " event=\"{}\"", xml::escape_attr(e));
            }
            if !t.cond.is_true() {
                let _ = write!(out, " cond=\"{}\"", xml::escape_attr(&t.cond.to_string()));
            }
            if let Some(tg) = &t.target {
                let _ = write!(out, " target=\"{}\"", xml::escape_attr(tg));
            }
            if t.body.is_empty() && t.branches.is_empty() {
                out.push_str("/>\n");
                continue;
            }
            out.push_str(">\n");
            write_ops(&mut out, &t.body, 6);
            for b in &t.branches {
                let _ = write!(out, "      <sj:branch prob=\"{}\"", b.probability);
                if let Some(tg) = &b.target {
                    let _ = write!(out, " target=\"{}\"", xml::escape_attr(tg));
                }
                if b.body.is_empty() {
                    out.push_str("/>\n");
                } else {
                    out.push_str(">\n");
                    write_ops(&mut out, &b.body, 8);
                    out.push_str("      </sj:branch>\n");
                }
            }
            out.push_str("    </transition>\n");
        }
        out.push_str("  </state>\n");
    }
    out.push_str("</scxml>\n");
    out
}

fn write_ops(out: &mut String, ops: &[Op], indent: usize) {
    let pad = " ".repeat(indent);
    for op in ops {
        match op {
            Op::Assign { location, expr } => {
                let _ = writeln!(
                    out,
                    "{pad}<assign location=\"{}\" expr=\"{}\"/>",
                    xml::escape_attr(&location.to_string()),
                    xml::escape_attr(&expr.to_string())
                );
            }
            Op::Send { event, params } => {
                if params.is_empty() {
                    let _ = writeln!(out, "{pad}<send event=\"{}\"/>", xml::escape_attr(event));
                    continue;
                }
                let _ = writeln!(out, "{pad}<send event=\"{}\">", xml::escape_attr(event));
                for p in params {
                    let ty = p
                        .ty
                        .as_ref()
                        .map(|t| format!(" sj:type=\"{t}\""))
                        .unwrap_or_default();
                    let _ = writeln!(
                        out,
                        "{pad}  <param name=\"{}\" expr=\"{}\"{ty}/>",
                        xml::escape_attr(&p.name),
                        xml::escape_attr(&p.expr.to_string())
                    );
                }
                let _ = writeln!(out, "{pad}</send>");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// System validation

struct MachineEnv<'a> {
    m: &'a StateMachine,
    fields: Option<&'a BTreeMap<String, Type>>,
}

impl TypeEnv for MachineEnv<'_> {
    fn var_type(&self, name: &str) -> Option<Type> {
        self.m.data_decl(name).map(|d| d.ty.clone())
    }

    fn field_type(&self, name: &str) -> Option<Type> {
        self.fields.and_then(|f| f.get(name).cloned())
    }
}

/// Check every machine invariant and the consistency of events and shared
/// variables across machines. An empty result means the system is valid.
pub fn validate_system(machines: &[StateMachine]) -> Vec<Diagnostic> {
    validate_system_with(machines, &BTreeMap::new())
}

/// Like [`validate_system`], with payload schemas for events that no machine
/// in the system sends.
pub fn validate_system_with(machines: &[StateMachine], declared: &Schemas) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut names = HashSet::new();
    for m in machines {
        if !names.insert(m.name.as_str()) {
            out.push(Diagnostic::error(format!("duplicate machine name `{}`", m.name)));
        }
        check_machine(m, &mut out);
    }
    check_globals(machines, &mut out);
    let (registry, reg_diags) = EventRegistry::build_with(machines, declared);
    out.extend(reg_diags);
    for m in machines {
        check_types(m, &registry, &mut out);
    }
    out
}

fn check_machine(m: &StateMachine, out: &mut Vec<Diagnostic>) {
    let ctx = |msg: String| Diagnostic::error(format!("machine `{}`: {msg}", m.name));
    let mut ids = HashSet::new();
    for s in &m.states {
        if !ids.insert(s.id.as_str()) {
            out.push(ctx(format!("duplicate state id `{}`", s.id)));
        }
    }
    if !ids.contains(m.initial.as_str()) {
        out.push(ctx(format!("initial state `{}` does not exist", m.initial)));
    }
    let mut vars = HashSet::new();
    for d in &m.data {
        if !vars.insert(d.id.as_str()) {
            out.push(ctx(format!("duplicate data id `{}`", d.id)));
        }
        match const_value(&d.init) {
            Ok(v) if d.ty.admits(&v) => {}
            Ok(v) => out.push(ctx(format!("initial value {v} of `{}` is outside {}", d.id, d.ty))),
            Err(e) => out.push(ctx(format!("initial value of `{}` {e}", d.id))),
        }
    }
    for t in &m.transitions {
        if !ids.contains(t.source.as_str()) {
            out.push(ctx(format!("transition source `{}` does not exist", t.source)));
        }
        let targets = t
            .target
            .iter()
            .chain(t.branches.iter().filter_map(|b| b.target.as_ref()));
        for tg in targets {
            if !ids.contains(tg.as_str()) {
                out.push(ctx(format!("transition target `{tg}` does not exist")));
            }
        }
        if !t.branches.is_empty() {
            if !t.body.is_empty() {
                out.push(ctx(format!(
                    "transition from `{}` has both a body and branches",
                    t.source
                )));
            }
            let mut sum = Rational64::new(0, 1);
            for b in &t.branches {
                if b.probability <= Rational64::new(0, 1) {
                    out.push(ctx(format!(
                        "branch probability {} from `{}` is not positive",
                        b.probability, t.source
                    )));
                }
                sum += b.probability;
            }
            if sum != Rational64::new(1, 1) {
                out.push(ctx(format!(
                    "branch probabilities from `{}` sum to {sum}, not 1",
                    t.source
                )));
            }
        }
        let mut refs = vec![&t.cond];
        for list in t.op_lists() {
            for op in list {
                refs.extend(op.exprs());
            }
        }
        if t.event.is_none() && refs.iter().any(|e| !e.event_fields().is_empty()) {
            out.push(ctx(format!(
                "transition from `{}` has no event but reads the event payload",
                t.source
            )));
        }
    }
    for s in &m.states {
        for op in s.onentry.iter().chain(&s.onexit) {
            if op.exprs().iter().any(|e| !e.event_fields().is_empty()) {
                out.push(ctx(format!(
                    "onentry/onexit content of `{}` reads the event payload",
                    s.id
                )));
            }
        }
    }
}

fn check_globals(machines: &[StateMachine], out: &mut Vec<Diagnostic>) {
    let mut globals: BTreeMap<&str, (&str, &DataDecl)> = BTreeMap::new();
    for m in machines {
        for d in m.data.iter().filter(|d| d.global) {
            match globals.get(d.id.as_str()) {
                None => {
                    globals.insert(&d.id, (&m.name, d));
                }
                Some((owner, prev)) => {
                    if prev.ty != d.ty || prev.init != d.init {
                        out.push(Diagnostic::error(format!(
                            "global `{}` is declared differently in `{owner}` ({} = {}) and `{}` ({} = {})",
                            d.id, prev.ty, prev.init, m.name, d.ty, d.init
                        )));
                    }
                }
            }
        }
    }
    for m in machines {
        for d in m.data.iter().filter(|d| !d.global) {
            if let Some((owner, _)) = globals.get(d.id.as_str()) {
                out.push(Diagnostic::error(format!(
                    "local `{}` of `{}` clashes with the global declared in `{owner}`",
                    d.id, m.name
                )));
            }
        }
    }
}

fn check_types(m: &StateMachine, registry: &EventRegistry, out: &mut Vec<Diagnostic>) {
    let ctx = |msg: String| Diagnostic::error(format!("machine `{}`: {msg}", m.name));
    let plain = MachineEnv { m, fields: None };
    for s in &m.states {
        for op in s.onentry.iter().chain(&s.onexit) {
            check_op(op, &plain, &format!("state `{}`", s.id), out, &m.name);
        }
    }
    for t in &m.transitions {
        let fields = t
            .event
            .as_ref()
            .and_then(|e| registry.get(e))
            .map(|info| &info.fields);
        let env = MachineEnv { m, fields };
        let what = match &t.event {
            Some(e) => format!("transition from `{}` on `{e}`", t.source),
            None => format!("transition from `{}`", t.source),
        };
        if let (Some(e), None) = (&t.event, fields) {
            if let Some(f) = t.cond.event_fields().into_iter().next() {
                out.push(ctx(format!("{what}: event `{e}` is never sent, payload field `{f}` is unknown")));
                continue;
            }
        }
        match typecheck(&t.cond, &env) {
            Ok(Kind::Bool) => {}
            Ok(k) => out.push(ctx(format!("{what}: condition has type {k}, expected bool"))),
            Err(e) => out.push(ctx(format!("{what}: {e}"))),
        }
        for list in t.op_lists() {
            for op in list {
                check_op(op, &env, &what, out, &m.name);
            }
        }
    }
}

fn check_op(op: &Op, env: &MachineEnv<'_>, what: &str, out: &mut Vec<Diagnostic>, machine: &str) {
    let ctx = |msg: String| Diagnostic::error(format!("machine `{machine}`: {what}: {msg}"));
    match op {
        Op::Assign { location, expr } => {
            let Some(decl) = env.m.data_decl(location.name()) else {
                out.push(ctx(format!("assignment to undeclared `{}`", location.name())));
                return;
            };
            let target = match location {
                LValue::Var(_) => decl.ty.kind(),
                LValue::Index(n, i) => {
                    if decl.ty.kind() != Kind::IntArray {
                        out.push(ctx(format!("`{n}` is not an array")));
                        return;
                    }
                    match typecheck(i, env) {
                        Ok(Kind::Int) => {}
                        Ok(k) => out.push(ctx(format!("array index has type {k}"))),
                        Err(e) => out.push(ctx(e.to_string())),
                    }
                    Kind::Int
                }
            };
            match typecheck(expr, env) {
                Ok(k) if k == target || (target == Kind::Real && k == Kind::Int) => {}
                Ok(k) => out.push(ctx(format!(
                    "cannot assign {k} to `{location}` of type {target}"
                ))),
                Err(e) => out.push(ctx(e.to_string())),
            }
        }
        Op::Send { params, .. } => {
            for p in params {
                if let Err(e) = typecheck(&p.expr, env) {
                    out.push(ctx(format!("param `{}`: {e}", p.name)));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const FIG1_M1: &str = r#"<scxml xmlns="http://www.w3.org/2005/07/scxml" name="M1" initial="s0" version="1.0">
  <state id="s0">
    <transition target="s1"><send event="e1"/></transition>
  </state>
  <state id="s1">
    <transition target="s0"><send event="e2"/></transition>
  </state>
</scxml>"#;

    const FIG1_M2: &str = r#"<scxml xmlns="http://www.w3.org/2005/07/scxml" name="M2" initial="s0" version="1.0">
  <state id="s0">
    <transition event="e2" target="s1"/>
  </state>
  <state id="s1">
    <transition target="s0"/>
  </state>
</scxml>"#;

    #[test]
    fn parses_two_state_machine() {
        let m = parse_scxml(FIG1_M1).unwrap();
        assert_eq!(m.states.len(), 2);
        assert_eq!(m.transitions.len(), 2);
        assert_eq!(m.initial, "s0");
        assert_eq!(m.transitions[1].body, vec![Op::send("e2", vec![])]);
    }

    #[test]
    fn minimal_machine() {
        let m = parse_scxml(r#"<scxml name="one"><state id="only"/></scxml>"#).unwrap();
        assert_eq!(m.states.len(), 1);
        assert!(m.transitions.is_empty() && m.data.is_empty());
    }

    #[test]
    fn undeclared_variable_reports_position() {
        let doc = "<scxml name=\"m\">\n  <state id=\"a\">\n    <transition cond=\"x &gt; 1\" target=\"a\"/>\n  </state>\n</scxml>";
        let e = parse_scxml(doc).unwrap_err();
        let d = &e.0[0];
        assert!(d.message.contains("`x`"), "{d}");
        assert_eq!((d.line, d.col), (3, 5));
    }

    #[test]
    fn rejects_unsupported_constructs() {
        for (doc, needle) in [
            (r#"<scxml name="m"><parallel id="p"/></scxml>"#, "parallel"),
            (r#"<scxml name="m"><state id="a"><state id="b"/></state></scxml>"#, "nested"),
            (r#"<scxml name="m"><state id="a"/><state id="a"/></scxml>"#, "duplicate state"),
            (r#"<scxml name="m"><state id="a"><transition target="zz"/></state></scxml>"#, "zz"),
            (r#"<scxml name="m"><state id="a"><onentry><assign location="x" expr="_event.v"/></onentry></state><datamodel><data id="x" expr="0"/></datamodel></scxml>"#, "onentry"),
            (r#"<scxml name="m"><state id="a"><transition cond="_event.v" target="a"/></state></scxml>"#, "without an event"),
            (r#"<scxml name="m"><state id="a"><transition target="a"><assign location="x" expr="1 / 0"/></transition></state><datamodel><data id="x" expr="0"/></datamodel></scxml>"#, "zero"),
            (r#"<scxml name="m"><datamodel><data id="x" type="int[0..3]" expr="7"/></datamodel><state id="a"/></scxml>"#, "outside"),
            (r#"<scxml name="m"><state id="a"><transition target="a"#, "malformed"),
        ] {
            let e = parse_scxml(doc).unwrap_err();
            assert!(e.to_string().contains(needle), "{needle}: {e}");
        }
    }

    #[test]
    fn branches_and_extensions_round_trip() {
        let doc = r#"<scxml xmlns="http://www.w3.org/2005/07/scxml" xmlns:sj="urn:scjani:ext" name="coin" initial="flip">
  <datamodel>
    <data id="heads" type="bool" expr="false" sj:scope="global"/>
    <data id="n" type="int[0..10]" expr="0"/>
    <data id="arr" type="int[0..3][2]" expr="[1, 2]"/>
  </datamodel>
  <state id="flip" sj:priority="idle">
    <transition event="go" cond="_event.k &gt; 0 &amp;&amp; n &lt; 10">
      <sj:branch prob="1/2" target="done"><assign location="heads" expr="true"/></sj:branch>
      <sj:branch prob="0.5" target="done"><send event="out"><param name="v" expr="n + 1" sj:type="int[0..20]"/></send></sj:branch>
    </transition>
  </state>
  <state id="done">
    <onentry><assign location="arr[1]" expr="n % 3"/></onentry>
  </state>
</scxml>"#;
        let m = parse_scxml(doc).unwrap();
        assert!(m.states[0].idle);
        assert!(m.data[0].global);
        assert_eq!(m.transitions[0].branches[1].probability, Rational64::new(1, 2));
        let text = to_scxml(&m);
        assert_eq!(parse_scxml(&text).unwrap(), m);
        assert_eq!(to_scxml(&parse_scxml(&text).unwrap()), text);
    }

    #[test]
    fn fig1_system_is_valid() {
        let ms = vec![parse_scxml(FIG1_M1).unwrap(), parse_scxml(FIG1_M2).unwrap()];
        assert_eq!(validate_system(&ms), vec![]);
    }

    #[test]
    fn conflicting_payload_schema() {
        let mut a = StateMachine::new("A", "s");
        a.states.push(State::new("s"));
        a.transitions.push(
            Transition::new("s", "s")
                .with_body(vec![Op::send("e", vec![Param::new("v", Expr::Int(1))])]),
        );
        let mut b = StateMachine::new("B", "s");
        b.states.push(State::new("s"));
        b.transitions.push(
            Transition::new("s", "s")
                .with_body(vec![Op::send("e", vec![Param::new("v", Expr::Bool(true))])]),
        );
        let d = validate_system(&[a, b]);
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("`e`"));
    }

    #[test]
    fn missing_initial_state() {
        let mut m = StateMachine::new("A", "nowhere");
        m.states.push(State::new("s"));
        let d = validate_system(&[m]);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("nowhere"));
    }

    #[test]
    fn probabilities() {
        assert_eq!(parse_probability("1/3"), Some(Rational64::new(1, 3)));
        assert_eq!(parse_probability("0.25"), Some(Rational64::new(1, 4)));
        assert_eq!(parse_probability("1"), Some(Rational64::new(1, 1)));
        assert_eq!(parse_probability("x"), None);
        assert_eq!(parse_probability("1/0"), None);
    }

    #[test]
    fn payload_field_checks() {
        let mut a = StateMachine::new("A", "s");
        a.states.push(State::new("s"));
        a.transitions.push(
            Transition::new("s", "s")
                .with_body(vec![Op::send("e", vec![Param::new("v", Expr::Int(1))])]),
        );
        let mut b = StateMachine::new("B", "s");
        b.states.push(State::new("s"));
        b.data.push(DataDecl {
            id: "x".into(),
            ty: Type::int(),
            init: Expr::Int(0),
            global: false,
        });
        b.transitions.push(
            Transition::new("s", "s")
                .on("e")
                .when(Expr::parse("_event.v > 0").unwrap())
                .with_body(vec![Op::assign("x", Expr::parse("_event.w").unwrap())]),
        );
        let d = validate_system(&[a.clone(), b.clone()]);
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("`w`"));
        b.transitions[0].body = vec![Op::assign("x", Expr::parse("_event.v").unwrap())];
        assert!(validate_system(&[a, b]).is_empty());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn arb_machine() -> impl Strategy<Value = StateMachine> {
            let n_states = 1usize..5;
            n_states
                .prop_flat_map(|n| {
                    let t = (
                        0..n,
                        proptest::option::of(0..n),
                        proptest::option::of(prop::sample::select(vec!["go", "stop", "ros_topic./x"])),
                        prop::sample::select(vec!["true", "x < 3", "b && x != 0", "x % 2 == 1"]),
                        proptest::collection::vec(
                            prop_oneof![
                                prop::sample::select(vec!["x + 1", "x * 2 - 1", "0"])
                                    .prop_map(|e| Op::assign("x", Expr::parse(e).unwrap())),
                                prop::sample::select(vec!["out", "ping"]).prop_map(|e| Op::send(
                                    e,
                                    vec![Param::new("v", Expr::parse("x").unwrap())]
                                )),
                            ],
                            0..3,
                        ),
                    );
                    (Just(n), proptest::collection::vec(t, 0..8), any::<bool>())
                })
                .prop_map(|(n, ts, idle)| {
                    let mut m = StateMachine::new("gen", "s0");
                    m.data.push(DataDecl {
                        id: "x".into(),
                        ty: Type::Int(crate::expr::IntRange::new(0, 9)),
                        init: Expr::Int(0),
                        global: false,
                    });
                    m.data.push(DataDecl {
                        id: "b".into(),
                        ty: Type::Bool,
                        init: Expr::Bool(true),
                        global: true,
                    });
                    for i in 0..n {
                        let mut s = State::new(format!("s{i}"));
                        s.idle = idle && i == 0;
                        m.states.push(s);
                    }
                    for (src, tgt, ev, cond, body) in ts {
                        let mut t = Transition {
                            source: format!("s{src}"),
                            target: tgt.map(|t| format!("s{t}")),
                            event: ev.map(str::to_string),
                            cond: Expr::parse(cond).unwrap(),
                            body,
                            branches: vec![],
                        };
                        if t.target.is_none() && t.body.is_empty() {
                            t.branches = vec![
                                Branch { probability: Rational64::new(1, 3), target: Some("s0".into()), body: vec![] },
                                Branch { probability: Rational64::new(2, 3), target: None, body: vec![Op::assign("b", Expr::Bool(false))] },
                            ];
                        }
                        m.transitions.push(t);
                    }
                    m.group_transitions();
                    m
                })
        }

        proptest! {
            #[test]
            fn serialize_then_parse_is_identity(m in arb_machine()) {
                let text = to_scxml(&m);
                let back = parse_scxml(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
                prop_assert_eq!(back, m);
            }
        }
    }
}
