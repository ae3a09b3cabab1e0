//! Compile flat state machines into a network of MDPs.
//!
//! Every transition becomes a chain of edges: the first edge carries the
//! condition and consumes the triggering event, each following edge performs
//! one operation, and the last one enters the target state. Intermediate
//! locations are transient. Each event with both senders and receivers gets a
//! two-location automaton (`idle`/`pending`) synchronized with the sending and
//! receiving edges.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use num_rational::Rational64;

use crate::diag::{Diagnostic, Diagnostics};
use crate::expr::{resolve_int_division, Expr, Formula, LValue, Type, TypeEnv};
use crate::jani::{
    Assignment, Automaton, Destination, Edge, Location, LocationKind, Network, Property, Query,
    SyncVector, VarDecl,
};
use crate::registry::{event_automaton, payload_var, recv_action, send_action, EventRegistry};
use crate::scxml::{const_value, value_to_expr, Op, StateMachine, Transition};

pub use crate::registry::EventInfo;

pub const EVENT_IDLE: &str = "idle";
pub const EVENT_PENDING: &str = "pending";

/// Action of the event automaton's idle→pending edge.
pub fn event_send_action(event: &str) -> String {
    format!("ev:{event}:send")
}

/// Action of the event automaton's pending→idle edge.
pub fn event_recv_action(event: &str) -> String {
    format!("ev:{event}:recv")
}

/// Deterministic source of fresh location names within one automaton.
#[derive(Debug)]
pub struct IdGenerator {
    counter: u64,
    taken: HashSet<String>,
}

impl IdGenerator {
    pub fn new(taken: impl IntoIterator<Item = String>) -> Self {
        Self {
            counter: 0,
            taken: taken.into_iter().collect(),
        }
    }

    /// A name `<base>~<n>` not returned before and not among the taken names.
    pub fn fresh(&mut self, base: &str) -> String {
        loop {
            let id = format!("{base}~{}", self.counter);
            self.counter += 1;
            if self.taken.insert(id.clone()) {
                return id;
            }
        }
    }
}

struct Ctx<'a> {
    registry: &'a EventRegistry,
    globals: &'a BTreeMap<String, Type>,
    diags: Vec<Diagnostic>,
}

struct LocalEnv<'a> {
    locals: &'a BTreeMap<String, Type>,
    globals: &'a BTreeMap<String, Type>,
}

impl TypeEnv for LocalEnv<'_> {
    fn var_type(&self, name: &str) -> Option<Type> {
        self.locals
            .get(name)
            .or_else(|| self.globals.get(name))
            .cloned()
    }
}

enum End<'t> {
    To(String),
    Split(&'t Transition),
}

struct MachineBuilder<'a, 'c> {
    m: &'a StateMachine,
    ctx: &'c mut Ctx<'a>,
    ids: IdGenerator,
    locals: BTreeMap<String, Type>,
    locations: Vec<Location>,
    edges: Vec<Edge>,
}

impl<'a> MachineBuilder<'a, '_> {
    /// Rewrite payload references and integer division.
    fn expr(&mut self, e: &Expr, trigger: Option<&str>) -> Expr {
        let mut missing = None;
        let replaced = e.replace_event_fields(&|f| {
            let Some(ev) = trigger else {
                return Expr::Bool(false);
            };
            let info = self.ctx.registry.get(ev);
            match info {
                Some(i) if i.is_synchronized() => Expr::Var(payload_var(ev, f)),
                // never delivered: any value is fine, use the declared default
                Some(i) => i
                    .fields
                    .get(f)
                    .map(|t| value_to_expr(&t.default_value()))
                    .unwrap_or(Expr::Bool(false)),
                None => Expr::Bool(false),
            }
        });
        for f in e.event_fields() {
            let known = trigger
                .and_then(|ev| self.ctx.registry.get(ev))
                .is_some_and(|i| i.fields.contains_key(f));
            if !known {
                missing = Some(f.to_string());
            }
        }
        if let Some(f) = missing {
            self.ctx.diags.push(Diagnostic::error(format!(
                "machine `{}`: payload field `{f}` is not available here",
                self.m.name
            )));
        }
        let env = LocalEnv {
            locals: &self.locals,
            globals: self.ctx.globals,
        };
        resolve_int_division(&replaced, &env)
    }

    fn op_edge(&mut self, op: &Op, trigger: Option<&str>) -> (Option<String>, Vec<Assignment>) {
        match op {
            Op::Assign { location, expr } => {
                let value = self.expr(expr, trigger);
                let target = match location {
                    LValue::Var(n) => LValue::Var(n.clone()),
                    LValue::Index(n, i) => LValue::Index(n.clone(), self.expr(i, trigger)),
                };
                (None, vec![Assignment { target, value }])
            }
            Op::Send { event, params } => {
                let info = self.ctx.registry.get(event);
                if !info.is_some_and(|i| !i.receivers.is_empty()) {
                    // nobody listens: the send has no effect
                    return (None, vec![]);
                }
                let mut asg = Vec::new();
                for p in params {
                    asg.push(Assignment {
                        target: LValue::Var(payload_var(event, &p.name)),
                        value: self.expr(&p.expr, trigger),
                    });
                }
                (Some(send_action(&self.m.name, event)), asg)
            }
        }
    }

    fn fresh(&mut self, base: &str) -> String {
        let id = self.ids.fresh(base);
        self.locations.push(Location {
            name: id.clone(),
            kind: LocationKind::Transient,
        });
        id
    }

    /// Emit edges performing `ops` starting at `from`, ending in `end`.
    /// The first edge carries `guard` and `action` and performs no operation.
    fn chain(
        &mut self,
        from: &str,
        guard: Expr,
        action: Option<String>,
        ops: &[&Op],
        trigger: Option<&str>,
        end: End<'a>,
    ) {
        if ops.is_empty() {
            // keep the guarded edge ahead of the branch chains it leads into
            let slot = self.edges.len();
            self.edges.push(Edge {
                location: from.to_string(),
                action,
                guard,
                destinations: vec![],
                dismiss: false,
            });
            self.edges[slot].destinations = self.ending(from, end, trigger);
            return;
        }
        let mut cur = self.fresh(from);
        self.edges.push(Edge {
            location: from.to_string(),
            action,
            guard,
            destinations: vec![dest(&cur, vec![])],
            dismiss: false,
        });
        for (k, op) in ops.iter().enumerate() {
            let (act, asg) = self.op_edge(op, trigger);
            let last = k + 1 == ops.len();
            let destinations = if last {
                match &end {
                    End::To(t) => vec![dest(t, asg)],
                    End::Split(t) => {
                        let mut ds = self.ending(&cur, End::Split(t), trigger);
                        for d in &mut ds {
                            let mut all = asg.clone();
                            all.append(&mut d.assignments);
                            d.assignments = all;
                        }
                        ds
                    }
                }
            } else {
                let next = self.fresh(from);
                vec![dest(&next, asg)]
            };
            self.edges.push(Edge {
                location: cur.clone(),
                action: act,
                guard: Expr::Bool(true),
                destinations: destinations.clone(),
                dismiss: false,
            });
            if !last {
                cur = destinations[0].location.clone();
            }
        }
    }

    fn ending(&mut self, from: &str, end: End<'a>, trigger: Option<&str>) -> Vec<Destination> {
        match end {
            End::To(t) => vec![dest(&t, vec![])],
            End::Split(t) => {
                let mut out = Vec::new();
                for b in &t.branches {
                    let target = b.target.clone().unwrap_or_else(|| t.source.clone());
                    let ops = self.ops_for(&t.source, b.target.as_deref(), &b.body);
                    if ops.is_empty() {
                        out.push(Destination {
                            probability: b.probability,
                            location: target,
                            assignments: vec![],
                        });
                        continue;
                    }
                    let start = self.fresh(from);
                    out.push(Destination {
                        probability: b.probability,
                        location: start.clone(),
                        assignments: vec![],
                    });
                    self.op_run(&start, &ops, trigger, &target);
                }
                out
            }
        }
    }

    /// Edges performing `ops` from `start`, the last entering `target`.
    fn op_run(&mut self, start: &str, ops: &[&Op], trigger: Option<&str>, target: &str) {
        let mut cur = start.to_string();
        for (k, op) in ops.iter().enumerate() {
            let (act, asg) = self.op_edge(op, trigger);
            let next = if k + 1 == ops.len() {
                target.to_string()
            } else {
                self.fresh(start.split('~').next().unwrap_or(start))
            };
            self.edges.push(Edge {
                location: cur.clone(),
                action: act,
                guard: Expr::Bool(true),
                destinations: vec![dest(&next, asg)],
                dismiss: false,
            });
            cur = next;
        }
    }

    /// Exit content of the source, the body, then entry content of the target.
    fn ops_for(&self, source: &str, target: Option<&str>, body: &'a [Op]) -> Vec<&'a Op> {
        let Some(target) = target else {
            return body.iter().collect();
        };
        let exit = self.m.state(source).map(|s| s.onexit.as_slice()).unwrap_or(&[]);
        let entry = self.m.state(target).map(|s| s.onentry.as_slice()).unwrap_or(&[]);
        exit.iter().chain(body).chain(entry).collect()
    }

    fn transition(&mut self, t: &'a Transition) {
        let trigger = t.event.as_deref();
        let (action, mut guard) = match trigger {
            None => (None, Expr::Bool(true)),
            Some(e) => match self.ctx.registry.get(e) {
                Some(info) if info.is_synchronized() => {
                    (Some(recv_action(&self.m.name, e)), Expr::Bool(true))
                }
                // never sent: the transition can not fire
                _ => (None, Expr::Bool(false)),
            },
        };
        let cond = self.expr(&t.cond, trigger);
        if guard.is_true() {
            guard = cond;
        }
        if t.branches.is_empty() {
            let ops = self.ops_for(&t.source, t.target.as_deref(), &t.body);
            let target = t.target.clone().unwrap_or_else(|| t.source.clone());
            self.chain(&t.source, guard, action, &ops, trigger, End::To(target));
        } else {
            self.chain(&t.source, guard, action, &[], trigger, End::Split(t));
        }
    }
}

fn dest(loc: &str, assignments: Vec<Assignment>) -> Destination {
    Destination {
        probability: Rational64::new(1, 1),
        location: loc.to_string(),
        assignments,
    }
}

/// Translate validated machines into a network. Machine automata come first,
/// in input order, followed by one automaton per synchronized event in
/// event-name order.
pub fn translate(
    name: &str,
    machines: &[StateMachine],
    registry: &EventRegistry,
) -> Result<Network, Diagnostics> {
    let mut diags = Vec::new();
    let mut global_decls: Vec<VarDecl> = Vec::new();
    let mut global_types: BTreeMap<String, Type> = BTreeMap::new();
    for m in machines {
        if m.name.contains(':') {
            diags.push(Diagnostic::error(format!("machine name `{}` must not contain `:`", m.name)));
        }
        for d in m.data.iter().filter(|d| d.global) {
            if global_types.contains_key(&d.id) {
                continue;
            }
            match const_value(&d.init) {
                Ok(v) => {
                    global_types.insert(d.id.clone(), d.ty.clone());
                    global_decls.push(VarDecl {
                        name: d.id.clone(),
                        ty: d.ty.clone(),
                        init: d.ty.coerce(v),
                    });
                }
                Err(e) => diags.push(Diagnostic::error(format!("global `{}`: {e}", d.id))),
            }
        }
    }
    let declared: HashSet<String> = machines
        .iter()
        .flat_map(|m| m.data.iter().map(|d| d.id.clone()))
        .collect();
    let mut payload_owner: BTreeMap<String, String> = BTreeMap::new();
    for (ev, info) in &registry.events {
        if !info.is_synchronized() {
            continue;
        }
        for (f, ty) in &info.fields {
            let var = payload_var(ev, f);
            if declared.contains(&var) {
                diags.push(Diagnostic::error(format!(
                    "payload variable `{var}` of event `{ev}` clashes with a declared variable"
                )));
            }
            if let Some(other) = payload_owner.insert(var.clone(), ev.clone()) {
                diags.push(Diagnostic::error(format!(
                    "events `{other}` and `{ev}` map to the same payload variable `{var}`"
                )));
            }
            global_types.insert(var.clone(), ty.clone());
            global_decls.push(VarDecl {
                name: var,
                ty: ty.clone(),
                init: ty.default_value(),
            });
        }
    }

    let mut ctx = Ctx {
        registry,
        globals: &global_types,
        diags: Vec::new(),
    };
    let mut automata = Vec::new();
    for m in machines {
        let mut locals_decl = Vec::new();
        let mut locals = BTreeMap::new();
        for d in m.data.iter().filter(|d| !d.global) {
            match const_value(&d.init) {
                Ok(v) => {
                    locals.insert(d.id.clone(), d.ty.clone());
                    locals_decl.push(VarDecl {
                        name: d.id.clone(),
                        ty: d.ty.clone(),
                        init: d.ty.coerce(v),
                    });
                }
                Err(e) => ctx
                    .diags
                    .push(Diagnostic::error(format!("`{}` of `{}`: {e}", d.id, m.name))),
            }
        }
        let locations = m
            .states
            .iter()
            .map(|s| Location {
                name: s.id.clone(),
                kind: if s.idle {
                    LocationKind::Idle
                } else {
                    LocationKind::Normal
                },
            })
            .collect();
        let mut b = MachineBuilder {
            m,
            ctx: &mut ctx,
            ids: IdGenerator::new(m.states.iter().map(|s| s.id.clone())),
            locals,
            locations,
            edges: Vec::new(),
        };
        for t in &m.transitions {
            b.transition(t);
        }
        automata.push(Automaton {
            name: m.name.clone(),
            locals: locals_decl,
            locations: b.locations,
            initial: m.initial.clone(),
            edges: b.edges,
        });
    }
    diags.append(&mut ctx.diags);

    let index: BTreeMap<&str, usize> = machines
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name.as_str(), i))
        .collect();
    let n_total = machines.len() + registry.events.values().filter(|i| i.is_synchronized()).count();
    let mut syncs = Vec::new();
    for (ev, info) in registry.events.iter().filter(|(_, i)| i.is_synchronized()) {
        let slot = automata.len();
        let (sa, ra) = (event_send_action(ev), event_recv_action(ev));
        automata.push(Automaton {
            name: event_automaton(ev),
            locals: vec![],
            locations: vec![
                Location {
                    name: EVENT_IDLE.into(),
                    kind: LocationKind::Normal,
                },
                Location {
                    name: EVENT_PENDING.into(),
                    kind: LocationKind::Normal,
                },
            ],
            initial: EVENT_IDLE.into(),
            edges: vec![
                Edge {
                    location: EVENT_IDLE.into(),
                    action: Some(sa.clone()),
                    guard: Expr::Bool(true),
                    destinations: vec![dest(EVENT_PENDING, vec![])],
                    dismiss: false,
                },
                Edge {
                    location: EVENT_PENDING.into(),
                    action: Some(ra.clone()),
                    guard: Expr::Bool(true),
                    destinations: vec![dest(EVENT_IDLE, vec![])],
                    dismiss: false,
                },
            ],
        });
        fn ordered<'s>(set: &'s BTreeSet<String>, index: &BTreeMap<&str, usize>) -> Vec<&'s String> {
            let mut v: Vec<&String> = set.iter().collect();
            v.sort_by_key(|m| index.get(m.as_str()).copied().unwrap_or(usize::MAX));
            v
        }
        for (machines_set, mk, ev_action) in [
            (&info.senders, send_action as fn(&str, &str) -> String, &sa),
            (&info.receivers, recv_action as fn(&str, &str) -> String, &ra),
        ] {
            for m in ordered(machines_set, &index) {
                let Some(&i) = index.get(m.as_str()) else {
                    diags.push(Diagnostic::error(format!("event `{ev}` names unknown machine `{m}`")));
                    continue;
                };
                let mut participants = vec![None; n_total];
                participants[i] = Some(mk(m, ev));
                participants[slot] = Some(ev_action.clone());
                syncs.push(SyncVector {
                    participants,
                    result: mk(m, ev),
                });
            }
        }
    }

    if diags.iter().any(Diagnostic::is_error) {
        return Err(Diagnostics(diags));
    }
    Ok(Network {
        name: name.to_string(),
        constants: vec![],
        globals: global_decls,
        automata,
        syncs,
        properties: vec![],
    })
}

/// Add a self-loop consuming event `e` at every location of each receiver
/// where no `e`-triggered edge is certain to be enabled. The loop's guard is
/// the negated disjunction of the existing receive guards there.
pub fn add_dismiss_edges(net: &mut Network, registry: &EventRegistry) {
    for (ev, info) in registry.events.iter().filter(|(_, i)| i.is_synchronized()) {
        for r in &info.receivers {
            let action = recv_action(r, ev);
            let Some(a) = net.automata.iter_mut().find(|a| &a.name == r) else {
                continue;
            };
            let mut added = Vec::new();
            for l in &a.locations {
                let guards: Vec<&Expr> = a
                    .edges
                    .iter()
                    .filter(|e| e.location == l.name && e.action.as_deref() == Some(&action))
                    .map(|e| &e.guard)
                    .collect();
                if guards.iter().any(|g| g.is_true()) {
                    continue;
                }
                let guard = if guards.is_empty() {
                    Expr::Bool(true)
                } else {
                    Expr::not(Expr::any(guards.into_iter().cloned()))
                };
                added.push(Edge {
                    location: l.name.clone(),
                    action: Some(action.clone()),
                    guard,
                    destinations: vec![dest(&l.name, vec![])],
                    dismiss: true,
                });
            }
            a.edges.extend(added);
        }
    }
}

/// A property as written by the user, before it is checked against a network.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertySpec {
    pub name: String,
    pub formula: Formula,
    pub query: Query,
}

/// Check that the formula only reads global variables and constants of `net`
/// and resolve integer division.
pub fn compile_property(
    spec: &PropertySpec,
    net: &Network,
    step_bound: Option<u64>,
) -> Result<Property, Diagnostic> {
    let globals: BTreeMap<String, Type> = net
        .globals
        .iter()
        .map(|g| (g.name.clone(), g.ty.clone()))
        .chain(net.constants.iter().map(|c| (c.name.clone(), c.ty.clone())))
        .collect();
    let env = LocalEnv {
        locals: &BTreeMap::new(),
        globals: &globals,
    };
    let check = |e: &Expr| -> Result<Expr, Diagnostic> {
        if let Some(f) = e.event_fields().into_iter().next() {
            return Err(Diagnostic::error(format!(
                "property `{}` reads event payload `{f}`",
                spec.name
            )));
        }
        for v in e.vars() {
            if !globals.contains_key(v) {
                return Err(Diagnostic::error(format!(
                    "property `{}` references `{v}`, which is not a global variable or constant",
                    spec.name
                )));
            }
        }
        match crate::expr::typecheck(e, &env) {
            Ok(crate::expr::Kind::Bool) => Ok(resolve_int_division(e, &env)),
            Ok(k) => Err(Diagnostic::error(format!(
                "property `{}`: `{e}` has type {k}, expected bool",
                spec.name
            ))),
            Err(err) => Err(Diagnostic::error(format!("property `{}`: {err}", spec.name))),
        }
    };
    let formula = match &spec.formula {
        Formula::Until(l, r) => Formula::Until(check(l)?, check(r)?),
        Formula::Eventually(r) => Formula::Eventually(check(r)?),
    };
    Ok(Property {
        name: spec.name.clone(),
        query: spec.query,
        formula,
        step_bound,
    })
}
