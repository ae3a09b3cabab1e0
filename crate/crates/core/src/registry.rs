//! Registry of the events exchanged between machines.

use std::collections::{BTreeMap, BTreeSet};

use crate::diag::Diagnostic;
use crate::expr::{typecheck, Expr, Kind, Type, TypeEnv};
use crate::scxml::{Op, StateMachine};

#[derive(Debug, Clone, PartialEq)]
pub struct EventInfo {
    pub name: String,
    /// Payload schema.
    pub fields: BTreeMap<String, Type>,
    /// Machines sending the event.
    pub senders: BTreeSet<String>,
    /// Machines with transitions triggered by the event.
    pub receivers: BTreeSet<String>,
}

impl EventInfo {
    /// Whether the event needs a synchronization automaton.
    pub fn is_synchronized(&self) -> bool {
        !self.senders.is_empty() && !self.receivers.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventRegistry {
    pub events: BTreeMap<String, EventInfo>,
}

/// Action label a machine uses on every edge sending `event`.
pub fn send_action(machine: &str, event: &str) -> String {
    format!("{machine}:send:{event}")
}

/// Action label a machine uses on every edge consuming `event`.
pub fn recv_action(machine: &str, event: &str) -> String {
    format!("{machine}:recv:{event}")
}

/// Name of the automaton holding the pending flag of `event`.
pub fn event_automaton(event: &str) -> String {
    format!("ev:{event}")
}

/// Name of the global variable carrying payload `field` of `event`.
pub fn payload_var(event: &str, field: &str) -> String {
    let clean: String = event
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("ev_{clean}_{field}")
}

#[derive(Clone)]
struct Candidate {
    machine: String,
    ty: Type,
    explicit: bool,
}

struct SendEnv<'a> {
    m: &'a StateMachine,
    fields: Option<&'a BTreeMap<String, Type>>,
}

impl TypeEnv for SendEnv<'_> {
    fn var_type(&self, name: &str) -> Option<Type> {
        self.m.data_decl(name).map(|d| d.ty.clone())
    }

    fn field_type(&self, name: &str) -> Option<Type> {
        self.fields.and_then(|f| f.get(name).cloned())
    }
}

impl EventRegistry {
    pub fn get(&self, event: &str) -> Option<&EventInfo> {
        self.events.get(event)
    }

    /// Collect events, senders, receivers and payload schemas. Schema
    /// conflicts and payloads whose types cannot be inferred are reported.
    pub fn build(machines: &[StateMachine]) -> (EventRegistry, Vec<Diagnostic>) {
        let mut reg = EventRegistry::default();
        for m in machines {
            for e in m.sent_events() {
                reg.entry(e).senders.insert(m.name.clone());
            }
            for e in m.received_events() {
                reg.entry(e).receivers.insert(m.name.clone());
            }
        }

        // payload types can depend on other events' payloads (forwarding), so
        // iterate until the schemas stop changing
        let mut schemas: BTreeMap<String, BTreeMap<String, Type>> = BTreeMap::new();
        let mut diags;
        let mut rounds = 0;
        loop {
            rounds += 1;
            let (next, d) = infer_schemas(machines, &schemas);
            diags = d;
            if next == schemas || rounds > reg.events.len() + 1 {
                schemas = next;
                break;
            }
            schemas = next;
        }
        for (e, fields) in schemas {
            reg.entry(&e).fields = fields;
        }
        (reg, diags)
    }

    /// [`EventRegistry::build`] followed by [`EventRegistry::declare`] for
    /// each declared schema.
    pub fn build_with(machines: &[StateMachine], declared: &Schemas) -> (EventRegistry, Vec<Diagnostic>) {
        let (mut reg, diags) = Self::build(machines);
        for (e, fields) in declared {
            reg.declare(e, fields.clone());
        }
        (reg, diags)
    }

    /// Provide a payload schema for an event whose senders live outside the
    /// system (or do not exist). Ignored when senders already define it.
    pub fn declare(&mut self, event: &str, fields: BTreeMap<String, Type>) {
        let info = self.entry(event);
        if info.senders.is_empty() {
            info.fields = fields;
        }
    }

    fn entry(&mut self, event: &str) -> &mut EventInfo {
        self.events
            .entry(event.to_string())
            .or_insert_with(|| EventInfo {
                name: event.to_string(),
                fields: BTreeMap::new(),
                senders: BTreeSet::new(),
                receivers: BTreeSet::new(),
            })
    }
}

/// Payload schema per event name.
pub type Schemas = BTreeMap<String, BTreeMap<String, Type>>;

fn infer_schemas(machines: &[StateMachine], known: &Schemas) -> (Schemas, Vec<Diagnostic>) {
    let mut diags = Vec::new();
    // event -> list of (machine, field names, per-field candidate)
    let mut sends: BTreeMap<&str, Vec<(String, BTreeSet<String>)>> = BTreeMap::new();
    let mut cands: BTreeMap<(&str, String), Vec<Candidate>> = BTreeMap::new();
    let mut unresolved: BTreeSet<(String, String)> = BTreeSet::new();
    for m in machines {
        for (t, op) in m.all_ops() {
            let Op::Send { event, params } = op else {
                continue;
            };
            let fields = t
                .and_then(|t| t.event.as_ref())
                .and_then(|e| known.get(e));
            let env = SendEnv { m, fields };
            sends.entry(event).or_default().push((
                m.name.clone(),
                params.iter().map(|p| p.name.clone()).collect(),
            ));
            for p in params {
                let (ty, explicit) = match &p.ty {
                    Some(t) => (Some(t.clone()), true),
                    None => (infer(&p.expr, &env), false),
                };
                match ty {
                    Some(ty) => cands.entry((event, p.name.clone())).or_default().push(Candidate {
                        machine: m.name.clone(),
                        ty,
                        explicit,
                    }),
                    None => {
                        unresolved.insert((event.clone(), p.name.clone()));
                    }
                }
            }
        }
    }

    let mut out: Schemas = BTreeMap::new();
    for (event, list) in &sends {
        let first = &list[0].1;
        if let Some((m, fs)) = list.iter().find(|(_, fs)| fs != first) {
            diags.push(Diagnostic::error(format!(
                "conflicting payload fields for event `{event}`: `{}` sends {{{}}} but `{m}` sends {{{}}}",
                list[0].0,
                first.iter().cloned().collect::<Vec<_>>().join(", "),
                fs.iter().cloned().collect::<Vec<_>>().join(", ")
            )));
        }
        out.insert(event.to_string(), BTreeMap::new());
    }
    for ((event, field), cs) in cands {
        match merge(&cs) {
            Ok(t) => {
                out.entry(event.to_string()).or_default().insert(field, t);
            }
            Err(msg) => diags.push(Diagnostic::error(format!(
                "conflicting payload types for field `{field}` of event `{event}`: {msg}"
            ))),
        }
    }
    for (event, field) in unresolved {
        if !out.get(&event).is_some_and(|f| f.contains_key(&field)) {
            diags.push(Diagnostic::error(format!(
                "cannot infer the type of payload field `{field}` of event `{event}`"
            )));
        }
    }
    (out, diags)
}

fn infer(e: &Expr, env: &SendEnv<'_>) -> Option<Type> {
    match e {
        Expr::Var(n) => env.var_type(n),
        Expr::EventField(f) => env.field_type(f),
        Expr::ArrayLit(items) => Some(Type::IntArray {
            len: items.len(),
            range: crate::expr::DEFAULT_INT_RANGE,
        }),
        _ => match typecheck(e, env).ok()? {
            Kind::Bool => Some(Type::Bool),
            Kind::Int => Some(Type::int()),
            Kind::Real => Some(Type::Real),
            Kind::IntArray => None,
        },
    }
}

fn merge(cs: &[Candidate]) -> Result<Type, String> {
    let explicit: Vec<&Candidate> = cs.iter().filter(|c| c.explicit).collect();
    if let Some(first) = explicit.first() {
        for c in &explicit {
            if c.ty != first.ty {
                return Err(format!(
                    "`{}` declares {} but `{}` declares {}",
                    first.machine, first.ty, c.machine, c.ty
                ));
            }
        }
        for c in cs {
            if c.ty.kind() != first.ty.kind() && !(first.ty.kind() == Kind::Real && c.ty.kind() == Kind::Int) {
                return Err(format!(
                    "`{}` declares {} but `{}` sends {}",
                    first.machine, first.ty, c.machine, c.ty
                ));
            }
        }
        return Ok(first.ty.clone());
    }
    let mut acc = cs[0].ty.clone();
    for c in &cs[1..] {
        acc = match (&acc, &c.ty) {
            (Type::Int(a), Type::Int(b)) => Type::Int(a.hull(b)),
            (
                Type::IntArray { len: l1, range: r1 },
                Type::IntArray { len: l2, range: r2 },
            ) if l1 == l2 => Type::IntArray {
                len: *l1,
                range: r1.hull(r2),
            },
            (a, b) if a == b => a.clone(),
            (a, b) => {
                return Err(format!(
                    "`{}` sends {a} but `{}` sends {b}",
                    cs[0].machine, c.machine
                ))
            }
        };
    }
    Ok(acc)
}
