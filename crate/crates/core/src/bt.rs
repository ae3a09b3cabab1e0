//! Behavior trees: XML parsing, control node machines, the tick driver and
//! the blackboard manager.
//!
//! Nodes are numbered in preorder with the root as 0. A node `n` is ticked by
//! `bt_<n>.tick` and answers with `bt_<n>.response` carrying `status`.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Rational64;

use crate::diag::{Diagnostic, Diagnostics};
use crate::expr::{Expr, Type};
use crate::hl::{
    blackboard_event, bt_response_event, bt_tick_event, parse_hl, timer_event, Access, HlMachine,
    LeafBinding, ParseContext, PortValue, TimerBinding, BT_FAILURE, BT_IDLE, BT_RUNNING,
    BT_STATUS, BT_SUCCESS,
};
use crate::registry::Schemas;
use crate::scxml::{DataDecl, Op, Param, State, StateMachine, Transition};
use crate::xml::{elements, err, parse_doc};

pub const DRIVER_MACHINE: &str = "bt_driver";
pub const DRIVER_TIMER: &str = "tick";
/// Global holding the last status the root returned to the driver.
pub const STATUS_VAR: &str = "bt_status";
pub const BLACKBOARD_MACHINE: &str = "bt_blackboard";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Sequence,
    ReactiveSequence,
    Fallback,
    Inverter,
    Action(String),
    Condition(String),
}

impl NodeKind {
    pub fn is_leaf(&self) -> bool {
        matches!(self, NodeKind::Action(_) | NodeKind::Condition(_))
    }

    pub fn plugin(&self) -> Option<&str> {
        match self {
            NodeKind::Action(p) | NodeKind::Condition(p) => Some(p),
            _ => None,
        }
    }

    fn label(&self) -> &str {
        match self {
            NodeKind::Sequence => "Sequence",
            NodeKind::ReactiveSequence => "ReactiveSequence",
            NodeKind::Fallback => "Fallback",
            NodeKind::Inverter => "Inverter",
            NodeKind::Action(p) | NodeKind::Condition(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtNode {
    pub id: usize,
    pub kind: NodeKind,
    pub children: Vec<usize>,
    pub ports: BTreeMap<String, PortValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BTree {
    /// Preorder; `nodes[i].id == i` and the root is node 0.
    pub nodes: Vec<BtNode>,
}

impl BTree {
    pub fn leaves(&self) -> impl Iterator<Item = &BtNode> {
        self.nodes.iter().filter(|n| n.kind.is_leaf())
    }

    /// Name of the machine implementing a node.
    pub fn machine_name(&self, id: usize) -> String {
        format!("bt_{id}_{}", self.nodes[id].kind.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickPolicy {
    /// Tick until the root answers something other than RUNNING.
    WhileRunning,
    Forever,
    Once,
}

impl TickPolicy {
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "tick-while-running" => Some(Self::WhileRunning),
            "tick-forever" => Some(Self::Forever),
            "tick-once" => Some(Self::Once),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickConfig {
    pub rate_hz: Rational64,
    pub policy: TickPolicy,
}

impl Default for TickConfig {
    fn default() -> Self {
        Self {
            rate_hz: Rational64::from_integer(10),
            policy: TickPolicy::WhileRunning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlackboardDecl {
    /// Name, type and initial value (a constant expression).
    pub keys: Vec<(String, Type, Expr)>,
}

/// Parse a BehaviorTree.CPP document. `plugins` are the names leaves may use.
/// Without `main_tree_to_execute` the first `<BehaviorTree>` is the main one.
pub fn parse_bt_xml(text: &str, plugins: &BTreeSet<String>) -> Result<BTree, Diagnostics> {
    let doc = parse_doc(text).map_err(|d| Diagnostics(vec![d]))?;
    let root = doc.root_element();
    let mut diags = Vec::new();
    if root.tag_name().name() != "root" {
        return Err(Diagnostics(vec![err(root, "behavior tree documents start with <root>")]));
    }
    let trees: Vec<_> = elements(root)
        .filter(|n| n.tag_name().name() == "BehaviorTree")
        .collect();
    let mut by_id = BTreeMap::new();
    for t in &trees {
        match t.attribute("ID") {
            Some(id) => {
                if by_id.insert(id.to_string(), *t).is_some() {
                    diags.push(err(*t, format!("duplicate tree `{id}`")));
                }
            }
            None if trees.len() == 1 => {}
            None => diags.push(err(*t, "<BehaviorTree> needs an ID when there are several")),
        }
    }
    let main = match root.attribute("main_tree_to_execute") {
        Some(id) => by_id.get(id).copied().or_else(|| {
            diags.push(err(root, format!("main tree `{id}` is not defined")));
            None
        }),
        None => trees.first().copied(),
    };
    let Some(main) = main else {
        if diags.is_empty() {
            diags.push(err(root, "no <BehaviorTree> found"));
        }
        return Err(Diagnostics(diags));
    };
    let mut b = Builder {
        nodes: Vec::new(),
        trees: &by_id,
        stack: Vec::new(),
        plugins,
        diags: &mut diags,
    };
    let body: Vec<_> = elements(main).collect();
    if body.len() != 1 {
        b.diags.push(err(main, "a tree must have exactly one root node"));
    } else {
        b.stack.push(main.attribute("ID").unwrap_or("").to_string());
        b.node(body[0]);
    }
    let nodes = b.nodes;
    if diags.iter().any(Diagnostic::is_error) {
        return Err(Diagnostics(diags));
    }
    Ok(BTree { nodes })
}

struct Builder<'a, 'i> {
    nodes: Vec<BtNode>,
    trees: &'a BTreeMap<String, roxmltree::Node<'a, 'i>>,
    stack: Vec<String>,
    plugins: &'a BTreeSet<String>,
    diags: &'a mut Vec<Diagnostic>,
}

impl Builder<'_, '_> {
    fn node(&mut self, n: roxmltree::Node<'_, '_>) -> Option<usize> {
        let tag = n.tag_name().name();
        if tag == "SubTree" {
            let Some(id) = n.attribute("ID") else {
                self.diags.push(err(n, "<SubTree> needs an ID"));
                return None;
            };
            if self.stack.iter().any(|s| s == id) {
                self.diags.push(err(n, format!("subtree `{id}` includes itself")));
                return None;
            }
            let Some(&t) = self.trees.get(id) else {
                self.diags.push(err(n, format!("subtree `{id}` is not defined")));
                return None;
            };
            let body: Vec<_> = elements(t).collect();
            if body.len() != 1 {
                self.diags.push(err(t, "a tree must have exactly one root node"));
                return None;
            }
            self.stack.push(id.to_string());
            let r = self.node(body[0]);
            self.stack.pop();
            return r;
        }
        let kind = match tag {
            "Sequence" => NodeKind::Sequence,
            "ReactiveSequence" => NodeKind::ReactiveSequence,
            "Fallback" => NodeKind::Fallback,
            "Inverter" => NodeKind::Inverter,
            "Action" | "Condition" => {
                let Some(id) = n.attribute("ID") else {
                    self.diags.push(err(n, format!("<{tag}> needs an ID")));
                    return None;
                };
                if tag == "Action" {
                    NodeKind::Action(id.to_string())
                } else {
                    NodeKind::Condition(id.to_string())
                }
            }
            "Parallel" | "ReactiveFallback" | "RetryUntilSuccessful" | "Repeat" | "ForceSuccess"
            | "ForceFailure" | "Timeout" | "KeepRunningUntilFailure" => {
                self.diags.push(err(n, format!("unsupported node kind <{tag}>")));
                return None;
            }
            other => NodeKind::Action(other.to_string()),
        };
        if let Some(p) = kind.plugin() {
            if !self.plugins.contains(p) {
                self.diags.push(err(n, format!("no plugin machine named `{p}`")));
            }
        }
        let id = self.nodes.len();
        let ports = n
            .attributes()
            .filter(|a| !matches!(a.name(), "ID" | "name"))
            .map(|a| (a.name().to_string(), PortValue::parse(a.value())))
            .collect();
        self.nodes.push(BtNode {
            id,
            kind: kind.clone(),
            children: Vec::new(),
            ports,
        });
        let kids: Vec<_> = elements(n).collect();
        if kind.is_leaf() {
            if !kids.is_empty() {
                self.diags.push(err(n, format!("leaf `{}` cannot have children", kind.label())));
            }
            return Some(id);
        }
        match (&kind, kids.len()) {
            (_, 0) => self.diags.push(err(n, format!("<{tag}> needs at least one child"))),
            (NodeKind::Inverter, k) if k > 1 => {
                self.diags.push(err(n, "<Inverter> takes exactly one child"))
            }
            _ => {}
        }
        let mut children = Vec::new();
        for k in kids {
            if let Some(c) = self.node(k) {
                children.push(c);
            }
        }
        self.nodes[id].children = children;
        Some(id)
    }
}

fn status(code: i64) -> Expr {
    Expr::Int(code)
}

fn respond(id: usize, e: Expr) -> Op {
    Op::send(bt_response_event(id), vec![Param::typed("status", e, BT_STATUS)])
}

fn tick(id: usize) -> Op {
    Op::send(bt_tick_event(id), vec![])
}

fn reply_is(code: i64) -> Expr {
    Expr::eq(Expr::EventField("status".into()), status(code))
}

/// Machine of a control node. Sequence and Fallback remember the running
/// child and resume from it; ReactiveSequence starts from the first child on
/// every tick. A running child that is skipped this way is not halted: it
/// simply stops receiving ticks.
pub fn instantiate_node(tree: &BTree, id: usize) -> Result<StateMachine, Diagnostic> {
    let node = &tree.nodes[id];
    let name = tree.machine_name(id);
    let mut m = StateMachine::new(&name, "idle");
    m.states.push(State::new("idle"));
    let kids = &node.children;
    let wait = |k: usize| format!("wait_{k}");
    for k in 0..kids.len() {
        m.states.push(State::new(wait(k)));
    }
    let tick_ev = bt_tick_event(id);
    let resp = |c: usize| bt_response_event(kids[c]);
    match node.kind {
        NodeKind::Inverter => {
            m.transitions.push(Transition::new("idle", wait(0)).on(&tick_ev).with_body(vec![tick(kids[0])]));
            for (from, to) in [(BT_SUCCESS, BT_FAILURE), (BT_FAILURE, BT_SUCCESS), (BT_RUNNING, BT_RUNNING)] {
                m.transitions.push(
                    Transition::new(wait(0), "idle")
                        .on(resp(0))
                        .when(reply_is(from))
                        .with_body(vec![respond(id, status(to))]),
                );
            }
        }
        NodeKind::Sequence | NodeKind::Fallback | NodeKind::ReactiveSequence => {
            let memory = node.kind != NodeKind::ReactiveSequence;
            // the status that moves on to the next child, and the one that stops
            let (next, stop) = if node.kind == NodeKind::Fallback {
                (BT_FAILURE, BT_SUCCESS)
            } else {
                (BT_SUCCESS, BT_FAILURE)
            };
            if memory {
                m.data.push(DataDecl {
                    id: "cur".into(),
                    ty: Type::Int(crate::expr::IntRange::new(0, kids.len() as i64 - 1)),
                    init: Expr::Int(0),
                    global: false,
                });
                for k in 0..kids.len() {
                    m.transitions.push(
                        Transition::new("idle", wait(k))
                            .on(&tick_ev)
                            .when(Expr::eq(Expr::var("cur"), Expr::Int(k as i64)))
                            .with_body(vec![tick(kids[k])]),
                    );
                }
            } else {
                m.transitions.push(Transition::new("idle", wait(0)).on(&tick_ev).with_body(vec![tick(kids[0])]));
            }
            let reset = |body: &mut Vec<Op>| {
                if memory {
                    body.insert(0, Op::assign("cur", Expr::Int(0)));
                }
            };
            for k in 0..kids.len() {
                let mut body = if k + 1 < kids.len() {
                    vec![tick(kids[k + 1])]
                } else {
                    vec![respond(id, status(next))]
                };
                let target = if k + 1 < kids.len() { wait(k + 1) } else { "idle".into() };
                if k + 1 == kids.len() {
                    reset(&mut body);
                }
                m.transitions.push(Transition::new(wait(k), target).on(resp(k)).when(reply_is(next)).with_body(body));
                let mut body = vec![respond(id, status(stop))];
                reset(&mut body);
                m.transitions.push(Transition::new(wait(k), "idle").on(resp(k)).when(reply_is(stop)).with_body(body));
                let mut body = vec![respond(id, status(BT_RUNNING))];
                if memory {
                    body.insert(0, Op::assign("cur", Expr::Int(k as i64)));
                }
                m.transitions.push(
                    Transition::new(wait(k), "idle").on(resp(k)).when(reply_is(BT_RUNNING)).with_body(body),
                );
            }
        }
        NodeKind::Action(_) | NodeKind::Condition(_) => {
            return Err(Diagnostic::error(format!(
                "node {id} is a leaf; leaves are implemented by plugin machines"
            )))
        }
    }
    m.group_transitions();
    Ok(m)
}

/// The tick driver: on each driver timer event it ticks the root if the
/// policy allows, and stores every root response in [`STATUS_VAR`].
pub fn build_tick_driver(cfg: &TickConfig, root: usize) -> (StateMachine, TimerBinding) {
    let mut m = StateMachine::new(DRIVER_MACHINE, "ready");
    m.data.push(DataDecl {
        id: STATUS_VAR.into(),
        ty: BT_STATUS,
        init: Expr::Int(BT_IDLE),
        global: true,
    });
    for s in ["ready", "waiting", "done"] {
        m.states.push(State::new(s));
    }
    let timer = timer_event(DRIVER_MACHINE, DRIVER_TIMER);
    m.transitions
        .push(Transition::new("ready", "waiting").on(&timer).with_body(vec![tick(root)]));
    let store = vec![Op::assign(STATUS_VAR, Expr::EventField("status".into()))];
    let resp = bt_response_event(root);
    match cfg.policy {
        TickPolicy::Forever => {
            m.transitions.push(Transition::new("waiting", "ready").on(&resp).with_body(store));
        }
        TickPolicy::Once => {
            m.transitions.push(Transition::new("waiting", "done").on(&resp).with_body(store));
        }
        TickPolicy::WhileRunning => {
            m.transitions.push(
                Transition::new("waiting", "ready")
                    .on(&resp)
                    .when(reply_is(BT_RUNNING))
                    .with_body(store.clone()),
            );
            m.transitions.push(
                Transition::new("waiting", "done")
                    .on(&resp)
                    .when(Expr::not(reply_is(BT_RUNNING)))
                    .with_body(store),
            );
        }
    }
    m.group_transitions();
    let binding = TimerBinding {
        machine: DRIVER_MACHINE.into(),
        timer: DRIVER_TIMER.into(),
        rate_hz: cfg.rate_hz,
    };
    (m, binding)
}

/// The blackboard manager and the payload schemas of its events. Every
/// client machine gets its own request/reply events per key, so writes are
/// applied in the order the manager receives them (last write wins).
/// Returns no machine when no key is used.
pub fn lower_blackboard(
    decl: &BlackboardDecl,
    usage: &[(String, BTreeSet<(String, Access)>)],
) -> Result<(Option<StateMachine>, Schemas), Diagnostics> {
    let mut diags = Vec::new();
    let mut seen = BTreeSet::new();
    for (k, _, _) in &decl.keys {
        if !seen.insert(k) {
            diags.push(Diagnostic::error(format!("blackboard key `{k}` is declared twice")));
        }
    }
    let key = |k: &str| decl.keys.iter().find(|(n, _, _)| n == k);
    let mut schemas = Schemas::new();
    let mut m = StateMachine::new(BLACKBOARD_MACHINE, "serve");
    m.states.push(State::new("serve"));
    let mut used = BTreeSet::new();
    for (machine, accesses) in usage {
        for (k, access) in accesses {
            let Some((_, ty, _)) = key(k) else {
                diags.push(Diagnostic::error(format!(
                    "machine `{machine}` uses blackboard key `{k}`, which is not declared"
                )));
                continue;
            };
            used.insert(k.clone());
            let var = format!("bb_{k}");
            let value = BTreeMap::from([("value".to_string(), ty.clone())]);
            match access {
                Access::Write => {
                    let set = blackboard_event("set", k, machine);
                    let ack = blackboard_event("set_ack", k, machine);
                    schemas.insert(set.clone(), value);
                    schemas.insert(ack.clone(), BTreeMap::new());
                    m.transitions.push(
                        Transition {
                            target: None,
                            ..Transition::new("serve", "serve")
                        }
                        .on(set)
                        .with_body(vec![
                            Op::assign(&var, Expr::EventField("value".into())),
                            Op::send(ack, vec![]),
                        ]),
                    );
                }
                Access::Read => {
                    let get = blackboard_event("get", k, machine);
                    let reply = blackboard_event("get_reply", k, machine);
                    schemas.insert(get.clone(), BTreeMap::new());
                    schemas.insert(reply.clone(), value);
                    m.transitions.push(
                        Transition {
                            target: None,
                            ..Transition::new("serve", "serve")
                        }
                        .on(get)
                        .with_body(vec![Op::send(
                            reply,
                            vec![Param::typed("value", Expr::var(&var), ty.clone())],
                        )]),
                    );
                }
            }
        }
    }
    if !diags.is_empty() {
        return Err(Diagnostics(diags));
    }
    if used.is_empty() {
        return Ok((None, schemas));
    }
    for (k, ty, init) in &decl.keys {
        if used.contains(k) {
            m.data.push(DataDecl {
                id: format!("bb_{k}"),
                ty: ty.clone(),
                init: init.clone(),
                global: false,
            });
        }
    }
    Ok((Some(m), schemas))
}

/// Everything a behavior tree contributes to a system.
#[derive(Debug, Clone)]
pub struct BtSystem {
    /// Leaf plugin instances, still to be lowered with the ROS machines.
    pub plugins: Vec<HlMachine>,
    /// Control nodes, the tick driver and the blackboard manager.
    pub machines: Vec<StateMachine>,
    pub schemas: Schemas,
    pub timers: Vec<TimerBinding>,
}

/// Instantiate a tree. `plugins` maps plugin names to their documents.
pub fn build_bt_system(
    tree: &BTree,
    plugins: &BTreeMap<String, String>,
    tick: &TickConfig,
    blackboard: &BlackboardDecl,
) -> Result<BtSystem, Diagnostics> {
    let mut diags = Vec::new();
    if tick.rate_hz <= Rational64::from_integer(0) {
        diags.push(Diagnostic::error("the tick rate must be positive"));
    }
    let mut instances = Vec::new();
    let mut machines = Vec::new();
    let mut schemas = Schemas::new();
    for n in &tree.nodes {
        schemas.insert(bt_tick_event(n.id), BTreeMap::new());
        schemas.insert(
            bt_response_event(n.id),
            BTreeMap::from([("status".to_string(), BT_STATUS)]),
        );
        match n.kind.plugin() {
            Some(p) => {
                let Some(text) = plugins.get(p) else {
                    diags.push(Diagnostic::error(format!("no plugin machine named `{p}`")));
                    continue;
                };
                let ctx = ParseContext {
                    name: Some(tree.machine_name(n.id)),
                    leaf: Some(LeafBinding {
                        node: n.id,
                        ports: n.ports.clone(),
                    }),
                };
                match parse_hl(text, &ctx) {
                    Ok(h) => instances.push(h),
                    Err(d) => diags.extend(d.0.into_iter().map(|x| {
                        let mut x = x;
                        x.message = format!("plugin `{p}` (node {}): {}", n.id, x.message);
                        x
                    })),
                }
            }
            None => match instantiate_node(tree, n.id) {
                Ok(m) => machines.push(m),
                Err(d) => diags.push(d),
            },
        }
    }
    let (driver, timer) = build_tick_driver(tick, 0);
    machines.push(driver);
    let usage: Vec<_> = instances
        .iter()
        .map(|h| (h.machine.name.clone(), h.blackboard.clone()))
        .collect();
    match lower_blackboard(blackboard, &usage) {
        Ok((bb, s)) => {
            machines.extend(bb);
            schemas.extend(s);
        }
        Err(d) => diags.extend(d.0),
    }
    if !diags.is_empty() {
        return Err(Diagnostics(diags));
    }
    Ok(BtSystem {
        plugins: instances,
        machines,
        schemas,
        timers: vec![timer],
    })
}
