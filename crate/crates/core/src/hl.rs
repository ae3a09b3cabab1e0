//! High-level SCXML: ROS interfaces, timers and BT plugin hooks on top of
//! plain SCXML, and their lowering to event-based machines.
//!
//! Declarations (children of `<scxml>`, namespace [`ROS_NS`]):
//! `topic_publisher`/`topic_subscriber` (`topic`, `fields` or `type`),
//! `service_server`/`service_client` (`name`, `request`, `response`),
//! `action_server`/`action_client` (`name`, `goal`, `feedback`, `result`),
//! `timer` (`name`, `rate_hz`). Schemas are written `field:type,...`.
//!
//! Triggers replace `<transition>` inside states and accept `target`, `cond`
//! and executable content: `topic_callback`, `service_handle_request`,
//! `action_handle_goal`, `action_handle_feedback`, `action_handle_result`,
//! `action_handle_success_result`, `action_handle_aborted_result`,
//! `timer_callback`, and `bt:tick` in BT plugins.
//!
//! Executable content: `topic_publish`, `service_call` (blocks until the
//! response; later content reads it through `_res`), `service_send_response`,
//! `action_send_goal`, `action_send_feedback`, `action_send_result`
//! (`status`), and in BT plugins `bt:return`, `bt:get_input`,
//! `bt:set_output`. Message fields are given as `<field name expr>` children.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use num_integer::Integer;
use num_rational::Rational64;

use crate::diag::{Diagnostic, Diagnostics};
use crate::expr::{Expr, IntRange, LValue, Type};
use crate::registry::Schemas;
use crate::scxml::{
    parse_machine, DataDecl, Extension, MachineParser, Op, Param, PayloadCtx, State, StateMachine,
    Transition, AWAIT,
};
use crate::xml::{err, req_attr};

pub const ROS_NS: &str = "urn:scjani:ros";
pub const BT_NS: &str = "urn:scjani:bt";

/// Name of the generated clock machine and its global tick counter.
pub const CLOCK_MACHINE: &str = "ros_clock";
pub const CLOCK_VAR: &str = "t_curr";
pub const CLOCK_RANGE: IntRange = IntRange {
    lo: 0,
    hi: 2_147_483_647,
};
/// Upper bound on the clock's hyperperiod, in ticks.
pub const MAX_HYPERPERIOD: i64 = 1_000_000;

pub const GOAL_SUCCEEDED: i64 = 4;
pub const GOAL_CANCELED: i64 = 5;
pub const GOAL_ABORTED: i64 = 6;
pub const GOAL_STATUS: Type = Type::Int(IntRange { lo: 0, hi: 6 });

pub const BT_IDLE: i64 = 0;
pub const BT_RUNNING: i64 = 1;
pub const BT_SUCCESS: i64 = 2;
pub const BT_FAILURE: i64 = 3;
pub const BT_STATUS: Type = Type::Int(IntRange { lo: 0, hi: 3 });

pub fn topic_event(topic: &str) -> String {
    format!("ros_topic.{topic}")
}

pub fn service_request_event(service: &str) -> String {
    format!("ros_srv.{service}.req")
}

pub fn service_response_event(service: &str) -> String {
    format!("ros_srv.{service}.res")
}

pub fn action_event(action: &str, part: &str) -> String {
    format!("ros_action.{action}.{part}")
}

pub fn timer_event(machine: &str, timer: &str) -> String {
    format!("ros_time.{machine}.{timer}")
}

pub fn bt_tick_event(node: usize) -> String {
    format!("bt_{node}.tick")
}

pub fn bt_response_event(node: usize) -> String {
    format!("bt_{node}.response")
}

/// Blackboard request/reply events of one client machine; `kind` is one of
/// `set`, `set_ack`, `get`, `get_reply`.
pub fn blackboard_event(kind: &str, key: &str, machine: &str) -> String {
    format!("bt_bb.{kind}.{key}@{machine}")
}

/// Event of a topic as delivered to one of several subscribers.
pub fn qualified(event: &str, machine: &str) -> String {
    format!("{event}@{machine}")
}

pub fn bt_status_code(name: &str) -> Option<i64> {
    match name {
        "IDLE" => Some(BT_IDLE),
        "RUNNING" => Some(BT_RUNNING),
        "SUCCESS" => Some(BT_SUCCESS),
        "FAILURE" => Some(BT_FAILURE),
        _ => None,
    }
}

pub fn goal_status_code(name: &str) -> Option<i64> {
    match name {
        "SUCCEEDED" => Some(GOAL_SUCCEEDED),
        "CANCELED" => Some(GOAL_CANCELED),
        "ABORTED" => Some(GOAL_ABORTED),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InterfaceKind {
    TopicPublisher,
    TopicSubscriber,
    ServiceServer,
    ServiceClient,
    ActionServer,
    ActionClient,
    Timer,
}

impl InterfaceKind {
    fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "topic_publisher" => Self::TopicPublisher,
            "topic_subscriber" => Self::TopicSubscriber,
            "service_server" => Self::ServiceServer,
            "service_client" => Self::ServiceClient,
            "action_server" => Self::ActionServer,
            "action_client" => Self::ActionClient,
            "timer" => Self::Timer,
            _ => return None,
        })
    }

    fn label(self) -> &'static str {
        match self {
            Self::TopicPublisher => "topic publisher",
            Self::TopicSubscriber => "topic subscriber",
            Self::ServiceServer => "service server",
            Self::ServiceClient => "service client",
            Self::ActionServer => "action server",
            Self::ActionClient => "action client",
            Self::Timer => "timer",
        }
    }
}

pub type Schema = BTreeMap<String, Type>;

/// A ROS interface declared by one machine.
#[derive(Debug, Clone, PartialEq)]
pub struct Interface {
    pub kind: InterfaceKind,
    pub name: String,
    /// Message schemas by role: `msg` for topics, `request`/`response` for
    /// services, `goal`/`feedback`/`result` for actions. Absent roles are
    /// undeclared.
    pub schemas: BTreeMap<String, Schema>,
    pub rate_hz: Option<Rational64>,
}

/// Parse `field:type,field:type`. The empty string is the empty schema.
pub fn parse_schema(text: &str) -> Result<Schema, String> {
    let mut out = Schema::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, ty) = part
            .split_once(':')
            .ok_or_else(|| format!("field `{part}` must be written `name:type`"))?;
        let name = name.trim();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(format!("invalid field name `{name}`"));
        }
        let ty = Type::parse(ty.trim()).map_err(|e| e.to_string())?;
        if out.insert(name.to_string(), ty).is_some() {
            return Err(format!("duplicate field `{name}`"));
        }
    }
    Ok(out)
}

/// Schemas of a few standard message types, usable in `type="..."`.
pub fn standard_message(name: &str) -> Option<Schema> {
    let one = |t: Type| Some(BTreeMap::from([("data".to_string(), t)]));
    match name {
        "std_msgs/Empty" | "std_msgs/msg/Empty" | "std_srvs/Empty" => Some(Schema::new()),
        "std_msgs/Bool" | "std_msgs/msg/Bool" => one(Type::Bool),
        "std_msgs/Int32" | "std_msgs/msg/Int32" => one(Type::Int(IntRange::new(-2_147_483_648, 2_147_483_647))),
        "std_msgs/Int64" | "std_msgs/msg/Int64" => one(Type::Int(IntRange::new(i64::MIN, i64::MAX))),
        "std_msgs/Int16" | "std_msgs/msg/Int16" => one(Type::int()),
        "std_msgs/Float64" | "std_msgs/msg/Float64" | "std_msgs/Float32" | "std_msgs/msg/Float32" => {
            one(Type::Real)
        }
        _ => None,
    }
}

/// Where a BT port of a plugin instance points.
#[derive(Debug, Clone, PartialEq)]
pub enum PortValue {
    /// `{key}`: a blackboard entry.
    Key(String),
    /// Any other text: a constant expression.
    Literal(String),
}

impl PortValue {
    pub fn parse(text: &str) -> Self {
        let t = text.trim();
        match t.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            Some(k) => PortValue::Key(k.trim().to_string()),
            None => PortValue::Literal(t.to_string()),
        }
    }
}

/// Binding of a plugin document to one leaf of a behavior tree.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LeafBinding {
    pub node: usize,
    pub ports: BTreeMap<String, PortValue>,
}

#[derive(Debug, Clone, Default)]
pub struct ParseContext {
    /// Replaces the document's `name`.
    pub name: Option<String>,
    pub leaf: Option<LeafBinding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Access {
    Read,
    Write,
}

/// A parsed high-level machine before system-wide lowering.
#[derive(Debug, Clone, PartialEq)]
pub struct HlMachine {
    /// Name written in the document (before any instance renaming).
    pub declared_name: String,
    pub machine: StateMachine,
    pub interfaces: Vec<Interface>,
    /// Blackboard keys accessed through ports.
    pub blackboard: BTreeSet<(String, Access)>,
    /// ROS interfaces used by triggers and content, with the kind they need.
    uses: Vec<(InterfaceKind, String, Option<&'static str>)>,
    generated: HashSet<String>,
}

struct HlExt<'c> {
    ctx: &'c ParseContext,
    name: String,
    interfaces: Vec<Interface>,
    blackboard: BTreeSet<(String, Access)>,
    uses: Vec<(InterfaceKind, String, Option<&'static str>)>,
    generated: HashSet<String>,
}

fn ns<'a>(node: roxmltree::Node<'a, '_>) -> Option<&'a str> {
    node.tag_name().namespace()
}

impl HlExt<'_> {
    fn gen(&mut self, e: String) -> String {
        self.generated.insert(e.clone());
        e
    }

    fn leaf(&self, node: roxmltree::Node<'_, '_>, diags: &mut Vec<Diagnostic>) -> Option<&LeafBinding> {
        let l = self.ctx.leaf.as_ref();
        if l.is_none() {
            diags.push(err(
                node,
                format!("<bt:{}> is only allowed in BT plugins", node.tag_name().name()),
            ));
        }
        l
    }

    fn port(
        &self,
        node: roxmltree::Node<'_, '_>,
        diags: &mut Vec<Diagnostic>,
    ) -> Option<(String, PortValue)> {
        let leaf = self.leaf(node, diags)?;
        let port = match req_attr(node, "port") {
            Ok(p) => p,
            Err(d) => {
                diags.push(d);
                return None;
            }
        };
        match leaf.ports.get(port) {
            Some(v) => Some((port.to_string(), v.clone())),
            None => {
                diags.push(err(
                    node,
                    format!("port `{port}` is not set on this node in the behavior tree"),
                ));
                None
            }
        }
    }
}

impl Extension for HlExt<'_> {
    fn declaration(&mut self, node: roxmltree::Node<'_, '_>, diags: &mut Vec<Diagnostic>) -> bool {
        if ns(node) != Some(ROS_NS) {
            return false;
        }
        let tag = node.tag_name().name();
        let Some(kind) = InterfaceKind::from_tag(tag) else {
            diags.push(err(node, format!("unknown ROS declaration <{tag}>")));
            return true;
        };
        let name_attr = match kind {
            InterfaceKind::TopicPublisher | InterfaceKind::TopicSubscriber => "topic",
            _ => "name",
        };
        let name = match req_attr(node, name_attr) {
            Ok(n) => n.to_string(),
            Err(d) => {
                diags.push(d);
                return true;
            }
        };
        let mut schemas = BTreeMap::new();
        let roles: &[&str] = match kind {
            InterfaceKind::TopicPublisher | InterfaceKind::TopicSubscriber => &["fields"],
            InterfaceKind::ServiceServer | InterfaceKind::ServiceClient => &["request", "response"],
            InterfaceKind::ActionServer | InterfaceKind::ActionClient => &["goal", "feedback", "result"],
            InterfaceKind::Timer => &[],
        };
        for role in roles {
            if let Some(text) = node.attribute(*role) {
                match parse_schema(text) {
                    Ok(s) => {
                        let key = if *role == "fields" { "msg" } else { role };
                        schemas.insert(key.to_string(), s);
                    }
                    Err(e) => diags.push(err(node, format!("`{role}`: {e}"))),
                }
            }
        }
        if let Some(t) = node.attribute("type") {
            match (kind, standard_message(t)) {
                (InterfaceKind::TopicPublisher | InterfaceKind::TopicSubscriber, Some(s)) => {
                    if schemas.insert("msg".into(), s).is_some() {
                        diags.push(err(node, "give either `type` or `fields`, not both"));
                    }
                }
                _ => diags.push(err(
                    node,
                    format!("unknown message type `{t}`; declare the fields inline instead"),
                )),
            }
        }
        let rate_hz = if kind == InterfaceKind::Timer {
            match req_attr(node, "rate_hz") {
                Ok(r) => match crate::scxml::parse_probability(r).or_else(|| parse_rate(r)) {
                    Some(r) if r > Rational64::new(0, 1) => Some(r),
                    _ => {
                        diags.push(err(node, format!("timer rate `{r}` must be a positive number")));
                        None
                    }
                },
                Err(d) => {
                    diags.push(d);
                    None
                }
            }
        } else {
            None
        };
        if self.interfaces.iter().any(|i| i.kind == kind && i.name == name) {
            diags.push(err(node, format!("duplicate {} `{name}`", kind.label())));
        }
        self.interfaces.push(Interface {
            kind,
            name,
            schemas,
            rate_hz,
        });
        true
    }

    fn trigger(
        &mut self,
        node: roxmltree::Node<'_, '_>,
        diags: &mut Vec<Diagnostic>,
    ) -> Option<(String, Expr)> {
        let tag = node.tag_name().name();
        let attr = |a: &str, diags: &mut Vec<Diagnostic>| match req_attr(node, a) {
            Ok(v) => Some(v.to_string()),
            Err(d) => {
                diags.push(d);
                None
            }
        };
        let status_is = |code: i64| Expr::eq(Expr::EventField("status".into()), Expr::Int(code));
        match (ns(node), tag) {
            (Some(ROS_NS), "topic_callback") => {
                let t = attr("topic", diags)?;
                self.uses.push((InterfaceKind::TopicSubscriber, t.clone(), None));
                Some((self.gen(topic_event(&t)), Expr::Bool(true)))
            }
            (Some(ROS_NS), "service_handle_request") => {
                let s = attr("name", diags)?;
                self.uses.push((InterfaceKind::ServiceServer, s.clone(), None));
                Some((self.gen(service_request_event(&s)), Expr::Bool(true)))
            }
            (Some(ROS_NS), "action_handle_goal") => {
                let a = attr("name", diags)?;
                self.uses.push((InterfaceKind::ActionServer, a.clone(), None));
                Some((self.gen(action_event(&a, "goal")), Expr::Bool(true)))
            }
            (Some(ROS_NS), "action_handle_feedback") => {
                let a = attr("name", diags)?;
                self.uses.push((InterfaceKind::ActionClient, a.clone(), Some("feedback")));
                Some((self.gen(action_event(&a, "feedback")), Expr::Bool(true)))
            }
            (Some(ROS_NS), t @ ("action_handle_result"
            | "action_handle_success_result"
            | "action_handle_aborted_result"
            | "action_handle_canceled_result")) => {
                let a = attr("name", diags)?;
                self.uses.push((InterfaceKind::ActionClient, a.clone(), None));
                let cond = match t {
                    "action_handle_success_result" => status_is(GOAL_SUCCEEDED),
                    "action_handle_aborted_result" => status_is(GOAL_ABORTED),
                    "action_handle_canceled_result" => status_is(GOAL_CANCELED),
                    _ => Expr::Bool(true),
                };
                Some((self.gen(action_event(&a, "result")), cond))
            }
            (Some(ROS_NS), "timer_callback") => {
                let n = attr("name", diags)?;
                self.uses.push((InterfaceKind::Timer, n.clone(), None));
                Some((self.gen(timer_event(&self.name, &n)), Expr::Bool(true)))
            }
            (Some(BT_NS), "tick") => {
                let id = self.leaf(node, diags)?.node;
                Some((self.gen(bt_tick_event(id)), Expr::Bool(true)))
            }
            (Some(ROS_NS | BT_NS), _) => {
                diags.push(err(node, format!("<{tag}> is not a transition trigger")));
                None
            }
            _ => None,
        }
    }

    fn op(
        &mut self,
        node: roxmltree::Node<'_, '_>,
        p: &mut MachineParser<'_>,
        ctx: PayloadCtx,
    ) -> Option<Vec<Op>> {
        let tag = node.tag_name().name();
        let attr = |a: &str, p: &mut MachineParser<'_>| match req_attr(node, a) {
            Ok(v) => Some(v.to_string()),
            Err(d) => {
                p.diags.push(d);
                None
            }
        };
        let send = |event: String, params: Vec<Param>| Op::Send { event, params };
        match (ns(node), tag) {
            (Some(ROS_NS), "topic_publish") => {
                let t = attr("topic", p)?;
                self.uses.push((InterfaceKind::TopicPublisher, t.clone(), None));
                let params = p.params(node, ctx);
                Some(vec![send(self.gen(topic_event(&t)), params)])
            }
            (Some(ROS_NS), "service_call") => {
                let s = attr("name", p)?;
                self.uses.push((InterfaceKind::ServiceClient, s.clone(), None));
                let params = p.params(node, ctx);
                let req = self.gen(service_request_event(&s));
                let res = self.gen(service_response_event(&s));
                Some(vec![send(req, params), send(format!("{AWAIT}{res}"), vec![])])
            }
            (Some(ROS_NS), "service_send_response") => {
                let s = attr("name", p)?;
                self.uses.push((InterfaceKind::ServiceServer, s.clone(), None));
                let params = p.params(node, ctx);
                Some(vec![send(self.gen(service_response_event(&s)), params)])
            }
            (Some(ROS_NS), "action_send_goal") => {
                let a = attr("name", p)?;
                self.uses.push((InterfaceKind::ActionClient, a.clone(), None));
                let params = p.params(node, ctx);
                Some(vec![send(self.gen(action_event(&a, "goal")), params)])
            }
            (Some(ROS_NS), "action_send_feedback") => {
                let a = attr("name", p)?;
                self.uses.push((InterfaceKind::ActionServer, a.clone(), Some("feedback")));
                let params = p.params(node, ctx);
                Some(vec![send(self.gen(action_event(&a, "feedback")), params)])
            }
            (Some(ROS_NS), "action_send_result") => {
                let a = attr("name", p)?;
                self.uses.push((InterfaceKind::ActionServer, a.clone(), None));
                let status = attr("status", p)?;
                let code = match goal_status_code(&status) {
                    Some(c) => Expr::Int(c),
                    None => p.expr(node, &status, ctx),
                };
                let mut params = p.params(node, ctx);
                if params.iter().any(|q| q.name == "status") {
                    p.diags.push(err(node, "`status` is set through the attribute"));
                }
                params.push(Param::typed("status", code, GOAL_STATUS));
                Some(vec![send(self.gen(action_event(&a, "result")), params)])
            }
            (Some(BT_NS), "return") => {
                let id = self.leaf(node, &mut p.diags)?.node;
                let status = match (node.attribute("status"), node.attribute("expr")) {
                    (Some(s), None) => match bt_status_code(s) {
                        Some(c) if c != BT_IDLE => Expr::Int(c),
                        _ => {
                            p.diags.push(err(node, format!("status must be RUNNING, SUCCESS or FAILURE, not `{s}`")));
                            return Some(vec![]);
                        }
                    },
                    (None, Some(e)) => p.expr(node, e, ctx),
                    _ => {
                        p.diags.push(err(node, "<bt:return> needs exactly one of `status` and `expr`"));
                        return Some(vec![]);
                    }
                };
                Some(vec![send(
                    self.gen(bt_response_event(id)),
                    vec![Param::typed("status", status, BT_STATUS)],
                )])
            }
            (Some(BT_NS), "get_input") => {
                let (_, value) = self.port(node, &mut p.diags)?;
                let loc = attr("location", p)?;
                let location = match LValue::parse(&loc) {
                    Ok(l) => l,
                    Err(e) => {
                        p.diags.push(err(node, format!("in `{loc}`: {e}")));
                        return Some(vec![]);
                    }
                };
                // checks that the location is declared
                p.expr(node, &location.to_expr().to_string(), PayloadCtx::Allowed);
                match value {
                    PortValue::Literal(text) => {
                        let expr = match Expr::parse(&text) {
                            Ok(e) if e.vars().is_empty() && e.event_fields().is_empty() => e,
                            _ => {
                                p.diags.push(err(node, format!("port value `{text}` is not a constant")));
                                return Some(vec![]);
                            }
                        };
                        Some(vec![Op::Assign { location, expr }])
                    }
                    PortValue::Key(k) => {
                        self.blackboard.insert((k.clone(), Access::Read));
                        let get = self.gen(blackboard_event("get", &k, &self.name));
                        let reply = self.gen(blackboard_event("get_reply", &k, &self.name));
                        Some(vec![
                            send(get, vec![]),
                            send(format!("{AWAIT}{reply}"), vec![]),
                            Op::Assign {
                                location,
                                expr: Expr::EventField("value".into()),
                            },
                        ])
                    }
                }
            }
            (Some(BT_NS), "set_output") => {
                let (port, value) = self.port(node, &mut p.diags)?;
                let text = attr("expr", p)?;
                let expr = p.expr(node, &text, ctx);
                match value {
                    PortValue::Literal(_) => {
                        p.diags.push(err(
                            node,
                            format!("output port `{port}` must name a blackboard entry as {{key}}"),
                        ));
                        Some(vec![])
                    }
                    PortValue::Key(k) => {
                        self.blackboard.insert((k.clone(), Access::Write));
                        let set = self.gen(blackboard_event("set", &k, &self.name));
                        let ack = self.gen(blackboard_event("set_ack", &k, &self.name));
                        Some(vec![
                            send(set, vec![Param::new("value", expr)]),
                            send(format!("{AWAIT}{ack}"), vec![]),
                        ])
                    }
                }
            }
            (Some(ROS_NS | BT_NS), _) => {
                p.diags.push(err(node, format!("<{tag}> is not executable content")));
                Some(vec![])
            }
            _ => None,
        }
    }
}

fn parse_rate(text: &str) -> Option<Rational64> {
    text.trim().parse::<i64>().ok().map(Rational64::from_integer)
}

/// Parse a high-level (or plain) SCXML document.
pub fn parse_hl(text: &str, ctx: &ParseContext) -> Result<HlMachine, Diagnostics> {
    let declared_name = roxmltree::Document::parse(text)
        .ok()
        .and_then(|d| d.root_element().attribute("name").map(str::to_string))
        .unwrap_or_default();
    let name = ctx.name.clone().unwrap_or_else(|| declared_name.clone());
    let mut ext = HlExt {
        ctx,
        name: name.clone(),
        interfaces: Vec::new(),
        blackboard: BTreeSet::new(),
        uses: Vec::new(),
        generated: HashSet::new(),
    };
    let mut machine = parse_machine_with_clock(text, &mut ext)?;
    machine.name = name;
    Ok(HlMachine {
        declared_name,
        machine,
        interfaces: ext.interfaces,
        blackboard: ext.blackboard,
        uses: ext.uses,
        generated: ext.generated,
    })
}

/// Parse with the clock variable available even if not declared.
fn parse_machine_with_clock(text: &str, ext: &mut HlExt<'_>) -> Result<StateMachine, Diagnostics> {
    let clock = clock_decl();
    match parse_machine(text, Some(ext)) {
        Ok(m) => Ok(m),
        Err(d) => {
            // retry with the clock declared when it is the only thing missing
            let undeclared = format!("undeclared variable `{CLOCK_VAR}`");
            if !d.0.iter().any(|x| x.message == undeclared) {
                return Err(d);
            }
            let patched = inject_clock(text).ok_or(d)?;
            ext.interfaces.clear();
            ext.blackboard.clear();
            ext.uses.clear();
            ext.generated.clear();
            let mut m = parse_machine(&patched, Some(ext))?;
            if let Some(dd) = m.data.iter_mut().find(|d| d.id == CLOCK_VAR) {
                *dd = clock;
            }
            Ok(m)
        }
    }
}

fn clock_decl() -> DataDecl {
    DataDecl {
        id: CLOCK_VAR.into(),
        ty: Type::Int(CLOCK_RANGE),
        init: Expr::Int(0),
        global: true,
    }
}

/// Add a declaration of the clock variable right after the `<scxml>` start tag.
fn inject_clock(text: &str) -> Option<String> {
    let doc = roxmltree::Document::parse(text).ok()?;
    let root = doc.root_element();
    let start = root.range().start;
    let close = start + text[start..].find('>')?;
    if text[..close].ends_with('/') {
        return None;
    }
    let prefix = match root.tag_name().namespace() {
        Some(_) => root
            .lookup_prefix(root.tag_name().namespace()?)
            .map(|p| format!("{p}:"))
            .unwrap_or_default(),
        None => String::new(),
    };
    let decl = format!(
        "<{prefix}datamodel><{prefix}data id=\"{CLOCK_VAR}\" type=\"int[{}..{}]\" expr=\"0\"/></{prefix}datamodel>",
        CLOCK_RANGE.lo, CLOCK_RANGE.hi
    );
    Some(format!("{}{decl}{}", &text[..=close], &text[close + 1..]))
}

/// Output of [`lower`].
#[derive(Debug, Clone, PartialEq)]
pub struct Lowered {
    pub machines: Vec<StateMachine>,
    /// Payload schemas of every generated event, for events no machine sends.
    pub schemas: Schemas,
}

/// A timer and the machine it fires into.
#[derive(Debug, Clone, PartialEq)]
pub struct TimerBinding {
    pub machine: String,
    pub timer: String,
    pub rate_hz: Rational64,
}

/// Timing of the global clock.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockConfig {
    /// Seconds per tick.
    pub tick_period: Rational64,
    /// Timer and its period in ticks, sorted by event name.
    pub timers: Vec<(TimerBinding, i64)>,
}

fn rational_gcd(a: Rational64, b: Rational64) -> Rational64 {
    Rational64::new(
        a.numer().gcd(b.numer()),
        a.denom().lcm(b.denom()),
    )
}

/// Tick period (the greatest common divisor of all timer periods) and the
/// period of every timer in ticks.
pub fn clock_config(timers: &[TimerBinding]) -> Result<ClockConfig, Diagnostic> {
    let mut tick: Option<Rational64> = None;
    for t in timers {
        if t.rate_hz <= Rational64::new(0, 1) {
            return Err(Diagnostic::error(format!(
                "timer `{}` of `{}` has non-positive rate {}",
                t.timer, t.machine, t.rate_hz
            )));
        }
        let period = t.rate_hz.recip();
        tick = Some(match tick {
            None => period,
            Some(g) => rational_gcd(g, period),
        });
    }
    let Some(tick) = tick else {
        return Err(Diagnostic::error("the clock needs at least one timer"));
    };
    let mut out = Vec::new();
    for t in timers {
        let ticks = t.rate_hz.recip() / tick;
        if !ticks.is_integer() {
            return Err(Diagnostic::error(format!(
                "timer `{}` of `{}` is not a multiple of the tick period {tick}",
                t.timer, t.machine
            )));
        }
        out.push((t.clone(), ticks.to_integer()));
    }
    out.sort_by_key(|(t, _)| timer_event(&t.machine, &t.timer));
    Ok(ClockConfig {
        tick_period: tick,
        timers: out,
    })
}

/// The clock machine: every tick it increments the global counter and then
/// sends the events of the timers due at the new time, in the configured
/// order. Its only state has idle priority, so time advances only when no
/// other machine can move.
pub fn build_global_clock(cfg: &ClockConfig) -> Result<StateMachine, Diagnostic> {
    let mut hyper: i64 = 1;
    for (_, p) in &cfg.timers {
        hyper = hyper.lcm(p);
        if hyper > MAX_HYPERPERIOD {
            return Err(Diagnostic::error(format!(
                "timer periods have a common period above {MAX_HYPERPERIOD} ticks"
            )));
        }
    }
    let mut m = StateMachine::new(CLOCK_MACHINE, "tick");
    m.data.push(clock_decl());
    let mut st = State::new("tick");
    st.idle = true;
    m.states.push(st);
    let next = Expr::bin(crate::expr::BinOp::Add, Expr::var(CLOCK_VAR), Expr::Int(1));
    let due = |p: i64| Expr::eq(Expr::bin(crate::expr::BinOp::Mod, next.clone(), Expr::Int(p)), Expr::Int(0));
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for r in 0..hyper {
        let set: Vec<usize> = cfg
            .timers
            .iter()
            .enumerate()
            .filter(|(_, (_, p))| r % p == 0)
            .map(|(i, _)| i)
            .collect();
        if !sets.contains(&set) {
            sets.push(set);
        }
    }
    sets.sort();
    for set in sets {
        let mut cond = Vec::new();
        for (i, (_, p)) in cfg.timers.iter().enumerate() {
            if *p == 1 {
                continue;
            }
            let d = due(*p);
            cond.push(if set.contains(&i) { d } else { Expr::not(d) });
        }
        let cond = cond.into_iter().reduce(Expr::and).unwrap_or(Expr::Bool(true));
        let mut body = vec![Op::assign(CLOCK_VAR, next.clone())];
        for &i in &set {
            let (t, _) = &cfg.timers[i];
            body.push(Op::send(timer_event(&t.machine, &t.timer), vec![]));
        }
        m.transitions.push(Transition {
            source: "tick".into(),
            target: None,
            event: None,
            cond,
            body,
            branches: vec![],
        });
    }
    Ok(m)
}

fn is_reserved(name: &str) -> bool {
    name.starts_with("ros_") || name.starts_with("bt_")
}

/// Lower a system of high-level machines. `generated` are plain machines
/// built by the toolchain itself (BT nodes, tick driver, blackboard) and are
/// placed after `hl`; `extra_schemas` gives payload schemas of their events
/// and `extra_timers` adds timers that no document declares.
pub fn lower(
    hl: Vec<HlMachine>,
    generated: Vec<StateMachine>,
    extra_schemas: &Schemas,
    extra_timers: &[TimerBinding],
) -> Result<Lowered, Diagnostics> {
    let mut diags = Vec::new();
    let in_file = |m: &HlMachine, msg: String| Diagnostic::error(format!("machine `{}`: {msg}", m.machine.name));

    // reserved names
    for h in &hl {
        if h.declared_name.starts_with("ros_") || (h.declared_name.starts_with("bt_") && h.machine.name == h.declared_name) {
            diags.push(in_file(h, "machine names starting with `ros_` or `bt_` are reserved".into()));
        }
        let plain_events = h
            .machine
            .sent_events()
            .into_iter()
            .chain(h.machine.received_events())
            .filter(|e| !e.starts_with(AWAIT))
            .filter(|e| !h.generated.contains(*e))
            .filter(|e| is_reserved(e))
            .map(str::to_string)
            .collect::<BTreeSet<_>>();
        for e in plain_events {
            diags.push(in_file(h, format!("event `{e}` uses a reserved prefix (`ros_` or `bt_`)")));
        }
    }

    // collect interfaces by (kind, name)
    let mut decls: BTreeMap<(InterfaceKind, &str), Vec<(&str, &Interface)>> = BTreeMap::new();
    for h in &hl {
        for i in &h.interfaces {
            decls
                .entry((i.kind, i.name.as_str()))
                .or_default()
                .push((h.machine.name.as_str(), i));
        }
    }
    let owners = |k: InterfaceKind, n: &str| -> Vec<&str> {
        decls
            .get(&(k, n))
            .map(|v| v.iter().map(|(m, _)| *m).collect())
            .unwrap_or_default()
    };
    // uses must match declarations of the same machine
    for h in &hl {
        for (kind, name, _) in &h.uses {
            if !h.interfaces.iter().any(|i| i.kind == *kind && &i.name == name) {
                diags.push(in_file(h, format!("uses {} `{name}` without declaring it", kind.label())));
            }
        }
    }
    for ((kind, name), list) in &decls {
        let uniq = |what: &str, diags: &mut Vec<Diagnostic>| {
            if list.len() > 1 {
                diags.push(Diagnostic::error(format!(
                    "{what} `{name}` is declared by {} machines ({}); only one is supported",
                    list.len(),
                    list.iter().map(|(m, _)| *m).collect::<Vec<_>>().join(", ")
                )));
            }
        };
        match kind {
            InterfaceKind::ServiceServer => uniq("service server", &mut diags),
            InterfaceKind::ServiceClient => uniq("service client", &mut diags),
            InterfaceKind::ActionServer => uniq("action server", &mut diags),
            InterfaceKind::ActionClient => uniq("action client", &mut diags),
            _ => {}
        }
    }
    for h in &hl {
        for (kind, name, role) in &h.uses {
            let missing = |k: InterfaceKind| owners(k, name).is_empty();
            match (kind, role) {
                (InterfaceKind::ServiceClient, _) if missing(InterfaceKind::ServiceServer) => {
                    diags.push(in_file(h, format!("calls service `{name}`, which has no server")))
                }
                (InterfaceKind::ActionClient | InterfaceKind::ActionServer, Some("feedback"))
                    if missing(InterfaceKind::ActionServer) =>
                {
                    diags.push(in_file(h, format!("uses feedback of action `{name}`, which has no server")))
                }
                _ => {}
            }
        }
    }

    // merged schemas per interface role
    let mut schemas = Schemas::new();
    let mut merge = |event: String, s: &Schema, who: &str, diags: &mut Vec<Diagnostic>| {
        match schemas.get(&event) {
            Some(prev) if prev != s => diags.push(Diagnostic::error(format!(
                "`{who}` declares a different message for `{event}`"
            ))),
            Some(_) => {}
            None => {
                schemas.insert(event, s.clone());
            }
        }
    };
    for ((kind, name), list) in &decls {
        for (m, i) in list {
            let roles: Vec<(&str, String)> = match kind {
                InterfaceKind::TopicPublisher | InterfaceKind::TopicSubscriber => {
                    vec![("msg", topic_event(name))]
                }
                InterfaceKind::ServiceServer | InterfaceKind::ServiceClient => vec![
                    ("request", service_request_event(name)),
                    ("response", service_response_event(name)),
                ],
                InterfaceKind::ActionServer | InterfaceKind::ActionClient => vec![
                    ("goal", action_event(name, "goal")),
                    ("feedback", action_event(name, "feedback")),
                    ("result", action_event(name, "result")),
                ],
                InterfaceKind::Timer => vec![],
            };
            for (role, event) in roles {
                let mut s = match i.schemas.get(role) {
                    Some(s) => s.clone(),
                    // services and actions default to empty messages
                    None if !matches!(kind, InterfaceKind::TopicPublisher | InterfaceKind::TopicSubscriber) => {
                        Schema::new()
                    }
                    None => continue,
                };
                if role == "result" {
                    if s.contains_key("status") {
                        diags.push(Diagnostic::error(format!(
                            "action `{name}`: the result field `status` is reserved"
                        )));
                    }
                    s.insert("status".into(), GOAL_STATUS);
                }
                merge(event, &s, m, &mut diags);
            }
        }
    }
    for ((kind, name), list) in &decls {
        if *kind == InterfaceKind::TopicSubscriber && !schemas.contains_key(&topic_event(name)) {
            diags.push(Diagnostic::error(format!(
                "topic `{name}` subscribed by {} has no declared message type",
                list.iter().map(|(m, _)| format!("`{m}`")).collect::<Vec<_>>().join(", ")
            )));
        }
    }
    for (e, s) in extra_schemas {
        schemas.insert(e.clone(), s.clone());
    }

    // topics delivered to several subscribers get one event per subscriber
    let mut fanout: HashMap<String, Vec<String>> = HashMap::new();
    for ((kind, name), list) in &decls {
        if *kind == InterfaceKind::TopicSubscriber && list.len() > 1 {
            let event = topic_event(name);
            let subs: Vec<String> = hl
                .iter()
                .filter(|h| list.iter().any(|(m, _)| *m == h.machine.name))
                .map(|h| h.machine.name.clone())
                .collect();
            for s in &subs {
                if let Some(sc) = schemas.get(&event).cloned() {
                    schemas.insert(qualified(&event, s), sc);
                }
            }
            fanout.insert(event, subs);
        }
    }

    let mut timers: Vec<TimerBinding> = extra_timers.to_vec();
    for h in &hl {
        for i in h.interfaces.iter().filter(|i| i.kind == InterfaceKind::Timer) {
            if let Some(r) = i.rate_hz {
                timers.push(TimerBinding {
                    machine: h.machine.name.clone(),
                    timer: i.name.clone(),
                    rate_hz: r,
                });
            }
        }
    }

    let mut machines = Vec::new();
    for h in hl {
        let mut m = h.machine;
        let name = m.name.clone();
        // receivers of fanned-out topics listen on their own copy
        for t in &mut m.transitions {
            if let Some(e) = &t.event {
                if fanout.contains_key(e) {
                    t.event = Some(qualified(e, &name));
                }
            }
        }
        let fix = |ops: &mut Vec<Op>, diags: &mut Vec<Diagnostic>| {
            let mut out = Vec::with_capacity(ops.len());
            for op in ops.drain(..) {
                match op {
                    Op::Send { event, mut params } if !event.starts_with(AWAIT) => {
                        if let Some(s) = schemas.get(&event) {
                            if let Err(msg) = type_params(&mut params, s) {
                                diags.push(Diagnostic::error(format!(
                                    "machine `{name}`: sending `{event}`: {msg}"
                                )));
                            }
                        }
                        match fanout.get(&event) {
                            Some(subs) => {
                                for s in subs {
                                    out.push(Op::Send {
                                        event: qualified(&event, s),
                                        params: params.clone(),
                                    });
                                }
                            }
                            None => out.push(Op::Send { event, params }),
                        }
                    }
                    other => out.push(other),
                }
            }
            *ops = out;
        };
        for s in &mut m.states {
            fix(&mut s.onentry, &mut diags);
            fix(&mut s.onexit, &mut diags);
        }
        for t in &mut m.transitions {
            fix(&mut t.body, &mut diags);
            for b in &mut t.branches {
                fix(&mut b.body, &mut diags);
            }
        }
        if let Err(d) = split_awaits(&mut m) {
            diags.extend(d);
        }
        machines.push(m);
    }
    machines.extend(generated);
    if !timers.is_empty() {
        match clock_config(&timers).and_then(|c| build_global_clock(&c)) {
            Ok(c) => machines.push(c),
            Err(d) => diags.push(d),
        }
    }
    if diags.iter().any(Diagnostic::is_error) {
        return Err(Diagnostics(diags));
    }
    Ok(Lowered { machines, schemas })
}

/// Give every param its schema type and add defaults for omitted fields.
fn type_params(params: &mut Vec<Param>, schema: &Schema) -> Result<(), String> {
    for p in params.iter_mut() {
        match schema.get(&p.name) {
            Some(t) => {
                if p.ty.as_ref().is_some_and(|pt| pt != t) {
                    return Err(format!("field `{}` is declared as {t}", p.name));
                }
                p.ty = Some(t.clone());
            }
            None => return Err(format!("the message has no field `{}`", p.name)),
        }
    }
    for (f, t) in schema {
        if !params.iter().any(|p| &p.name == f) {
            params.push(Param::typed(
                f.clone(),
                crate::scxml::value_to_expr(&t.default_value()),
                t.clone(),
            ));
        }
    }
    params.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(())
}

/// Replace every blocking call with a wait state: the part of the body before
/// the call moves to the wait state, the rest runs on the reply event.
fn split_awaits(m: &mut StateMachine) -> Result<(), Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let ctx = |msg: String| Diagnostic::error(format!("machine `{}`: {msg}", m.name));
    for s in &m.states {
        if s.onentry.iter().chain(&s.onexit).any(is_await) {
            diags.push(ctx(format!("state `{}`: blocking calls are not allowed in onentry/onexit", s.id)));
        }
    }
    let mut taken: HashSet<String> = m.states.iter().map(|s| s.id.clone()).collect();
    let mut counter = 0;
    let mut fresh = |base: &str| loop {
        let id = format!("{base}__wait{counter}");
        counter += 1;
        if taken.insert(id.clone()) {
            return id;
        }
    };
    let mut out = Vec::new();
    let mut new_states = Vec::new();
    for t in std::mem::take(&mut m.transitions) {
        if t.branches.iter().any(|b| b.body.iter().any(is_await)) {
            diags.push(ctx(format!(
                "transition from `{}`: blocking calls are not supported inside probabilistic branches",
                t.source
            )));
            continue;
        }
        if !t.body.iter().any(is_await) {
            out.push(t);
            continue;
        }
        if t.target.is_none() {
            let s = m.state(&t.source);
            if s.is_some_and(|s| !s.onentry.is_empty() || !s.onexit.is_empty()) {
                diags.push(ctx(format!(
                    "transition from `{}`: a blocking call in a targetless transition would re-enter a state with onentry/onexit content",
                    t.source
                )));
                continue;
            }
        }
        let final_target = t.target.clone().unwrap_or_else(|| t.source.clone());
        let mut cur = Transition {
            target: None,
            body: Vec::new(),
            ..t.clone()
        };
        for op in t.body {
            match op {
                Op::Send { event, .. } if event.starts_with(AWAIT) => {
                    let wait = fresh(&t.source);
                    new_states.push(State::new(&wait));
                    cur.target = Some(wait.clone());
                    out.push(cur);
                    cur = Transition {
                        source: wait,
                        target: None,
                        event: Some(event[AWAIT.len()..].to_string()),
                        cond: Expr::Bool(true),
                        body: Vec::new(),
                        branches: vec![],
                    };
                }
                other => cur.body.push(other),
            }
        }
        cur.target = Some(final_target);
        out.push(cur);
    }
    m.states.extend(new_states);
    m.transitions = out;
    m.group_transitions();
    if diags.is_empty() {
        Ok(())
    } else {
        Err(diags)
    }
}

fn is_await(op: &Op) -> bool {
    matches!(op, Op::Send { event, .. } if event.starts_with(AWAIT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::EventRegistry;
    use crate::scxml::validate_system_with;

    fn hl(text: &str) -> HlMachine {
        parse_hl(text, &ParseContext::default()).unwrap_or_else(|d| panic!("{d}"))
    }

    fn lower_ok(ms: Vec<HlMachine>) -> Lowered {
        let l = lower(ms, vec![], &Schemas::new(), &[]).unwrap_or_else(|d| panic!("{d}"));
        let d = validate_system_with(&l.machines, &l.schemas);
        assert!(d.is_empty(), "{d:?}");
        l
    }

    const PUB: &str = r#"<scxml name="pub" xmlns:ros="urn:scjani:ros">
  <ros:topic_publisher topic="/fell" type="std_msgs/Bool"/>
  <state id="a">
    <transition target="a"><ros:topic_publish topic="/fell"><ros:field name="data" expr="true"/></ros:topic_publish></transition>
  </state>
</scxml>"#;

    fn sub(name: &str) -> String {
        format!(
            r#"<scxml name="{name}" xmlns:ros="urn:scjani:ros">
  <datamodel><data id="seen" expr="false"/></datamodel>
  <ros:topic_subscriber topic="/fell" fields="data:bool"/>
  <state id="a">
    <ros:topic_callback topic="/fell"><assign location="seen" expr="_msg.data"/></ros:topic_callback>
  </state>
</scxml>"#
        )
    }

    #[test]
    fn topic_becomes_shared_event() {
        let l = lower_ok(vec![hl(PUB), hl(&sub("s"))]);
        let (reg, _) = EventRegistry::build(&l.machines);
        let e = reg.get("ros_topic./fell").unwrap();
        assert_eq!(e.fields["data"], Type::Bool);
        assert!(e.is_synchronized());
        assert_eq!(l.machines.len(), 2);
    }

    #[test]
    fn topic_without_subscribers_still_sends() {
        let l = lower_ok(vec![hl(PUB)]);
        let (reg, _) = EventRegistry::build(&l.machines);
        assert!(reg.get("ros_topic./fell").unwrap().receivers.is_empty());
    }

    #[test]
    fn two_publishers_share_one_event() {
        let other = PUB.replace("name=\"pub\"", "name=\"pub2\"");
        let l = lower_ok(vec![hl(PUB), hl(&other), hl(&sub("s"))]);
        let (reg, _) = EventRegistry::build(&l.machines);
        assert_eq!(reg.get("ros_topic./fell").unwrap().senders.len(), 2);
    }

    #[test]
    fn two_subscribers_get_their_own_copies() {
        let l = lower_ok(vec![hl(PUB), hl(&sub("s1")), hl(&sub("s2"))]);
        let sends: Vec<&str> = l.machines[0].sent_events();
        assert_eq!(sends, vec!["ros_topic./fell@s1", "ros_topic./fell@s2"]);
    }

    #[test]
    fn subscriber_needs_a_type() {
        let s = sub("s").replace(r#" fields="data:bool""#, "");
        let err = lower(vec![hl(&s)], vec![], &Schemas::new(), &[]).unwrap_err();
        assert!(err.to_string().contains("no declared message type"), "{err}");
    }

    const CLIENT: &str = r#"<scxml name="client" xmlns:ros="urn:scjani:ros">
  <datamodel><data id="sum" type="int[0..100]" expr="0"/></datamodel>
  <ros:service_client name="/add" request="a:int[0..10]" response="r:int[0..100]"/>
  <state id="a">
    <transition target="b">
      <ros:service_call name="/add"><ros:field name="a" expr="3"/></ros:service_call>
      <assign location="sum" expr="_res.r"/>
    </transition>
  </state>
  <state id="b"/>
</scxml>"#;

    const SERVER: &str = r#"<scxml name="server" xmlns:ros="urn:scjani:ros">
  <ros:service_server name="/add" request="a:int[0..10]" response="r:int[0..100]"/>
  <state id="idle">
    <ros:service_handle_request name="/add">
      <ros:service_send_response name="/add"><ros:field name="r" expr="_req.a * 2"/></ros:service_send_response>
    </ros:service_handle_request>
  </state>
</scxml>"#;

    #[test]
    fn service_call_adds_wait_state() {
        let l = lower_ok(vec![hl(CLIENT), hl(SERVER)]);
        let c = &l.machines[0];
        assert_eq!(c.states.len(), 3);
        let wait = &c.states[2].id;
        let resume = c.transitions.iter().find(|t| &t.source == wait).unwrap();
        assert_eq!(resume.event.as_deref(), Some("ros_srv./add.res"));
        assert_eq!(resume.target.as_deref(), Some("b"));
        let (reg, _) = EventRegistry::build(&l.machines);
        assert!(reg.get("ros_srv./add.req").unwrap().is_synchronized());
        assert!(reg.get("ros_srv./add.res").unwrap().is_synchronized());
    }

    #[test]
    fn two_servers_rejected() {
        let other = SERVER.replace("name=\"server\"", "name=\"server2\"");
        let err = lower(vec![hl(CLIENT), hl(SERVER), hl(&other)], vec![], &Schemas::new(), &[]).unwrap_err();
        assert!(err.to_string().contains("service server `/add`"), "{err}");
    }

    #[test]
    fn empty_response_has_no_fields() {
        let c = CLIENT.replace(r#" response="r:int[0..100]""#, "").replace("_res.r", "1");
        let s = SERVER
            .replace(r#" response="r:int[0..100]""#, "")
            .replace(r#"<ros:field name="r" expr="_req.a * 2"/>"#, "");
        let l = lower_ok(vec![hl(&c), hl(&s)]);
        let (reg, _) = EventRegistry::build(&l.machines);
        assert!(reg.get("ros_srv./add.res").unwrap().fields.is_empty());
    }

    #[test]
    fn reserved_prefix_rejected() {
        let m = r#"<scxml name="m"><state id="a"><transition target="a"><send event="ros_topic.x"/></transition></state></scxml>"#;
        assert!(lower(vec![hl(m)], vec![], &Schemas::new(), &[]).is_err());
        let n = r#"<scxml name="bt_x"><state id="a"/></scxml>"#;
        assert!(lower(vec![hl(n)], vec![], &Schemas::new(), &[]).is_err());
    }

    fn timer(m: &str, t: &str, hz: i64) -> TimerBinding {
        TimerBinding {
            machine: m.into(),
            timer: t.into(),
            rate_hz: Rational64::from_integer(hz),
        }
    }

    #[test]
    fn clock_gcd() {
        let c = clock_config(&[timer("a", "fast", 10), timer("b", "slow", 5)]).unwrap();
        assert_eq!(c.tick_period, Rational64::new(1, 10));
        let periods: Vec<i64> = c.timers.iter().map(|(_, p)| *p).collect();
        assert_eq!(periods, vec![1, 2]);
        let single = clock_config(&[timer("a", "t", 1)]).unwrap();
        assert_eq!(single.timers[0].1, 1);
        // 3 Hz and 2 Hz: 1/6 s ticks
        let odd = clock_config(&[timer("a", "x", 3), timer("b", "y", 2)]).unwrap();
        assert_eq!(odd.tick_period, Rational64::new(1, 6));
    }

    #[test]
    fn clock_schedule_by_hand() {
        use crate::expr::{eval, Value};
        let cfg = clock_config(&[timer("bt_driver", "tick", 10), timer("skill", "step", 10), timer("x", "slow", 5)]).unwrap();
        let m = build_global_clock(&cfg).unwrap();
        // run 3 ticks by evaluating the one enabled transition each time
        let mut env = BTreeMap::from([(CLOCK_VAR.to_string(), Value::Int(0))]);
        let mut fired = Vec::new();
        for _ in 0..3 {
            let ts: Vec<&Transition> = m
                .transitions
                .iter()
                .filter(|t| eval(&t.cond, &env).unwrap() == Value::Bool(true))
                .collect();
            assert_eq!(ts.len(), 1);
            let sends: Vec<String> = ts[0]
                .body
                .iter()
                .filter_map(|o| match o {
                    Op::Send { event, .. } => Some(event.clone()),
                    _ => None,
                })
                .collect();
            fired.push(sends);
            let t = env[CLOCK_VAR].as_int().unwrap();
            env.insert(CLOCK_VAR.into(), Value::Int(t + 1));
        }
        assert_eq!(
            fired,
            vec![
                vec!["ros_time.bt_driver.tick", "ros_time.skill.step"],
                vec!["ros_time.bt_driver.tick", "ros_time.skill.step", "ros_time.x.slow"],
                vec!["ros_time.bt_driver.tick", "ros_time.skill.step"],
            ]
        );
    }

    #[test]
    fn clock_rejects_huge_hyperperiod() {
        let cfg = ClockConfig {
            tick_period: Rational64::new(1, 1),
            timers: vec![(timer("a", "x", 1), 999_983), (timer("b", "y", 1), 999_979)],
        };
        assert!(build_global_clock(&cfg).is_err());
    }

    const SKILL: &str = r#"<scxml name="skill" xmlns:ros="urn:scjani:ros" xmlns:sj="urn:scjani:ext">
  <datamodel>
    <data id="n" type="int[0..10]" expr="0"/>
    <data id="t_abort" type="int[0..2147483647]" expr="0" sj:scope="global"/>
  </datamodel>
  <ros:action_server name="/move" goal="x:int[0..5]" result="done:bool"/>
  <ros:timer name="step" rate_hz="10"/>
  <state id="idle">
    <ros:action_handle_goal name="/move" target="busy"/>
  </state>
  <state id="busy">
    <ros:timer_callback name="step" cond="n &lt; 2"><assign location="n" expr="n + 1"/></ros:timer_callback>
    <ros:timer_callback name="step" cond="n == 2" target="idle">
      <assign location="t_abort" expr="t_curr"/>
      <ros:action_send_result name="/move" status="ABORTED"/>
    </ros:timer_callback>
  </state>
</scxml>"#;

    const MOVER: &str = r#"<scxml name="mover" xmlns:ros="urn:scjani:ros">
  <datamodel><data id="failed" expr="false"/></datamodel>
  <ros:action_client name="/move" goal="x:int[0..5]" result="done:bool"/>
  <state id="a">
    <transition target="w"><ros:action_send_goal name="/move"><ros:field name="x" expr="1"/></ros:action_send_goal></transition>
  </state>
  <state id="w">
    <ros:action_handle_aborted_result name="/move" target="a"><assign location="failed" expr="true"/></ros:action_handle_aborted_result>
  </state>
</scxml>"#;

    #[test]
    fn action_and_timer_lowering() {
        let l = lower_ok(vec![hl(SKILL), hl(MOVER)]);
        assert_eq!(l.machines.len(), 3);
        assert_eq!(l.machines[2].name, CLOCK_MACHINE);
        let (reg, _) = EventRegistry::build(&l.machines);
        let result = reg.get("ros_action./move.result").unwrap();
        assert_eq!(result.fields["status"], GOAL_STATUS);
        assert_eq!(result.fields["done"], Type::Bool);
        assert!(reg.get("ros_action./move.feedback").is_none());
        // t_curr was used without a declaration
        assert!(l.machines[0].data_decl(CLOCK_VAR).is_some_and(|d| d.global));
        let w = l.machines[1].transitions.iter().find(|t| t.source == "w").unwrap();
        assert_eq!(w.cond.to_string(), "_event.status == 6");
    }

    #[test]
    fn feedback_without_server() {
        let m = MOVER.replace(
            "<ros:action_handle_aborted_result",
            r#"<ros:action_handle_feedback name="/move"/><ros:action_handle_aborted_result"#,
        );
        let err = lower(vec![hl(&m)], vec![], &Schemas::new(), &[]).unwrap_err();
        assert!(err.to_string().contains("feedback of action `/move`"), "{err}");
    }

    #[test]
    fn undeclared_interface_use() {
        let m = r#"<scxml name="m" xmlns:ros="urn:scjani:ros"><state id="a"><transition target="a"><ros:topic_publish topic="/x"/></transition></state></scxml>"#;
        let err = lower(vec![hl(m)], vec![], &Schemas::new(), &[]).unwrap_err();
        assert!(err.to_string().contains("without declaring"), "{err}");
    }

    #[test]
    fn schema_syntax() {
        let s = parse_schema("a:int[0..3], b:bool").unwrap();
        assert_eq!(s.len(), 2);
        assert!(parse_schema("a").is_err());
        assert!(parse_schema("").unwrap().is_empty());
        assert_eq!(PortValue::parse("{goal}"), PortValue::Key("goal".into()));
        assert_eq!(PortValue::parse("3"), PortValue::Literal("3".into()));
    }

    #[test]
    fn lowering_is_deterministic() {
        let a = lower_ok(vec![hl(SKILL), hl(MOVER)]);
        let b = lower_ok(vec![hl(SKILL), hl(MOVER)]);
        let text = |l: &Lowered| l.machines.iter().map(crate::scxml::to_scxml).collect::<String>();
        assert_eq!(text(&a), text(&b));
    }
}
