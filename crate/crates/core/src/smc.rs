//! Statistical model checking by trace sampling.
//!
//! Nondeterminism is resolved by a uniform random scheduler with three
//! priority classes: moves involving a transient location go first, moves
//! involving an idle location (the clock) only when nothing else is enabled,
//! everything else in between. Within the winning class every enabled move is
//! equally likely.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{apply_binary, bool_of, index, int_of, BinOp, EvalError, Expr, Formula, LValue, Type, UnOp, Value};
use crate::jani::{LocationKind, Network, Property};
use crate::registry::event_automaton;

pub const DEFAULT_MAX_STEPS: u64 = 10_000;
pub const DEFAULT_STATE_BOUND: usize = 1_000_000;
/// Violating traces kept for CSV export.
pub const MAX_EXPORTED_TRACES: usize = 100;

#[derive(Debug, Error)]
pub enum SmcError {
    #[error("cannot compile network: {0}")]
    Compile(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model error in trace {trace} at step {step}: {message}")]
    Model {
        trace: u64,
        step: u64,
        message: String,
    },
    #[error(
        "{undecided} of {samples} traces ended undecided after {max_steps} steps; increase --max-steps"
    )]
    UndecidedMajority {
        undecided: u64,
        samples: u64,
        max_steps: u64,
    },
    #[error("state space exceeds {0} states")]
    StateBound(usize),
    #[error("no traces to export")]
    NoTraces,
    #[error("cannot write traces: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write traces: {0}")]
    Csv(#[from] csv::Error),
}

/// Number of independent samples after which the estimate is within
/// `max_error` of the true probability with probability `confidence`
/// (two-sided Chernoff-Hoeffding bound).
pub fn required_samples(confidence: f64, max_error: f64) -> u64 {
    let n = ((2.0 / (1.0 - confidence)).ln() / (2.0 * max_error * max_error)).ceil();
    if n.is_finite() && n >= 1.0 {
        n as u64
    } else {
        1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcConfig {
    pub confidence: f64,
    pub max_error: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Minimum number of traces handed to a worker at once.
    pub batch_size: usize,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            confidence: 0.95,
            max_error: 0.01,
            max_steps: DEFAULT_MAX_STEPS,
            seed: 0,
            batch_size: 64,
            jobs: 0,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<(), SmcError> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.confidence) {
            return Err(SmcError::Config(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        if !open(self.max_error) {
            return Err(SmcError::Config(format!(
                "error bound must lie in (0, 1), got {}",
                self.max_error
            )));
        }
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(SmcError::Config(
                "max steps and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Sat,
    Unsat,
    Undecided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub satisfied: u64,
    pub violated: u64,
    pub undecided: u64,
    /// `satisfied / (satisfied + violated)`; undecided traces are left out.
    pub estimate: f64,
    pub samples: u64,
    pub elapsed: Duration,
    /// Indices of the first violating traces, ascending.
    pub violating: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Global configuration of the network: one location per automaton and the
/// value of every variable (globals first, then locals automaton by automaton).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    pub locations: Vec<u32>,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub index: u64,
    /// Label of the move that led here; empty for the initial state.
    pub action: String,
    pub state: State,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone)]
enum CExpr {
    Lit(Value),
    Var(usize),
    Index(usize, String, Box<CExpr>),
    Array(Vec<CExpr>),
    Not(Box<CExpr>),
    Bin(BinOp, Box<CExpr>, Box<CExpr>),
}

impl CExpr {
    fn eval(&self, vals: &[Value]) -> Result<Value, EvalError> {
        match self {
            CExpr::Lit(v) => Ok(v.clone()),
            CExpr::Var(i) => Ok(vals[*i].clone()),
            CExpr::Index(i, name, e) => {
                let k = int_of(e.eval(vals)?)?;
                match &vals[*i] {
                    Value::Array(items) => index(items, name, k),
                    other => Err(EvalError::Type(format!("`{name}` is {} not an array", other.kind()))),
                }
            }
            CExpr::Array(items) => items
                .iter()
                .map(|e| e.eval(vals).and_then(int_of))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array),
            CExpr::Not(e) => Ok(Value::Bool(!bool_of(e.eval(vals)?)?)),
            CExpr::Bin(op, l, r) => match op {
                BinOp::And => Ok(Value::Bool(bool_of(l.eval(vals)?)? && bool_of(r.eval(vals)?)?)),
                BinOp::Or => Ok(Value::Bool(bool_of(l.eval(vals)?)? || bool_of(r.eval(vals)?)?)),
                BinOp::Implies => Ok(Value::Bool(!bool_of(l.eval(vals)?)? || bool_of(r.eval(vals)?)?)),
                _ => apply_binary(*op, l.eval(vals)?, r.eval(vals)?),
            },
        }
    }

    fn holds(&self, vals: &[Value]) -> Result<bool, EvalError> {
        bool_of(self.eval(vals)?)
    }
}

#[derive(Debug, Clone)]
enum CTarget {
    Var(usize),
    Index(usize, CExpr),
}

#[derive(Debug)]
struct CDest {
    prob: f64,
    loc: u32,
    assigns: Vec<(CTarget, CExpr)>,
}

#[derive(Debug)]
struct CEdge {
    loc: u32,
    guard: CExpr,
    dests: Vec<CDest>,
    dismiss: bool,
}

#[derive(Debug)]
struct CAut {
    name: String,
    loc_names: Vec<String>,
    kinds: Vec<LocationKind>,
    edges: Vec<CEdge>,
    /// Silent edges per location.
    silent_at: Vec<Vec<usize>>,
}

#[derive(Debug)]
struct CSync {
    label: String,
    /// Participating automaton and, per location, its edges with the action.
    parts: Vec<(usize, Vec<Vec<usize>>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Label {
    Silent(usize),
    Sync(usize),
}

#[derive(Debug, Clone)]
struct Move {
    label: Label,
    edges: Vec<(usize, usize)>,
}

/// A network prepared for simulation.
#[derive(Debug)]
pub struct Compiled {
    slot_names: Vec<String>,
    slot_types: Vec<Type>,
    global_slots: HashMap<String, usize>,
    constants: HashMap<String, Value>,
    init: State,
    automata: Vec<CAut>,
    syncs: Vec<CSync>,
    /// Syncs to consider, indexed by the location of their first participant.
    syncs_at: Vec<Vec<Vec<usize>>>,
}

fn rank(kind: LocationKind) -> u8 {
    match kind {
        LocationKind::Idle => 0,
        LocationKind::Normal => 1,
        LocationKind::Transient => 2,
    }
}

impl Compiled {
    pub fn new(net: &Network) -> Result<Self, SmcError> {
        let constants: HashMap<String, Value> = net
            .constants
            .iter()
            .map(|c| (c.name.clone(), c.ty.coerce(c.value.clone())))
            .collect();
        let mut slot_names = Vec::new();
        let mut slot_types = Vec::new();
        let mut values = Vec::new();
        let mut global_slots = HashMap::new();
        for g in &net.globals {
            global_slots.insert(g.name.clone(), slot_names.len());
            slot_names.push(g.name.clone());
            slot_types.push(g.ty.clone());
            values.push(g.ty.coerce(g.init.clone()));
        }
        let mut automata = Vec::new();
        let mut locations = Vec::new();
        let mut action_edges: Vec<HashMap<&str, Vec<Vec<usize>>>> = Vec::new();
        for a in &net.automata {
            let mut scope = global_slots.clone();
            for l in &a.locals {
                scope.insert(l.name.clone(), slot_names.len());
                slot_names.push(format!("{}.{}", a.name, l.name));
                slot_types.push(l.ty.clone());
                values.push(l.ty.coerce(l.init.clone()));
            }
            let loc_index: HashMap<&str, u32> = a
                .locations
                .iter()
                .enumerate()
                .map(|(i, l)| (l.name.as_str(), i as u32))
                .collect();
            let loc = |n: &str| {
                loc_index
                    .get(n)
                    .copied()
                    .ok_or_else(|| SmcError::Compile(format!("unknown location `{n}` in `{}`", a.name)))
            };
            locations.push(loc(&a.initial)?);
            let mut edges = Vec::new();
            let mut silent_at = vec![Vec::new(); a.locations.len()];
            let mut by_action: HashMap<&str, Vec<Vec<usize>>> = HashMap::new();
            for (i, e) in a.edges.iter().enumerate() {
                let l = loc(&e.location)?;
                let mut dests = Vec::new();
                for d in &e.destinations {
                    let mut assigns = Vec::new();
                    for asg in &d.assignments {
                        let target = match &asg.target {
                            LValue::Var(n) => CTarget::Var(lookup(&scope, n)?),
                            LValue::Index(n, ix) => {
                                CTarget::Index(lookup(&scope, n)?, compile(ix, &scope, &constants)?)
                            }
                        };
                        assigns.push((target, compile(&asg.value, &scope, &constants)?));
                    }
                    dests.push(CDest {
                        prob: *d.probability.numer() as f64 / *d.probability.denom() as f64,
                        loc: loc(&d.location)?,
                        assigns,
                    });
                }
                edges.push(CEdge {
                    loc: l,
                    guard: compile(&e.guard, &scope, &constants)?,
                    dests,
                    dismiss: e.dismiss,
                });
                match &e.action {
                    None => silent_at[l as usize].push(i),
                    Some(act) => by_action
                        .entry(act.as_str())
                        .or_insert_with(|| vec![Vec::new(); a.locations.len()])[l as usize]
                        .push(i),
                }
            }
            automata.push(CAut {
                name: a.name.clone(),
                loc_names: a.locations.iter().map(|l| l.name.clone()).collect(),
                kinds: a.locations.iter().map(|l| l.kind).collect(),
                edges,
                silent_at,
            });
            action_edges.push(by_action);
        }

        let mut syncs = Vec::new();
        let mut syncs_at: Vec<Vec<Vec<usize>>> = automata
            .iter()
            .map(|a| vec![Vec::new(); a.loc_names.len()])
            .collect();
        for s in &net.syncs {
            let mut parts = Vec::new();
            for (i, p) in s.participants.iter().enumerate() {
                let Some(act) = p else { continue };
                let per_loc = action_edges
                    .get(i)
                    .and_then(|m| m.get(act.as_str()))
                    .cloned()
                    .unwrap_or_else(|| vec![Vec::new(); automata.get(i).map_or(0, |a| a.loc_names.len())]);
                parts.push((i, per_loc));
            }
            let Some((first, per_loc)) = parts.first() else {
                continue;
            };
            for (l, es) in per_loc.iter().enumerate() {
                if !es.is_empty() {
                    syncs_at[*first][l].push(syncs.len());
                }
            }
            syncs.push(CSync {
                label: s.result.clone(),
                parts,
            });
        }
        Ok(Self {
            slot_names,
            slot_types,
            global_slots,
            constants,
            init: State { locations, values },
            automata,
            syncs,
            syncs_at,
        })
    }

    pub fn initial_state(&self) -> &State {
        &self.init
    }

    /// Variable names in state order; locals are qualified as `automaton.var`.
    pub fn variable_names(&self) -> &[String] {
        &self.slot_names
    }

    pub fn automaton_names(&self) -> impl Iterator<Item = &str> {
        self.automata.iter().map(|a| a.name.as_str())
    }

    pub fn location_name(&self, automaton: usize, loc: u32) -> &str {
        &self.automata[automaton].loc_names[loc as usize]
    }

    /// Current value of a global variable.
    pub fn global_value<'s>(&self, state: &'s State, name: &str) -> Option<&'s Value> {
        self.global_slots.get(name).map(|&i| &state.values[i])
    }

    fn label(&self, l: Label) -> String {
        match l {
            Label::Silent(a) => format!("{}:local", self.automata[a].name),
            Label::Sync(s) => self.syncs[s].label.clone(),
        }
    }

    fn edge_class(&self, a: usize, e: usize) -> u8 {
        let aut = &self.automata[a];
        let edge = &aut.edges[e];
        let kind = aut.kinds[edge.loc as usize];
        if edge.dismiss && kind == LocationKind::Transient {
            rank(LocationKind::Normal)
        } else {
            rank(kind)
        }
    }

    fn move_class(&self, edges: &[(usize, usize)]) -> u8 {
        let classes = edges.iter().map(|&(a, e)| self.edge_class(a, e));
        let mut best = rank(LocationKind::Normal);
        for c in classes {
            if c == rank(LocationKind::Transient) {
                return c;
            }
            best = best.min(c);
        }
        best
    }

    /// All enabled moves regardless of priority, each with its class.
    fn enabled_all(&self, s: &State, out: &mut Vec<(u8, Move)>) -> Result<(), EvalError> {
        out.clear();
        for (a, aut) in self.automata.iter().enumerate() {
            let l = s.locations[a] as usize;
            for &e in &aut.silent_at[l] {
                if aut.edges[e].guard.holds(&s.values)? {
                    let edges = vec![(a, e)];
                    out.push((self.move_class(&edges), Move {
                        label: Label::Silent(a),
                        edges,
                    }));
                }
            }
            for &si in &self.syncs_at[a][l] {
                let sync = &self.syncs[si];
                let mut choices: Vec<Vec<usize>> = Vec::with_capacity(sync.parts.len());
                let mut possible = true;
                for (pa, per_loc) in &sync.parts {
                    let cands = &per_loc[s.locations[*pa] as usize];
                    if cands.is_empty() {
                        possible = false;
                        break;
                    }
                    choices.push(cands.clone());
                }
                if !possible {
                    continue;
                }
                for (k, (pa, _)) in sync.parts.iter().enumerate() {
                    let aut = &self.automata[*pa];
                    let mut ok = Vec::new();
                    for &e in &choices[k] {
                        if aut.edges[e].guard.holds(&s.values)? {
                            ok.push(e);
                        }
                    }
                    if ok.is_empty() {
                        possible = false;
                        break;
                    }
                    choices[k] = ok;
                }
                if !possible {
                    continue;
                }
                // one move per combination of enabled participant edges
                let mut combos: Vec<Vec<(usize, usize)>> = vec![Vec::new()];
                for (k, (pa, _)) in sync.parts.iter().enumerate() {
                    let mut next = Vec::with_capacity(combos.len() * choices[k].len());
                    for c in &combos {
                        for &e in &choices[k] {
                            let mut c2 = c.clone();
                            c2.push((*pa, e));
                            next.push(c2);
                        }
                    }
                    combos = next;
                }
                for edges in combos {
                    out.push((self.move_class(&edges), Move {
                        label: Label::Sync(si),
                        edges,
                    }));
                }
            }
        }
        Ok(())
    }

    /// Moves the scheduler chooses from: the enabled ones of the highest class.
    fn enabled(&self, s: &State, buf: &mut Vec<(u8, Move)>, out: &mut Vec<Move>) -> Result<(), EvalError> {
        self.enabled_all(s, buf)?;
        out.clear();
        let Some(top) = buf.iter().map(|(c, _)| *c).max() else {
            return Ok(());
        };
        out.extend(buf.drain(..).filter(|(c, _)| *c == top).map(|(_, m)| m));
        Ok(())
    }

    fn apply(&self, s: &State, mv: &Move, dests: &[usize]) -> Result<State, String> {
        let mut writes: Vec<(usize, Option<i64>, Value)> = Vec::new();
        let mut next = s.clone();
        for (&(a, e), &d) in mv.edges.iter().zip(dests) {
            let dest = &self.automata[a].edges[e].dests[d];
            next.locations[a] = dest.loc;
            for (target, value) in &dest.assigns {
                let v = value.eval(&s.values).map_err(|e| e.to_string())?;
                match target {
                    CTarget::Var(i) => writes.push((*i, None, v)),
                    CTarget::Index(i, ix) => {
                        let k = ix.eval(&s.values).and_then(int_of).map_err(|e| e.to_string())?;
                        writes.push((*i, Some(k), v));
                    }
                }
            }
        }
        for (slot, idx, v) in writes {
            let ty = &self.slot_types[slot];
            match idx {
                None => {
                    let v = ty.coerce(v);
                    if !ty.admits(&v) {
                        return Err(format!(
                            "value {v} assigned to `{}` is outside {ty}",
                            self.slot_names[slot]
                        ));
                    }
                    next.values[slot] = v;
                }
                Some(k) => {
                    let Type::IntArray { len, range } = ty else {
                        return Err(format!("`{}` is not an array", self.slot_names[slot]));
                    };
                    let x = v.as_int().ok_or_else(|| format!("non-integer stored in `{}`", self.slot_names[slot]))?;
                    if k < 0 || k as usize >= *len {
                        return Err(format!("index {k} out of range for `{}`", self.slot_names[slot]));
                    }
                    if !range.contains(x) {
                        return Err(format!(
                            "value {x} stored in `{}[{k}]` is outside {}..{}",
                            self.slot_names[slot], range.lo, range.hi
                        ));
                    }
                    if let Value::Array(items) = &mut next.values[slot] {
                        items[k as usize] = x;
                    }
                }
            }
        }
        Ok(next)
    }

    fn sample_move(&self, s: &State, mv: &Move, rng: &mut impl Rng) -> Result<State, String> {
        let mut dests = Vec::with_capacity(mv.edges.len());
        for &(a, e) in &mv.edges {
            let ds = &self.automata[a].edges[e].dests;
            let pick = if ds.len() == 1 {
                0
            } else {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = ds.len() - 1;
                for (i, d) in ds.iter().enumerate() {
                    acc += d.prob;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            dests.push(pick);
        }
        self.apply(s, mv, &dests)
    }

    /// Every successor of `s` under the scheduler with its probability and label.
    pub fn successors(&self, s: &State) -> Result<Vec<(f64, String, State)>, String> {
        let mut buf = Vec::new();
        let mut moves = Vec::new();
        self.enabled(s, &mut buf, &mut moves).map_err(|e| e.to_string())?;
        let share = 1.0 / moves.len().max(1) as f64;
        let mut out = Vec::new();
        for mv in &moves {
            let sizes: Vec<usize> = mv
                .edges
                .iter()
                .map(|&(a, e)| self.automata[a].edges[e].dests.len())
                .collect();
            let mut choice = vec![0usize; sizes.len()];
            loop {
                let p: f64 = mv
                    .edges
                    .iter()
                    .zip(&choice)
                    .map(|(&(a, e), &d)| self.automata[a].edges[e].dests[d].prob)
                    .product();
                out.push((share * p, self.label(mv.label), self.apply(s, mv, &choice)?));
                // advance the mixed-radix counter
                let mut k = 0;
                while k < sizes.len() {
                    choice[k] += 1;
                    if choice[k] < sizes[k] {
                        break;
                    }
                    choice[k] = 0;
                    k += 1;
                }
                if k == sizes.len() {
                    break;
                }
            }
        }
        Ok(out)
    }

    /// Compile the property's operands over the global variables.
    pub fn monitor(&self, prop: &Property) -> Result<Monitor, SmcError> {
        let (lhs, rhs) = match &prop.formula {
            Formula::Until(l, r) => (l.clone(), r.clone()),
            Formula::Eventually(r) => (Expr::Bool(true), r.clone()),
        };
        Ok(Monitor {
            lhs: compile(&lhs, &self.global_slots, &self.constants)?,
            rhs: compile(&rhs, &self.global_slots, &self.constants)?,
            bound: prop.step_bound,
            transient: self
                .automata
                .iter()
                .map(|a| a.kinds.iter().map(|k| *k == LocationKind::Transient).collect())
                .collect(),
        })
    }

    /// Run one trace, calling `visit` on every state until it returns false,
    /// no move is enabled or `max_steps` moves were taken.
    fn run(
        &self,
        rng: &mut impl Rng,
        max_steps: u64,
        mut visit: impl FnMut(u64, Option<Label>, &State) -> bool,
    ) -> Result<(), (u64, String)> {
        let mut s = self.init.clone();
        let mut buf = Vec::new();
        let mut moves = Vec::new();
        if !visit(0, None, &s) {
            return Ok(());
        }
        for step in 1..=max_steps {
            self.enabled(&s, &mut buf, &mut moves)
                .map_err(|e| (step - 1, e.to_string()))?;
            if moves.is_empty() {
                return Ok(());
            }
            let mv = if moves.len() == 1 {
                &moves[0]
            } else {
                &moves[rng.random_range(0..moves.len())]
            };
            s = self.sample_move(&s, mv, rng).map_err(|m| (step, m))?;
            if !visit(step, Some(mv.label), &s) {
                return Ok(());
            }
        }
        Ok(())
    }
}

fn lookup(scope: &HashMap<String, usize>, n: &str) -> Result<usize, SmcError> {
    scope
        .get(n)
        .copied()
        .ok_or_else(|| SmcError::Compile(format!("unknown variable `{n}`")))
}

fn compile(
    e: &Expr,
    scope: &HashMap<String, usize>,
    consts: &HashMap<String, Value>,
) -> Result<CExpr, SmcError> {
    let c = |x: &Expr| compile(x, scope, consts).map(Box::new);
    Ok(match e {
        Expr::Bool(b) => CExpr::Lit(Value::Bool(*b)),
        Expr::Int(v) => CExpr::Lit(Value::Int(*v)),
        Expr::Real(v) => CExpr::Lit(Value::Real(*v)),
        Expr::ArrayLit(items) => CExpr::Array(
            items
                .iter()
                .map(|x| compile(x, scope, consts))
                .collect::<Result<_, _>>()?,
        ),
        Expr::Var(n) => match scope.get(n) {
            Some(&i) => CExpr::Var(i),
            None => CExpr::Lit(
                consts
                    .get(n)
                    .cloned()
                    .ok_or_else(|| SmcError::Compile(format!("unknown variable `{n}`")))?,
            ),
        },
        Expr::EventField(f) => {
            return Err(SmcError::Compile(format!("unresolved payload reference `{f}`")))
        }
        Expr::Index(n, ix) => CExpr::Index(lookup(scope, n)?, n.clone(), c(ix)?),
        Expr::Unary(UnOp::Not, x) => CExpr::Not(c(x)?),
        Expr::Binary(op, l, r) => CExpr::Bin(*op, c(l)?, c(r)?),
    })
}

/// Incremental checker of `lhs U rhs` over the states of a trace.
///
/// States in which some automaton is inside a transition body are skipped:
/// an SCXML transition runs atomically, so its partial effects are not
/// observable.
#[derive(Debug)]
pub struct Monitor {
    lhs: CExpr,
    rhs: CExpr,
    bound: Option<u64>,
    /// Per automaton and location: is it a transient location.
    transient: Vec<Vec<bool>>,
}

impl Monitor {
    /// Verdict once `state` is reached at `step`, or `None` if still open.
    pub fn check(&self, step: u64, state: &State) -> Result<Option<Outcome>, EvalError> {
        if self.bound.is_some_and(|b| step > b) {
            return Ok(Some(Outcome::Unsat));
        }
        if self.in_transition(state) {
            return Ok(None);
        }
        if self.rhs.holds(&state.values)? {
            return Ok(Some(Outcome::Sat));
        }
        if !self.lhs.holds(&state.values)? {
            return Ok(Some(Outcome::Unsat));
        }
        Ok(None)
    }

    fn in_transition(&self, state: &State) -> bool {
        state
            .locations
            .iter()
            .zip(&self.transient)
            .any(|(&l, t)| t[l as usize])
    }
}

fn trace_rng(seed: u64, trace: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trace);
    rng
}

/// Sample a full trace (up to `max_steps` moves or a terminal state).
pub fn sample_trace(c: &Compiled, rng: &mut impl Rng, max_steps: u64) -> Result<Trace, SmcError> {
    let mut trace = Trace::default();
    c.run(rng, max_steps, |i, l, s| {
        trace.steps.push(Step {
            index: i,
            action: l.map(|l| c.label(l)).unwrap_or_default(),
            state: s.clone(),
        });
        true
    })
    .map_err(|(step, message)| SmcError::Model {
        trace: 0,
        step,
        message,
    })?;
    Ok(trace)
}

/// Check a recorded trace against a property.
pub fn evaluate_property(c: &Compiled, trace: &Trace, prop: &Property) -> Result<Outcome, SmcError> {
    let m = c.monitor(prop)?;
    for s in &trace.steps {
        let r = m.check(s.index, &s.state).map_err(|e| SmcError::Model {
            trace: 0,
            step: s.index,
            message: e.to_string(),
        })?;
        if let Some(o) = r {
            return Ok(o);
        }
    }
    Ok(Outcome::Undecided)
}

/// Sample trace number `index` of a run seeded with `seed` and check it,
/// stopping as soon as the property is decided. With `record`, the visited
/// states are returned as well.
pub fn run_trace(
    c: &Compiled,
    monitor: &Monitor,
    seed: u64,
    index: u64,
    max_steps: u64,
    record: bool,
) -> Result<(Outcome, Option<Trace>), SmcError> {
    let mut rng = trace_rng(seed, index);
    let mut outcome = Outcome::Undecided;
    let mut err = None;
    let mut trace = record.then(Trace::default);
    c.run(&mut rng, max_steps, |i, l, s| {
        if let Some(t) = &mut trace {
            t.steps.push(Step {
                index: i,
                action: l.map(|l| c.label(l)).unwrap_or_default(),
                state: s.clone(),
            });
        }
        match monitor.check(i, s) {
            Ok(Some(o)) => {
                outcome = o;
                false
            }
            Ok(None) => true,
            Err(e) => {
                err = Some((i, e.to_string()));
                false
            }
        }
    })
    .map_err(|(step, message)| SmcError::Model {
        trace: index,
        step,
        message,
    })?;
    if let Some((step, message)) = err {
        return Err(SmcError::Model {
            trace: index,
            step,
            message,
        });
    }
    Ok((outcome, trace))
}

/// Regenerate the traces with the given indices up to the step where `prop`
/// was decided, for export.
pub fn replay_traces(
    c: &Compiled,
    prop: &Property,
    seed: u64,
    indices: &[u64],
    max_steps: u64,
) -> Result<Vec<(u64, Trace)>, SmcError> {
    let monitor = c.monitor(prop)?;
    indices
        .iter()
        .map(|&i| {
            let (_, t) = run_trace(c, &monitor, seed, i, max_steps, true)?;
            Ok((i, t.unwrap_or_default()))
        })
        .collect()
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    if jobs == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Estimate the probability of `prop` from `required_samples` traces.
pub fn estimate_probability(c: &Compiled, prop: &Property, cfg: &SmcConfig) -> Result<Verdict, SmcError> {
    cfg.validate()?;
    let start = Instant::now();
    let monitor = c.monitor(prop)?;
    let n = required_samples(cfg.confidence, cfg.max_error);
    let outcomes: Vec<Result<Outcome, SmcError>> = with_pool(cfg.jobs, || {
        (0..n as usize)
            .into_par_iter()
            .with_min_len(cfg.batch_size)
            .map(|i| run_trace(c, &monitor, cfg.seed, i as u64, cfg.max_steps, false).map(|(o, _)| o))
            .collect()
    });
    let (mut sat, mut unsat, mut undecided) = (0u64, 0u64, 0u64);
    let mut violating = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o? {
            Outcome::Sat => sat += 1,
            Outcome::Unsat => {
                unsat += 1;
                if violating.len() < MAX_EXPORTED_TRACES {
                    violating.push(i as u64);
                }
            }
            Outcome::Undecided => undecided += 1,
        }
    }
    if undecided * 2 > n {
        return Err(SmcError::UndecidedMajority {
            undecided,
            samples: n,
            max_steps: cfg.max_steps,
        });
    }
    let mut warnings = Vec::new();
    if undecided > 0 {
        warnings.push(format!(
            "{undecided} of {n} traces were undecided after {} steps and are excluded from the estimate",
            cfg.max_steps
        ));
    }
    let decided = sat + unsat;
    Ok(Verdict {
        satisfied: sat,
        violated: unsat,
        undecided,
        estimate: if decided == 0 { 0.0 } else { sat as f64 / decided as f64 },
        samples: n,
        elapsed: start.elapsed(),
        violating,
        warnings,
    })
}

/// Exact outcome probabilities under the uniform scheduler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exact {
    pub satisfied: f64,
    pub violated: f64,
    pub undecided: f64,
    /// Distinct states visited.
    pub states: usize,
}

/// Propagate the state distribution forward for up to `max_steps` moves.
pub fn exact_probability(
    c: &Compiled,
    prop: &Property,
    max_steps: u64,
    state_bound: usize,
) -> Result<Exact, SmcError> {
    let m = c.monitor(prop)?;
    let model = |step: u64, message: String| SmcError::Model {
        trace: 0,
        step,
        message,
    };
    let mut seen: HashSet<State> = HashSet::new();
    seen.insert(c.init.clone());
    let mut current: Vec<(State, f64)> = vec![(c.init.clone(), 1.0)];
    let mut out = Exact {
        satisfied: 0.0,
        violated: 0.0,
        undecided: 0.0,
        states: 0,
    };
    for step in 0..=max_steps {
        let mut next: Vec<(State, f64)> = Vec::new();
        let mut at: HashMap<State, usize> = HashMap::new();
        for (s, p) in current {
            match m.check(step, &s).map_err(|e| model(step, e.to_string()))? {
                Some(Outcome::Sat) => out.satisfied += p,
                Some(_) => out.violated += p,
                None if step == max_steps => out.undecided += p,
                None => {
                    let succ = c.successors(&s).map_err(|e| model(step + 1, e))?;
                    if succ.is_empty() {
                        out.undecided += p;
                    }
                    for (q, _, s2) in succ {
                        if let Some(&i) = at.get(&s2) {
                            next[i].1 += p * q;
                            continue;
                        }
                        if seen.insert(s2.clone()) && seen.len() > state_bound {
                            return Err(SmcError::StateBound(state_bound));
                        }
                        at.insert(s2.clone(), next.len());
                        next.push((s2, p * q));
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        current = next;
    }
    out.states = seen.len();
    Ok(out)
}

/// Explore the states reachable within `max_depth` moves and report those
/// where an event is pending but no receiving move (including dismissal) is
/// enabled.
pub fn find_stuck_events(c: &Compiled, state_bound: usize, max_depth: u64) -> Result<Vec<String>, SmcError> {
    let events: Vec<(usize, u32)> = c
        .automata
        .iter()
        .enumerate()
        .filter(|(_, a)| a.name.starts_with(&event_automaton("")))
        .filter_map(|(i, a)| {
            a.loc_names
                .iter()
                .position(|l| l == crate::translate::EVENT_PENDING)
                .map(|p| (i, p as u32))
        })
        .collect();
    let mut seen: HashSet<State> = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(c.init.clone());
    queue.push_back((c.init.clone(), 0u64));
    let mut buf = Vec::new();
    let mut stuck = Vec::new();
    while let Some((s, depth)) = queue.pop_front() {
        c.enabled_all(&s, &mut buf).map_err(|e| SmcError::Model {
            trace: 0,
            step: 0,
            message: e.to_string(),
        })?;
        for &(ea, pending) in &events {
            if s.locations[ea] != pending {
                continue;
            }
            let served = buf.iter().any(|(_, m)| {
                m.edges
                    .iter()
                    .any(|&(a, e)| a == ea && c.automata[a].edges[e].loc == pending)
            });
            if !served {
                stuck.push(format!(
                    "{} pending with no receiver ready in [{}]",
                    c.automata[ea].name,
                    describe(c, &s)
                ));
            }
        }
        if depth == max_depth {
            continue;
        }
        for (_, _, s2) in c.successors(&s).map_err(|message| SmcError::Model {
            trace: 0,
            step: 0,
            message,
        })? {
            if seen.insert(s2.clone()) {
                if seen.len() > state_bound {
                    return Err(SmcError::StateBound(state_bound));
                }
                queue.push_back((s2, depth + 1));
            }
        }
    }
    Ok(stuck)
}

fn describe(c: &Compiled, s: &State) -> String {
    c.automata
        .iter()
        .zip(&s.locations)
        .map(|(a, &l)| format!("{}={}", a.name, a.loc_names[l as usize]))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Write traces as CSV: `trace_id,step,action`, one location column per
/// automaton, then one column per variable.
pub fn write_traces_csv(c: &Compiled, traces: &[(u64, Trace)], out: impl Write) -> Result<(), SmcError> {
    if traces.is_empty() {
        return Err(SmcError::NoTraces);
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["trace_id".to_string(), "step".into(), "action".into()];
    header.extend(c.automata.iter().map(|a| format!("{}_location", a.name)));
    header.extend(c.slot_names.iter().cloned());
    w.write_record(&header)?;
    for (id, t) in traces {
        for s in &t.steps {
            let mut row = vec![id.to_string(), s.index.to_string(), s.action.clone()];
            row.extend(
                s.state
                    .locations
                    .iter()
                    .enumerate()
                    .map(|(a, &l)| c.location_name(a, l).to_string()),
            );
            row.extend(s.state.values.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_traces_csv(c: &Compiled, traces: &[(u64, Trace)], path: &Path) -> Result<(), SmcError> {
    if traces.is_empty() {
        return Err(SmcError::NoTraces);
    }
    let file = std::fs::File::create(path)?;
    write_traces_csv(c, traces, std::io::BufWriter::new(file))
}

/// Simulate `n` full traces with per-trace random streams derived from `seed`.
pub fn simulate(c: &Compiled, n: u64, seed: u64, max_steps: u64, jobs: usize) -> Result<Vec<(u64, Trace)>, SmcError> {
    let traces: Vec<Result<(u64, Trace), SmcError>> = with_pool(jobs, || {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = trace_rng(seed, i);
                sample_trace(c, &mut rng, max_steps)
                    .map(|t| (i, t))
                    .map_err(|e| match e {
                        SmcError::Model { step, message, .. } => SmcError::Model {
                            trace: i,
                            step,
                            message,
                        },
                        other => other,
                    })
            })
            .collect()
    });
    traces.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::IntRange;
    use crate::jani::{Assignment, Automaton, Destination, Edge, Location, Query, VarDecl};
    use num_rational::Rational64;

    #[test]
    fn sample_count_law() {
        // independent arithmetic: ln(40) = 3.6888794541139363
        let ln40 = 3.688_879_454_113_936_3_f64;
        assert_eq!(required_samples(0.95, 0.01), (ln40 / 0.0002).ceil() as u64);
        assert_eq!(required_samples(0.95, 0.01), 18445);
        assert_eq!(required_samples(0.95, 0.1), 185);
        assert_eq!(required_samples(0.90, 0.01), 14979);
        assert_eq!(required_samples(0.99, 0.01), 26492);
        // ln(2 / 0.73) / 0.5 = 2.016
        assert_eq!(required_samples(0.27, 0.5), 3);
        assert_eq!(required_samples(1e-9, 0.999), 1);
    }

    fn loc(n: &str) -> Location {
        Location {
            name: n.into(),
            kind: LocationKind::Normal,
        }
    }

    fn edge(from: &str, dests: Vec<(i64, i64, &str, Vec<Assignment>)>) -> Edge {
        Edge {
            location: from.into(),
            action: None,
            guard: Expr::Bool(true),
            destinations: dests
                .into_iter()
                .map(|(n, d, l, a)| Destination {
                    probability: Rational64::new(n, d),
                    location: l.into(),
                    assignments: a,
                })
                .collect(),
            dismiss: false,
        }
    }

    fn set(v: &str, e: &str) -> Assignment {
        Assignment {
            target: LValue::Var(v.into()),
            value: Expr::parse(e).unwrap(),
        }
    }

    /// One automaton flipping a fair coin, then stopping.
    fn coin() -> Network {
        Network {
            name: "coin".into(),
            constants: vec![],
            globals: vec![
                VarDecl { name: "heads".into(), ty: Type::Bool, init: Value::Bool(false) },
                VarDecl { name: "done".into(), ty: Type::Bool, init: Value::Bool(false) },
            ],
            automata: vec![Automaton {
                name: "c".into(),
                locals: vec![],
                locations: vec![loc("a"), loc("b")],
                initial: "a".into(),
                edges: vec![edge(
                    "a",
                    vec![
                        (1, 2, "b", vec![set("heads", "true"), set("done", "true")]),
                        (1, 2, "b", vec![set("done", "true")]),
                    ],
                )],
            }],
            syncs: vec![],
            properties: vec![],
        }
    }

    fn prop(f: &str) -> Property {
        Property {
            name: "p".into(),
            query: Query::Pmin,
            formula: Formula::parse(f).unwrap(),
            step_bound: None,
        }
    }

    #[test]
    fn coin_exact_is_half() {
        let c = Compiled::new(&coin()).unwrap();
        let e = exact_probability(&c, &prop("!done U heads"), 10, 100).unwrap();
        assert_eq!(e.satisfied, 0.5);
        assert_eq!(e.violated, 0.5);
    }

    #[test]
    fn branch_frequencies() {
        let c = Compiled::new(&coin()).unwrap();
        let m = c.monitor(&prop("F heads")).unwrap();
        let heads = (0..10_000)
            .filter(|&i| run_trace(&c, &m, 7, i, 5, false).unwrap().0 == Outcome::Sat)
            .count();
        assert!((heads as f64 / 10_000.0 - 0.5).abs() < 0.02, "{heads}");
    }

    #[test]
    fn self_loop_runs_to_cutoff() {
        let mut n = coin();
        n.automata[0].edges = vec![edge("a", vec![(1, 1, "a", vec![])])];
        let c = Compiled::new(&n).unwrap();
        let mut rng = trace_rng(1, 0);
        let t = sample_trace(&c, &mut rng, 25).unwrap();
        assert_eq!(t.steps.len(), 26);
        assert!(t.steps.iter().all(|s| s.state == t.steps[0].state));
        assert_eq!(evaluate_property(&c, &t, &prop("F done")).unwrap(), Outcome::Undecided);
    }

    #[test]
    fn eventually_true_is_certain() {
        let c = Compiled::new(&coin()).unwrap();
        let cfg = SmcConfig {
            max_error: 0.1,
            ..SmcConfig::default()
        };
        let v = estimate_probability(&c, &prop("F true"), &cfg).unwrap();
        assert_eq!(v.estimate, 1.0);
        assert_eq!(v.samples, 185);
        assert_eq!(v.satisfied + v.violated + v.undecided, v.samples);
    }

    #[test]
    fn results_ignore_worker_count() {
        let c = Compiled::new(&coin()).unwrap();
        let p = prop("!done U heads");
        let run = |jobs| {
            let cfg = SmcConfig {
                max_error: 0.05,
                jobs,
                seed: 99,
                ..SmcConfig::default()
            };
            let v = estimate_probability(&c, &p, &cfg).unwrap();
            (v.satisfied, v.violated, v.violating)
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn overflow_is_a_model_error() {
        let mut n = coin();
        n.globals.push(VarDecl {
            name: "k".into(),
            ty: Type::Int(IntRange::new(0, 3)),
            init: Value::Int(0),
        });
        n.automata[0].edges = vec![edge("a", vec![(1, 1, "a", vec![set("k", "k + 1")])])];
        let c = Compiled::new(&n).unwrap();
        let m = c.monitor(&prop("F done")).unwrap();
        let err = run_trace(&c, &m, 0, 0, 100, false).unwrap_err();
        assert!(matches!(err, SmcError::Model { step: 4, .. }), "{err}");
    }

    #[test]
    fn undecided_majority_is_an_error() {
        let mut n = coin();
        n.automata[0].edges = vec![edge("a", vec![(1, 1, "a", vec![])])];
        let c = Compiled::new(&n).unwrap();
        let cfg = SmcConfig {
            max_error: 0.1,
            max_steps: 10,
            ..SmcConfig::default()
        };
        assert!(matches!(
            estimate_probability(&c, &prop("F done"), &cfg),
            Err(SmcError::UndecidedMajority { .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let c = Compiled::new(&coin()).unwrap();
        let mut rng = trace_rng(3, 0);
        let t = sample_trace(&c, &mut rng, 2).unwrap();
        assert_eq!(t.steps.len(), 2);
        let mut buf = Vec::new();
        write_traces_csv(&c, &[(0, t)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "trace_id,step,action,c_location,heads,done");
        assert!(lines[1].starts_with("0,0,,a,false,false"));
    }

    #[test]
    fn csv_quotes_commas() {
        let mut n = coin();
        n.globals.push(VarDecl {
            name: "a,b".into(),
            ty: Type::Bool,
            init: Value::Bool(false),
        });
        let c = Compiled::new(&n).unwrap();
        let mut buf = Vec::new();
        write_traces_csv(&c, &[(0, Trace { steps: vec![Step { index: 0, action: String::new(), state: c.initial_state().clone() }] })], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("trace_id,step,action,c_location,heads,done,\"a,b\""));
    }

    #[test]
    fn until_semantics() {
        let c = Compiled::new(&coin()).unwrap();
        let mut t = Trace::default();
        let mut s = c.initial_state().clone();
        t.steps.push(Step { index: 0, action: String::new(), state: s.clone() });
        s.values[1] = Value::Bool(true);
        t.steps.push(Step { index: 1, action: String::new(), state: s.clone() });
        // lhs fails before rhs
        assert_eq!(evaluate_property(&c, &t, &prop("!done U heads")).unwrap(), Outcome::Unsat);
        // rhs wins when both change in the same state
        assert_eq!(evaluate_property(&c, &t, &prop("!done U done")).unwrap(), Outcome::Sat);
    }

    #[test]
    fn step_bound_turns_open_into_unsat() {
        let mut n = coin();
        n.automata[0].edges = vec![edge("a", vec![(1, 1, "a", vec![])])];
        let c = Compiled::new(&n).unwrap();
        let mut p = prop("F done");
        p.step_bound = Some(3);
        let m = c.monitor(&p).unwrap();
        assert_eq!(run_trace(&c, &m, 0, 0, 10, false).unwrap().0, Outcome::Unsat);
    }
}
