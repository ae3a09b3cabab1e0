//! System manifests and the full compilation pipeline from documents to a
//! network.
//!
//! A manifest is a TOML file:
//!
//! ```toml
//! name = "pick_and_place"
//! machines = ["skills/move.scxml"]
//!
//! [bt]
//! file = "bt.xml"
//! plugins = ["plugins/move_block.scxml"]
//! rate_hz = 10                  # integer, or a string such as "5/2"
//! policy = "tick-while-running" # or tick-forever, tick-once
//!
//! [blackboard]
//! target = { type = "int[0..5]", init = "0" }
//!
//! [constants]
//! t_timeout = 3
//!
//! [[properties]]
//! name = "recovers"
//! formula = "(abort => t_curr < t_abort + t_timeout) U (success || recovery)"
//! query = "pmin"  # or pmax
//!
//! [smc]
//! confidence = 0.95
//! error = 0.01
//! max_steps = 10000
//! seed = 0
//!
//! [output]
//! jani = "pick_and_place.jani"
//! ```
//!
//! Paths are relative to the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use num_rational::Rational64;
use serde::Deserialize;
use thiserror::Error;

use crate::bt::{build_bt_system, parse_bt_xml, BlackboardDecl, TickConfig, TickPolicy};
use crate::diag::{Diagnostic, Diagnostics};
use crate::expr::{Expr, Formula, IntRange, Type, Value, DEFAULT_INT_RANGE};
use crate::hl::{lower, parse_hl, ParseContext};
use crate::jani::{load_jani, validate_network, Constant, Network, Query};
use crate::registry::EventRegistry;
use crate::scxml::{const_value, parse_probability, validate_system_with, StateMachine};
use crate::translate::{add_dismiss_edges, compile_property, translate, PropertySpec};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("{0}")]
    Diagnostics(Diagnostics),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: Option<String>,
    #[serde(default)]
    pub machines: Vec<PathBuf>,
    pub bt: Option<BtSection>,
    #[serde(default)]
    pub blackboard: BTreeMap<String, BlackboardKey>,
    #[serde(default)]
    pub constants: BTreeMap<String, toml::Value>,
    #[serde(default)]
    pub properties: Vec<PropertySection>,
    #[serde(default)]
    pub smc: SmcSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BtSection {
    pub file: PathBuf,
    #[serde(default)]
    pub plugins: Vec<PathBuf>,
    pub rate_hz: Option<toml::Value>,
    pub policy: Option<String>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BlackboardKey {
    #[serde(rename = "type")]
    pub ty: String,
    pub init: Option<String>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PropertySection {
    pub name: String,
    pub formula: String,
    pub query: Option<String>,
    pub step_bound: Option<u64>,
}

/// Verification defaults; command-line flags take precedence.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SmcSection {
    pub confidence: Option<f64>,
    pub error: Option<f64>,
    pub max_steps: Option<u64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub jani: Option<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Manifest, LoadError> {
        toml::from_str(text).map_err(|e| LoadError::Manifest {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Manifest, LoadError> {
        Self::parse(&read(path)?, path)
    }
}

/// A compiled system with the settings that came with it.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network,
    pub smc: SmcSection,
    /// Output path from the manifest, resolved against its directory.
    pub jani_output: Option<PathBuf>,
    /// Plain machines the network was translated from; empty for JANI input.
    pub machines: Vec<StateMachine>,
}

fn read(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a `.jani` file as is, or compile a manifest.
pub fn load_model(path: &Path) -> Result<Model, LoadError> {
    if path.extension().is_some_and(|e| e == "jani") {
        let text = read(path)?;
        let network = load_jani(&text).map_err(|e| LoadError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let d = validate_network(&network);
        if d.iter().any(Diagnostic::is_error) {
            return Err(LoadError::Diagnostics(Diagnostics(
                d.into_iter().map(|x| x.in_file(path.display().to_string())).collect(),
            )));
        }
        return Ok(Model {
            network,
            smc: SmcSection::default(),
            jani_output: None,
            machines: Vec::new(),
        });
    }
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "system".into());
    compile_manifest(&manifest, base, &default_name)
}

fn manifest_err(base: &Path, message: impl Into<String>) -> LoadError {
    LoadError::Manifest {
        path: base.to_path_buf(),
        message: message.into(),
    }
}

fn parse_rate(v: &toml::Value) -> Option<Rational64> {
    match v {
        toml::Value::Integer(i) => Some(Rational64::from_integer(*i)),
        toml::Value::String(s) => parse_probability(s).or_else(|| s.trim().parse::<i64>().ok().map(Rational64::from_integer)),
        toml::Value::Float(f) => Rational64::approximate_float(*f),
        _ => None,
    }
}

fn constant(name: &str, v: &toml::Value) -> Option<Constant> {
    let (ty, value) = match v {
        toml::Value::Boolean(b) => (Type::Bool, Value::Bool(*b)),
        toml::Value::Integer(i) => (
            Type::Int(DEFAULT_INT_RANGE.hull(&IntRange::new(*i, *i))),
            Value::Int(*i),
        ),
        toml::Value::Float(f) => (Type::Real, Value::Real(*f)),
        _ => return None,
    };
    Some(Constant {
        name: name.to_string(),
        ty,
        value,
    })
}

/// Compile a manifest whose relative paths are resolved against `base`.
pub fn compile_manifest(m: &Manifest, base: &Path, default_name: &str) -> Result<Model, LoadError> {
    let name = m.name.clone().unwrap_or_else(|| default_name.to_string());
    let mut diags: Vec<Diagnostic> = Vec::new();
    let mut hl = Vec::new();
    if m.machines.is_empty() && m.bt.is_none() {
        return Err(manifest_err(base, "the manifest lists no machines"));
    }
    for p in &m.machines {
        let path = base.join(p);
        let text = read(&path)?;
        match parse_hl(&text, &ParseContext::default()) {
            Ok(h) => hl.push(h),
            Err(d) => diags.extend(d.0.into_iter().map(|x| x.in_file(path.display().to_string()))),
        }
    }
    let mut generated = Vec::new();
    let mut schemas = BTreeMap::new();
    let mut timers = Vec::new();
    if let Some(bt) = &m.bt {
        let mut plugins = BTreeMap::new();
        for p in &bt.plugins {
            let path = base.join(p);
            let text = read(&path)?;
            let pname = roxmltree::Document::parse(&text)
                .ok()
                .and_then(|d| d.root_element().attribute("name").map(str::to_string));
            let Some(pname) = pname else {
                diags.push(Diagnostic::error("plugin documents need a `name` on <scxml>").in_file(path.display().to_string()));
                continue;
            };
            if plugins.insert(pname.clone(), text).is_some() {
                diags.push(Diagnostic::error(format!("two plugins are named `{pname}`")).in_file(path.display().to_string()));
            }
        }
        let rate_hz = match &bt.rate_hz {
            None => TickConfig::default().rate_hz,
            Some(v) => match parse_rate(v) {
                Some(r) if r > Rational64::from_integer(0) => r,
                _ => return Err(manifest_err(base, format!("bt.rate_hz: `{v}` is not a positive rate"))),
            },
        };
        let policy = match bt.policy.as_deref() {
            None => TickConfig::default().policy,
            Some(p) => TickPolicy::parse(p).ok_or_else(|| {
                manifest_err(base, format!("bt.policy: unknown policy `{p}`"))
            })?,
        };
        let mut bb = BlackboardDecl::default();
        for (k, decl) in &m.blackboard {
            let ty = Type::parse(&decl.ty)
                .map_err(|e| manifest_err(base, format!("blackboard.{k}: {e}")))?;
            let init = match &decl.init {
                Some(text) => {
                    let e = Expr::parse(text).map_err(|e| manifest_err(base, format!("blackboard.{k}: {e}")))?;
                    let v = const_value(&e).map_err(|e| manifest_err(base, format!("blackboard.{k}: {e}")))?;
                    if !ty.admits(&v) {
                        return Err(manifest_err(base, format!("blackboard.{k}: `{text}` is not a {ty}")));
                    }
                    e
                }
                None => crate::scxml::value_to_expr(&ty.default_value()),
            };
            bb.keys.push((k.clone(), ty, init));
        }
        let bt_path = base.join(&bt.file);
        let text = read(&bt_path)?;
        let names: BTreeSet<String> = plugins.keys().cloned().collect();
        let in_bt = |d: Diagnostics| d.0.into_iter().map(|x| x.in_file(bt_path.display().to_string()));
        match parse_bt_xml(&text, &names) {
            Ok(tree) => match build_bt_system(&tree, &plugins, &TickConfig { rate_hz, policy }, &bb) {
                Ok(sys) => {
                    hl.extend(sys.plugins);
                    generated = sys.machines;
                    schemas = sys.schemas;
                    timers = sys.timers;
                }
                Err(d) => diags.extend(in_bt(d)),
            },
            Err(d) => diags.extend(in_bt(d)),
        }
    } else if !m.blackboard.is_empty() {
        return Err(manifest_err(base, "a blackboard needs a [bt] section"));
    }
    if diags.iter().any(Diagnostic::is_error) {
        return Err(LoadError::Diagnostics(Diagnostics(diags)));
    }
    let lowered = lower(hl, generated, &schemas, &timers).map_err(LoadError::Diagnostics)?;
    let machines = lowered.machines;
    let v = validate_system_with(&machines, &lowered.schemas);
    if v.iter().any(Diagnostic::is_error) {
        return Err(LoadError::Diagnostics(Diagnostics(v)));
    }
    let (registry, d) = EventRegistry::build_with(&machines, &lowered.schemas);
    if d.iter().any(Diagnostic::is_error) {
        return Err(LoadError::Diagnostics(Diagnostics(d)));
    }
    let mut network = translate(&name, &machines, &registry).map_err(LoadError::Diagnostics)?;
    add_dismiss_edges(&mut network, &registry);

    for (k, v) in &m.constants {
        let c = constant(k, v)
            .ok_or_else(|| manifest_err(base, format!("constants.{k}: only booleans and numbers are supported")))?;
        if network.global(k).is_some() {
            return Err(manifest_err(base, format!("constant `{k}` has the name of a variable")));
        }
        network.constants.push(c);
    }
    let mut seen = BTreeSet::new();
    for p in &m.properties {
        if !seen.insert(&p.name) {
            return Err(manifest_err(base, format!("property `{}` is defined twice", p.name)));
        }
        let formula = Formula::parse(&p.formula)
            .map_err(|e| manifest_err(base, format!("property `{}`: {e}", p.name)))?;
        let query = match p.query.as_deref().unwrap_or("pmin") {
            "pmin" | "Pmin" => Query::Pmin,
            "pmax" | "Pmax" => Query::Pmax,
            q => return Err(manifest_err(base, format!("property `{}`: unknown query `{q}`", p.name))),
        };
        let spec = PropertySpec {
            name: p.name.clone(),
            formula,
            query,
        };
        let prop = compile_property(&spec, &network, p.step_bound)
            .map_err(|d| LoadError::Diagnostics(Diagnostics(vec![d])))?;
        network.properties.push(prop);
    }
    let d = validate_network(&network);
    if d.iter().any(Diagnostic::is_error) {
        return Err(LoadError::Diagnostics(Diagnostics(d)));
    }
    Ok(Model {
        network,
        smc: m.smc.clone(),
        jani_output: m.output.jani.as_ref().map(|p| base.join(p)),
        machines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_fields() {
        let m = Manifest::parse(
            r#"
name = "x"
machines = ["a.scxml"]
[constants]
k = 3
[[properties]]
name = "p"
formula = "F done"
[smc]
confidence = 0.9
"#,
            Path::new("m.toml"),
        )
        .unwrap();
        assert_eq!(m.machines, vec![PathBuf::from("a.scxml")]);
        assert_eq!(m.smc.confidence, Some(0.9));
        assert_eq!(m.properties[0].query, None);
        assert!(Manifest::parse("bogus = 1", Path::new("m.toml")).is_err());
    }

    #[test]
    fn rates_and_constants() {
        assert_eq!(parse_rate(&toml::Value::Integer(10)), Some(Rational64::from_integer(10)));
        assert_eq!(parse_rate(&toml::Value::String("5/2".into())), Some(Rational64::new(5, 2)));
        let c = constant("k", &toml::Value::Integer(5_000_000_000)).unwrap();
        assert!(c.ty.admits(&Value::Int(5_000_000_000)));
        assert!(constant("s", &toml::Value::String("x".into())).is_none());
    }
}
