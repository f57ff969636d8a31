//! Config text, preset expansion and dotted-path overrides.
//!
//! A job config is a TOML tree whose keys mirror [`DistillJobSpec`] field
//! names. Two shorthands are expanded before decoding:
//!
//! ```toml
//! recipe = "A2"                    # a built-in recipe
//! [recipe]                         # or a built-in recipe plus edits
//! base = "C"
//! epochs = 240
//!
//! [dataset]
//! preset = "cifar100"              # dataset defaults plus edits
//! root = "/data/cifar-100-binary"
//! ```
//!
//! Overrides use dotted paths (`recipe.base_lr=3e-3`). A path is valid when it
//! names a field of the schema; missing optional tables are created from
//! schema defaults.

use std::collections::BTreeMap;
use std::path::Path;

use toml::{Table, Value};

use super::job::DistillJobSpec;
use super::recipe::builtin_recipe;
use crate::data::DatasetRef;
use crate::error::{Error, Result};

pub type Overrides = BTreeMap<String, Value>;

fn to_table<T: serde::Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("config types serialize to TOML tables")
}

fn deep_merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => deep_merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn expand_recipe(value: &mut Value) -> Result<()> {
    match value {
        Value::String(name) => {
            *value = Value::Table(to_table(&builtin_recipe(name)?));
        }
        Value::Table(t) => {
            if let Some(base) = t.remove("base") {
                let name = base
                    .as_str()
                    .ok_or_else(|| Error::Config("recipe.base must be a string".into()))?;
                let mut full = to_table(&builtin_recipe(name)?);
                if !t.contains_key("name") {
                    full.insert("name".into(), Value::String(name.to_string()));
                }
                deep_merge(&mut full, std::mem::take(t));
                *t = full;
            }
        }
        _ => return Err(Error::Config("recipe must be a name or a table".into())),
    }
    Ok(())
}

fn expand_dataset(value: &mut Value) -> Result<()> {
    match value {
        Value::String(name) => {
            *value = Value::Table(to_table(&DatasetRef::preset(name)?));
        }
        Value::Table(t) => {
            if let Some(preset) = t.remove("preset") {
                let name = preset
                    .as_str()
                    .ok_or_else(|| Error::Config("dataset.preset must be a string".into()))?;
                let mut full = to_table(&DatasetRef::preset(name)?);
                deep_merge(&mut full, std::mem::take(t));
                *t = full;
            }
        }
        _ => return Err(Error::Config("dataset must be a preset name or a table".into())),
    }
    Ok(())
}

fn expand_presets(tree: &mut Table) -> Result<()> {
    if let Some(r) = tree.get_mut("recipe") {
        expand_recipe(r)?;
    }
    if let Some(d) = tree.get_mut("dataset") {
        expand_dataset(d)?;
    }
    if let Some(Value::Table(stage)) = tree.get_mut("unlabeled_stage") {
        if let Some(pool) = stage.get_mut("pool") {
            expand_dataset(pool)?;
        }
    }
    Ok(())
}

fn decode(tree: Table) -> Result<DistillJobSpec> {
    let spec: DistillJobSpec = Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let violations = spec.validate();
    if violations.is_empty() {
        Ok(spec)
    } else {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(Error::Config(format!("invalid job spec: {}", list.join("; "))))
    }
}

pub fn parse_tree(text: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("malformed config: {e}")))
}

/// Parses config text into a validated spec.
pub fn parse_job(text: &str) -> Result<DistillJobSpec> {
    let mut tree = parse_tree(text)?;
    expand_presets(&mut tree)?;
    decode(tree)
}

pub fn load_job(path: &Path) -> Result<DistillJobSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_job(&text)
}

/// Canonical config text for a spec; `parse_job` reads it back unchanged.
pub fn job_to_toml(spec: &DistillJobSpec) -> String {
    toml::to_string(spec).expect("spec serializes to TOML")
}

/// Parses the value half of `path=value`. TOML literals keep their type;
/// anything else is taken as a bare string.
pub fn parse_override_value(text: &str) -> Value {
    let text = text.trim();
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// Splits a CLI `--set path=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not of the form path=value")))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{arg}` has an empty path")));
    }
    Ok((key.to_string(), parse_override_value(v)))
}

fn coerce(schema: &Value, value: Value) -> Value {
    match (schema, value) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::String(_), Value::Integer(i)) => Value::String(i.to_string()),
        (Value::String(_), Value::Float(f)) => Value::String(f.to_string()),
        (Value::String(_), Value::Boolean(b)) => Value::String(b.to_string()),
        (_, v) => v,
    }
}

fn set_path(tree: &mut Table, schema: &Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut node = tree;
    let mut schema_node = schema;
    for (i, part) in parts.iter().enumerate() {
        let schema_child = schema_node
            .get(*part)
            .ok_or_else(|| Error::ConfigKey(path.to_string()))?;
        if i + 1 == parts.len() {
            node.insert(part.to_string(), coerce(schema_child, value));
            return Ok(());
        }
        let Value::Table(schema_table) = schema_child else {
            return Err(Error::ConfigKey(path.to_string()));
        };
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(schema_table.clone()));
        let Value::Table(child) = entry else {
            return Err(Error::ConfigKey(path.to_string()));
        };
        node = child;
        schema_node = schema_table;
    }
    unreachable!("path has at least one segment")
}

/// Returns `base` with each dotted path replaced, re-validated.
pub fn merge_overrides(base: &DistillJobSpec, overrides: &Overrides) -> Result<DistillJobSpec> {
    if overrides.is_empty() {
        return Ok(base.clone());
    }
    let schema = to_table(&DistillJobSpec::schema());
    let mut tree = to_table(base);
    for (path, value) in overrides {
        set_path(&mut tree, &schema, path, value.clone())?;
    }
    expand_presets(&mut tree)?;
    decode(tree)
}
