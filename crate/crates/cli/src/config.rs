//! Run configuration as a flat map of dotted keys.
//!
//! Each command owns a fixed key set: its top-level keys plus the flattened
//! fields of its config sections (`model.proj_dim`, `train.adamw.beta1`, ...).
//! Values are layered as defaults, then the `--config` file, then flags.
//! Any key outside the command's set is an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use drex::analysis::AnalysisConfig;
use drex::synthetic::SyntheticSpec;
use drex::trainer::TrainConfig;
use drex::FusionConfig;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Model,
    Train,
    Analysis,
    Synth,
}

impl Section {
    fn name(self) -> &'static str {
        match self {
            Section::Model => "model",
            Section::Train => "train",
            Section::Analysis => "analysis",
            Section::Synth => "synth",
        }
    }

    /// Default values, minus the seed, which comes from the top-level `seed`.
    fn defaults(self) -> Value {
        let mut v = match self {
            Section::Model => serde_json::to_value(FusionConfig::default()),
            Section::Train => serde_json::to_value(TrainConfig::default()),
            Section::Analysis => serde_json::to_value(AnalysisConfig::default()),
            Section::Synth => serde_json::to_value(SyntheticSpec::default()),
        }
        .expect("defaults serialize");
        v.as_object_mut()
            .expect("section is an object")
            .remove("seed");
        v
    }
}

/// Top-level keys a command accepts, and their defaults.
pub struct Schema {
    pub command: &'static str,
    pub top: &'static [&'static str],
    pub sections: &'static [Section],
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    command: &'static str,
    values: BTreeMap<String, Value>,
    /// Keys set by the config file or a flag rather than a default.
    explicit: BTreeSet<String>,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                flatten(&format!("{prefix}.{k}"), child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn top_default(key: &str) -> Value {
    match key {
        "seed" => Value::from(0u64),
        _ => Value::Null,
    }
}

impl RunConfig {
    pub fn new(schema: &Schema) -> Self {
        let mut values = BTreeMap::new();
        values.insert("command".to_string(), Value::from(schema.command));
        for &k in schema.top {
            values.insert(k.to_string(), top_default(k));
        }
        for &s in schema.sections {
            flatten(s.name(), &s.defaults(), &mut values);
        }
        Self {
            command: schema.command,
            values,
            explicit: BTreeSet::new(),
        }
    }

    /// Layers a JSON object of dotted keys over the current values.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let parsed: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(map) = parsed else {
            bail!(
                "config {} must be a JSON object of dotted keys",
                path.display()
            );
        };
        for (k, v) in map {
            if k == "command" {
                if v != Value::from(self.command) {
                    bail!(
                        "config {} was written for command {v}, not `{}`",
                        path.display(),
                        self.command
                    );
                }
                continue;
            }
            self.set(&k, v)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value;
                self.explicit.insert(key.to_string());
                Ok(())
            }
            None => Err(anyhow!(
                "unknown config key `{key}` for command `{}`",
                self.command
            )),
        }
    }

    pub fn set_if(&mut self, key: &str, value: Option<Value>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .values
            .get(key)
            .ok_or_else(|| anyhow!("no config key `{key}`"))?;
        serde_json::from_value(v.clone())
            .with_context(|| format!("config key `{key}` has an invalid value {v}"))
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        self.get(key)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)?.ok_or_else(|| {
            anyhow!(
                "`{}` needs --{key} (or `{key}` in the config file)",
                self.command
            )
        })
    }

    /// Deserializes one section, with its seed taken from the top-level key.
    pub fn section<T: DeserializeOwned>(&self, section: Section) -> Result<T> {
        let prefix = format!("{}.", section.name());
        let mut root = Map::new();
        for (k, v) in &self.values {
            if let Some(rest) = k.strip_prefix(&prefix) {
                insert_dotted(&mut root, rest, v.clone());
            }
        }
        if self.values.contains_key("seed") {
            root.insert("seed".into(), self.values["seed"].clone());
        }
        let text = Value::Object(root).to_string();
        let mut de = serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("config key `{}.{path}`: {}", section.name(), e.into_inner())
        })
    }

    /// Replaces a section's values by `value`, failing when a key the user set
    /// explicitly disagrees. Keys in `overridable` keep the user's value.
    pub fn adopt<T: serde::Serialize>(
        &mut self,
        section: Section,
        value: &T,
        origin: &str,
        overridable: &[&str],
    ) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        v.as_object_mut()
            .expect("section is an object")
            .remove("seed");
        let mut flat = BTreeMap::new();
        flatten(section.name(), &v, &mut flat);
        for (k, new) in flat {
            if overridable.contains(&k.as_str()) && self.is_explicit(&k) {
                continue;
            }
            if self.is_explicit(&k) && self.values.get(&k) != Some(&new) {
                bail!(
                    "config key `{k}` = {} conflicts with {origin} ({new})",
                    self.values[&k]
                );
            }
            self.values.insert(k, new);
        }
        Ok(())
    }

    /// Pretty JSON with sorted keys; loading it with `--config` reproduces the run.
    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes");
        s.push('\n');
        s
    }
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, v: Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let child = root
                .entry(head)
                .or_insert_with(|| Value::Object(Map::new()));
            insert_dotted(
                child.as_object_mut().expect("nested key under an object"),
                rest,
                v,
            );
        }
        None => {
            root.insert(key.to_string(), v);
        }
    }
}
