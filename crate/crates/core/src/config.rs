//! Flat textual configuration: `key = value` lines with dotted keys.
//!
//! Blank lines and `#` comments are ignored. Every known key has a default;
//! unknown keys are rejected so typos fail loudly. Command-line overrides use
//! the same `key=value` form.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Known keys with their defaults and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("data.frames", "8", "frames per clip"),
    ("data.height", "16", "frame height in pixels"),
    ("data.width", "16", "frame width in pixels"),
    ("data.verbs", "4", "motion vocabulary size"),
    ("data.nouns", "4", "shape vocabulary size"),
    ("data.per_pair", "200", "samples per (verb, noun) pair"),
    ("data.max_objects", "2", "most objects rendered per clip"),
    ("data.jitter", "0.02", "detection jitter std (normalized units)"),
    ("data.drop", "0.05", "detection drop probability"),
    ("data.noise", "0.8", "background noise amplitude"),
    ("data.polarity", "fixed", "group: second noun group drawn dark on bright; fixed: all bright on dark"),
    ("model.patch_t", "2", "temporal patch extent"),
    ("model.patch_h", "4", "patch height"),
    ("model.patch_w", "4", "patch width"),
    ("model.dim", "24", "token width d"),
    ("model.heads", "4", "attention heads"),
    ("model.depth", "3", "number of layers"),
    ("model.mlp_ratio", "4", "MLP hidden width as a multiple of d"),
    ("model.attention_variant", "joint", "joint | divided | trajectory"),
    ("model.dropout", "0.5", "dropout before the classifier"),
    ("model.det_classes", "0", "RoI detection head classes (0 disables)"),
    ("orvit.layers", "1", "layer indices replaced by ORViT blocks"),
    ("orvit.num_objects", "2", "object slots O"),
    ("orvit.d_odm", "0", "object-dynamics width (0 means d)"),
    ("orvit.roi_size", "3", "RoIAlign output side"),
    ("orvit.roi_samples", "2", "RoIAlign samples per bin side"),
    ("orvit.attention_variant", "joint", "R-stream attention variant"),
    ("orvit.eq2_ordering", "pool_first", "pool_first | mlp_first"),
    ("orvit.odm", "true", "enable the object-dynamics stream"),
    ("orvit.combine", "sum", "stream combination (only sum is implemented)"),
    ("train.epochs", "8", "training epochs"),
    ("train.lr", "3e-3", "Adam learning rate"),
    ("train.batch", "16", "samples per step"),
    ("train.boxes", "gt", "gt | tracked"),
    ("train.box_mode", "none", "none | all | null | grid | random | shuffle"),
    ("train.corrupt", "both", "both | eval (corrupt boxes only at evaluation)"),
    ("tracker.iou_threshold", "0.3", "SORT match gate"),
    ("tracker.max_age", "3", "frames a track survives without a match"),
    ("tracker.min_hits", "1", "hits before a track is reported"),
    ("harness.wallclock", "false", "record wall-clock seconds in reports"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Builder-style override for code and tests. Panics on an unknown key.
    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.set(key, &value.to_string()).unwrap_or_else(|e| panic!("{e}"));
        self
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::config(format!("unknown config key {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| Error::config(format!("{key} = {raw:?} does not parse")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::config(format!("{key} = {other:?} is not a boolean"))),
        }
    }

    /// Comma-separated list; an empty value or `none` is the empty list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key)?;
        if raw.is_empty() || raw == "none" {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::config(format!("{key}: bad list element {s:?}"))))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Short stable digest of the resolved configuration, excluding `seed`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if k != "seed" {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn keys_differing(&self, other: &Config) -> Vec<String> {
        self.values.iter().filter(|(k, v)| other.values.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
    }
}

/// Text for a checkpoint's MANIFEST: each key, its value and description.
pub fn manifest_text(cfg: &Config) -> String {
    let mut out = String::from("# checkpoint manifest: parameter tensors are <name>.orvt, config is config.txt\n");
    for (k, _, desc) in KEYS {
        out.push_str(&format!("{k} = {}  # {desc}\n", cfg.values[*k]));
    }
    out
}
