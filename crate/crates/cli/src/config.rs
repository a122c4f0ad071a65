//! Run configuration: defaults, JSON files, `key=value` overrides and the
//! canonical hash.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use sdseg_core::ae::{AeConfig, AeTrainConfig};
use sdseg_core::diffusion::ReverseSpec;
use sdseg_core::model::SdSegConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_test: 64,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Repeated inferences for the stability protocol.
    pub stability_runs: usize,
    pub curve_steps: Vec<usize>,
    /// Reverse process for ablation arms trained without the latent term.
    pub lambda0_reverse: ReverseSpec,
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            stability_runs: 5,
            curve_steps: vec![1, 2, 5, 10, 25, 50],
            lambda0_reverse: ReverseSpec::Ddim { steps: 10 },
            chunk: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; copied into every training config.
    pub seed: u64,
    pub data: DataConfig,
    pub ae: AeConfig,
    pub ae_train: AeTrainConfig,
    pub sdseg: SdSegConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            ae: AeConfig::default(),
            ae_train: AeTrainConfig::default(),
            sdseg: SdSegConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (partial JSON merged over defaults), then
    /// overrides in order, then `seed`.
    pub fn build(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
            let patch: Value = serde_json::from_str(&text)
                .with_context(|| format!("{}: invalid JSON", path.display()))?;
            merge(&mut v, patch);
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        if let Some(s) = seed {
            v["seed"] = Value::from(s);
        }
        let mut cfg: Self = serde_json::from_value(v).context("invalid configuration")?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        cfg.ae_train.seed = cfg.seed;
        cfg.sdseg.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn canonical_json(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn hash(&self) -> String {
        digest(&self.canonical_json())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Dotted paths to every leaf whose last segment is `key`.
fn find_leaf(v: &Value, key: &str, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            if k == key && !child.is_object() {
                out.push(path.clone());
            }
            find_leaf(child, key, &path, out);
        }
    }
}

/// `path=value` where `path` is dotted (`sdseg.lambda`) or a bare leaf name
/// that is unique in the config (`lambda`). `value` is JSON, or a plain
/// string when it does not parse as JSON.
pub fn apply_override(v: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not key=value"))?;
    let key = key.trim();
    let path = if key.contains('.') || v.get(key).is_some() {
        key.to_string()
    } else {
        let mut hits = Vec::new();
        find_leaf(v, key, "", &mut hits);
        match hits.len() {
            0 => bail!("unknown config key {key:?}"),
            1 => hits.remove(0),
            _ => bail!(
                "config key {key:?} is ambiguous; use one of {}",
                hits.join(", ")
            ),
        }
    };
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *v;
    for part in path.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| anyhow!("unknown config key {path:?}"))?;
    }
    *slot = value;
    Ok(())
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sort(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(v)).expect("value serializes")
}

pub fn digest(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::build(None, &[], None).unwrap();
        assert_eq!(c, RunConfig::default());
        let back: RunConfig = serde_json::from_str(&c.canonical_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn hash_is_stable_under_key_reordering() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        std::fs::write(&a, r#"{"seed": 3, "sdseg": {"lambda": 0.0, "steps": 10}}"#).unwrap();
        std::fs::write(&b, r#"{"sdseg": {"steps": 10, "lambda": 0.0}, "seed": 3}"#).unwrap();
        let ca = RunConfig::build(Some(&a), &[], None).unwrap();
        let cb = RunConfig::build(Some(&b), &[], None).unwrap();
        assert_eq!(ca.hash(), cb.hash());
        assert_ne!(ca.hash(), RunConfig::default().hash());
        assert_eq!(ca.sdseg.seed, 3);
    }

    #[test]
    fn overrides_resolve_bare_and_dotted_keys() {
        let c = RunConfig::build(
            None,
            &[
                "lambda=0".into(),
                "sdseg.reverse=ddim:10".into(),
                "ae.channels=8".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(c.sdseg.lambda, 0.0);
        assert_eq!(c.sdseg.reverse, ReverseSpec::Ddim { steps: 10 });
        assert_eq!(c.ae.channels, 8);
        assert_eq!((c.seed, c.ae_train.seed), (9, 9));
    }

    #[test]
    fn override_errors() {
        let err = RunConfig::build(None, &["lr=1".into()], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("ambiguous"), "{err}");
        assert!(RunConfig::build(None, &["nope=1".into()], None).is_err());
        assert!(RunConfig::build(None, &["lambda".into()], None).is_err());
        assert!(RunConfig::build(None, &["lambda=\"x\"".into()], None).is_err());
        assert!(RunConfig::build(None, &["schema_version=2".into()], None).is_err());
    }

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v: Value =
            serde_json::from_str(r#"{"b": {"z": 1, "a": [ {"y": 2, "x": 1} ]}, "a": null}"#)
                .unwrap();
        assert_eq!(
            canonical_json(&v),
            r#"{"a":null,"b":{"a":[{"x":1,"y":2}],"z":1}}"#
        );
    }
}
