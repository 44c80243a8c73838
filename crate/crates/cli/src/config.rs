//! Run configuration: one flat JSON object covering the model hyper-parameters,
//! the synthetic-corpus generator and the command options.
//!
//! Resolution order is documented default, then the `--config` file, then
//! command-line flags. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use herbrec::corpus::{CorpusFormat, SynthConfig};
use herbrec::error::{Error, Result};
use herbrec::eval::DEFAULT_KS;
use herbrec::recommender::{ModelConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Options owned by the command layer rather than the model or generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub dataset: Option<PathBuf>,
    pub kg: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub artifact: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Training log path; defaults to `train_log.jsonl` inside the artifact.
    pub log: Option<PathBuf>,
    pub format: CorpusFormat,
    pub ks: Vec<usize>,
    pub k: usize,
    /// Share of records used for training; the rest is held out for `eval`.
    pub train_fraction: f64,
    /// Pair threshold of the kernel filter; 0 disables filtering.
    pub kernel_min_count: usize,
    /// Stop after one pruning pass instead of iterating to a fixpoint.
    pub kernel_one_pass: bool,
    pub variants: Vec<Variant>,
    /// Fit ablation variants concurrently.
    pub concurrent_variants: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            dataset: None,
            kg: None,
            labels: None,
            artifact: None,
            out: None,
            log: None,
            format: CorpusFormat::PublicTsv,
            ks: DEFAULT_KS.to_vec(),
            k: 10,
            train_fraction: 0.9,
            kernel_min_count: 10,
            kernel_one_pass: false,
            variants: Variant::ALL.to_vec(),
            concurrent_variants: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub run: RunOptions,
}

fn object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config sections serialize to objects"),
    }
}

fn invalid(message: impl Into<String>) -> Error {
    Error::validation("cli", message)
}

fn section<T: for<'de> Deserialize<'de>>(name: &str, map: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| invalid(format!("{name} settings: {e}")))
}

impl RunConfig {
    /// Reads the config file (if any) and applies `overrides` on top.
    pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self> {
        let mut merged = Map::new();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => merged.extend(m),
                Ok(_) => return Err(invalid(format!("{}: config must be a JSON object", p.display()))),
                Err(e) => return Err(invalid(format!("{}: {e}", p.display()))),
            }
        }
        merged.extend(overrides);
        Self::from_map(merged)
    }

    pub fn from_map(merged: Map<String, Value>) -> Result<Self> {
        let model_keys = object(&ModelConfig::default());
        let synth_keys = object(&SynthConfig::default());
        let run_keys = object(&RunOptions::default());
        let (mut model, mut synth, mut run) = (Map::new(), Map::new(), Map::new());
        let mut unknown = Vec::new();
        for (k, v) in merged {
            if model_keys.contains_key(&k) {
                model.insert(k, v);
            } else if synth_keys.contains_key(&k) {
                synth.insert(k, v);
            } else if run_keys.contains_key(&k) {
                run.insert(k, v);
            } else {
                unknown.push(k);
            }
        }
        if !unknown.is_empty() {
            return Err(invalid(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg = Self { model: section("model", model)?, synth: section("synth", synth)?, run: section("run", run)? };
        cfg.model.validate()?;
        if cfg.run.ks.is_empty() || cfg.run.ks.contains(&0) || cfg.run.k == 0 {
            return Err(invalid("K values must be at least 1"));
        }
        if !(cfg.run.train_fraction > 0.0 && cfg.run.train_fraction <= 1.0) {
            return Err(invalid(format!("train_fraction must lie in (0, 1], got {}", cfg.run.train_fraction)));
        }
        Ok(cfg)
    }

    /// The resolved configuration as one flat object.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut m = object(&self.model);
        m.extend(object(&self.synth));
        m.extend(object(&self.run));
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn with(pairs: &[(&str, Value)]) -> Map<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn sections_share_no_keys() {
        let (a, b, c) = (object(&ModelConfig::default()), object(&SynthConfig::default()), object(&RunOptions::default()));
        assert!(a.keys().all(|k| !b.contains_key(k) && !c.contains_key(k)));
        assert!(b.keys().all(|k| !c.contains_key(k)));
    }

    #[test]
    fn precedence_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, json!({"seed": 5, "epochs": 7}).to_string()).unwrap();
        // (file?, flag?) -> expected seed
        let cases = [(false, None, 0u64), (true, None, 5), (false, Some(9u64), 9), (true, Some(9), 9)];
        for (use_file, flag, want) in cases {
            let ov = flag.map(|s| with(&[("seed", json!(s))])).unwrap_or_default();
            let c = RunConfig::resolve(use_file.then_some(file.as_path()), ov).unwrap();
            assert_eq!(c.model.seed, want, "file={use_file} flag={flag:?}");
            assert_eq!(c.model.epochs, if use_file { 7 } else { ModelConfig::default().epochs });
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_map(with(&[("sead", json!(1)), ("epochs", json!(2))])).unwrap_err();
        assert!(e.to_string().contains("sead"));
        assert!(e.is_input_error());
    }

    #[test]
    fn flat_round_trip() {
        let c = RunConfig::from_map(with(&[("n_records", json!(30)), ("k", json!(8)), ("variant", json!("no_dmsh"))])).unwrap();
        assert_eq!(c.synth.n_records, 30);
        assert_eq!(c.run.k, 8);
        assert_eq!(c.model.variant, Variant::NoDmsh);
        assert_eq!(RunConfig::from_map(c.to_flat()).unwrap(), c);
    }
}
