//! Run configuration: one TOML (or JSON) file holding the physics and the
//! schedule. Flags never change the physics.

use std::path::Path;

use dmrg_core::dmrg::{Stage, SweepSchedule};
use dmrg_core::models::ModelSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSpec,
    pub schedule: Vec<Stage>,
    #[serde(default)]
    pub seed: u64,
    /// Bond dimension of the random initial state.
    #[serde(default = "default_m0")]
    pub m0: usize,
    /// Relative cutoff for MPO compression; 0 keeps the uncompressed
    /// automaton MPO.
    #[serde(default = "default_mpo_cutoff")]
    pub mpo_cutoff: f64,
    #[serde(default = "default_davidson_max_iter")]
    pub davidson_max_iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Bonds `lo..hi` that are timed.
    pub site_range: [usize; 2],
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Run the schedule over the whole chain before timing.
    #[serde(default = "default_true")]
    pub prepare: bool,
}

fn default_m0() -> usize {
    8
}

fn default_mpo_cutoff() -> f64 {
    1e-13
}

fn default_davidson_max_iter() -> usize {
    4
}

fn default_repetitions() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let raw: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        } else {
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        };
        let cfg = Config::from_value(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Decodes a parsed document; errors carry the path of the field.
    pub fn from_value(raw: &serde_json::Value) -> Result<Self, String> {
        serde_path_to_error::deserialize(raw).map_err(|e| {
            let at = e.path().to_string();
            // The tagged model enum reports errors at "model"; find the key.
            let at = match (at.as_str(), raw.get("model")) {
                ("model", Some(m)) => model_key_hint(m).map_or(at, |k| format!("model.{k}")),
                _ => at,
            };
            format!("{at}: {}", e.into_inner())
        })
    }

    /// Semantic checks; every message starts with the offending field.
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        self.model.lattice().map_err(|e| format!("model: {e}"))?;
        self.schedule().validate().map_err(|e| format!("schedule: {e}"))?;
        if self.m0 == 0 {
            return Err("m0: must be at least 1".into());
        }
        if !(self.mpo_cutoff >= 0.0) {
            return Err(format!("mpo_cutoff: must be >= 0 (got {})", self.mpo_cutoff));
        }
        if self.davidson_max_iter == 0 {
            return Err("davidson_max_iter: must be at least 1".into());
        }
        if let Some(b) = &self.bench {
            let bonds = self.model.n_sites().saturating_sub(1);
            let [lo, hi] = b.site_range;
            if lo >= hi || hi > bonds {
                return Err(format!("bench.site_range: [{lo}, {hi}] is not a nonempty range of bonds in 0..{bonds}"));
            }
            if b.repetitions == 0 {
                return Err("bench.repetitions: must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> SweepSchedule {
        SweepSchedule { stages: self.schedule.clone() }
    }

    pub fn mpo_cutoff(&self) -> Option<f64> {
        (self.mpo_cutoff > 0.0).then_some(self.mpo_cutoff)
    }
}

/// First model key whose value has the wrong JSON type.
fn model_key_hint(m: &serde_json::Value) -> Option<String> {
    let obj = m.as_object()?;
    obj.iter().find_map(|(k, v)| {
        let ok = match k.as_str() {
            "kind" => v.is_string(),
            "length" | "width" => v.is_u64(),
            "sz2" | "n_up" | "n_dn" => v.is_i64(),
            "j1" | "j2" | "t" | "u" => v.is_number(),
            _ => return None,
        };
        (!ok).then(|| k.clone())
    })
}
