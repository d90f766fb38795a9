//! Run configuration: defaults, then a JSON file, then `--set` overrides,
//! then the explicit flags.

use std::path::Path;

use lptb::bench::BenchSpec;
use lptb::liquid::Backend;
use lptb::pyramid::PyramidConfig;
use lptb::synthetic::SyntheticSpec;
use lptb::train::{GradcheckSpec, TrainConfig, DEFAULT_THRESHOLDS};
use lptb::Precision;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub backend: Backend,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            backend: Backend::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub sequence_lengths: Vec<usize>,
    pub backend: Backend,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            sequence_lengths: vec![576, 1152, 2304, 4608],
            backend: Backend::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Concurrent cells; 1 runs the grid serially, 0 runs every cell of a
    /// grid at once.
    pub workers: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub data: SyntheticSpec,
    pub model: PyramidConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchSpec,
    pub scaling: ScalingConfig,
    pub ablation: AblationConfig,
    pub gradcheck: GradcheckSpec,
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides. Values are parsed as JSON and fall back
    /// to plain strings; backend fields also accept a backend name.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self, CliError> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut root = serde_json::to_value(self).expect("config serializes");
        let mut applied = Vec::with_capacity(sets.len());
        for item in sets {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{item}'")))?;
            let path: Vec<&str> = key.split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(CliError::Usage(format!("malformed key '{key}'")));
            }
            let slot = lookup_mut(&mut root, &path).ok_or_else(|| unknown(key))?;
            let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            if let (Value::Object(obj), Value::String(name)) = (&*slot, &value) {
                if obj.contains_key("kind") {
                    let backend: Backend = name.parse().map_err(CliError::Usage)?;
                    value = serde_json::to_value(backend).expect("backend serializes");
                }
            }
            *slot = value;
            applied.push((key, path));
        }
        let resolved: RunConfig =
            serde_json::from_value(root.clone()).map_err(|e| CliError::Usage(format!("--set: {e}")))?;
        // Keys the deserializer silently dropped are unknown too.
        let mut echo = serde_json::to_value(&resolved).expect("config serializes");
        for (key, path) in applied {
            let wanted = lookup_mut(&mut root, &path).cloned();
            let got = lookup_mut(&mut echo, &path).cloned();
            let kept = match (&got, &wanted) {
                (Some(a), Some(b)) => same(a, b),
                _ => false,
            };
            if !kept {
                return Err(unknown(key));
            }
        }
        Ok(resolved)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.bench.seed = seed;
        self.gradcheck.seed = seed;
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        self.bench.precision = precision;
    }
}

fn unknown(key: &str) -> CliError {
    CliError::Usage(format!("unknown config key '{key}'"))
}

/// Structural equality that treats `1` and `1.0` as the same number.
fn same(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| same(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| same(v, w)))
        }
        _ => a == b,
    }
}

fn lookup_mut<'a>(root: &'a mut Value, path: &[&str]) -> Option<&'a mut Value> {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = cur.as_object_mut()?;
        let last = i + 1 == path.len();
        if last && !obj.contains_key(*seg) && obj.contains_key("kind") {
            // Variant fields such as `substeps` exist only for some backends.
            obj.insert(seg.to_string(), Value::Null);
        }
        cur = obj.get_mut(*seg)?;
    }
    Some(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(c: &RunConfig, items: &[&str]) -> Result<RunConfig, CliError> {
        c.with_overrides(&items.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn round_trips() {
        let c = set(
            &RunConfig::default(),
            &["train.epochs=3", "model.levels=4", "train.backend=ode", "data.noise_sigma=1", "data.base_dt=0.1"],
        )
        .unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json(&RunConfig::default().to_json()).unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_overrides() {
        let c = set(
            &RunConfig::default(),
            &["train.epochs=0", "model.decay_sharing=per_channel", "bench.sequence_lengths=[64,128]"],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 0);
        assert_eq!(c.model.decay_sharing, lptb::liquid::DecaySharingMode::PerChannel);
        assert_eq!(c.bench.sequence_lengths, vec![64, 128]);
        let c = set(&c, &["train.backend=ode_euler", "train.backend.substeps=4"]).unwrap();
        assert_eq!(c.train.backend, Backend::OdeEuler { substeps: 4 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let d = RunConfig::default();
        for bad in ["train.epoch=3", "nope=1", "model.levels.x=1", "train.backend.speed=2", "epochs"] {
            assert!(matches!(set(&d, &[bad]), Err(CliError::Usage(_))), "{bad}");
        }
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 1}}"#).is_err());
        assert!(set(&d, &["train.epochs=\"many\""]).is_err());
    }
}
