//! Flat JSON run configuration. Every model parameter and run setting lives in
//! one namespace; a file only needs the keys it changes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mmfqkd_core::channel::LaunchKind;
use mmfqkd_core::sim::Acquisition;
use mmfqkd_core::ModelParams;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const DEFAULT_DISTANCES_KM: [f64; 10] = [1.0, 2.0, 3.0, 5.0, 7.0, 8.0, 10.0, 12.0, 15.0, 17.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LaunchSelection {
    Underfill,
    Adapter,
    Both,
}

impl LaunchSelection {
    pub fn kinds(self) -> Vec<LaunchKind> {
        match self {
            LaunchSelection::Underfill => vec![LaunchKind::Underfill],
            LaunchSelection::Adapter => vec![LaunchKind::Adapter],
            LaunchSelection::Both => LaunchKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionMode {
    Analytic,
    Expected,
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelParams,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub distances_km: Vec<f64>,
    pub trials: usize,
    pub launch: LaunchSelection,
    pub acquisition: AcquisitionMode,
    /// Symbols per acquisition in event mode.
    pub event_symbols: u64,
    pub stability_distance_km: f64,
    pub stability_launch: LaunchKind,
    pub duration_s: f64,
    pub step_s: f64,
    pub calibration_max_sweeps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelParams::default(),
            seed: 42,
            out_dir: PathBuf::from("out"),
            distances_km: DEFAULT_DISTANCES_KM.to_vec(),
            trials: 5,
            launch: LaunchSelection::Both,
            acquisition: AcquisitionMode::Analytic,
            event_symbols: 10_000_000,
            stability_distance_km: 10.0,
            stability_launch: LaunchKind::Underfill,
            duration_s: 6.0 * 3600.0,
            step_s: 10.0,
            calibration_max_sweeps: 40,
        }
    }
}

/// Settings given on the command line; `None` leaves the file or default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub distances_km: Option<Vec<f64>>,
    pub launch: Option<LaunchSelection>,
    pub trials: Option<usize>,
    pub duration_s: Option<f64>,
    pub step_s: Option<f64>,
}

impl RunConfig {
    pub fn acquisition(&self) -> Acquisition {
        match self.acquisition {
            AcquisitionMode::Analytic => Acquisition::Analytic,
            AcquisitionMode::Expected => Acquisition::Expected,
            AcquisitionMode::Event => Acquisition::Event { symbols: self.event_symbols },
        }
    }

    /// Defaults, then `file` keys, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_json(&text).with_context(|| format!("in config {}", p.display()))?
            }
            None => Self::default(),
        };
        let o = overrides.clone();
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = o.out_dir {
            cfg.out_dir = v;
        }
        if let Some(v) = o.distances_km {
            cfg.distances_km = v;
        }
        if let Some(v) = o.launch {
            cfg.launch = v;
        }
        if let Some(v) = o.trials {
            cfg.trials = v;
        }
        if let Some(v) = o.duration_s {
            cfg.duration_s = v;
        }
        if let Some(v) = o.step_s {
            cfg.step_s = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Merge a flat JSON object over the defaults; unknown keys are rejected.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let given: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let Value::Object(given) = given else { bail!("config must be a JSON object") };
        let Value::Object(mut merged) = serde_json::to_value(Self::default())? else { unreachable!("struct serialises to an object") };
        let mut unknown: Vec<&String> = given.keys().filter(|k| !merged.contains_key(*k)).collect();
        if !unknown.is_empty() {
            unknown.sort();
            bail!("unknown config keys: {}", unknown.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", "));
        }
        merged.extend(given);
        serde_json::from_value(Value::Object(merged)).context("invalid config value")
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        let v = serde_json::to_value(self)?;
        let Value::Object(m) = v else { unreachable!("struct serialises to an object") };
        // sorted keys keep files diff-friendly and deterministic
        let sorted: Map<String, Value> = m.into_iter().collect::<std::collections::BTreeMap<_, _>>().into_iter().collect();
        Ok(serde_json::to_string_pretty(&Value::Object(sorted))? + "\n")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        if self.distances_km.is_empty() || self.distances_km.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            bail!("distances must be a non-empty list of positive numbers, got {:?}", self.distances_km);
        }
        if self.trials == 0 {
            bail!("trials must be >= 1");
        }
        if self.acquisition == AcquisitionMode::Event && self.event_symbols == 0 {
            bail!("event_symbols must be >= 1");
        }
        if !(self.stability_distance_km.is_finite() && self.stability_distance_km > 0.0) {
            bail!("stability_distance_km must be positive");
        }
        if !(self.step_s > 0.0 && self.duration_s >= self.step_s) {
            bail!("need step_s > 0 and duration_s >= step_s (got {} and {})", self.step_s, self.duration_s);
        }
        if self.calibration_max_sweeps == 0 {
            bail!("calibration_max_sweeps must be >= 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips() {
        let mut c = RunConfig::default();
        c.model.channel.coupling_per_km = 0.123;
        c.trials = 3;
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_json(r#"{"trials": 2, "colour": "red"}"#).unwrap_err();
        assert!(e.to_string().contains("colour"));
    }

    #[test]
    fn partial_file_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"trials": 3, "seed": 9, "mu_signal": 0.5}"#).unwrap();
        let c = RunConfig::load(Some(&p), &Overrides { seed: Some(1), ..Default::default() }).unwrap();
        assert_eq!((c.trials, c.seed), (3, 1));
        assert_eq!(c.model.protocol.intensities.signal, 0.5);
        assert_eq!(c.model.channel, ModelParams::default().channel);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_json(r#"{"distances_km": [1, -2]}"#).and_then(|c| c.validate()).is_err());
        assert!(RunConfig::from_json(r#"{"trials": "many"}"#).is_err());
        assert!(RunConfig::from_json("[1]").is_err());
    }
}
