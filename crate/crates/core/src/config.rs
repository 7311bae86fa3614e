//! On-disk experiment configuration (a single JSON document).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{model_by_name, InitialLaw, Model, Payoff, MODEL_NAMES};
use crate::schemes::{InitialMeasure, SchemeKind};

/// Settings for references that need a fine classical run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSettings {
    pub particles: u64,
    pub level: usize,
    pub seed: u64,
    /// Step of the moment-ODE solver.
    pub h_ref: f64,
    /// A known value; used as is when present.
    pub value: Option<f64>,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        Self {
            particles: 1_000_000,
            level: 9,
            seed: 0,
            h_ref: 1e-4,
            value: None,
        }
    }
}

/// Settings for the conditional variance diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSettings {
    pub picard_steps: usize,
    pub levels: usize,
    /// Coupled pairs per Picard step and level.
    pub samples: u64,
}

impl Default for DiagnoseSettings {
    fn default() -> Self {
        Self {
            picard_steps: 4,
            levels: 6,
            samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: String,
    pub method: SchemeKind,
    /// Payoff descriptor; the model default when absent.
    pub payoff: Option<String>,
    /// Replaces the model's initial law when present.
    pub initial_law: Option<InitialLaw>,
    /// Replaces the model's horizon when present.
    pub horizon: Option<f64>,
    pub epsilons: Vec<f64>,
    pub c: f64,
    pub replications: usize,
    pub seed: u64,
    pub initial_measure: InitialMeasure,
    pub drift_clamp: Option<[f64; 2]>,
    pub reference: ReferenceSettings,
    pub diagnose: DiagnoseSettings,
    pub output_dir: Option<String>,
    /// Worker threads; `0` uses the available parallelism.
    pub workers: usize,
    /// Record wall-clock time; when off, timings are written as 0.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "kuramoto".into(),
            method: SchemeKind::PicardMlmc,
            payoff: None,
            initial_law: None,
            horizon: None,
            epsilons: vec![0.1],
            c: 1.0,
            replications: 10,
            seed: 0,
            initial_measure: InitialMeasure::FrozenInitial,
            drift_clamp: None,
            reference: ReferenceSettings::default(),
            diagnose: DiagnoseSettings::default(),
            output_dir: None,
            workers: 1,
            timing: true,
        }
    }
}

/// Keys that affect how a run executes but not what it computes.
const EXECUTION_KEYS: &[&str] = &["workers", "output_dir", "timing"];

impl ExperimentConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !MODEL_NAMES.contains(&self.model.as_str()) {
            return Err(Error::parameter(format!(
                "unknown model `{}` (expected one of {})",
                self.model,
                MODEL_NAMES.join(", ")
            )));
        }
        if self.epsilons.is_empty() {
            return Err(Error::parameter("at least one epsilon is required"));
        }
        let threshold = (-1.0f64).exp();
        if let Some(e) = self.epsilons.iter().find(|&&e| !(e > 0.0 && e < threshold)) {
            return Err(Error::parameter(format!("epsilon must be < e^-1 ≈ {threshold:.6} and positive, got {e}")));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::parameter(format!("c must be positive, got {}", self.c)));
        }
        if self.replications == 0 {
            return Err(Error::parameter("replications must be at least 1"));
        }
        if let Some(t) = self.horizon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::parameter(format!("horizon must be positive, got {t}")));
            }
        }
        if let Some([lo, hi]) = self.drift_clamp {
            if !(lo <= hi) {
                return Err(Error::parameter("drift clamp needs lo <= hi"));
            }
        }
        if self.diagnose.samples < 2 || self.diagnose.picard_steps == 0 {
            return Err(Error::parameter("diagnose needs at least one Picard step and two samples"));
        }
        if self.reference.value.is_some_and(|v| !v.is_finite()) {
            return Err(Error::parameter("reference value must be finite"));
        }
        if self.reference.particles == 0 || !(self.reference.h_ref > 0.0) {
            return Err(Error::parameter("reference settings must be positive"));
        }
        self.resolved_model().map(|_| ())
    }

    /// The model with payoff, initial law and horizon overrides applied.
    pub fn resolved_model(&self) -> Result<Model> {
        let mut model = model_by_name(&self.model)?;
        if let Some(p) = &self.payoff {
            model = model.with_payoff(Payoff::parse(p)?);
        }
        if let Some(law) = &self.initial_law {
            law.sampler()?;
            if law.dim() != model.dim() {
                return Err(Error::parameter(format!(
                    "initial law has dimension {}, model `{}` has dimension {}",
                    law.dim(),
                    model.name,
                    model.dim()
                )));
            }
            model = model.with_initial_law(law.clone());
        }
        if let Some(t) = self.horizon {
            model.horizon = t;
        }
        Ok(model)
    }

    /// Canonical compact JSON of the fields that determine the data: keys
    /// sorted, execution-only keys removed.
    pub fn reproducible_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            for key in EXECUTION_KEYS {
                map.remove(*key);
            }
        }
        serde_json::to_string(&value).expect("value serializes")
    }
}
