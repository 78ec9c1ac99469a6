//! Experiment configuration files (TOML) and the bundled recipes.
//!
//! Unknown keys anywhere in the document are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{PhysicsParams, PumpParams};
use crate::protocol::{PulseSequence, PulseStep, SweepParameter, SweepSpec, Trigger};
use crate::readout::{analytic_optimal_threshold, DetectionParams};
use crate::{Error, Result};

pub const RECIPES: [(&str, &str); 3] = [
    ("fig2", include_str!("../recipes/fig2.toml")),
    ("fig4", include_str!("../recipes/fig4.toml")),
    ("fig5", include_str!("../recipes/fig5.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Detection shots per prepared state for `histogram`.
    #[serde(default = "default_shots")]
    pub shots: u32,
    #[serde(default)]
    pub physics: PhysicsParams,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub sequence: SequenceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_shots() -> u32 {
    5000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub bright_rate: f64,
    pub dark_rate: f64,
    pub window: f64,
    pub shelf_lifetime: f64,
    /// Counts at or below read as dark. Defaults to the analytic optimum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<i64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        let d = DetectionParams::default();
        DetectionConfig {
            bright_rate: d.bright_rate,
            dark_rate: d.dark_rate,
            window: d.window,
            shelf_lifetime: d.shelf_lifetime,
            threshold: None,
        }
    }
}

impl DetectionConfig {
    pub fn params(&self) -> DetectionParams {
        DetectionParams {
            bright_rate: self.bright_rate,
            dark_rate: self.dark_rate,
            window: self.window,
            shelf_lifetime: self.shelf_lifetime,
        }
    }

    pub fn threshold(&self) -> i64 {
        self.threshold.unwrap_or_else(|| analytic_optimal_threshold(&self.params()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    #[default]
    Line,
    Immediate,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub trigger: TriggerKind,
    pub trigger_phase: f64,
    pub steps: Vec<StepConfig>,
}

/// One sequence step. Pump fields left out take `physics.pump`; a detect
/// step uses `[detection]`, optionally with its own threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepConfig {
    Pump {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scatter_rate: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pol_impurity: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<f64>,
    },
    IrPulse {
        duration: f64,
        #[serde(default)]
        detuning: f64,
    },
    MicrowavePulse {
        duration: f64,
        #[serde(default)]
        detuning: f64,
    },
    Wait {
        duration: f64,
    },
    Detect {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<i64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// `steps[<k>].<field>` or `trigger.phase`.
    pub parameter: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<f64>,
    /// Number of evenly spaced values from `start` to `stop` inclusive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default = "default_shots_per_point")]
    pub shots_per_point: u32,
}

fn default_shots_per_point() -> u32 {
    100
}

impl SweepConfig {
    pub fn values(&self) -> Result<Vec<f64>> {
        match (&self.values, self.start, self.stop, self.count) {
            (Some(v), None, None, None) => Ok(v.clone()),
            (None, Some(a), Some(b), Some(n)) => Ok(match n {
                0 => Vec::new(),
                1 => vec![a],
                _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
            }),
            _ => Err(Error::Config(
                "sweep needs either `values` or all of `start`, `stop`, `count`".into(),
            )),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn recipe(name: &str) -> Result<Self> {
        let (_, text) = RECIPES.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = RECIPES.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown recipe `{name}`; available: {}", names.join(", ")))
        })?;
        Self::from_toml_str(text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Domain(msg) => Error::Config(msg),
            other => other,
        };
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        self.physics.validate().map_err(cfg)?;
        self.detection.params().validate().map_err(cfg)?;
        if !self.sequence.trigger_phase.is_finite() {
            return Err(Error::Config("sequence.trigger_phase must be finite".into()));
        }
        self.pulse_sequence()?.validate().map_err(cfg)?;
        if let Some(spec) = self.sweep_spec()? {
            spec.validate().map_err(cfg)?;
        }
        Ok(())
    }

    pub fn pulse_sequence(&self) -> Result<PulseSequence> {
        let pump = self.physics.pump;
        let steps = self
            .sequence
            .steps
            .iter()
            .map(|s| match *s {
                StepConfig::Pump {
                    scatter_rate,
                    pol_impurity,
                    duration,
                } => PulseStep::Pump(PumpParams {
                    scatter_rate: scatter_rate.unwrap_or(pump.scatter_rate),
                    pol_impurity: pol_impurity.unwrap_or(pump.pol_impurity),
                    duration: duration.unwrap_or(pump.duration),
                }),
                StepConfig::IrPulse { duration, detuning } => PulseStep::IrPulse { duration, detuning },
                StepConfig::MicrowavePulse { duration, detuning } => PulseStep::MicrowavePulse { duration, detuning },
                StepConfig::Wait { duration } => PulseStep::Wait { duration },
                StepConfig::Detect { threshold } => PulseStep::Detect {
                    params: self.detection.params(),
                    threshold: threshold.unwrap_or_else(|| self.detection.threshold()),
                },
            })
            .collect();
        let trigger = match self.sequence.trigger {
            TriggerKind::Line => Trigger::LineTrigger {
                phase: self.sequence.trigger_phase,
            },
            TriggerKind::Immediate => Trigger::Immediate,
        };
        Ok(PulseSequence::new(steps, trigger))
    }

    pub fn sweep_spec(&self) -> Result<Option<SweepSpec>> {
        let Some(sweep) = &self.sweep else {
            return Ok(None);
        };
        let parameter: SweepParameter = sweep.parameter.parse()?;
        Ok(Some(SweepSpec {
            template: self.pulse_sequence()?,
            parameter,
            values: sweep.values()?,
            shots_per_point: sweep.shots_per_point,
        }))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical serialization, hex encoded. The output
    /// directory is not part of the experiment and is left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    /// First line of every output file.
    pub fn header_comment(&self) -> String {
        format!("# config_hash={} seed={}", self.hash(), self.seed)
    }
}
