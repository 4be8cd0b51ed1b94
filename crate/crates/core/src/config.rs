//! Pipeline configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptor::DescriptorParams;
use crate::detect::DetectorParams;
use crate::ekf::{FilterParams, NoiseParams};
use crate::error::{Error, Result};
use crate::tracking::TrackingParams;

fn d_init_window() -> f64 {
    0.5
}
fn d_heartbeat() -> f64 {
    0.5
}

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of every random draw in the run (recorded in the report).
    #[serde(default)]
    pub seed: u64,
    /// Accelerometer averaging window for the initial attitude (s).
    #[serde(default = "d_init_window")]
    pub init_window: f64,
    /// Without frames, a trajectory record is still emitted this often (s).
    #[serde(default = "d_heartbeat")]
    pub heartbeat_interval: f64,
    /// Overrides the calibration's dark-noise intensity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dark_noise: Option<f64>,
    #[serde(default)]
    pub detector: DetectorParams,
    #[serde(default)]
    pub descriptor: DescriptorParams,
    #[serde(default)]
    pub tracking: TrackingParams,
    #[serde(default)]
    pub noise: NoiseParams,
    #[serde(default)]
    pub filter: FilterParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            init_window: d_init_window(),
            heartbeat_interval: d_heartbeat(),
            dark_noise: None,
            detector: DetectorParams::default(),
            descriptor: DescriptorParams::default(),
            tracking: TrackingParams::default(),
            noise: NoiseParams::default(),
            filter: FilterParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, &e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.init_window > 0.0 && self.init_window.is_finite()) {
            return Err(Error::Config("init_window must be positive".into()));
        }
        if !(self.heartbeat_interval > 0.0 && self.heartbeat_interval.is_finite()) {
            return Err(Error::Config("heartbeat_interval must be positive".into()));
        }
        if let Some(v) = self.dark_noise {
            crate::descriptor::DarkNoiseModel::new(v)?;
        }
        self.detector.validate()?;
        self.descriptor.validate()?;
        self.tracking.validate()?;
        self.noise.validate()?;
        self.filter.validate()
    }

    /// The configuration that drops the depth modality: visual score map
    /// only and intensity descriptor bits only.
    pub fn vision_only(mut self) -> Self {
        self.detector.gamma = 1.0;
        self.descriptor.mode = crate::descriptor::DescriptorMode::VisualOnly;
        self
    }
}

fn span_hint(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
