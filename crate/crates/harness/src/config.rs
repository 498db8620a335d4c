//! Run configuration: one JSON document with `backend`, `hesitation`,
//! `calibration` and `run` sections. Missing fields take the engine defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use htdc_core::{
    default_sampled_layers, last_k_layers, CalibrationParams, EngineConfig, GateMode, HesitationConfig, HysteresisMode,
    DEFAULT_SIGMA_NOISE,
};

use crate::error::{read_to_string, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub sigma_noise: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            sigma_noise: DEFAULT_SIGMA_NOISE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HesitationSection {
    /// Explicit layer list. `null` picks the upper half of the stack at
    /// stride 2, or every recorded layer for a trace.
    pub sampled_layers: Option<Vec<usize>>,
    /// Use the deepest `k` available layers instead.
    pub layer_depth_k: Option<usize>,
    pub keyword_top_k: usize,
    pub tau_kw: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub tau_spike: f64,
    pub delta: f64,
    pub gate_temperature: f64,
    pub w_min: f64,
}

impl Default for HesitationSection {
    fn default() -> Self {
        let d = HesitationConfig::<f64>::with_layers(Vec::new());
        Self {
            sampled_layers: None,
            layer_depth_k: None,
            keyword_top_k: d.keyword_top_k,
            tau_kw: d.tau_kw,
            alpha: d.alpha,
            gamma: d.gamma,
            tau_spike: d.tau_spike,
            delta: d.delta,
            gate_temperature: d.gate_temperature,
            w_min: d.w_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub lambda_v: f64,
    pub lambda_x: f64,
    pub apc_top_k: usize,
    pub hysteresis_epsilon: f64,
    pub gate_mode: GateMode,
    pub hysteresis_mode: HysteresisMode,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let d = CalibrationParams::<f64>::default();
        Self {
            lambda_v: d.lambda_v,
            lambda_x: d.lambda_x,
            apc_top_k: d.apc_top_k,
            hysteresis_epsilon: d.hysteresis_epsilon,
            gate_mode: d.gate_mode,
            hysteresis_mode: d.hysteresis_mode,
        }
    }
}

/// `regular` decodes with the gate held shut: plain APC-constrained
/// full-branch selection through the same engine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    #[default]
    Htdc,
    Regular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seeds the V0 noise of synthetic backends.
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub decoder: Decoder,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            decoder: Decoder::Htdc,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub backend: BackendSection,
    pub hesitation: HesitationSection,
    pub calibration: CalibrationSection,
    pub run: RunSection,
}

impl HarnessConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = read_to_string(&path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Usage(format!("{}: {e}", path.as_ref().display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks everything that does not depend on the backend.
    pub fn validate(&self) -> Result<()> {
        if !(self.backend.sigma_noise >= 0.0 && self.backend.sigma_noise.is_finite()) {
            return Err(HarnessError::Usage(format!(
                "backend.sigma_noise must be >= 0, got {}",
                self.backend.sigma_noise
            )));
        }
        if self.hesitation.sampled_layers.is_some() && self.hesitation.layer_depth_k.is_some() {
            return Err(HarnessError::Usage(
                "set at most one of hesitation.sampled_layers and hesitation.layer_depth_k".into(),
            ));
        }
        if self.hesitation.layer_depth_k.is_some_and(|k| k < 2) {
            return Err(HarnessError::Usage(
                "hesitation.layer_depth_k must be at least 2".into(),
            ));
        }
        let probe = self.engine_config(&[0, 1], 2)?;
        probe
            .calibration
            .validate()
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
        let mut h = probe.hesitation.clone();
        h.sampled_layers = vec![0, 1];
        h.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
        Ok(())
    }

    /// Sampled layers for a backend exposing `available` out of
    /// `num_layers` layers.
    pub fn sampled_layers(&self, available: &[usize], num_layers: usize) -> Vec<usize> {
        if let Some(j) = &self.hesitation.sampled_layers {
            return j.clone();
        }
        if let Some(k) = self.hesitation.layer_depth_k {
            return last_k_layers(available, k);
        }
        if available.iter().copied().eq(0..num_layers) {
            default_sampled_layers(num_layers)
        } else {
            available.to_vec()
        }
    }

    pub fn engine_config(&self, available: &[usize], num_layers: usize) -> Result<EngineConfig<f64>> {
        let h = &self.hesitation;
        let c = &self.calibration;
        let mut hesitation = HesitationConfig::with_layers(self.sampled_layers(available, num_layers));
        hesitation.keyword_top_k = h.keyword_top_k;
        hesitation.tau_kw = h.tau_kw;
        hesitation.alpha = h.alpha;
        hesitation.gamma = h.gamma;
        hesitation.tau_spike = h.tau_spike;
        hesitation.delta = h.delta;
        hesitation.gate_temperature = h.gate_temperature;
        hesitation.w_min = h.w_min;
        let mut calibration = CalibrationParams {
            lambda_v: c.lambda_v,
            lambda_x: c.lambda_x,
            apc_top_k: c.apc_top_k,
            hysteresis_epsilon: c.hysteresis_epsilon,
            gate_mode: c.gate_mode,
            hysteresis_mode: c.hysteresis_mode,
        };
        if self.run.decoder == Decoder::Regular {
            // w_t never exceeds 1 and the gate needs w_t > w_min.
            hesitation.w_min = 1.0;
            calibration.gate_mode = GateMode::HardThenSoft;
        }
        Ok(EngineConfig {
            hesitation,
            calibration,
        })
    }

    /// SHA-256 of the canonical JSON form. The worker count does not affect
    /// results and is left out.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.run.workers = 0;
        let v = serde_json::to_value(&c).expect("config serialises");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
