//! Run configuration with the frozen defaults every stage shares. A config
//! file may set any subset of fields; the rest fall back to defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NumioError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Weight on the pooled-descriptor alignment term.
    pub lambda_pal: f64,
    /// Weight on the contrastive term.
    pub alpha: f64,
    /// Weight on the transport term.
    pub beta: f64,
    /// Softmax temperature for patch saliency.
    pub tau_attn: f64,
    /// Cumulative mass retained by top-mass truncation.
    pub rho: f64,
    /// Number of final decoder layers whose attention is aggregated.
    pub last_k: usize,
    /// Contrastive softmax temperature.
    pub nce_temp: f64,
    /// Entropic regularization strength.
    pub ot_eps: f64,
    /// Fixed alternating-update count for the transport solver.
    pub ot_iters: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda_pal: 0.5,
            alpha: 0.3,
            beta: 0.5,
            tau_attn: 1.0,
            rho: 0.5,
            last_k: 2,
            nce_temp: 0.07,
            ot_eps: 0.05,
            ot_iters: 30,
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), NumioError> {
        let nonneg = [
            ("lambda_pal", self.lambda_pal),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(NumioError::Config(format!("{name} must be a nonnegative float, got {v}")));
            }
        }
        if !(self.tau_attn.is_finite() && self.tau_attn > 0.0) {
            return Err(NumioError::Config(format!("tau_attn must be positive, got {}", self.tau_attn)));
        }
        if !(self.rho.is_finite() && self.rho > 0.0 && self.rho <= 1.0) {
            return Err(NumioError::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.last_k == 0 {
            return Err(NumioError::Config("last_k must be at least 1".into()));
        }
        if !(self.nce_temp.is_finite() && self.nce_temp > 0.0) {
            return Err(NumioError::Config(format!("nce_temp must be positive, got {}", self.nce_temp)));
        }
        if !(self.ot_eps.is_finite() && self.ot_eps > 0.0) {
            return Err(NumioError::Config(format!("ot_eps must be positive, got {}", self.ot_eps)));
        }
        if self.ot_iters == 0 {
            return Err(NumioError::Config("ot_iters must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, NumioError> {
    let text = fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<(), NumioError> {
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(path, text + "\n")?;
    Ok(())
}
