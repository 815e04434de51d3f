use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

pub const DEFAULT_PROX_MU: f64 = 1e-3;
pub const DEFAULT_SERVER_BETA: f64 = 0.9;
pub const DEFAULT_SERVER_LR: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregatorKind {
    FedAVG,
    FedAVGM,
    FedProx,
    SCAFFOLD,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::FedAVG => "FedAVG",
            AggregatorKind::FedAVGM => "FedAVGM",
            AggregatorKind::FedProx => "FedProx",
            AggregatorKind::SCAFFOLD => "SCAFFOLD",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    #[default]
    BySampleCount,
    Uniform,
}

fn default_fraction() -> f64 {
    1.0
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    /// FedProx proximal weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// FedAVGM server momentum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Server learning rate (FedAVGM, SCAFFOLD).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_lr: Option<f64>,
    /// Keep normalization parameters client-local.
    #[serde(default, skip_serializing_if = "is_false")]
    pub fedbn: bool,
    #[serde(default)]
    pub weighting: Weighting,
    /// Fraction of clients sampled per round.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

impl AggregatorConfig {
    pub fn new(kind: AggregatorKind) -> Self {
        AggregatorConfig {
            kind,
            mu: None,
            beta: None,
            server_lr: None,
            fedbn: false,
            weighting: Weighting::BySampleCount,
            fraction: 1.0,
        }
        .resolved()
    }

    pub fn fedavg() -> Self {
        Self::new(AggregatorKind::FedAVG)
    }

    pub fn fedprox(mu: f64) -> Self {
        AggregatorConfig { mu: Some(mu), ..Self::new(AggregatorKind::FedProx) }
    }

    pub fn fedavgm(beta: f64, server_lr: f64) -> Self {
        AggregatorConfig { beta: Some(beta), server_lr: Some(server_lr), ..Self::new(AggregatorKind::FedAVGM) }
    }

    pub fn scaffold(server_lr: f64) -> Self {
        AggregatorConfig { server_lr: Some(server_lr), ..Self::new(AggregatorKind::SCAFFOLD) }
    }

    /// Rejects fields that do not apply to `kind` and out-of-range values.
    pub fn validate(&self) -> Result<()> {
        use AggregatorKind::*;
        let k = self.kind.name();
        if self.mu.is_some() && self.kind != FedProx {
            return Err(FedError::Config(format!("aggregator.mu does not apply to {k}")));
        }
        if self.beta.is_some() && self.kind != FedAVGM {
            return Err(FedError::Config(format!("aggregator.beta does not apply to {k}")));
        }
        if self.server_lr.is_some() && !matches!(self.kind, FedAVGM | SCAFFOLD) {
            return Err(FedError::Config(format!("aggregator.server_lr does not apply to {k}")));
        }
        if let Some(mu) = self.mu {
            if !(mu >= 0.0) || !mu.is_finite() {
                return Err(FedError::Config(format!("aggregator.mu must be >= 0, got {mu}")));
            }
        }
        if let Some(b) = self.beta {
            if !(0.0..1.0).contains(&b) {
                return Err(FedError::Config(format!("aggregator.beta must be in [0, 1), got {b}")));
            }
        }
        if let Some(lr) = self.server_lr {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(FedError::Config(format!("aggregator.server_lr must be positive, got {lr}")));
            }
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(FedError::Config(format!("aggregator.fraction must be in (0, 1], got {}", self.fraction)));
        }
        Ok(())
    }

    /// Fills kind-specific defaults.
    pub fn resolved(mut self) -> Self {
        match self.kind {
            AggregatorKind::FedProx => {
                self.mu.get_or_insert(DEFAULT_PROX_MU);
            }
            AggregatorKind::FedAVGM => {
                self.beta.get_or_insert(DEFAULT_SERVER_BETA);
                self.server_lr.get_or_insert(DEFAULT_SERVER_LR);
            }
            AggregatorKind::SCAFFOLD => {
                self.server_lr.get_or_insert(DEFAULT_SERVER_LR);
            }
            AggregatorKind::FedAVG => {}
        }
        self
    }

    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or(DEFAULT_PROX_MU)
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(DEFAULT_SERVER_BETA)
    }

    pub fn server_lr(&self) -> f64 {
        self.server_lr.unwrap_or(DEFAULT_SERVER_LR)
    }
}

/// Per-round client training budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalBudget {
    Epochs(usize),
    Steps(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Parameters are rounded through `f32` after initialization and after
    /// every update; arithmetic stays in `f64`.
    F32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inapplicable_fields_rejected() {
        let c = AggregatorConfig { mu: Some(0.1), ..AggregatorConfig::fedavg() };
        assert!(c.validate().unwrap_err().to_string().contains("mu"));
        let c = AggregatorConfig { server_lr: Some(1.0), ..AggregatorConfig::fedprox(0.1) };
        assert!(c.validate().is_err());
        assert!(AggregatorConfig::fedavgm(1.0, 1.0).validate().is_err());
        assert!(AggregatorConfig::fedavgm(0.99, 1.0).validate().is_ok());
        assert!(AggregatorConfig::scaffold(0.0).validate().is_err());
        assert!(AggregatorConfig::fedprox(-1.0).validate().is_err());
    }
}
