use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of both detector stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// K, width of the line embedding.
    pub embed_dim: usize,
    /// M, hidden width of each LSTM direction.
    pub hidden_dim: usize,
    pub blstm_layers: usize,
    /// Width of the whole-code classifier's hidden layer.
    pub classifier_hidden: usize,
    /// Width of the line classifier's hidden layer.
    pub line_hidden: usize,
    pub learning_rate: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub seed: u64,
    /// Applied to the class-1 probability with `>=`.
    pub decision_threshold: f64,
    /// Gate biases in the LSTM cells. Dense layers never have biases.
    pub lstm_bias: bool,
    /// Largest global L2 norm of a per-sequence gradient before the SGD step;
    /// longer gradients are rescaled to this norm. 0 disables clipping.
    pub grad_clip: f64,
    /// Added to the forget-gate biases after the uniform init, so cells start
    /// out keeping most of their state. Ignored without `lstm_bias`.
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden_dim: 64,
            blstm_layers: 1,
            classifier_hidden: 64,
            line_hidden: 64,
            learning_rate: 0.05,
            stage1_epochs: 30,
            stage2_epochs: 30,
            seed: 42,
            decision_threshold: 0.5,
            lstm_bias: true,
            grad_clip: 1.0,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("blstm_layers", self.blstm_layers),
            ("classifier_hidden", self.classifier_hidden),
            ("line_hidden", self.line_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::Config(format!(
                "decision_threshold must lie in (0, 1), got {}",
                self.decision_threshold
            )));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!(
                "grad_clip must be finite and >= 0, got {}",
                self.grad_clip
            )));
        }
        if !self.forget_bias.is_finite() {
            return Err(Error::Config(format!(
                "forget_bias must be finite, got {}",
                self.forget_bias
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.embed_dim, c.hidden_dim, c.blstm_layers), (64, 64, 1));
        assert_eq!(c.learning_rate, 0.05);
        assert_eq!(c.decision_threshold, 0.5);
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = [
            ModelConfig {
                embed_dim: 0,
                ..Default::default()
            },
            ModelConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            ModelConfig {
                decision_threshold: 1.0,
                ..Default::default()
            },
            ModelConfig {
                decision_threshold: 0.0,
                ..Default::default()
            },
            ModelConfig {
                blstm_layers: 0,
                ..Default::default()
            },
            ModelConfig {
                forget_bias: f64::NAN,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
