//! Engine and token-weighting knobs. Defaults are the full method; every
//! toggle maps to one ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a layer's fused attention updates the running relevance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `R <- R + a * E * R`
    #[default]
    Additive,
    /// `R <- R + (I + a * E) * R`, the composed form read literally.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Softmax temperature over per-head gradient-weighted attention ratios.
    pub fusion_temperature: f64,
    /// Temperature of the depth prior over layers.
    pub depth_temperature: f64,
    /// Fraction of (deepest) layers propagated, in `(0, 1]`.
    pub layer_fraction: f64,
    pub use_depth_prior: bool,
    pub use_layer_relevance: bool,
    /// `false` averages heads uniformly instead of the softmax head weighting.
    pub use_head_weighting: bool,
    pub update_rule: UpdateRule,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            fusion_temperature: 0.5,
            depth_temperature: 0.2,
            layer_fraction: 1.0,
            use_depth_prior: true,
            use_layer_relevance: true,
            use_head_weighting: true,
            update_rule: UpdateRule::Additive,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fusion_temperature > 0.0 && self.fusion_temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "fusion_temperature must be > 0, got {}",
                self.fusion_temperature
            )));
        }
        if !(self.depth_temperature > 0.0 && self.depth_temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "depth_temperature must be > 0, got {}",
                self.depth_temperature
            )));
        }
        if !(self.layer_fraction > 0.0 && self.layer_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "layer_fraction must be in (0, 1], got {}",
                self.layer_fraction
            )));
        }
        Ok(())
    }

    /// Uniform heads, uniform layers: the configuration under which the
    /// engine reduces to TMME propagation.
    pub fn uniform() -> Self {
        Self {
            use_depth_prior: false,
            use_layer_relevance: false,
            use_head_weighting: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenConfig {
    /// Multiply token weights by the generation confidence.
    pub use_token_confidence: bool,
    /// Weight tokens by prompt alignment when aggregating visual saliency.
    pub use_prompt_weighting: bool,
    /// Strength of function-word relevance flow, in `[0, 1]`. Display only.
    pub flow_strength: f64,
    /// Let every earlier token donate flow, not just function words.
    pub flow_all_pairs: bool,
    /// Compute the flow-adjusted token relevance at all.
    pub apply_flow: bool,
    /// Zero the aggregation weight of punctuation-only tokens.
    pub drop_punctuation: bool,
}

impl Default for TokenConfig {
    fn default() -> Self {
        Self {
            use_token_confidence: true,
            use_prompt_weighting: true,
            flow_strength: 0.5,
            flow_all_pairs: false,
            apply_flow: true,
            drop_punctuation: false,
        }
    }
}

impl TokenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flow_strength) {
            return Err(Error::InvalidArgument(format!(
                "flow_strength must be in [0, 1], got {}",
                self.flow_strength
            )));
        }
        Ok(())
    }

    /// Uniform token weights for both modalities.
    pub fn uniform() -> Self {
        Self {
            use_token_confidence: false,
            use_prompt_weighting: false,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = EngineConfig::default();
        assert_eq!(c.fusion_temperature, 0.5);
        assert_eq!(c.depth_temperature, 0.2);
        assert_eq!(c.layer_fraction, 1.0);
        c.validate().unwrap();
        let bad = EngineConfig {
            layer_fraction: 0.0,
            ..c
        };
        assert!(bad.validate().is_err());
        assert!(TokenConfig {
            flow_strength: 1.5,
            ..TokenConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c: EngineConfig = toml::from_str("depth_temperature = 0.5\nupdate_rule = \"literal\"").unwrap();
        assert_eq!(c.depth_temperature, 0.5);
        assert_eq!(c.fusion_temperature, 0.5);
        assert_eq!(c.update_rule, UpdateRule::Literal);
    }
}
