use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampler, latent-optimization and guidance settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Run latent optimization during the first `stage1_steps` steps.
    pub stage1: bool,
    /// Apply attention fixing guidance from step `stage1_steps` on.
    pub afg: bool,
    pub stage1_steps: usize,
    /// Divergence level above which latent optimization stops pushing.
    pub kl_threshold: f64,
    /// Mask percentile in `[0, 1)`.
    pub percentile: f64,
    /// Logit bonus on a token's own mask.
    pub amplify: f64,
    /// Logit penalty on other tokens' masks.
    pub suppress: f64,
    pub eta_base: f64,
    pub eta_slope: f64,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    /// Keep aggregated maps in the per-step diagnostics.
    pub record_maps: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            steps: 50,
            guidance: 7.5,
            seed: 0,
            stage1: true,
            afg: true,
            stage1_steps: 10,
            kl_threshold: 1.0,
            percentile: 0.9,
            amplify: 3.0,
            suppress: -1e8,
            eta_base: 40.0,
            eta_slope: 20.0,
            kernel_size: 3,
            kernel_sigma: 1.0,
            record_maps: false,
        }
    }
}

impl InferenceConfig {
    /// Plain guided sampling: no latent optimization, no guidance edits.
    pub fn baseline() -> Self {
        InferenceConfig {
            stage1: false,
            afg: false,
            ..Self::default()
        }
    }

    pub fn stage1_only() -> Self {
        InferenceConfig {
            afg: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, train_timesteps: usize) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("inference.{name}"), "must be finite"))
            }
        };
        if self.steps == 0 || self.steps > train_timesteps {
            return Err(Error::config(
                "inference.steps",
                format!("must be in 1..={train_timesteps}"),
            ));
        }
        if self.stage1_steps > self.steps {
            return Err(Error::config(
                "inference.stage1_steps",
                format!("{} exceeds the {} sampler steps", self.stage1_steps, self.steps),
            ));
        }
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(Error::config(
                "inference.percentile",
                format!("must lie in (0, 1), got {}", self.percentile),
            ));
        }
        finite("guidance", self.guidance)?;
        finite("kl_threshold", self.kl_threshold)?;
        finite("amplify", self.amplify)?;
        finite("suppress", self.suppress)?;
        finite("eta_base", self.eta_base)?;
        finite("eta_slope", self.eta_slope)?;
        if self.suppress >= 0.0 {
            return Err(Error::config("inference.suppress", "must be negative"));
        }
        if self.kl_threshold < 0.0 {
            return Err(Error::config("inference.kl_threshold", "must be nonnegative"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("inference.kernel_size", "must be odd"));
        }
        if !(self.kernel_sigma > 0.0 && self.kernel_sigma.is_finite()) {
            return Err(Error::config("inference.kernel_sigma", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = InferenceConfig::default();
        c.validate(200).unwrap();
        assert_eq!((c.stage1_steps, c.kl_threshold, c.percentile), (10, 1.0, 0.9));
        assert_eq!((c.amplify, c.suppress, c.steps, c.guidance), (3.0, -1e8, 50, 7.5));
    }

    #[test]
    fn rejections_name_the_field() {
        let cases = [
            (
                InferenceConfig {
                    stage1_steps: 51,
                    ..Default::default()
                },
                "inference.stage1_steps",
            ),
            (
                InferenceConfig {
                    percentile: 1.0,
                    ..Default::default()
                },
                "inference.percentile",
            ),
            (
                InferenceConfig {
                    suppress: 1.0,
                    ..Default::default()
                },
                "inference.suppress",
            ),
            (
                InferenceConfig {
                    amplify: f64::NAN,
                    ..Default::default()
                },
                "inference.amplify",
            ),
            (
                InferenceConfig {
                    kernel_size: 4,
                    ..Default::default()
                },
                "inference.kernel_size",
            ),
        ];
        for (cfg, field) in cases {
            match cfg.validate(200) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_json_fields_rejected() {
        assert!(serde_json::from_str::<InferenceConfig>(r#"{"gama": 0.5}"#).is_err());
        let c: InferenceConfig = serde_json::from_str(r#"{"percentile": 0.5}"#).unwrap();
        assert_eq!(c.steps, 50);
    }
}
