//! Versioned JSON checkpoints.
//!
//! Parameters are written as decimal numbers using the shortest
//! representation that parses back to the same `f64`, so a load/save cycle
//! reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use whvi::bnn::{Model, NetworkConfig};
use whvi::gp_rff::{GpRffModel, RffConfig, WeightPosterior};
use whvi::params::ParamSet;

use crate::data::{FeatureScaling, SplitConfig};
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Network { config: NetworkConfig },
    GpRff { rff: RffConfig, posterior: WeightPosterior },
}

/// `y_model = (y - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetScaling {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelSpec,
    pub params: ParamSet,
    pub seed: u64,
    pub step: usize,
    pub split: SplitConfig,
    pub input_scaling: FeatureScaling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_scaling: Option<TargetScaling>,
}

impl Checkpoint {
    pub fn network(model: &Model, seed: u64, step: usize, split: SplitConfig, input_scaling: FeatureScaling) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: ModelSpec::Network { config: model.config.clone() },
            params: model.params.clone(),
            seed,
            step,
            split,
            input_scaling,
            target_scaling: None,
        }
    }

    pub fn gp(
        model: &GpRffModel,
        seed: u64,
        step: usize,
        split: SplitConfig,
        input_scaling: FeatureScaling,
        target_scaling: TargetScaling,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: ModelSpec::GpRff { rff: model.rff.clone(), posterior: model.posterior },
            params: model.params.clone(),
            seed,
            step,
            split,
            input_scaling,
            target_scaling: Some(target_scaling),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        if let Some((name, _)) = self.params.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(CliError::Usage(format!("parameter `{name}` is not finite; refusing to write a checkpoint")));
        }
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Usage(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("checkpoint: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CliError::Usage(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_network(&self) -> Result<Model> {
        match &self.model {
            ModelSpec::Network { config } => {
                config.validate()?;
                Ok(Model { config: config.clone(), params: self.params.clone() })
            }
            ModelSpec::GpRff { .. } => Err(CliError::Usage("checkpoint holds a GP model, not a network".into())),
        }
    }

    pub fn to_gp(&self) -> Result<GpRffModel> {
        match &self.model {
            ModelSpec::GpRff { rff, posterior } => {
                rff.check()?;
                Ok(GpRffModel { rff: rff.clone(), posterior: *posterior, params: self.params.clone() })
            }
            ModelSpec::Network { .. } => Err(CliError::Usage("checkpoint holds a network, not a GP model".into())),
        }
    }
}
