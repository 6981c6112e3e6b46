//! JSON run configuration: strict parsing (unknown keys rejected) and the
//! named architecture presets the CLI exposes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionVariant};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::pyramid::BackboneSpec;
use crate::synth::SyntheticSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum DataConfig {
    #[serde(rename = "synthetic")]
    Synthetic(SyntheticSpec),
    /// Directory holding raw f32 images and a manifest.
    #[serde(rename = "dir")]
    Dir(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn default_out_dir() -> String {
    "runs/default".into()
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let DataConfig::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.num_classes() != self.model.num_classes {
                return Err(Error::Config(format!(
                    "synthetic data has {} classes, model expects {}",
                    spec.num_classes(),
                    self.model.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Desk-scale run used by the verification suite: a two-level pyramid on
    /// the synthetic multi-granularity set.
    pub fn toy(variant: AttentionVariant, seed: u64) -> Self {
        RunConfig {
            seed,
            out_dir: "runs/toy".into(),
            model: ModelSpec {
                backbone: BackboneSpec::toy(),
                attention: AttentionConfig::new(variant, 2, 2),
                num_classes: 8,
                smooth_top: false,
            },
            train: TrainConfig {
                lr0: 0.05,
                lr_decay_epochs: vec![40, 60],
                lr_decay_factor: 0.2,
                momentum: 0.9,
                weight_decay: 5e-4,
                batch_size: 16,
                epochs: 80,
                augment: true,
            },
            data: DataConfig::Synthetic(SyntheticSpec {
                image_size: 32,
                species: 4,
                classes_per_species: 2,
                train_per_class: 12,
                val_per_class: 4,
                noise: 0.05,
            }),
        }
    }
}

/// Full-scale and desk-scale architecture presets.
pub fn arch_names() -> &'static [&'static str] {
    &[
        "fpn18",
        "apn-ca18",
        "apn-sca18",
        "apn-csca18",
        "apn-csca-theta18",
        "apn-csca-theta-plus18",
        "fpn34",
        "apn-ca34",
        "apn-csca34",
        "apn-csca-theta34",
        "apn-csca-theta-plus34",
        "toy-fpn",
        "toy-csca",
    ]
}

pub fn arch_spec(name: &str) -> Result<ModelSpec> {
    let (backbone, variant) = match name {
        "fpn18" => (BackboneSpec::resnet18(), AttentionVariant::None),
        "apn-ca18" => (BackboneSpec::resnet18(), AttentionVariant::Ca),
        "apn-sca18" => (BackboneSpec::resnet18(), AttentionVariant::ScaAlpha),
        "apn-csca18" => (BackboneSpec::resnet18(), AttentionVariant::CscaAlpha),
        "apn-csca-theta18" => (BackboneSpec::resnet18(), AttentionVariant::CscaTheta),
        "apn-csca-theta-plus18" => (BackboneSpec::resnet18(), AttentionVariant::CscaThetaPlus),
        "fpn34" => (BackboneSpec::resnet34(), AttentionVariant::None),
        "apn-ca34" => (BackboneSpec::resnet34(), AttentionVariant::Ca),
        "apn-csca34" => (BackboneSpec::resnet34(), AttentionVariant::CscaAlpha),
        "apn-csca-theta34" => (BackboneSpec::resnet34(), AttentionVariant::CscaTheta),
        "apn-csca-theta-plus34" => (BackboneSpec::resnet34(), AttentionVariant::CscaThetaPlus),
        "toy-fpn" | "toy-csca" => {
            let variant = if name == "toy-fpn" {
                AttentionVariant::None
            } else {
                AttentionVariant::CscaAlpha
            };
            return Ok(ModelSpec {
                backbone: BackboneSpec::toy(),
                attention: AttentionConfig::new(variant, 2, 2),
                num_classes: 8,
                smooth_top: false,
            });
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown architecture '{name}'; valid names: {}",
                arch_names().join(", ")
            )))
        }
    };
    Ok(ModelSpec {
        backbone,
        attention: AttentionConfig::new(variant, 16, 8),
        num_classes: 98,
        smooth_top: false,
    })
}

/// Map the CLI variant flag onto an attention variant.
pub fn variant_from_flag(flag: &str) -> Result<AttentionVariant> {
    Ok(match flag {
        "none" => AttentionVariant::None,
        "ca" => AttentionVariant::Ca,
        "sca" => AttentionVariant::ScaAlpha,
        "csca" => AttentionVariant::CscaAlpha,
        "csca-theta" => AttentionVariant::CscaTheta,
        "csca-theta-plus" => AttentionVariant::CscaThetaPlus,
        _ => {
            return Err(Error::Config(format!(
                "unknown variant '{flag}'; valid: none, ca, sca, csca, csca-theta, csca-theta-plus"
            )))
        }
    })
}
