//! Run configuration. Every field has a default and unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::ExplainConfig;
use crate::extract::{ExtractionOptions, Strategy, DEFAULT_PATCH_SIDE, DEFAULT_WORKING_DIMS};
use crate::gat::GATConfig;
use crate::graph::DEFAULT_K;
use crate::tensor::AdamConfig;
use crate::vit::ViTConfig;
use crate::volume::{Dims, SyntheticParams};

/// Version of the configuration and run-directory schema.
pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub strategy: Strategy,
    pub mask_to_roi: bool,
    pub working_dims: Dims,
    pub patch_side: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            strategy: Strategy::Atlas,
            mask_to_roi: false,
            working_dims: DEFAULT_WORKING_DIMS,
            patch_side: DEFAULT_PATCH_SIDE,
        }
    }
}

impl ExtractionConfig {
    pub fn options(&self) -> ExtractionOptions {
        ExtractionOptions {
            patch_side: self.patch_side,
            mask_to_roi: self.mask_to_roi,
        }
    }
}

/// Optimizer and schedule of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate, self.weight_decay)
    }

    fn validate(&self, section: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{section}.batch_size must be positive")));
        }
        self.adam()
            .validate()
            .map_err(|e| Error::Config(format!("{section}: {e}")))
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-5,
            weight_decay: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitSection {
    /// `patch_side` and `n_patches` are taken from the extraction.
    pub model: ViTConfig,
    pub training: TrainingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatSection {
    /// `input_dim` is taken from the ViT embedding width.
    pub model: GATConfig,
    pub training: TrainingConfig,
}

impl Default for GatSection {
    fn default() -> Self {
        GatSection {
            model: GATConfig::default(),
            training: TrainingConfig {
                epochs: 100,
                batch_size: 16,
                learning_rate: 5e-4,
                weight_decay: 3e-5,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub k: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection { k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub folds: usize,
    /// Root of the fold, model and dropout streams.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { folds: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: SyntheticParams,
    pub extraction: ExtractionConfig,
    pub vit: VitSection,
    pub graph: GraphSection,
    pub gat: GatSection,
    pub eval: EvalSection,
    pub explain: ExplainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// ViT config with the geometry implied by the extraction.
    pub fn vit_model(&self, n_patches: usize) -> ViTConfig {
        ViTConfig {
            patch_side: self.extraction.patch_side,
            n_patches,
            ..self.vit.model.clone()
        }
    }

    pub fn gat_model(&self) -> GATConfig {
        GATConfig {
            input_dim: self.vit.model.embed_dim,
            ..self.gat.model.clone()
        }
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.dataset
            .validate()
            .map_err(|e| Error::Config(format!("dataset: {e}")))?;
        if self.extraction.patch_side == 0 {
            return Err(Error::Config("extraction.patch_side must be positive".into()));
        }
        self.vit_model(1).validate()?;
        self.gat_model().validate()?;
        self.vit.training.validate("vit.training")?;
        self.gat.training.validate("gat.training")?;
        if self.graph.k == 0 {
            return Err(Error::Config("graph.k must be positive".into()));
        }
        if self.eval.folds < 2 {
            return Err(Error::Config("eval.folds must be at least 2".into()));
        }
        self.explain.validate()
    }
}
