use serde::{Deserialize, Serialize};

use super::{Method, Pipeline, Stage};
use crate::error::{Error, Result};
use crate::numerics::IndexSet;

/// One record of a pipeline descriptor document.
///
/// `mask` is a placeholder for the masking stage contributed by an experiment
/// arm. When a descriptor without a placeholder is used for an arm, the arm's
/// mask is prepended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageRecord {
    #[serde(alias = "naive")]
    NaiveMask {
        banset: String,
    },
    Gidle {
        banset: String,
    },
    Mask,
    Temperature {
        t: f64,
    },
    TopK {
        k: usize,
    },
    TopP {
        p: f64,
    },
    RepetitionPenalty {
        gamma: f64,
    },
}

/// Ordered array of [`StageRecord`]s.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PipelineDescriptor(pub Vec<StageRecord>);

impl PipelineDescriptor {
    /// Parses and checks stage parameters. Ban-set paths are not resolved.
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let desc: PipelineDescriptor = serde_json::from_slice(bytes)
            .map_err(|e| Error::Config(format!("pipeline descriptor: {e}")))?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn validate(&self) -> Result<()> {
        let mut placeholders = 0;
        for (i, rec) in self.0.iter().enumerate() {
            let stage = match *rec {
                StageRecord::Temperature { t } => Stage::Temperature(t),
                StageRecord::TopK { k } => Stage::TopK(k),
                StageRecord::TopP { p } => Stage::TopP(p),
                StageRecord::RepetitionPenalty { gamma } => Stage::RepetitionPenalty(gamma),
                StageRecord::Mask => {
                    placeholders += 1;
                    continue;
                }
                StageRecord::NaiveMask { .. } | StageRecord::Gidle { .. } => continue,
            };
            stage.validate().map_err(|e| Error::Stage {
                stage: i,
                source: Box::new(e),
            })?;
        }
        if placeholders > 1 {
            return Err(Error::Config(
                "at most one `mask` placeholder is allowed".into(),
            ));
        }
        Ok(())
    }

    pub fn has_placeholder(&self) -> bool {
        self.0.iter().any(|r| matches!(r, StageRecord::Mask))
    }

    /// Builds a pipeline for `arm`, resolving ban-set paths through `load`.
    ///
    /// The arm's mask replaces the placeholder, or is prepended if there is
    /// none. For [`Method::Baseline`] the placeholder is dropped.
    pub fn resolve<F>(&self, arm: Method, arm_banned: &IndexSet, mut load: F) -> Result<Pipeline>
    where
        F: FnMut(&str) -> Result<IndexSet>,
    {
        self.validate()?;
        let mut stages = Vec::with_capacity(self.0.len() + 1);
        if !self.has_placeholder() {
            stages.extend(arm.mask_stage(arm_banned));
        }
        for rec in &self.0 {
            match rec {
                StageRecord::Mask => stages.extend(arm.mask_stage(arm_banned)),
                StageRecord::NaiveMask { banset } => stages.push(Stage::NaiveMask(load(banset)?)),
                StageRecord::Gidle { banset } => stages.push(Stage::Gidle(load(banset)?)),
                StageRecord::Temperature { t } => stages.push(Stage::Temperature(*t)),
                StageRecord::TopK { k } => stages.push(Stage::TopK(*k)),
                StageRecord::TopP { p } => stages.push(Stage::TopP(*p)),
                StageRecord::RepetitionPenalty { gamma } => {
                    stages.push(Stage::RepetitionPenalty(*gamma))
                }
            }
        }
        Pipeline::new(stages)
    }
}
