//! Run manifests: one document describing a whole experiment.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gidle_core::decode::SamplerKind;
use gidle_core::processors::{Method, PipelineDescriptor};
use gidle_core::toylm::{DEFAULT_ALPHA, DEFAULT_ORDER};
use gidle_core::vocab::{BanMode, BanSpec, ScriptName};
use gidle_core::{Error, Result};

pub const DEFAULT_MAX_TOKENS: usize = 64;

/// Either an explicit list or a half-open range written `"start..end"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range(String),
}

impl Seeds {
    pub fn expand(&self) -> Result<Vec<u64>> {
        match self {
            Seeds::List(v) => Ok(v.clone()),
            Seeds::Range(s) => parse_seeds(s),
        }
    }
}

/// Parses `"0..50"` or `"1,2,3"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let start: u64 = a.trim().parse().map_err(|_| bad())?;
        let end: u64 = b.trim().parse().map_err(|_| bad())?;
        if end <= start || end - start > 1_000_000 {
            return Err(bad());
        }
        return Ok((start..end).collect());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub table_model: Option<PathBuf>,
    #[serde(default)]
    pub order: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub ban_spec: BanSpec,
    #[serde(default)]
    pub pipeline: PipelineDescriptor,
    #[serde(default)]
    pub sampler: Option<SamplerKind>,
    #[serde(default)]
    pub seeds: Option<Seeds>,
    #[serde(default)]
    pub prompts: Vec<String>,
    #[serde(default)]
    pub max_tokens: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub allowed_scripts: Option<BTreeSet<ScriptName>>,
    #[serde(default)]
    pub arms: Option<Vec<Method>>,
    #[serde(default)]
    pub full_trace: bool,
}

impl RunManifest {
    /// Parses a manifest document. Paths stay as written.
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let m: RunManifest = serde_json::from_slice(bytes)
            .map_err(|e| Error::Manifest(format!("run manifest: {e}")))?;
        m.pipeline.validate()?;
        if let Some(seeds) = &m.seeds {
            seeds.expand()?;
        }
        Ok(m)
    }

    /// Loads a manifest and makes its relative paths relative to the
    /// manifest's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut m = Self::from_json_slice(&bytes)
            .map_err(|e| Error::Manifest(format!("{}: {}", path.display(), e.root())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        m.rebase(base);
        Ok(m)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.vocabulary,
            &mut self.corpus,
            &mut self.table_model,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self.pipeline.0.iter_mut().for_each(|rec| {
            use gidle_core::processors::StageRecord;
            if let StageRecord::NaiveMask { banset } | StageRecord::Gidle { banset } = rec {
                let p = Path::new(banset.as_str());
                if p.is_relative() {
                    *banset = base.join(p).to_string_lossy().into_owned();
                }
            }
        });
    }

    pub fn order(&self) -> usize {
        self.order.unwrap_or(DEFAULT_ORDER)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(DEFAULT_ALPHA)
    }

    pub fn sampler(&self) -> SamplerKind {
        self.sampler.unwrap_or(SamplerKind::Multinomial)
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS)
    }

    pub fn ban_mode(&self) -> BanMode {
        self.ban_spec.mode
    }

    pub fn arms(&self) -> Vec<Method> {
        let mut arms = self.arms.clone().unwrap_or_else(|| Method::ALL.to_vec());
        arms.sort();
        arms.dedup();
        arms
    }

    /// Every script class not banned, unless the manifest names a set.
    pub fn allowed_scripts(&self) -> BTreeSet<ScriptName> {
        self.allowed_scripts.clone().unwrap_or_else(|| {
            ScriptName::ALL
                .into_iter()
                .filter(|s| !self.ban_spec.scripts.contains(s))
                .collect()
        })
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds = self
            .seeds
            .as_ref()
            .ok_or_else(|| Error::Config("no seeds given".into()))?
            .expand()?;
        if seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        Ok(seeds)
    }

    pub fn model_name(&self) -> String {
        self.model_name.clone().unwrap_or_else(|| {
            if self.table_model.is_some() {
                "table".into()
            } else {
                format!("ngram-{}", self.order())
            }
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// Every referenced input path must exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.vocabulary, &self.corpus, &self.table_model]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Manifest(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
