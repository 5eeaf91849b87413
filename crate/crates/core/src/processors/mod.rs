//! Logit processors and ordered pipelines.
//!
//! [`naive_mask`] and [`gidle_process`] induce the same softmax distribution
//! (they differ by a uniform shift of the allowed logits), but they are kept as
//! separate stages because any later stage that is not shift-invariant, such as
//! [`repetition_penalty`], sees different inputs from each.

mod descriptor;
mod flat;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use descriptor::{PipelineDescriptor, StageRecord};
pub use flat::{bound_process, bound_version, BoundBanSet};

use crate::error::{Error, Result};
use crate::numerics::{allowed_log_mass, log_softmax, softmax, IndexSet, LogitVector, SHIFT_TOL};
use crate::TokenId;

/// The history a processor may read: `x_{<t}` and the step index `t`.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub prior_tokens: &'a [TokenId],
    pub step_index: usize,
}

impl<'a> StepContext<'a> {
    pub fn new(prior_tokens: &'a [TokenId], step_index: usize) -> Self {
        Self {
            prior_tokens,
            step_index,
        }
    }

    pub fn empty() -> StepContext<'static> {
        StepContext {
            prior_tokens: &[],
            step_index: 0,
        }
    }
}

/// How banned tokens are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMethod {
    Naive,
    Gidle,
}

/// One experiment arm: no processing, naive masking, or renormalised masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Naive,
    Gidle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Naive, Method::Gidle];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Naive => "naive",
            Method::Gidle => "gidle",
        }
    }

    pub fn mask(self) -> Option<MaskMethod> {
        match self {
            Method::Baseline => None,
            Method::Naive => Some(MaskMethod::Naive),
            Method::Gidle => Some(MaskMethod::Gidle),
        }
    }

    /// The masking stage this arm contributes, if any.
    pub fn mask_stage(self, banned: &IndexSet) -> Option<Stage> {
        self.mask().map(|m| match m {
            MaskMethod::Naive => Stage::NaiveMask(banned.clone()),
            MaskMethod::Gidle => Stage::Gidle(banned.clone()),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "0" => Ok(Method::Baseline),
            "naive" | "masked" | "1" => Ok(Method::Naive),
            "gidle" | "2" => Ok(Method::Gidle),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    NaiveMask(IndexSet),
    Gidle(IndexSet),
    Temperature(f64),
    TopK(usize),
    TopP(f64),
    RepetitionPenalty(f64),
}

impl Stage {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Stage::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                Err(Error::Config(format!("temperature must be > 0, got {t}")))
            }
            Stage::TopK(0) => Err(Error::Config("top_k must be >= 1".into())),
            Stage::TopP(p) if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Config(format!("top_p must be in (0, 1], got {p}")))
            }
            Stage::RepetitionPenalty(g) if !(g >= 1.0 && g.is_finite()) => Err(Error::Config(
                format!("repetition penalty must be >= 1, got {g}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::NaiveMask(_) => "naive_mask",
            Stage::Gidle(_) => "gidle",
            Stage::Temperature(_) => "temperature",
            Stage::TopK(_) => "top_k",
            Stage::TopP(_) => "top_p",
            Stage::RepetitionPenalty(_) => "repetition_penalty",
        }
    }

    /// Whether adding a constant to every finite input logit leaves the output
    /// distribution unchanged.
    pub fn is_shift_invariant(&self) -> bool {
        !matches!(self, Stage::RepetitionPenalty(g) if *g != 1.0)
    }

    pub fn banned(&self) -> Option<&IndexSet> {
        match self {
            Stage::NaiveMask(b) | Stage::Gidle(b) => Some(b),
            _ => None,
        }
    }

    pub fn apply(&self, logits: &LogitVector, context: &StepContext<'_>) -> Result<LogitVector> {
        match self {
            Stage::NaiveMask(b) => naive_mask(logits, b),
            Stage::Gidle(b) => gidle_process(logits, b),
            Stage::Temperature(t) => temperature_scale(logits, *t),
            Stage::TopK(k) => top_k_filter(logits, *k),
            Stage::TopP(p) => top_p_filter(logits, *p),
            Stage::RepetitionPenalty(g) => repetition_penalty(logits, context, *g),
        }
    }
}

/// An ordered, validated list of stages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pipeline {
    stages: Vec<Stage>,
}

impl Pipeline {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        for (i, s) in stages.iter().enumerate() {
            s.validate().map_err(|e| Error::Stage {
                stage: i,
                source: Box::new(e),
            })?;
        }
        Ok(Self { stages })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Union of every masking stage's banned set.
    pub fn banned(&self) -> IndexSet {
        self.stages
            .iter()
            .filter_map(Stage::banned)
            .fold(IndexSet::empty(), |acc, b| acc.union(b))
    }

    pub fn has_mask(&self) -> bool {
        self.stages.iter().any(|s| s.banned().is_some())
    }

    pub fn has_non_shift_invariant_stage(&self) -> bool {
        self.stages.iter().any(|s| !s.is_shift_invariant())
    }
}

pub fn run_pipeline(
    pipeline: &Pipeline,
    context: &StepContext<'_>,
    logits: &LogitVector,
) -> Result<LogitVector> {
    let mut current = logits.clone();
    for (i, stage) in pipeline.stages.iter().enumerate() {
        current = stage.apply(&current, context).map_err(|e| Error::Stage {
            stage: i,
            source: Box::new(e),
        })?;
    }
    Ok(current)
}

fn ban_mask(logits: &LogitVector, banned: &IndexSet) -> Result<Vec<bool>> {
    let mask = banned.mask(logits.len())?;
    let any_allowed = logits
        .as_slice()
        .iter()
        .zip(&mask)
        .any(|(z, &b)| !b && z.is_finite());
    if !any_allowed {
        return Err(Error::NoAllowedTokens);
    }
    Ok(mask)
}

/// Sets banned logits to `-inf`; allowed entries are copied bit for bit.
pub fn naive_mask(logits: &LogitVector, banned: &IndexSet) -> Result<LogitVector> {
    let mask = ban_mask(logits, banned)?;
    let out = logits
        .as_slice()
        .iter()
        .zip(mask)
        .map(|(&z, b)| if b { f64::NEG_INFINITY } else { z })
        .collect();
    Ok(LogitVector::from_raw(out))
}

/// Rewrites allowed logits to `ln P(i) - ln Z`, the exact log-probabilities of
/// the constrained distribution; banned logits become `-inf`.
pub fn gidle_process(logits: &LogitVector, banned: &IndexSet) -> Result<LogitVector> {
    let mask = ban_mask(logits, banned)?;
    let logp = log_softmax(logits)?;
    let log_z = allowed_log_mass(&logp, banned).map_err(|e| match e {
        Error::NoAllowedMass => Error::NoAllowedTokens,
        other => other,
    })?;
    let out = logp
        .as_slice()
        .iter()
        .zip(mask)
        .map(|(&lp, b)| if b { f64::NEG_INFINITY } else { lp - log_z })
        .collect();
    Ok(LogitVector::from_raw(out))
}

pub fn temperature_scale(logits: &LogitVector, t: f64) -> Result<LogitVector> {
    Stage::Temperature(t).validate()?;
    let out = logits.as_slice().iter().map(|&z| z / t).collect();
    rescaled(logits, out, "temperature")
}

/// Rejects outputs where a finite input overflowed.
fn rescaled(input: &LogitVector, out: Vec<f64>, stage: &str) -> Result<LogitVector> {
    let overflow = input
        .as_slice()
        .iter()
        .zip(&out)
        .position(|(a, b)| a.is_finite() && !b.is_finite());
    match overflow {
        Some(i) => Err(Error::InvalidLogits(format!(
            "{stage} overflowed at index {i}"
        ))),
        None => Ok(LogitVector::from_raw(out)),
    }
}

/// Finite indices ordered by descending key, lower index first on ties.
fn ranked_indices(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).filter(|&i| keys[i].is_finite()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx
}

fn keep_only(logits: &LogitVector, keep: &[usize]) -> LogitVector {
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for &i in keep {
        out[i] = logits.as_slice()[i];
    }
    LogitVector::from_raw(out)
}

pub fn top_k_filter(logits: &LogitVector, k: usize) -> Result<LogitVector> {
    Stage::TopK(k).validate()?;
    let ranked = ranked_indices(logits.as_slice());
    if ranked.is_empty() {
        return Err(Error::NoAllowedTokens);
    }
    if k >= ranked.len() {
        return Ok(logits.clone());
    }
    Ok(keep_only(logits, &ranked[..k]))
}

/// Keeps the shortest probability-sorted prefix whose cumulative mass reaches `p`.
///
/// Mass within `SHIFT_TOL` of `p` counts as reaching it, so a cutoff that lands
/// exactly on `p` does not depend on the rounding of the input's offset.
pub fn top_p_filter(logits: &LogitVector, p: f64) -> Result<LogitVector> {
    Stage::TopP(p).validate()?;
    if p >= 1.0 {
        return Ok(logits.clone());
    }
    let probs = softmax(logits)?;
    let probs = probs.as_slice();
    let ranked = ranked_indices(logits.as_slice());
    let mut cumulative = 0.0;
    let mut cut = ranked.len();
    for (n, &i) in ranked.iter().enumerate() {
        cumulative += probs[i];
        if cumulative >= p - SHIFT_TOL {
            cut = n + 1;
            break;
        }
    }
    Ok(keep_only(logits, &ranked[..cut.max(1)]))
}

/// Sign-dependent penalty on every token already present in the context:
/// positive logits are divided by `gamma`, the rest multiplied by it.
pub fn repetition_penalty(
    logits: &LogitVector,
    context: &StepContext<'_>,
    gamma: f64,
) -> Result<LogitVector> {
    Stage::RepetitionPenalty(gamma).validate()?;
    let mut out = logits.as_slice().to_vec();
    let seen: BTreeSet<TokenId> = context.prior_tokens.iter().copied().collect();
    for id in seen {
        let Some(z) = out.get_mut(id as usize) else {
            return Err(Error::IndexOutOfRange {
                index: id as usize,
                size: logits.len(),
            });
        };
        if *z > 0.0 {
            *z /= gamma;
        } else {
            *z *= gamma;
        }
    }
    rescaled(logits, out, "repetition penalty")
}
