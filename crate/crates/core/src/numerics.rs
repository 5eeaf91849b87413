//! Log-space probability kernels.
//!
//! Every mass computation goes through [`logsumexp`] in max-subtracted form;
//! probabilities are only materialised at the very end via `exp`. Banned or
//! impossible entries are carried as `f64::NEG_INFINITY`, so they become an
//! exact `0.0` after exponentiation.

use crate::error::{Error, Result};
use crate::TokenId;

/// Tolerance used for distribution identities (normalisation, ratios).
pub const DIST_TOL: f64 = 1e-9;

/// Tolerance used for shift-invariance checks.
pub const SHIFT_TOL: f64 = 1e-12;

/// Raw next-token scores. Entries are finite or `-inf`; at least one is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_extended(&values).map_err(Error::InvalidLogits)?;
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(validate_extended(&values).is_ok());
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn finite_count(&self) -> usize {
        self.0.iter().filter(|v| v.is_finite()).count()
    }
}

/// Normalised log-probabilities: `logsumexp` over finite entries is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVector(Vec<f64>);

impl LogProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_extended(&values).map_err(Error::InvalidProbs)?;
        if values.iter().any(|&v| v > DIST_TOL) {
            return Err(Error::InvalidProbs("log-probability above 0".into()));
        }
        let total = logsumexp(&values);
        if total.abs() > DIST_TOL {
            return Err(Error::InvalidProbs(format!(
                "log-probabilities are not normalised (logsumexp = {total})"
            )));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A categorical distribution in linear space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidProbs("empty vector".into()));
        }
        if let Some(i) = values
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0 + DIST_TOL)
        {
            return Err(Error::InvalidProbs(format!(
                "entry {i} = {} outside [0, 1]",
                values[i]
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > DIST_TOL {
            return Err(Error::InvalidProbs(format!("entries sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sorted, duplicate-free set of token indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct IndexSet(Vec<TokenId>);

impl IndexSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Accepts only strictly increasing input.
    pub fn new(indices: Vec<TokenId>) -> Result<Self> {
        if let Some(w) = indices.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::UnsortedIndexSet { position: w + 1 });
        }
        Ok(Self(indices))
    }

    /// Sorts and deduplicates arbitrary input.
    pub fn from_unsorted(indices: impl IntoIterator<Item = TokenId>) -> Self {
        let mut v: Vec<TokenId> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        IndexSet::from_unsorted(self.iter().chain(other.iter()))
    }

    /// Errors unless every index is below `size`.
    pub fn check_range(&self, size: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last as usize >= size => Err(Error::IndexOutOfRange {
                index: last as usize,
                size,
            }),
            _ => Ok(()),
        }
    }

    /// Per-index membership mask of length `size`.
    pub fn mask(&self, size: usize) -> Result<Vec<bool>> {
        self.check_range(size)?;
        let mut mask = vec![false; size];
        for id in self.iter() {
            mask[id as usize] = true;
        }
        Ok(mask)
    }
}

fn validate_extended(values: &[f64]) -> std::result::Result<(), String> {
    if values.is_empty() {
        return Err("empty vector".into());
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(format!("NaN at index {i}"));
    }
    if let Some(i) = values.iter().position(|&v| v == f64::INFINITY) {
        return Err(format!("+inf at index {i}"));
    }
    if !values.iter().any(|v| v.is_finite()) {
        return Err("no finite entry".into());
    }
    Ok(())
}

/// `ln Σ exp(v)` with max subtraction. Returns `-inf` when every entry is `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    logsumexp_iter(values.iter().copied())
}

fn logsumexp_iter<I>(values: I) -> f64
where
    I: Iterator<Item = f64> + Clone,
{
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(logits: &LogitVector) -> Result<LogProbVector> {
    let lse = logsumexp(logits.as_slice());
    if !lse.is_finite() {
        return Err(Error::NoAllowedMass);
    }
    let values = logits
        .as_slice()
        .iter()
        .map(|&z| if z == f64::NEG_INFINITY { z } else { z - lse })
        .collect();
    Ok(LogProbVector::from_raw(values))
}

pub fn softmax(logits: &LogitVector) -> Result<ProbVector> {
    let logp = log_softmax(logits)?;
    Ok(exp_probs(logp.as_slice()))
}

pub(crate) fn exp_probs(logp: &[f64]) -> ProbVector {
    ProbVector::from_raw(logp.iter().map(|v| v.exp()).collect())
}

/// `ln Z`, the log of the total probability on indices outside `banned`.
pub fn allowed_log_mass(logprobs: &LogProbVector, banned: &IndexSet) -> Result<f64> {
    let mask = banned.mask(logprobs.len())?;
    let allowed = logprobs
        .as_slice()
        .iter()
        .zip(&mask)
        .map(|(&lp, &is_banned)| if is_banned { f64::NEG_INFINITY } else { lp });
    let log_z = logsumexp_iter(allowed);
    if log_z == f64::NEG_INFINITY {
        return Err(Error::NoAllowedMass);
    }
    Ok(log_z)
}

/// `Q(i) = P(i) / Z` on allowed indices, `0` on banned ones, computed as
/// `exp(ln P(i) - ln Z)`.
pub fn constrained_distribution(logprobs: &LogProbVector, banned: &IndexSet) -> Result<ProbVector> {
    let log_z = allowed_log_mass(logprobs, banned)?;
    let mask = banned.mask(logprobs.len())?;
    let values = logprobs
        .as_slice()
        .iter()
        .zip(mask)
        .map(|(&lp, is_banned)| if is_banned { 0.0 } else { (lp - log_z).exp() })
        .collect();
    Ok(ProbVector::from_raw(values))
}

/// `KL(q ‖ p)` with the `0 · ln(0 / x) = 0` convention.
pub fn kl_divergence(q: &ProbVector, p: &ProbVector) -> Result<f64> {
    check_dims(q.len(), p.len())?;
    let mut total = 0.0;
    for (i, (&qi, &pi)) in q.as_slice().iter().zip(p.as_slice()).enumerate() {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(Error::SupportViolation { index: i });
        }
        total += qi * (qi.ln() - pi.ln());
    }
    Ok(total)
}

pub fn total_variation(q: &ProbVector, p: &ProbVector) -> Result<f64> {
    check_dims(q.len(), p.len())?;
    let sum: f64 = q
        .as_slice()
        .iter()
        .zip(p.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * sum)
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
