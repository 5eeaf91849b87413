//! Flat-buffer surface used by host-language bindings.

use super::{gidle_process, naive_mask, MaskMethod};
use crate::error::{Error, Result};
use crate::numerics::{IndexSet, LogitVector};
use crate::TokenId;

/// A ban set validated against a declared vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundBanSet {
    indices: IndexSet,
    vocab_size: usize,
}

impl BoundBanSet {
    pub fn new(ids: &[TokenId], vocab_size: usize) -> Result<Self> {
        let indices = IndexSet::from_unsorted(ids.iter().copied());
        indices.check_range(vocab_size)?;
        if indices.len() >= vocab_size {
            return Err(Error::NoAllowedTokens);
        }
        Ok(Self {
            indices,
            vocab_size,
        })
    }

    pub fn indices(&self) -> &IndexSet {
        &self.indices
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Applies a masking processor to a contiguous `f64` buffer.
pub fn bound_process(method: MaskMethod, logits: &[f64], banset: &BoundBanSet) -> Result<Vec<f64>> {
    if logits.len() != banset.vocab_size {
        return Err(Error::DimensionMismatch {
            expected: banset.vocab_size,
            found: logits.len(),
        });
    }
    let z = LogitVector::new(logits.to_vec())?;
    let out = match method {
        MaskMethod::Naive => naive_mask(&z, &banset.indices)?,
        MaskMethod::Gidle => gidle_process(&z, &banset.indices)?,
    };
    Ok(out.into_vec())
}

pub fn bound_version() -> &'static str {
    crate::VERSION
}
