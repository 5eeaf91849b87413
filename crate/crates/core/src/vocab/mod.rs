//! Token inventories and banned-token sets.

mod scripts;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use scripts::{
    builtin_class, builtin_classes, classify_char, classify_token, ScriptClass, ScriptName,
};

use crate::error::{Error, Result};
use crate::numerics::IndexSet;
use crate::TokenId;

/// On-disk vocabulary manifest: `tokens[i]` is the string of token `i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyManifest {
    pub tokens: Vec<String>,
    pub eos_id: TokenId,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos_id: TokenId,
    lookup: HashMap<String, TokenId>,
    longest: usize,
}

impl Vocabulary {
    pub fn from_manifest(manifest: VocabularyManifest) -> Result<Self> {
        let VocabularyManifest { tokens, eos_id } = manifest;
        if tokens.len() < 2 {
            return Err(Error::Manifest(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if tokens.len() > TokenId::MAX as usize {
            return Err(Error::Manifest("vocabulary too large".into()));
        }
        if eos_id as usize >= tokens.len() {
            return Err(Error::Manifest(format!(
                "eos_id {eos_id} out of range for {} tokens",
                tokens.len()
            )));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        let mut longest = 0;
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Manifest(format!("token {id} is empty")));
            }
            if let Some(prev) = lookup.insert(tok.clone(), id as TokenId) {
                return Err(Error::Manifest(format!(
                    "token {tok:?} appears at both id {prev} and id {id}"
                )));
            }
            if id as TokenId != eos_id {
                longest = longest.max(tok.chars().count());
            }
        }
        Ok(Self {
            tokens,
            eos_id,
            lookup,
            longest,
        })
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let manifest: VocabularyManifest = serde_json::from_slice(bytes)
            .map_err(|e| Error::Manifest(format!("vocabulary manifest: {e}")))?;
        Self::from_manifest(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_slice(&bytes)
            .map_err(|e| Error::Manifest(format!("{}: {}", path.display(), e.root())))
    }

    pub fn to_manifest(&self) -> VocabularyManifest {
        VocabularyManifest {
            tokens: self.tokens.clone(),
            eos_id: self.eos_id,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    /// Greedy longest-match segmentation. The eos string is never matched
    /// inside text.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let start = chars[pos].0;
            let max_len = self.longest.min(chars.len() - pos);
            let matched = (1..=max_len).rev().find_map(|len| {
                let end = chars.get(pos + len).map_or(text.len(), |&(b, _)| b);
                self.lookup
                    .get(&text[start..end])
                    .filter(|&&id| id != self.eos_id)
                    .map(|&id| (id, len))
            });
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    return Err(Error::Corpus(format!(
                        "no token covers {:?} at byte offset {start}",
                        chars[pos].1
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Concatenates token strings, skipping eos.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eos_id)
            .filter_map(|&id| self.token(id))
            .collect()
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.size()) {
            Some(&id) => Err(Error::IndexOutOfRange {
                index: id as usize,
                size: self.size(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BanMode {
    /// Banned when any code point falls in a banned script.
    #[default]
    ContainsAny,
    /// Banned when strictly more than half of the code points do.
    Majority,
}

impl BanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BanMode::ContainsAny => "contains-any",
            BanMode::Majority => "majority",
        }
    }
}

impl std::str::FromStr for BanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contains-any" => Ok(BanMode::ContainsAny),
            "majority" => Ok(BanMode::Majority),
            other => Err(Error::Config(format!("unknown ban mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanSpec {
    #[serde(default)]
    pub scripts: BTreeSet<ScriptName>,
    #[serde(default)]
    pub extra_ids: Vec<TokenId>,
    #[serde(default)]
    pub mode: BanMode,
}

/// Banned indices with a reason per index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BanSet {
    indices: IndexSet,
    provenance: Vec<String>,
}

pub const EXPLICIT: &str = "explicit";

impl BanSet {
    pub fn empty() -> Self {
        Self {
            indices: IndexSet::empty(),
            provenance: Vec::new(),
        }
    }

    pub fn indices(&self) -> &IndexSet {
        &self.indices
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Count of banned indices per provenance tag.
    pub fn counts_by_reason(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for reason in &self.provenance {
            *counts.entry(reason.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn to_document(&self) -> BanSetDocument {
        BanSetDocument {
            indices: self.indices.as_slice().to_vec(),
            provenance: self.provenance.clone(),
        }
    }

    /// Validates a ban-set document against `vocab`.
    pub fn from_document(doc: BanSetDocument, vocab: &Vocabulary) -> Result<Self> {
        let set = Self::from_document_unchecked(doc)?;
        set.indices.check_range(vocab.size())?;
        if set.indices.contains(vocab.eos_id()) {
            return Err(Error::EosBan(vocab.eos_id()));
        }
        if set.len() + 1 >= vocab.size() {
            return Err(Error::NoAllowedTokens);
        }
        Ok(set)
    }

    /// Structural checks only (sorted, parallel arrays).
    pub fn from_document_unchecked(doc: BanSetDocument) -> Result<Self> {
        if doc.indices.len() != doc.provenance.len() {
            return Err(Error::Manifest(format!(
                "ban set has {} indices but {} provenance entries",
                doc.indices.len(),
                doc.provenance.len()
            )));
        }
        let indices = IndexSet::new(doc.indices)
            .map_err(|e| Error::Manifest(format!("ban set indices: {e}")))?;
        Ok(Self {
            indices,
            provenance: doc.provenance,
        })
    }

    pub fn load_document(path: impl AsRef<Path>) -> Result<BanSetDocument> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        BanSetDocument::from_json_slice(&bytes)
            .map_err(|e| Error::Manifest(format!("{}: {}", path.display(), e.root())))
    }
}

/// Export format: sorted `indices` with a parallel `provenance` array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanSetDocument {
    pub indices: Vec<TokenId>,
    pub provenance: Vec<String>,
}

impl BanSetDocument {
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Manifest(format!("ban set document: {e}")))
    }
}

/// Builds the banned set for `spec` over `vocab`.
///
/// The eos token is never banned by a script rule; naming it explicitly is an
/// error. A result leaving nothing but eos allowed is rejected as
/// [`Error::NoAllowedTokens`].
pub fn build_ban_set(vocab: &Vocabulary, spec: &BanSpec) -> Result<BanSet> {
    let eos = vocab.eos_id();
    if spec.extra_ids.contains(&eos) {
        return Err(Error::EosBan(eos));
    }
    vocab.check_ids(&spec.extra_ids)?;
    let extra = IndexSet::from_unsorted(spec.extra_ids.iter().copied());
    let classes: Vec<&ScriptClass> = spec.scripts.iter().map(|&n| builtin_class(n)).collect();

    let mut indices = Vec::new();
    let mut provenance = Vec::new();
    for (id, token) in vocab.tokens().iter().enumerate() {
        let id = id as TokenId;
        if id == eos {
            continue;
        }
        let reason = if extra.contains(id) {
            Some(EXPLICIT.to_string())
        } else {
            script_reason(token, &classes, spec.mode).map(|n| n.to_string())
        };
        if let Some(reason) = reason {
            indices.push(id);
            provenance.push(reason);
        }
    }
    if indices.len() + 1 >= vocab.size() {
        return Err(Error::NoAllowedTokens);
    }
    Ok(BanSet {
        indices: IndexSet::from_unsorted(indices),
        provenance,
    })
}

fn script_reason(token: &str, classes: &[&ScriptClass], mode: BanMode) -> Option<ScriptName> {
    if classes.is_empty() {
        return None;
    }
    let mut first_hit = None;
    let mut hits = 0usize;
    let mut total = 0usize;
    for c in token.chars() {
        total += 1;
        if let Some(class) = classes.iter().find(|cl| cl.contains(c)) {
            hits += 1;
            first_hit.get_or_insert(class.name());
        }
    }
    match mode {
        BanMode::ContainsAny => first_hit,
        BanMode::Majority if 2 * hits > total => first_hit,
        BanMode::Majority => None,
    }
}
