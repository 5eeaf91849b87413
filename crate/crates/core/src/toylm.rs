//! Desk-scale autoregressive models whose conditionals are exactly computable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LogitVector;
use crate::processors::StepContext;
use crate::vocab::Vocabulary;
use crate::TokenId;

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Anything that maps a history to next-token logits.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> TokenId;
    fn next_logits(&self, context: &StepContext<'_>) -> Result<LogitVector>;
}

#[derive(Debug, Clone, PartialEq)]
struct ContextCounts {
    counts: Vec<u64>,
    total: u64,
}

/// Laplace-smoothed n-gram counts.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    eos_id: TokenId,
    table: BTreeMap<Vec<TokenId>, ContextCounts>,
}

/// Counts every length-`order` window of every sequence. Histories shorter than
/// `order - 1` are left-padded with eos.
pub fn train_ngram(
    vocab: &Vocabulary,
    corpus: &[Vec<TokenId>],
    order: usize,
    alpha: f64,
) -> Result<NgramModel> {
    if order == 0 {
        return Err(Error::Config("n-gram order must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::Corpus("corpus is empty".into()));
    }
    let v = vocab.size();
    let eos = vocab.eos_id();
    let mut table: BTreeMap<Vec<TokenId>, ContextCounts> = BTreeMap::new();
    for (line, seq) in corpus.iter().enumerate() {
        if let Some(&bad) = seq.iter().find(|&&id| id as usize >= v) {
            return Err(Error::Corpus(format!(
                "sequence {line}: token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let mut padded = vec![eos; order - 1];
        padded.extend_from_slice(seq);
        for window in padded.windows(order) {
            let (ctx, next) = window.split_at(order - 1);
            let entry = table.entry(ctx.to_vec()).or_insert_with(|| ContextCounts {
                counts: vec![0; v],
                total: 0,
            });
            entry.counts[next[0] as usize] += 1;
            entry.total += 1;
        }
    }
    Ok(NgramModel {
        order,
        alpha,
        vocab_size: v,
        eos_id: eos,
        table,
    })
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn context_count(&self) -> usize {
        self.table.len()
    }

    /// The `order - 1` most recent tokens, left-padded with eos.
    pub fn context_key(&self, prior: &[TokenId]) -> Vec<TokenId> {
        let n = self.order - 1;
        let mut key = vec![self.eos_id; n.saturating_sub(prior.len())];
        key.extend_from_slice(&prior[prior.len().saturating_sub(n)..]);
        key
    }

    pub fn count(&self, context: &[TokenId], next: TokenId) -> u64 {
        self.table
            .get(context)
            .and_then(|c| c.counts.get(next as usize).copied())
            .unwrap_or(0)
    }

    pub fn total(&self, context: &[TokenId]) -> u64 {
        self.table.get(context).map_or(0, |c| c.total)
    }
}

impl LanguageModel for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    /// `ln((count + alpha) / (total + alpha * |V|))`; already normalised.
    fn next_logits(&self, context: &StepContext<'_>) -> Result<LogitVector> {
        check_context(context.prior_tokens, self.vocab_size)?;
        let key = self.context_key(context.prior_tokens);
        let denom_alpha = self.alpha * self.vocab_size as f64;
        let values = match self.table.get(&key) {
            Some(c) => {
                let denom = c.total as f64 + denom_alpha;
                c.counts
                    .iter()
                    .map(|&n| ((n as f64 + self.alpha) / denom).ln())
                    .collect()
            }
            None => vec![(self.alpha / denom_alpha).ln(); self.vocab_size],
        };
        Ok(LogitVector::from_raw(values))
    }
}

fn check_context(prior: &[TokenId], size: usize) -> Result<()> {
    match prior.iter().find(|&&id| id as usize >= size) {
        Some(&id) => Err(Error::IndexOutOfRange {
            index: id as usize,
            size,
        }),
        None => Ok(()),
    }
}

/// Splits UTF-8 text into one sequence per non-empty line, each terminated by eos.
pub fn corpus_from_text(text: &str, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    let mut corpus = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut ids = vocab
            .tokenize(line)
            .map_err(|e| Error::Corpus(format!("line {}: {}", n + 1, e.root())))?;
        ids.push(vocab.eos_id());
        corpus.push(ids);
    }
    if corpus.is_empty() {
        return Err(Error::Corpus("corpus is empty".into()));
    }
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    corpus_from_text(&text, vocab)
        .map_err(|e| Error::Corpus(format!("{}: {}", path.display(), e.root())))
}

/// Fixture model: explicit logit rows keyed by context suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    eos_id: TokenId,
    rows: BTreeMap<Vec<TokenId>, LogitVector>,
    longest_context: usize,
    default: LogitVector,
}

/// `-inf` entries are written as `null`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableModelDocument {
    pub eos_id: TokenId,
    #[serde(default)]
    pub rows: Vec<TableRow>,
    pub default: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub context: Vec<TokenId>,
    pub logits: Vec<Option<f64>>,
}

fn row_from_doc(values: &[Option<f64>], what: &str) -> Result<LogitVector> {
    let v = values
        .iter()
        .map(|x| x.unwrap_or(f64::NEG_INFINITY))
        .collect();
    LogitVector::new(v).map_err(|e| Error::Manifest(format!("table model {what}: {e}")))
}

impl TableModel {
    pub fn from_document(doc: TableModelDocument) -> Result<Self> {
        let default = row_from_doc(&doc.default, "default row")?;
        let size = default.len();
        if size < 2 {
            return Err(Error::Manifest(
                "table model needs at least 2 tokens".into(),
            ));
        }
        if doc.eos_id as usize >= size {
            return Err(Error::Manifest(format!(
                "table model eos_id {} out of range for {size} tokens",
                doc.eos_id
            )));
        }
        let mut rows = BTreeMap::new();
        let mut longest_context = 0;
        for (i, row) in doc.rows.into_iter().enumerate() {
            let logits = row_from_doc(&row.logits, &format!("row {i}"))?;
            if logits.len() != size {
                return Err(Error::Manifest(format!(
                    "table model row {i} has {} entries, expected {size}",
                    logits.len()
                )));
            }
            check_context(&row.context, size)
                .map_err(|e| Error::Manifest(format!("table model row {i}: {e}")))?;
            longest_context = longest_context.max(row.context.len());
            if rows.insert(row.context, logits).is_some() {
                return Err(Error::Manifest(format!(
                    "table model row {i}: duplicate context"
                )));
            }
        }
        Ok(Self {
            eos_id: doc.eos_id,
            rows,
            longest_context,
            default,
        })
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let doc: TableModelDocument = serde_json::from_slice(bytes)
            .map_err(|e| Error::Manifest(format!("table model: {e}")))?;
        Self::from_document(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_slice(&bytes)
            .map_err(|e| Error::Manifest(format!("{}: {}", path.display(), e.root())))
    }
}

impl LanguageModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.default.len()
    }

    fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    /// The row of the longest stored context that is a suffix of the history.
    fn next_logits(&self, context: &StepContext<'_>) -> Result<LogitVector> {
        let prior = context.prior_tokens;
        check_context(prior, self.vocab_size())?;
        for len in (0..=self.longest_context.min(prior.len())).rev() {
            if let Some(row) = self.rows.get(&prior[prior.len() - len..]) {
                return Ok(row.clone());
            }
        }
        Ok(self.default.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use crate::vocab::VocabularyManifest;

    fn abe() -> Vocabulary {
        Vocabulary::from_manifest(VocabularyManifest {
            tokens: vec!["a".into(), "b".into(), "</s>".into()],
            eos_id: 2,
        })
        .unwrap()
    }

    #[test]
    fn train_counts_windows() {
        let v = abe();
        let m = train_ngram(&v, &[vec![0, 0, 1]], 2, 1.0).unwrap();
        assert_eq!(m.count(&[0], 0), 1);
        assert_eq!(m.count(&[0], 1), 1);
        assert_eq!(m.count(&[2], 0), 1);
        assert_eq!(m.total(&[0]), 2);
    }

    #[test]
    fn laplace_conditionals() {
        let v = abe();
        let m = train_ngram(&v, &[vec![0, 0, 1]], 2, 1.0).unwrap();
        let ctx = [0];
        let p = softmax(&m.next_logits(&StepContext::new(&ctx, 0)).unwrap()).unwrap();
        let expected = [0.4, 0.4, 0.2];
        for (a, b) in p.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // logits are already log-probabilities
        assert!(
            (m.next_logits(&StepContext::new(&ctx, 0))
                .unwrap()
                .as_slice()[1]
                - 0.4f64.ln())
            .abs()
                < 1e-15
        );
    }

    #[test]
    fn unseen_context_is_uniform() {
        let v = abe();
        let m = train_ngram(&v, &[vec![0, 0, 1]], 2, 1.0).unwrap();
        let ctx = [1];
        let z = m.next_logits(&StepContext::new(&ctx, 0)).unwrap();
        for &x in z.as_slice() {
            assert!((x - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn training_errors() {
        let v = abe();
        assert!(matches!(
            train_ngram(&v, &[], 2, 1.0),
            Err(Error::Corpus(_))
        ));
        assert!(matches!(
            train_ngram(&v, &[vec![]], 2, 1.0),
            Err(Error::Corpus(_))
        ));
        assert!(matches!(
            train_ngram(&v, &[vec![0, 5]], 2, 1.0),
            Err(Error::Corpus(_))
        ));
        assert!(matches!(
            train_ngram(&v, &[vec![0]], 0, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train_ngram(&v, &[vec![0]], 2, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn context_key_pads_with_eos() {
        let v = abe();
        let m = train_ngram(&v, &[vec![0, 1]], 3, 1.0).unwrap();
        assert_eq!(m.context_key(&[]), vec![2, 2]);
        assert_eq!(m.context_key(&[1]), vec![2, 1]);
        assert_eq!(m.context_key(&[0, 1, 0]), vec![1, 0]);
        let unigram = train_ngram(&v, &[vec![0, 1]], 1, 1.0).unwrap();
        assert!(unigram.context_key(&[0, 1]).is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let v = abe();
        let corpus = vec![vec![0, 1, 2], vec![1, 1, 0, 2]];
        assert_eq!(
            train_ngram(&v, &corpus, 3, 0.5).unwrap(),
            train_ngram(&v, &corpus, 3, 0.5).unwrap()
        );
    }

    #[test]
    fn corpus_lines_end_in_eos() {
        let v = abe();
        let c = corpus_from_text("ab\n\naa\n", &v).unwrap();
        assert_eq!(c, vec![vec![0, 1, 2], vec![0, 0, 2]]);
        assert!(corpus_from_text("\n\n", &v).is_err());
        assert!(corpus_from_text("abc", &v).is_err());
    }

    #[test]
    fn table_model_lookup() {
        let doc = br#"{
            "eos_id": 2,
            "default": [1, 2, 3],
            "rows": [
                {"context": [0], "logits": [0, null, 0]},
                {"context": [1, 0], "logits": [5, 5, null]}
            ]
        }"#;
        let m = TableModel::from_json_slice(doc).unwrap();
        let z = |ctx: &[TokenId]| m.next_logits(&StepContext::new(ctx, 0)).unwrap().into_vec();
        assert_eq!(z(&[]), vec![1.0, 2.0, 3.0]);
        assert_eq!(z(&[1]), vec![1.0, 2.0, 3.0]);
        assert_eq!(z(&[0]), vec![0.0, f64::NEG_INFINITY, 0.0]);
        assert_eq!(z(&[0, 0]), vec![0.0, f64::NEG_INFINITY, 0.0]);
        assert_eq!(z(&[1, 0]), vec![5.0, 5.0, f64::NEG_INFINITY]);
        assert!(m.next_logits(&StepContext::new(&[7], 0)).is_err());
    }

    #[test]
    fn table_model_validation() {
        let bad = [
            &br#"{"eos_id": 5, "default": [1, 2]}"#[..],
            br#"{"eos_id": 0, "default": [null, null]}"#,
            br#"{"eos_id": 0, "default": [1, 2], "rows": [{"context": [], "logits": [1]}]}"#,
            br#"{"eos_id": 0, "default": [1, 2], "rows": [{"context": [3], "logits": [1, 1]}]}"#,
            br#"{"eos_id": 0, "default": [1, 2], "rows": [{"context": [1], "logits": [1, 1]}, {"context": [1], "logits": [1, 1]}]}"#,
            br#"{"default": [1, 2]}"#,
        ];
        for doc in bad {
            assert!(
                TableModel::from_json_slice(doc).is_err(),
                "{}",
                String::from_utf8_lossy(doc)
            );
        }
    }
}
