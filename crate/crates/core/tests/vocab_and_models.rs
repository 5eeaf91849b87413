use std::collections::{BTreeMap, BTreeSet};

use gidle_core::numerics::DIST_TOL;
use gidle_core::processors::StepContext;
use gidle_core::toylm::{train_ngram, LanguageModel};
use gidle_core::vocab::{
    build_ban_set, BanMode, BanSpec, ScriptName, Vocabulary, VocabularyManifest,
};
use gidle_core::Error;
use proptest::prelude::*;

const POOL: &[char] = &[
    'a', 'z', ' ', '.', '7', 'б', 'Ж', '中', 'の', 'カ', '한', 'é',
];

fn vocab_strategy() -> impl Strategy<Value = Vocabulary> {
    vocab_with(false)
}

/// With `singles`, every pool character is also a token, so any text over the
/// pool tokenizes.
fn vocab_with(singles: bool) -> impl Strategy<Value = Vocabulary> {
    prop::collection::btree_set(
        prop::collection::vec(prop::sample::select(POOL), 1..4)
            .prop_map(|cs| cs.into_iter().collect::<String>()),
        1..40,
    )
    .prop_map(move |mut set| {
        if singles {
            set.extend(POOL.iter().map(|c| c.to_string()));
        }
        let mut tokens: Vec<String> = set.into_iter().collect();
        tokens.push("</s>".into());
        let eos_id = (tokens.len() - 1) as u32;
        Vocabulary::from_manifest(VocabularyManifest { tokens, eos_id }).unwrap()
    })
}

fn script_subset() -> impl Strategy<Value = BTreeSet<ScriptName>> {
    prop::collection::btree_set(prop::sample::select(ScriptName::ALL.to_vec()), 0..4)
}

fn ban_ids(vocab: &Vocabulary, spec: &BanSpec) -> Option<BTreeSet<u32>> {
    match build_ban_set(vocab, spec) {
        Ok(b) => Some(b.indices().iter().collect()),
        Err(Error::NoAllowedTokens) => None,
        Err(e) => panic!("unexpected error {e}"),
    }
}

proptest! {
    #[test]
    fn ban_set_grows_with_scripts(vocab in vocab_strategy(), a in script_subset(), b in script_subset()) {
        let small = BanSpec { scripts: a.clone(), ..Default::default() };
        let large = BanSpec { scripts: a.union(&b).copied().collect(), ..Default::default() };
        if let (Some(s), Some(l)) = (ban_ids(&vocab, &small), ban_ids(&vocab, &large)) {
            prop_assert!(s.is_subset(&l));
        }
    }

    #[test]
    fn contains_any_covers_majority(vocab in vocab_strategy(), scripts in script_subset()) {
        let any = BanSpec { scripts: scripts.clone(), ..Default::default() };
        let maj = BanSpec { scripts, mode: BanMode::Majority, ..Default::default() };
        if let (Some(a), Some(m)) = (ban_ids(&vocab, &any), ban_ids(&vocab, &maj)) {
            prop_assert!(m.is_subset(&a));
        }
    }

    #[test]
    fn eos_is_never_banned(vocab in vocab_strategy(), scripts in script_subset()) {
        let spec = BanSpec { scripts, ..Default::default() };
        if let Some(ids) = ban_ids(&vocab, &spec) {
            prop_assert!(!ids.contains(&vocab.eos_id()));
            prop_assert!(ids.len() + 1 < vocab.size());
        }
    }

    #[test]
    fn ngram_matches_counting_oracle(
        size in 2usize..12,
        order in 1usize..5,
        alpha in 0.1f64..3.0,
        raw in prop::collection::vec(prop::collection::vec(0u32..64, 1..30), 1..6),
    ) {
        let tokens: Vec<String> = (0..size).map(|i| format!("t{i}")).collect();
        let eos = (size - 1) as u32;
        let vocab = Vocabulary::from_manifest(VocabularyManifest { tokens, eos_id: eos }).unwrap();
        let corpus: Vec<Vec<u32>> = raw
            .iter()
            .map(|s| s.iter().map(|&t| t % size as u32).collect())
            .collect();
        let model = train_ngram(&vocab, &corpus, order, alpha).unwrap();

        let mut oracle: BTreeMap<Vec<u32>, Vec<u64>> = BTreeMap::new();
        for seq in &corpus {
            let mut padded = vec![eos; order - 1];
            padded.extend(seq);
            for w in padded.windows(order) {
                oracle.entry(w[..order - 1].to_vec()).or_insert_with(|| vec![0; size])[w[order - 1] as usize] += 1;
            }
        }

        let mut probes: Vec<Vec<u32>> = oracle.keys().cloned().collect();
        probes.push(vec![0; order - 1]);
        for ctx in probes {
            let logits = model.next_logits(&StepContext::new(&ctx, 0)).unwrap();
            let counts = oracle.get(&ctx).cloned().unwrap_or_else(|| vec![0; size]);
            let total: u64 = counts.iter().sum();
            let mut mass = 0.0;
            for (i, &c) in counts.iter().enumerate() {
                let expect = ((c as f64 + alpha) / (total as f64 + alpha * size as f64)).ln();
                prop_assert_eq!(logits.as_slice()[i], expect);
                mass += logits.as_slice()[i].exp();
            }
            prop_assert!((mass - 1.0).abs() <= DIST_TOL);
        }
    }

    #[test]
    fn tokenize_roundtrips_over_vocab_strings(vocab in vocab_with(true), picks in prop::collection::vec(any::<prop::sample::Index>(), 0..20)) {
        let non_eos: Vec<u32> = (0..vocab.size() as u32).filter(|&i| i != vocab.eos_id()).collect();
        let ids: Vec<u32> = picks.iter().map(|ix| non_eos[ix.index(non_eos.len())]).collect();
        let text = vocab.detokenize(&ids);
        let again = vocab.tokenize(&text).unwrap();
        prop_assert_eq!(vocab.detokenize(&again), text);
    }
}

#[test]
fn fixture_vocabulary_and_corpus_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mixed_script");
    let vocab = Vocabulary::load(dir.join("vocab.json")).unwrap();
    assert_eq!(vocab.size(), 257);
    let corpus = gidle_core::toylm::load_corpus(dir.join("corpus.txt"), &vocab).unwrap();
    assert!(corpus.len() >= 50);
    let spec = BanSpec {
        scripts: [ScriptName::Cyrillic].into(),
        ..Default::default()
    };
    let ban = build_ban_set(&vocab, &spec).unwrap();
    assert_eq!(ban.len(), 112);
    let maj = build_ban_set(
        &vocab,
        &BanSpec {
            mode: BanMode::Majority,
            ..spec
        },
    )
    .unwrap();
    assert!(maj.len() < ban.len());
}
