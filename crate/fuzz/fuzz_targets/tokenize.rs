#![no_main]

use std::sync::LazyLock;

use gidle_core::vocab::Vocabulary;
use libfuzzer_sys::fuzz_target;

static VOCAB: LazyLock<Vocabulary> = LazyLock::new(|| {
    Vocabulary::from_json_slice(include_bytes!("../../fixtures/mixed_script/vocab.json")).unwrap()
});

fuzz_target!(|text: &str| {
    if let Ok(ids) = VOCAB.tokenize(text) {
        assert!(!ids.contains(&VOCAB.eos_id()));
        assert_eq!(VOCAB.detokenize(&ids), text);
    }
});
