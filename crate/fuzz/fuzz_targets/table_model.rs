#![no_main]

use gidle_core::processors::StepContext;
use gidle_core::toylm::{LanguageModel, TableModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(model) = TableModel::from_json_slice(data) else {
        return;
    };
    let history: Vec<u32> = (0..4).map(|i| i % model.vocab_size() as u32).collect();
    for n in 0..=history.len() {
        let logits = model
            .next_logits(&StepContext::new(&history[..n], n))
            .unwrap();
        assert_eq!(logits.len(), model.vocab_size());
    }
});
