#![no_main]

use gidle_core::vocab::{BanSet, BanSetDocument};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(doc) = BanSetDocument::from_json_slice(data) else {
        return;
    };
    if let Ok(set) = BanSet::from_document_unchecked(doc) {
        let ids: Vec<u32> = set.indices().iter().collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(set.provenance().len(), set.len());
    }
});
