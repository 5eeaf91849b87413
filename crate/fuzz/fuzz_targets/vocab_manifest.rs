#![no_main]

use gidle_core::vocab::{build_ban_set, BanSpec, ScriptName, Vocabulary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(vocab) = Vocabulary::from_json_slice(data) else {
        return;
    };
    let again = Vocabulary::from_manifest(vocab.to_manifest()).unwrap();
    assert_eq!(again.size(), vocab.size());
    for script in ScriptName::ALL {
        let spec = BanSpec {
            scripts: [script].into(),
            ..Default::default()
        };
        if let Ok(ban) = build_ban_set(&vocab, &spec) {
            assert!(!ban.indices().contains(vocab.eos_id()));
        }
    }
});
