#![no_main]

use gidle_cli::manifest::{parse_seeds, RunManifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = RunManifest::from_json_slice(data) {
        let _ = m.seeds();
        let _ = m.allowed_scripts();
        let _ = m.arms();
    }
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = parse_seeds(s);
    }
});
