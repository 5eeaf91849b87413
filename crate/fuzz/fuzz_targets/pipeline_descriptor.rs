#![no_main]

use gidle_core::numerics::IndexSet;
use gidle_core::processors::{Method, PipelineDescriptor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(desc) = PipelineDescriptor::from_json_slice(data) else {
        return;
    };
    let banned = IndexSet::new(vec![1]).unwrap();
    for arm in Method::ALL {
        let _ = desc.resolve(arm, &banned, |_| Ok(IndexSet::new(vec![0]).unwrap()));
    }
});
