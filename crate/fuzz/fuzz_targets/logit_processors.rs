#![no_main]

use gidle_core::numerics::{softmax, IndexSet, LogitVector};
use gidle_core::processors::{run_pipeline, Pipeline, Stage, StepContext};
use libfuzzer_sys::fuzz_target;

// Layout: 1 byte ban mask seed, 1 byte stage selector, then little-endian f64s.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 + 16 {
        return;
    }
    let (head, rest) = data.split_at(2);
    let values: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let Ok(logits) = LogitVector::new(values) else {
        return;
    };
    let n = logits.len();
    let banned = IndexSet::from_unsorted((0..n as u32).filter(|i| (head[0] >> (i % 8)) & 1 == 1));
    let tail = match head[1] % 5 {
        0 => vec![],
        1 => vec![Stage::Temperature(0.5)],
        2 => vec![Stage::TopK(1 + head[1] as usize / 5)],
        3 => vec![Stage::TopP(0.9)],
        _ => vec![Stage::RepetitionPenalty(1.5)],
    };
    let history = [0u32, (n - 1) as u32];
    let ctx = StepContext::new(&history, 0);
    for first in [
        Stage::NaiveMask(banned.clone()),
        Stage::Gidle(banned.clone()),
    ] {
        let mut stages = vec![first];
        stages.extend(tail.iter().cloned());
        let pipeline = Pipeline::new(stages).unwrap();
        if let Ok(out) = run_pipeline(&pipeline, &ctx, &logits) {
            if let Ok(p) = softmax(&out) {
                for id in banned.iter() {
                    assert_eq!(p.as_slice()[id as usize], 0.0);
                }
            }
        }
    }
});
