//! Seeded autoregressive generation.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::{allowed_log_mass, log_softmax, softmax, LogitVector, ProbVector};
use crate::processors::{run_pipeline, Pipeline, Stage, StepContext};
use crate::toylm::LanguageModel;
use crate::TokenId;

pub const MAX_TOKENS_LIMIT: usize = 65536;

/// One step of the splitmix64 generator: returns `(output, next_state)`.
pub fn splitmix64(state: u64) -> (u64, u64) {
    let next = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = next;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31), next)
}

/// Uniform in `[0, 1)` from the top 53 bits of one splitmix64 output.
pub fn next_uniform(state: u64) -> (f64, u64) {
    let (x, next) = splitmix64(state);
    ((x >> 11) as f64 * (1.0 / (1u64 << 53) as f64), next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Greedy,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// Ignored by the greedy sampler.
    #[serde(default)]
    pub seed: u64,
}

impl SamplerSpec {
    pub fn greedy() -> Self {
        Self {
            kind: SamplerKind::Greedy,
            seed: 0,
        }
    }

    pub fn multinomial(seed: u64) -> Self {
        Self {
            kind: SamplerKind::Multinomial,
            seed,
        }
    }
}

/// Lowest index with the largest probability.
pub fn argmax(probs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &p) in probs.iter().enumerate() {
        if best.is_none_or(|b| p > probs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Inverse-CDF draw: the first index whose running sum exceeds `u`.
pub fn sample_with_uniform(probs: &ProbVector, u: f64) -> Result<TokenId> {
    let p = probs.as_slice();
    if !p.iter().any(|&x| x > 0.0) {
        return Err(Error::InvalidDistribution);
    }
    let mut cumulative = 0.0;
    for (i, &x) in p.iter().enumerate() {
        cumulative += x;
        if u < cumulative && x > 0.0 {
            return Ok(i as TokenId);
        }
    }
    // rounding left u above the final sum
    let last = p.iter().rposition(|&x| x > 0.0).expect("checked above");
    Ok(last as TokenId)
}

/// Draws one token. Multinomial sampling consumes exactly one uniform variate;
/// greedy leaves the state untouched.
pub fn sample_token(
    probs: &ProbVector,
    sampler: SamplerKind,
    rng_state: u64,
) -> Result<(TokenId, u64)> {
    match sampler {
        SamplerKind::Greedy => {
            if !probs.as_slice().iter().any(|&x| x > 0.0) {
                return Err(Error::InvalidDistribution);
            }
            let i = argmax(probs.as_slice()).ok_or(Error::InvalidDistribution)?;
            Ok((i as TokenId, rng_state))
        }
        SamplerKind::Multinomial => {
            let (u, next) = next_uniform(rng_state);
            Ok((sample_with_uniform(probs, u)?, next))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub max_tokens: usize,
    pub pipeline: Pipeline,
    pub sampler: SamplerSpec,
    /// Keep full raw and processed logit vectors in every [`StepTrace`].
    pub full_trace: bool,
}

impl GenerationConfig {
    pub fn new(max_tokens: usize, pipeline: Pipeline, sampler: SamplerSpec) -> Result<Self> {
        if max_tokens == 0 || max_tokens > MAX_TOKENS_LIMIT {
            return Err(Error::Config(format!(
                "max_tokens must be in 1..={MAX_TOKENS_LIMIT}, got {max_tokens}"
            )));
        }
        Ok(Self {
            max_tokens,
            pipeline,
            sampler,
            full_trace: false,
        })
    }

    pub fn with_full_trace(mut self, on: bool) -> Self {
        self.full_trace = on;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Finish {
    Eos,
    LengthLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step_index: usize,
    pub raw_digest: u64,
    pub processed_digest: u64,
    /// Original probability mass outside the pipeline's banned set.
    pub allowed_mass: f64,
    pub log_allowed_mass: f64,
    pub chosen: TokenId,
    pub raw: Option<LogitVector>,
    pub processed: Option<LogitVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Emitted ids only (the prompt is not repeated), including a final eos.
    pub tokens: Vec<TokenId>,
    pub finished: Finish,
    pub steps: Vec<StepTrace>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Order-sensitive FNV-1a hash of the vector rounded to 1e-9.
pub fn logit_digest(values: &[f64]) -> u64 {
    let mut h = FNV_OFFSET;
    for &v in values {
        let q: i64 = if v == f64::NEG_INFINITY {
            i64::MIN
        } else {
            (v * 1e9).round() as i64
        };
        for b in q.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Runs model → pipeline → softmax → sampler until eos or `max_tokens`.
pub fn generate(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    config: &GenerationConfig,
) -> Result<GenerationResult> {
    let size = model.vocab_size();
    if let Some(&bad) = prompt.iter().find(|&&id| id as usize >= size) {
        return Err(Error::IndexOutOfRange {
            index: bad as usize,
            size,
        });
    }
    let banned = config.pipeline.banned();
    banned.check_range(size)?;
    let eos = model.eos_id();
    let mut history = prompt.to_vec();
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut state = config.sampler.seed;
    let mut finished = Finish::LengthLimit;

    for step in 0..config.max_tokens {
        let at_step = |e: Error| Error::Step {
            step,
            source: Box::new(e),
        };
        let ctx = StepContext::new(&history, step);
        let raw = model.next_logits(&ctx).map_err(at_step)?;
        if raw.len() != size {
            return Err(at_step(Error::DimensionMismatch {
                expected: size,
                found: raw.len(),
            }));
        }
        let processed = run_pipeline(&config.pipeline, &ctx, &raw).map_err(at_step)?;
        let probs = softmax(&processed).map_err(at_step)?;
        let (chosen, next_state) =
            sample_token(&probs, config.sampler.kind, state).map_err(at_step)?;
        state = next_state;

        let log_z =
            allowed_log_mass(&log_softmax(&raw).map_err(at_step)?, &banned).map_err(at_step)?;
        steps.push(StepTrace {
            step_index: step,
            raw_digest: logit_digest(raw.as_slice()),
            processed_digest: logit_digest(processed.as_slice()),
            allowed_mass: log_z.exp(),
            log_allowed_mass: log_z,
            chosen,
            raw: config.full_trace.then_some(raw),
            processed: config.full_trace.then_some(processed),
        });
        history.push(chosen);
        tokens.push(chosen);
        if chosen == eos {
            finished = Finish::Eos;
            break;
        }
    }
    Ok(GenerationResult {
        tokens,
        finished,
        steps,
    })
}

/// Describes a stage for config echoes.
pub fn stage_echo(stage: &Stage) -> serde_json::Value {
    match stage {
        Stage::NaiveMask(b) | Stage::Gidle(b) => {
            json!({"stage": stage.name(), "banned": b.len(), "banned_digest": format!("{:016x}", index_digest(b.as_slice()))})
        }
        Stage::Temperature(t) => json!({"stage": stage.name(), "t": t}),
        Stage::TopK(k) => json!({"stage": stage.name(), "k": k}),
        Stage::TopP(p) => json!({"stage": stage.name(), "p": p}),
        Stage::RepetitionPenalty(g) => json!({"stage": stage.name(), "gamma": g}),
    }
}

fn index_digest(ids: &[TokenId]) -> u64 {
    let mut h = FNV_OFFSET;
    for id in ids {
        for b in id.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

fn json_logits(v: &LogitVector) -> Vec<Option<f64>> {
    v.as_slice()
        .iter()
        .map(|x| x.is_finite().then_some(*x))
        .collect()
}

/// Writes the line-delimited trace: one header record echoing the run, then
/// one record per step. `-inf` logits in full traces are written as `null`.
pub fn write_trace<W: Write>(
    mut out: W,
    header: &serde_json::Value,
    config: &GenerationConfig,
    prompt: &[TokenId],
    result: &GenerationResult,
) -> Result<()> {
    let pipeline: Vec<_> = config.pipeline.stages().iter().map(stage_echo).collect();
    let head = json!({
        "record": "header",
        "run": header,
        "prompt": prompt,
        "max_tokens": config.max_tokens,
        "sampler": config.sampler,
        "pipeline": pipeline,
        "finished": result.finished,
        "tokens": result.tokens,
    });
    let io = |e: std::io::Error| Error::io("<trace>", e);
    serde_json::to_writer(&mut out, &head).map_err(|e| Error::json("trace header", e))?;
    out.write_all(b"\n").map_err(io)?;
    for s in &result.steps {
        let mut rec = json!({
            "i": s.step_index,
            "z": s.allowed_mass,
            "chosen": s.chosen,
            "digest_raw": format!("{:016x}", s.raw_digest),
            "digest_proc": format!("{:016x}", s.processed_digest),
        });
        if let (Some(raw), Some(proc_)) = (&s.raw, &s.processed) {
            rec["raw"] = json!(json_logits(raw));
            rec["processed"] = json!(json_logits(proc_));
        }
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::json("trace step", e))?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}
