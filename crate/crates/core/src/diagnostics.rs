//! Per-step distortion measurement and the three-arm experiment harness.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{generate, stage_echo, GenerationConfig, SamplerKind, SamplerSpec};
use crate::error::{Error, Result};
use crate::numerics::{
    allowed_log_mass, kl_divergence, log_softmax, softmax, total_variation, IndexSet, LogitVector,
};
use crate::processors::{gidle_process, naive_mask, Method, Pipeline};
use crate::toylm::LanguageModel;
use crate::vocab::{builtin_class, BanMode, ScriptName, Vocabulary};
use crate::TokenId;

pub const VARIANCE_ESTIMATOR: &str = "unbiased (n-1)";
pub const Z_BUCKETS: usize = 10;

/// `1 + 4 * (fraction of non-whitespace code points in an allowed script)`.
/// Text with no non-whitespace code points scores 1.
pub fn proxy_score(text: &str, allowed_scripts: &BTreeSet<ScriptName>) -> f64 {
    let classes: Vec<_> = allowed_scripts.iter().map(|&s| builtin_class(s)).collect();
    let mut total = 0usize;
    let mut allowed = 0usize;
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if classes.iter().any(|cl| cl.contains(c)) {
            allowed += 1;
        }
    }
    if total == 0 {
        return 1.0;
    }
    1.0 + 4.0 * allowed as f64 / total as f64
}

/// Number of code points of `text` inside any of `scripts`.
pub fn script_char_count(text: &str, scripts: &BTreeSet<ScriptName>) -> usize {
    let classes: Vec<_> = scripts.iter().map(|&s| builtin_class(s)).collect();
    text.chars()
        .filter(|&c| classes.iter().any(|cl| cl.contains(c)))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionRecord {
    pub step_index: usize,
    /// Original mass on allowed tokens.
    pub z: f64,
    pub kl_q_p: f64,
    pub tv: f64,
    pub method: Method,
}

/// Compares the distribution a method samples from against `softmax(raw)`.
pub fn step_distortion(
    step_index: usize,
    raw: &LogitVector,
    banned: &IndexSet,
    method: Method,
) -> Result<DistortionRecord> {
    let p = softmax(raw)?;
    let log_z = allowed_log_mass(&log_softmax(raw)?, banned)?;
    let q = match method {
        Method::Baseline => p.clone(),
        Method::Naive => softmax(&naive_mask(raw, banned)?)?,
        Method::Gidle => softmax(&gidle_process(raw, banned)?)?,
    };
    Ok(DistortionRecord {
        step_index,
        z: log_z.exp(),
        kl_q_p: kl_divergence(&q, &p)?,
        tv: total_variation(&q, &p)?,
        method,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub n: usize,
    pub mean: f64,
    /// Absent for a single observation.
    pub variance: Option<f64>,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(scores: &[f64]) -> Result<ScoreStats> {
    if scores.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let variance =
        (n >= 2).then(|| scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScoreStats {
        n,
        mean,
        variance,
        min,
        max,
    })
}

/// Bucket `k` holds `Z` in `(10^-(k+1), 10^-k]`; the last bucket also takes
/// everything at or below `1e-9`.
pub fn z_bucket(z: f64) -> usize {
    const EDGES: [f64; Z_BUCKETS - 1] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9];
    EDGES.iter().take_while(|&&edge| z <= edge).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSummary {
    pub steps: usize,
    pub mean_z: Option<f64>,
    pub min_z: Option<f64>,
    pub mean_kl: Option<f64>,
    pub max_kl: Option<f64>,
    pub mean_tv: Option<f64>,
    pub z_histogram: [u64; Z_BUCKETS],
}

impl DistortionSummary {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a DistortionRecord>) -> Self {
        let mut steps = 0usize;
        let (mut sum_z, mut sum_kl, mut sum_tv) = (0.0, 0.0, 0.0);
        let mut min_z = f64::INFINITY;
        let mut max_kl = f64::NEG_INFINITY;
        let mut hist = [0u64; Z_BUCKETS];
        for r in records {
            steps += 1;
            sum_z += r.z;
            sum_kl += r.kl_q_p;
            sum_tv += r.tv;
            min_z = min_z.min(r.z);
            max_kl = max_kl.max(r.kl_q_p);
            hist[z_bucket(r.z)] += 1;
        }
        let avg = |s: f64| (steps > 0).then(|| s / steps as f64);
        Self {
            steps,
            mean_z: avg(sum_z),
            min_z: (steps > 0).then_some(min_z),
            mean_kl: avg(sum_kl),
            max_kl: (steps > 0).then_some(max_kl),
            mean_tv: avg(sum_tv),
            z_histogram: hist,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model_name: String,
    pub max_tokens: usize,
    pub sampler: SamplerKind,
    /// The ban set every masking arm enforces; also used to measure `Z` for the
    /// baseline arm.
    pub banned: IndexSet,
    pub banned_scripts: BTreeSet<ScriptName>,
    pub ban_mode: BanMode,
    pub allowed_scripts: BTreeSet<ScriptName>,
    /// Fully resolved pipeline per requested arm.
    pub arms: BTreeMap<Method, Pipeline>,
    /// Worker cap; `None` uses the global pool.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: Method,
    pub prompt: usize,
    pub seed: u64,
    pub score: f64,
    pub emitted: usize,
    pub finished_eos: bool,
    /// Code points from banned scripts in the emitted text.
    pub banned_script_chars: usize,
    /// Emitted ids that are members of the ban set.
    pub banned_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub method: Method,
    pub prompt: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub model: String,
    pub method: Method,
    pub scores: Option<ScoreStats>,
    pub distortion: DistortionSummary,
    pub cells: usize,
    pub failures: usize,
    /// Cells whose output contains at least one banned-script code point.
    pub leaking_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub model: String,
    pub variance_estimator: String,
    pub ban_mode: BanMode,
    pub banned_scripts: BTreeSet<ScriptName>,
    pub banned_count: usize,
    pub vocab_size: usize,
    pub allowed_scripts: BTreeSet<ScriptName>,
    pub max_tokens: usize,
    pub sampler: SamplerKind,
    pub prompts: usize,
    pub seeds: Vec<u64>,
    pub pipelines: BTreeMap<Method, Vec<serde_json::Value>>,
    pub non_shift_invariant_stage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub header: ReportHeader,
    pub arms: Vec<ArmSummary>,
    pub cells: Vec<CellRecord>,
    pub failures: Vec<FailureRecord>,
}

impl ExperimentReport {
    pub fn arm(&self, method: Method) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| Error::json("experiment report", e))?;
        s.push('\n');
        Ok(s)
    }

    /// `model,method,mean,variance` rows, one per arm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,method,mean,variance\n");
        for arm in &self.arms {
            let (mean, var) = match &arm.scores {
                Some(s) => (
                    format!("{:.6}", s.mean),
                    s.variance.map(|v| format!("{v:.6}")).unwrap_or_default(),
                ),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&arm.model),
                arm.method,
                mean,
                var
            ));
        }
        out
    }

    /// Fixed-width rendering of the CSV table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:<10} {:>10} {:>10}\n",
            "model", "method", "mean", "variance"
        );
        for arm in &self.arms {
            let (mean, var) = match &arm.scores {
                Some(s) => (
                    format!("{:.6}", s.mean),
                    s.variance.map_or_else(|| "-".into(), |v| format!("{v:.6}")),
                ),
                None => ("-".into(), "-".into()),
            };
            out.push_str(&format!(
                "{:<24} {:<10} {:>10} {:>10}\n",
                arm.model,
                arm.method.as_str(),
                mean,
                var
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

struct CellOutcome {
    record: CellRecord,
    distortion: Vec<DistortionRecord>,
}

fn run_cell(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    prompt: &[TokenId],
    method: Method,
    pipeline: &Pipeline,
    seed: u64,
    config: &ExperimentConfig,
) -> Result<CellOutcome> {
    let gen_cfg = GenerationConfig::new(
        config.max_tokens,
        pipeline.clone(),
        SamplerSpec {
            kind: config.sampler,
            seed,
        },
    )?
    .with_full_trace(true);
    let result = generate(model, prompt, &gen_cfg)?;
    let text = vocab.detokenize(&result.tokens);
    let distortion = result
        .steps
        .iter()
        .map(|s| {
            let raw = s.raw.as_ref().expect("full trace requested");
            step_distortion(s.step_index, raw, &config.banned, method)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CellOutcome {
        record: CellRecord {
            method,
            prompt: 0,
            seed,
            score: proxy_score(&text, &config.allowed_scripts),
            emitted: result.tokens.len(),
            finished_eos: result.finished == crate::decode::Finish::Eos,
            banned_script_chars: script_char_count(&text, &config.banned_scripts),
            banned_tokens: result
                .tokens
                .iter()
                .filter(|&&t| config.banned.contains(t))
                .count(),
        },
        distortion,
    })
}

/// Runs every `(arm, prompt, seed)` cell, scores it, and aggregates per arm.
///
/// Cells may run concurrently; results are keyed and reduced in sorted
/// `(arm, prompt, seed)` order, so the report does not depend on scheduling.
/// A failing cell is recorded and the run continues.
pub fn run_experiment(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    prompts: &[Vec<TokenId>],
    seeds: &[u64],
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    if prompts.is_empty() {
        return Err(Error::Config("need at least 1 prompt".into()));
    }
    if config.arms.is_empty() {
        return Err(Error::Config("no experiment arms requested".into()));
    }
    if model.vocab_size() != vocab.size() {
        return Err(Error::DimensionMismatch {
            expected: vocab.size(),
            found: model.vocab_size(),
        });
    }
    config.banned.check_range(vocab.size())?;

    let mut keys = Vec::new();
    for &method in config.arms.keys() {
        for p in 0..prompts.len() {
            for &seed in seeds {
                keys.push((method, p, seed));
            }
        }
    }
    let work = || {
        keys.par_iter()
            .map(|&(method, p, seed)| {
                let outcome = run_cell(
                    model,
                    vocab,
                    &prompts[p],
                    method,
                    &config.arms[&method],
                    seed,
                    config,
                );
                ((method, p, seed), outcome)
            })
            .collect::<Vec<_>>()
    };
    let mut results = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    results.sort_by_key(|(k, _)| *k);

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut per_arm: BTreeMap<Method, (Vec<f64>, Vec<DistortionRecord>, usize, usize)> = config
        .arms
        .keys()
        .map(|&m| (m, Default::default()))
        .collect();
    for ((method, p, seed), outcome) in results {
        let slot = per_arm.get_mut(&method).expect("arm present");
        match outcome {
            Ok(mut o) => {
                o.record.prompt = p;
                slot.0.push(o.record.score);
                slot.1.extend(o.distortion);
                if o.record.banned_script_chars > 0 {
                    slot.3 += 1;
                }
                cells.push(o.record);
            }
            Err(e) => {
                slot.2 += 1;
                failures.push(FailureRecord {
                    method,
                    prompt: p,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }

    let arms = per_arm
        .into_iter()
        .map(
            |(method, (scores, distortion, failed, leaking))| ArmSummary {
                model: config.model_name.clone(),
                method,
                scores: summarize(&scores).ok(),
                distortion: DistortionSummary::from_records(&distortion),
                cells: scores.len() + failed,
                failures: failed,
                leaking_cells: leaking,
            },
        )
        .collect();

    let header = ReportHeader {
        model: config.model_name.clone(),
        variance_estimator: VARIANCE_ESTIMATOR.into(),
        ban_mode: config.ban_mode,
        banned_scripts: config.banned_scripts.clone(),
        banned_count: config.banned.len(),
        vocab_size: vocab.size(),
        allowed_scripts: config.allowed_scripts.clone(),
        max_tokens: config.max_tokens,
        sampler: config.sampler,
        prompts: prompts.len(),
        seeds: seeds.to_vec(),
        pipelines: config
            .arms
            .iter()
            .map(|(&m, p)| (m, p.stages().iter().map(stage_echo).collect()))
            .collect(),
        non_shift_invariant_stage: config
            .arms
            .values()
            .any(Pipeline::has_non_shift_invariant_stage),
    };
    Ok(ExperimentReport {
        header,
        arms,
        cells,
        failures,
    })
}
