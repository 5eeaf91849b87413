//! Command implementations behind the `gidle` binary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 infeasible constraint,
//! 4 runtime failure.

pub mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use gidle_core::decode::{generate, write_trace, GenerationConfig, SamplerKind, SamplerSpec};
use gidle_core::diagnostics::{run_experiment, ExperimentConfig, ExperimentReport};
use gidle_core::numerics::IndexSet;
use gidle_core::processors::{Method, Pipeline, PipelineDescriptor};
use gidle_core::toylm::{load_corpus, train_ngram, LanguageModel, TableModel};
use gidle_core::vocab::{build_ban_set, classify_token, BanMode, BanSet, ScriptName, Vocabulary};
use gidle_core::{Error, VERSION};
use serde_json::json;

pub use manifest::RunManifest;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const THREADS_ENV: &str = "GIDLE_THREADS";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn with_code(code: i32, e: Error) -> Self {
        let code = if e.is_infeasible() {
            EXIT_INFEASIBLE
        } else {
            code
        };
        Self {
            code,
            message: e.to_string(),
        }
    }

    pub fn config(e: Error) -> Self {
        Self::with_code(EXIT_CONFIG, e)
    }

    pub fn runtime(e: Error) -> Self {
        Self::with_code(EXIT_RUNTIME, e)
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "gidle",
    version,
    about = "Constrained decoding: naive masking vs renormalised logit exclusion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a ban set from script rules and write it as a document.
    Banset {
        #[command(flatten)]
        run: RunFlags,
        /// Output path (default: <out-dir>/banset.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one trace file per (prompt, seed) for a single method.
    Generate {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Run the baseline / naive / gidle arms and write the mean-variance report.
    Compare {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Print a vocabulary and ban-set summary.
    Inspect {
        #[command(flatten)]
        run: RunFlags,
        /// Existing ban-set document to summarise instead of building one.
        #[arg(long)]
        banset: Option<PathBuf>,
    },
}

/// Flags mirroring the run-manifest fields; each overrides the manifest.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub table_model: Option<PathBuf>,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated script classes, or `none`.
    #[arg(long)]
    pub ban_scripts: Option<String>,
    /// Comma-separated token ids to ban explicitly.
    #[arg(long)]
    pub ban_ids: Option<String>,
    #[arg(long, value_parser = parse_ban_mode)]
    pub ban_mode: Option<BanMode>,
    /// Pipeline descriptor document.
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long, value_parser = parse_sampler)]
    pub sampler: Option<SamplerKind>,
    /// `start..end` or a comma-separated list.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub model_name: Option<String>,
    /// Store full logit vectors in traces.
    #[arg(long)]
    pub full_trace: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ban_mode(s: &str) -> Result<BanMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    match s {
        "greedy" => Ok(SamplerKind::Greedy),
        "multinomial" => Ok(SamplerKind::Multinomial),
        other => Err(format!("unknown sampler {other:?}")),
    }
}

fn parse_scripts(s: &str) -> gidle_core::Result<BTreeSet<ScriptName>> {
    if s.trim().eq_ignore_ascii_case("none") || s.trim().is_empty() {
        return Ok(BTreeSet::new());
    }
    s.split(',').map(str::parse).collect()
}

fn parse_ids(s: &str) -> gidle_core::Result<Vec<u32>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad token id {t:?}")))
        })
        .collect()
}

impl RunFlags {
    /// The manifest (if any) with every given flag applied on top.
    pub fn resolve(&self) -> gidle_core::Result<RunManifest> {
        let mut m = match &self.manifest {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        if let Some(v) = &self.vocab {
            m.vocabulary = Some(v.clone());
        }
        if let Some(c) = &self.corpus {
            m.corpus = Some(c.clone());
            m.table_model = None;
        }
        if let Some(t) = &self.table_model {
            m.table_model = Some(t.clone());
            m.corpus = None;
        }
        if self.order.is_some() {
            m.order = self.order;
        }
        if self.alpha.is_some() {
            m.alpha = self.alpha;
        }
        if let Some(s) = &self.ban_scripts {
            m.ban_spec.scripts = parse_scripts(s)?;
        }
        if let Some(ids) = &self.ban_ids {
            m.ban_spec.extra_ids = parse_ids(ids)?;
        }
        if let Some(mode) = self.ban_mode {
            m.ban_spec.mode = mode;
        }
        if let Some(p) = &self.pipeline {
            let bytes =
                std::fs::read(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let mut desc = PipelineDescriptor::from_json_slice(&bytes)?;
            let base = p.parent().unwrap_or(Path::new(""));
            for rec in &mut desc.0 {
                use gidle_core::processors::StageRecord;
                if let StageRecord::NaiveMask { banset } | StageRecord::Gidle { banset } = rec {
                    if Path::new(banset.as_str()).is_relative() {
                        *banset = base.join(&*banset).to_string_lossy().into_owned();
                    }
                }
            }
            m.pipeline = desc;
        }
        if self.sampler.is_some() {
            m.sampler = self.sampler;
        }
        if let Some(s) = &self.seeds {
            m.seeds = Some(manifest::Seeds::Range(s.clone()));
            m.seeds()?;
        }
        if !self.prompts.is_empty() {
            m.prompts = self.prompts.clone();
        }
        if self.max_tokens.is_some() {
            m.max_tokens = self.max_tokens;
        }
        if let Some(o) = &self.out_dir {
            m.output_dir = Some(o.clone());
        }
        if let Some(n) = &self.model_name {
            m.model_name = Some(n.clone());
        }
        if self.full_trace {
            m.full_trace = true;
        }
        m.check_paths()?;
        Ok(m)
    }
}

/// Everything a run needs, loaded and validated.
pub struct Workspace {
    pub manifest: RunManifest,
    pub vocab: Vocabulary,
    pub banset: BanSet,
}

impl Workspace {
    pub fn open(manifest: RunManifest) -> CliResult<Self> {
        let vocab_path = manifest
            .vocabulary
            .as_ref()
            .ok_or_else(|| CliError::config(Error::Config("no vocabulary given".into())))?;
        let vocab = Vocabulary::load(vocab_path).map_err(CliError::config)?;
        let banset = build_ban_set(&vocab, &manifest.ban_spec).map_err(CliError::config)?;
        Ok(Self {
            manifest,
            vocab,
            banset,
        })
    }

    pub fn model(&self) -> CliResult<Box<dyn LanguageModel>> {
        let m = &self.manifest;
        let model: Box<dyn LanguageModel> = match (&m.corpus, &m.table_model) {
            (Some(corpus), None) => {
                let seqs = load_corpus(corpus, &self.vocab).map_err(CliError::config)?;
                Box::new(
                    train_ngram(&self.vocab, &seqs, m.order(), m.alpha())
                        .map_err(CliError::config)?,
                )
            }
            (None, Some(table)) => Box::new(TableModel::load(table).map_err(CliError::config)?),
            (Some(_), Some(_)) => {
                return Err(CliError::config(Error::Config(
                    "give either a corpus or a table model, not both".into(),
                )))
            }
            (None, None) => {
                return Err(CliError::config(Error::Config(
                    "no model given (corpus or table_model)".into(),
                )))
            }
        };
        if model.vocab_size() != self.vocab.size() || model.eos_id() != self.vocab.eos_id() {
            return Err(CliError::config(Error::Config(format!(
                "model has {} tokens (eos {}), vocabulary has {} (eos {})",
                model.vocab_size(),
                model.eos_id(),
                self.vocab.size(),
                self.vocab.eos_id()
            ))));
        }
        Ok(model)
    }

    pub fn pipeline(&self, arm: Method) -> CliResult<Pipeline> {
        let vocab = &self.vocab;
        self.manifest
            .pipeline
            .resolve(arm, self.banset.indices(), |path| {
                let doc = BanSet::load_document(path)?;
                Ok(BanSet::from_document(doc, vocab)?.indices().clone())
            })
            .map_err(CliError::config)
    }

    pub fn prompts(&self) -> CliResult<Vec<Vec<u32>>> {
        if self.manifest.prompts.is_empty() {
            return Err(CliError::config(Error::Config("no prompts given".into())));
        }
        self.manifest
            .prompts
            .iter()
            .map(|p| self.vocab.tokenize(p).map_err(CliError::config))
            .collect()
    }

    pub fn seeds(&self) -> CliResult<Vec<u64>> {
        self.manifest.seeds().map_err(CliError::config)
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn emit(out: &mut dyn Write, text: impl fmt::Display) -> CliResult<()> {
    writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                CliError::config(Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                )))
            }),
        Err(_) => Ok(None),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Banset { run, out: path } => cmd_banset(&run, path, out),
        Command::Generate { run, method } => cmd_generate(&run, method, out),
        Command::Compare { run } => cmd_compare(&run, out),
        Command::Inspect { run, banset } => cmd_inspect(&run, banset, out),
    }
}

fn banset_summary(banset: &BanSet, vocab: &Vocabulary) -> String {
    let mut s = format!("banned {}/{}", banset.len(), vocab.size());
    for (reason, n) in banset.counts_by_reason() {
        s.push_str(&format!("\n  {reason}: {n}"));
    }
    s
}

pub fn cmd_banset(flags: &RunFlags, path: Option<PathBuf>, out: &mut dyn Write) -> CliResult<()> {
    let manifest = flags.resolve().map_err(CliError::config)?;
    let ws = Workspace::open(manifest)?;
    let path = path.unwrap_or_else(|| ws.manifest.output_dir().join("banset.json"));
    let mut doc = serde_json::to_string_pretty(&ws.banset.to_document())
        .map_err(|e| CliError::runtime(Error::Config(e.to_string())))?;
    doc.push('\n');
    write_file(&path, doc.as_bytes())?;
    emit(out, banset_summary(&ws.banset, &ws.vocab))?;
    emit(out, format_args!("wrote {}", path.display()))
}

pub fn trace_path(out_dir: &Path, method: Method, prompt: usize, seed: u64) -> PathBuf {
    out_dir
        .join("traces")
        .join(method.as_str())
        .join(format!("p{prompt:03}_s{seed}.jsonl"))
}

pub fn cmd_generate(flags: &RunFlags, method: Method, out: &mut dyn Write) -> CliResult<()> {
    let manifest = flags.resolve().map_err(CliError::config)?;
    let ws = Workspace::open(manifest)?;
    let model = ws.model()?;
    let prompts = ws.prompts()?;
    let seeds = ws.seeds()?;
    let pipeline = ws.pipeline(method)?;
    let m = &ws.manifest;
    let out_dir = m.output_dir();

    for (p, prompt) in prompts.iter().enumerate() {
        for &seed in &seeds {
            let cfg = GenerationConfig::new(
                m.max_tokens(),
                pipeline.clone(),
                SamplerSpec {
                    kind: m.sampler(),
                    seed,
                },
            )
            .map_err(CliError::config)?
            .with_full_trace(m.full_trace);
            let result = generate(model.as_ref(), prompt, &cfg).map_err(|e| CliError {
                message: format!("method {method}, prompt {p}, seed {seed}: {e}"),
                ..CliError::runtime(e)
            })?;
            let header = json!({
                "version": VERSION,
                "model": m.model_name(),
                "method": method,
                "prompt_index": p,
                "prompt_text": m.prompts[p],
                "seed": seed,
                "ban_mode": m.ban_mode(),
                "banned_count": ws.banset.len(),
                "vocab_size": ws.vocab.size(),
                "text": ws.vocab.detokenize(&result.tokens),
            });
            let mut buf = Vec::new();
            write_trace(&mut buf, &header, &cfg, prompt, &result).map_err(CliError::runtime)?;
            let path = trace_path(&out_dir, method, p, seed);
            write_file(&path, &buf)?;
            emit(
                out,
                format_args!(
                    "prompt {p} seed {seed}: {} tokens ({:?}) -> {}",
                    result.tokens.len(),
                    result.finished,
                    path.display()
                ),
            )?;
        }
    }
    Ok(())
}

/// Builds the experiment configuration for the manifest's arms.
pub fn experiment_config(ws: &Workspace, threads: Option<usize>) -> CliResult<ExperimentConfig> {
    let m = &ws.manifest;
    let mut arms = BTreeMap::new();
    for arm in m.arms() {
        arms.insert(arm, ws.pipeline(arm)?);
    }
    Ok(ExperimentConfig {
        model_name: m.model_name(),
        max_tokens: m.max_tokens(),
        sampler: m.sampler(),
        banned: ws.banset.indices().clone(),
        banned_scripts: m.ban_spec.scripts.clone(),
        ban_mode: m.ban_mode(),
        allowed_scripts: m.allowed_scripts(),
        arms,
        threads,
    })
}

pub fn compare(ws: &Workspace, threads: Option<usize>) -> CliResult<ExperimentReport> {
    let model = ws.model()?;
    let prompts = ws.prompts()?;
    let seeds = ws.seeds()?;
    if seeds.len() < 2 {
        return Err(CliError::config(Error::Config(
            "compare needs at least 2 seeds".into(),
        )));
    }
    let cfg = experiment_config(ws, threads)?;
    run_experiment(model.as_ref(), &ws.vocab, &prompts, &seeds, &cfg).map_err(CliError::runtime)
}

pub fn cmd_compare(flags: &RunFlags, out: &mut dyn Write) -> CliResult<()> {
    let manifest = flags.resolve().map_err(CliError::config)?;
    let ws = Workspace::open(manifest)?;
    let report = compare(&ws, threads_from_env()?)?;
    let out_dir = ws.manifest.output_dir();
    let json_path = out_dir.join("report.json");
    let csv_path = out_dir.join("report.csv");
    write_file(
        &json_path,
        report.to_json().map_err(CliError::runtime)?.as_bytes(),
    )?;
    write_file(&csv_path, report.to_csv().as_bytes())?;

    emit(out, report.to_table().trim_end())?;
    for arm in &report.arms {
        emit(
            out,
            format_args!(
                "{}: {} cells, {} leaking, {} failed, mean Z {}",
                arm.method,
                arm.cells,
                arm.leaking_cells,
                arm.failures,
                arm.distortion
                    .mean_z
                    .map_or_else(|| "-".into(), |z| format!("{z:.4}")),
            ),
        )?;
    }
    if report.header.non_shift_invariant_stage {
        emit(out, "note: pipeline contains a non-shift-invariant stage")?;
    }
    emit(
        out,
        format_args!("wrote {} and {}", json_path.display(), csv_path.display()),
    )?;
    if report.arms.iter().any(|a| a.scores.is_none()) {
        return Err(CliError {
            code: EXIT_RUNTIME,
            message: "at least one arm produced no successful cells".into(),
        });
    }
    Ok(())
}

pub fn cmd_inspect(
    flags: &RunFlags,
    banset: Option<PathBuf>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let manifest = flags.resolve().map_err(CliError::config)?;
    let ws = Workspace::open(manifest)?;
    let vocab = &ws.vocab;
    emit(
        out,
        format_args!(
            "vocabulary: {} tokens, eos {} ({:?})",
            vocab.size(),
            vocab.eos_id(),
            vocab.token(vocab.eos_id()).unwrap_or_default()
        ),
    )?;
    let classes = gidle_core::vocab::builtin_classes();
    let mut per_script: BTreeMap<ScriptName, usize> = BTreeMap::new();
    let mut unclassified = 0;
    for tok in vocab.tokens() {
        let found = classify_token(tok, classes);
        if found.is_empty() {
            unclassified += 1;
        }
        for s in found {
            *per_script.entry(s).or_default() += 1;
        }
    }
    for (s, n) in &per_script {
        emit(out, format_args!("  {s}: {n}"))?;
    }
    emit(out, format_args!("  unclassified: {unclassified}"))?;
    let set = match banset {
        Some(p) => {
            let doc = BanSet::load_document(&p).map_err(CliError::config)?;
            BanSet::from_document(doc, vocab).map_err(CliError::config)?
        }
        None => ws.banset.clone(),
    };
    emit(out, banset_summary(&set, vocab))
}

/// Token ids of `set` that appear in `ids`.
pub fn banned_hits(ids: &[u32], set: &IndexSet) -> usize {
    ids.iter().filter(|&&t| set.contains(t)).count()
}
