//! Command-line front end: `train`, `generate`, `eval`, `oracle-check`, `sweep`.
//!
//! Every subcommand resolves one [`RunConfig`] from built-in defaults, an
//! optional JSON file and command-line flags (in increasing priority), then
//! writes the resolved config to `config.json` in the output directory.
//! Re-running with that file reproduces the outputs.
//!
//! Exit codes: 0 on success, 2 for bad input or config, 3 for numeric failure.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{sample_toy_corpus, CorpusStore, MarkovToyLanguage, Vocab, VocabMode};
use crate::denoiser::{load_checkpoint, CheckpointMetadata, TimeConditioning, TransformerConfig, TransformerDenoiser};
use crate::eval::{evaluate, EvalReport, ReferenceModel};
use crate::inference::{generate_from, ClampMask, InferenceConfig, Scheme};
use crate::oracle::{oracle_check, OracleCheckConfig};
use crate::trainer::{train, TrainConfig, TrainSinks};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.klf";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LANGUAGE_FILE: &str = "language.json";
pub const REAL_FILE: &str = "real.txt";
pub const SAMPLES_FILE: &str = "samples.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ORACLE_FILE: &str = "oracle_report.json";

pub const SWEEP_HEADER: &str = "value,entropy,ref_perplexity,unigram_tv,bigram_tv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

/// Architecture; `vocab_size` and `max_seq_len` come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub time_conditioning: TimeConditioning,
    pub dtype: Dtype,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = TransformerConfig::desk_scale(2, 1);
        Self {
            layers: d.layers,
            heads: d.heads,
            embed_dim: d.embed_dim,
            time_conditioning: d.time_conditioning,
            dtype: Dtype::F32,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize, max_seq_len: usize) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            embed_dim: self.embed_dim,
            vocab_size,
            max_seq_len,
            time_conditioning: self.time_conditioning,
        }
    }
}

/// A sampled order-2 Markov language, used when no text file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    /// Load the transition tensor from here instead of drawing one.
    pub language: Option<PathBuf>,
    pub vocab_size: usize,
    pub concentration: f64,
    /// When set, transition rows are drawn around a shared bigram row with
    /// this strength instead of independently.
    pub backoff: Option<f64>,
    pub seed: u64,
    pub num_sequences: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            language: None,
            vocab_size: 16,
            concentration: 0.3,
            backoff: None,
            seed: 0,
            num_sequences: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// UTF-8 text, one document per line.
    pub text_path: Option<PathBuf>,
    pub vocab_mode: VocabMode,
    /// Reuse a saved vocabulary instead of building one from the text.
    pub vocab_path: Option<PathBuf>,
    /// Pad short lines (char mode); without it they are dropped.
    pub pad: bool,
    pub toy: Option<ToySection>,
    pub seq_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            text_path: None,
            vocab_mode: VocabMode::Char,
            vocab_path: None,
            pad: true,
            toy: None,
            seq_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub checkpoint: Option<PathBuf>,
    pub count: usize,
    /// `pos:token_id,...`
    pub clamp: Option<String>,
    /// Record the first trajectory to `trajectory.csv`.
    pub trajectory: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            count: 100,
            clamp: None,
            trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub generated: Option<PathBuf>,
    /// Real text the reference model is fit on. Defaults to the training
    /// text recorded in the checkpoint.
    pub real: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Defaults to the longest generated line.
    pub seq_len: Option<usize>,
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    TStar,
    TopK,
    Nfe,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::TStar => "t_star",
            Self::TopK => "top_k",
            Self::Nfe => "nfe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Option<SweepAxis>,
    pub values: Vec<f64>,
    /// Sequences generated per value.
    pub count: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: None,
            values: Vec::new(),
            count: 200,
        }
    }
}

/// Everything any subcommand can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Worker threads; 1 forces a single thread.
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub corpus: CorpusSection,
    pub inference: InferenceConfig,
    pub generate: GenerateSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub oracle: OracleCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            threads: None,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            corpus: CorpusSection::default(),
            inference: InferenceConfig::default(),
            generate: GenerateSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            oracle: OracleCheckConfig::default(),
        }
    }
}

/// A resolved config plus the JSON the user actually supplied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    explicit: Value,
}

impl Resolved {
    /// Whether the file or a flag set the dotted `path`.
    pub fn is_set(&self, path: &str) -> bool {
        path.split('.').try_fold(&self.explicit, |v, k| v.get(k)).is_some_and(|v| !v.is_null())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Set the dotted `path` of `root` to `value`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in dotted path"));
    }
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        cur = cur.as_object_mut().expect("object").entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Default::default());
    }
    cur.as_object_mut().expect("object").insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// `key=value` with the value read as JSON, falling back to a plain string.
pub fn parse_assignment(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| Error::config(raw, "expected key=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Defaults, then `file`, then `overrides` (dotted path, value) in order.
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Resolved> {
    let mut explicit = Value::Object(Default::default());
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        if !parsed.is_object() {
            return Err(Error::config("config", "top level must be a JSON object"));
        }
        merge(&mut explicit, parsed);
    }
    for (k, v) in overrides {
        set_path(&mut explicit, k, v.clone())?;
    }
    let mut full = serde_json::to_value(RunConfig::default())?;
    merge(&mut full, explicit.clone());
    let config: RunConfig = serde_json::from_value(full).map_err(|e| Error::config("config", e.to_string()))?;
    Ok(Resolved { config, explicit })
}

#[derive(Debug, Parser)]
#[command(name = "klflow", version, about = "Flow matching on the probability simplex for discrete sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 1 gives strictly deterministic scheduling.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override any config field, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GenerateFlags {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<String>,
    /// Number of integration steps (NFE).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub t_star: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Fixed tokens, `pos:token_id,...`.
    #[arg(long)]
    pub clamp: Option<String>,
    /// Real text for the reference model (sweep only).
    #[arg(long)]
    pub real: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser and write a checkpoint and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Text corpus, one document per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate sequences from a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: GenerateFlags,
        /// Also write the first trajectory as CSV.
        #[arg(long)]
        trajectory: bool,
    },
    /// Score generated text against real text.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare a tabular denoiser and the exact ODE with ground truth.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate and evaluate over a list of values of one inference knob.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: GenerateFlags,
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
}

fn push<T: Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: Option<T>) -> Result<()> {
    if let Some(v) = v {
        out.push((key.to_string(), serde_json::to_value(v)?));
    }
    Ok(())
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn common_overrides(common: &Common, out: &mut Vec<(String, Value)>) -> Result<()> {
    for raw in &common.set {
        out.push(parse_assignment(raw)?);
    }
    push(out, "output_dir", common.output_dir.as_deref().map(path_value))?;
    push(out, "threads", common.threads)
}

fn generate_overrides(f: &GenerateFlags, out: &mut Vec<(String, Value)>) -> Result<()> {
    push(out, "generate.checkpoint", f.checkpoint.as_deref().map(path_value))?;
    if let Some(s) = &f.scheme {
        push(out, "inference.scheme", Some(s.parse::<Scheme>()?))?;
    }
    push(out, "inference.steps", f.steps)?;
    push(out, "inference.top_k", f.top_k)?;
    push(out, "inference.t_star", f.t_star)?;
    push(out, "inference.seed", f.seed)?;
    push(out, "inference.seq_len", f.seq_len)?;
    push(out, "generate.count", f.count)?;
    push(out, "generate.clamp", f.clamp.clone())?;
    push(out, "eval.real", f.real.as_deref().map(path_value))
}

/// Map an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    // Log through `eprintln!` so test harnesses capture it.
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|_, record| {
            eprintln!("[{} {}] {}", record.level(), record.target(), record.args());
            Ok(())
        })
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    let mut ov = Vec::new();
    let common = match &command {
        Command::Train {
            common,
            corpus,
            steps,
            lr,
            batch_size,
            seed,
        } => {
            common_overrides(common, &mut ov)?;
            push(&mut ov, "corpus.text_path", corpus.as_deref().map(path_value))?;
            push(&mut ov, "train.steps", *steps)?;
            push(&mut ov, "train.lr", *lr)?;
            push(&mut ov, "train.batch_size", *batch_size)?;
            push(&mut ov, "train.seed", *seed)?;
            common
        }
        Command::Generate {
            common,
            flags,
            trajectory,
        } => {
            common_overrides(common, &mut ov)?;
            generate_overrides(flags, &mut ov)?;
            push(&mut ov, "generate.trajectory", trajectory.then_some(true))?;
            common
        }
        Command::Eval {
            common,
            generated,
            real,
            vocab,
            checkpoint,
        } => {
            common_overrides(common, &mut ov)?;
            push(&mut ov, "eval.generated", generated.as_deref().map(path_value))?;
            push(&mut ov, "eval.real", real.as_deref().map(path_value))?;
            push(&mut ov, "eval.vocab", vocab.as_deref().map(path_value))?;
            push(&mut ov, "generate.checkpoint", checkpoint.as_deref().map(path_value))?;
            common
        }
        Command::OracleCheck { common, samples, seed } => {
            common_overrides(common, &mut ov)?;
            push(&mut ov, "oracle.samples", *samples)?;
            push(&mut ov, "oracle.seed", *seed)?;
            common
        }
        Command::Sweep {
            common,
            flags,
            axis,
            values,
        } => {
            common_overrides(common, &mut ov)?;
            generate_overrides(flags, &mut ov)?;
            push(&mut ov, "sweep.axis", *axis)?;
            if !values.is_empty() {
                push(&mut ov, "sweep.values", Some(values.clone()))?;
            }
            common
        }
    };
    let resolved = resolve_config(common.config.as_deref(), &ov)?;
    let threads = resolved.config.threads;
    let body = move || match command {
        Command::Train { .. } => cmd_train(resolved),
        Command::Generate { .. } => cmd_generate(resolved),
        Command::Eval { .. } => cmd_eval(resolved),
        Command::OracleCheck { .. } => cmd_oracle_check(resolved),
        Command::Sweep { .. } => cmd_sweep(resolved),
    };
    match threads {
        Some(0) => Err(Error::config("threads", "must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?
            .install(body),
        None => body(),
    }
}

fn require_file(field: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
    let p = path.as_ref().ok_or_else(|| Error::config(field, "is required"))?;
    fs::canonicalize(p).map_err(|e| Error::config(field, format!("{}: {e}", p.display())))
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::config("output_dir", format!("{}: {e}", cfg.output_dir.display())))?;
    Ok(cfg.output_dir.clone())
}

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

struct BuiltCorpus {
    corpus: CorpusStore,
    vocab: Vocab,
    language: Option<MarkovToyLanguage>,
    /// Source of real text for evaluation.
    real: PathBuf,
}

fn build_corpus(cfg: &mut RunConfig, out: &Path) -> Result<BuiltCorpus> {
    let seq_len = cfg.corpus.seq_len;
    if seq_len == 0 {
        return Err(Error::config("corpus.seq_len", "must be at least 1"));
    }
    match (&cfg.corpus.text_path, &mut cfg.corpus.toy) {
        (Some(_), Some(_)) => Err(Error::config("corpus", "set either text_path or toy, not both")),
        (None, None) => Err(Error::config("corpus.text_path", "is required (or configure corpus.toy)")),
        (Some(_), None) => {
            let path = require_file("corpus.text_path", &cfg.corpus.text_path)?;
            cfg.corpus.text_path = Some(path.clone());
            let text = fs::read_to_string(&path).map_err(|e| Error::config("corpus.text_path", format!("{}: {e}", path.display())))?;
            let vocab = match &cfg.corpus.vocab_path {
                Some(_) => {
                    let vp = require_file("corpus.vocab_path", &cfg.corpus.vocab_path)?;
                    cfg.corpus.vocab_path = Some(vp.clone());
                    Vocab::load(&vp)?
                }
                None => {
                    // Lines are documents, so newlines never become tokens.
                    let body: String = text.lines().collect();
                    let v = Vocab::build(&body, cfg.corpus.vocab_mode)?;
                    if cfg.corpus.pad && v.pad().is_none() {
                        v.with_pad()
                    } else {
                        v
                    }
                }
            };
            let corpus = CorpusStore::from_text(&text, &vocab, seq_len, true)?;
            if corpus.is_empty() {
                return Err(Error::config("corpus.text_path", "no line yields a full window"));
            }
            Ok(BuiltCorpus {
                corpus,
                vocab,
                language: None,
                real: path,
            })
        }
        (None, Some(toy)) => {
            let lang = match &toy.language {
                Some(p) => {
                    let p = require_file("corpus.toy.language", &Some(p.clone()))?;
                    toy.language = Some(p.clone());
                    MarkovToyLanguage::load(&p)?
                }
                None => match toy.backoff {
                    Some(k) => MarkovToyLanguage::hierarchical(toy.vocab_size, toy.concentration, k, toy.seed)?,
                    None => MarkovToyLanguage::random(toy.vocab_size, toy.concentration, toy.seed)?,
                },
            };
            if toy.num_sequences == 0 {
                return Err(Error::config("corpus.toy.num_sequences", "must be at least 1"));
            }
            let corpus = sample_toy_corpus(&lang, toy.num_sequences, seq_len)?;
            let vocab = Vocab::alphabet(lang.vocab_size)?;
            fs::write(out.join(LANGUAGE_FILE), lang.to_json()?)?;
            let lines = corpus.windows().map(|w| vocab.decode(w)).collect::<Result<Vec<_>>>()?;
            let real = out.join(REAL_FILE);
            write_lines(&real, &lines)?;
            Ok(BuiltCorpus {
                corpus,
                vocab,
                language: Some(lang),
                real: fs::canonicalize(real)?,
            })
        }
    }
}

pub fn cmd_train(resolved: Resolved) -> Result<()> {
    let mut cfg = resolved.config;
    cfg.train.validate()?;
    let out = prepare_output(&cfg)?;
    let built = build_corpus(&mut cfg, &out)?;
    let model = cfg.model.resolve(built.vocab.size(), built.corpus.seq_len());
    model.validate()?;
    built.vocab.save(&out.join(VOCAB_FILE))?;
    write_snapshot(&cfg, &out)?;

    let mut sinks = TrainSinks {
        checkpoint: Some(out.join(CHECKPOINT_FILE)),
        metrics_csv: Some(out.join(METRICS_FILE)),
        ..TrainSinks::default()
    };
    sinks.extra.insert("vocab".into(), serde_json::from_str(&built.vocab.to_json()?)?);
    // Relative to the checkpoint when it lives there, so re-runs in another
    // directory write identical checkpoints.
    let real = built.real.strip_prefix(fs::canonicalize(&out)?).map(Path::to_path_buf).unwrap_or(built.real.clone());
    sinks.extra.insert("real_corpus".into(), path_value(&real));
    if let Some(lang) = &built.language {
        sinks.extra.insert("language".into(), serde_json::to_value(lang)?);
    }
    info!(
        "training on {} windows of length {} (V={}) for {} steps",
        built.corpus.len(),
        built.corpus.seq_len(),
        model.vocab_size,
        cfg.train.steps
    );
    let last = match cfg.model.dtype {
        Dtype::F32 => train::<f32>(&built.corpus, &cfg.train, &model, &sinks)?.losses.last().copied(),
        Dtype::F64 => train::<f64>(&built.corpus, &cfg.train, &model, &sinks)?.losses.last().copied(),
    };
    info!("final loss {:.5}; checkpoint {}", last.unwrap_or(f64::NAN), out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// A checkpoint loaded for inference, with the vocabulary and the real text
/// recorded at training time.
pub struct LoadedModel {
    pub denoiser: TransformerDenoiser<f64>,
    pub metadata: CheckpointMetadata,
    pub vocab: Vocab,
    pub real: Option<PathBuf>,
}

pub fn load_model(path: &Path, vocab_override: Option<&Path>) -> Result<LoadedModel> {
    let ck = load_checkpoint::<f64>(path).map_err(|e| match e {
        Error::Io(io) => Error::config("generate.checkpoint", format!("{}: {io}", path.display())),
        other => other,
    })?;
    let v = ck.metadata.config.vocab_size;
    let vocab = match (vocab_override, ck.metadata.extra.get("vocab")) {
        (Some(p), _) => Vocab::load(p)?,
        (None, Some(value)) => Vocab::from_json(&value.to_string())?,
        (None, None) => Vocab::alphabet(v)?,
    };
    if vocab.size() != v {
        return Err(Error::config("eval.vocab", format!("vocabulary has {} symbols, model has V={v}", vocab.size())));
    }
    let real = ck.metadata.extra.get("real_corpus").and_then(Value::as_str).map(|r| {
        let r = PathBuf::from(r);
        match path.parent() {
            Some(dir) if r.is_relative() => dir.join(r),
            _ => r,
        }
    });
    Ok(LoadedModel {
        denoiser: TransformerDenoiser::new(ck.params),
        metadata: ck.metadata,
        vocab,
        real,
    })
}

/// Fill inference defaults that depend on the checkpoint.
fn adapt_inference(resolved: &Resolved, cfg: &mut RunConfig, model: &LoadedModel) -> Result<()> {
    let max = model.metadata.config.max_seq_len;
    if !resolved.is_set("inference.seq_len") {
        cfg.inference.seq_len = max;
    }
    if cfg.inference.seq_len > max {
        return Err(Error::config("inference.seq_len", format!("{} exceeds the model's max_seq_len {max}", cfg.inference.seq_len)));
    }
    if !resolved.is_set("inference.beta") {
        if let Some(b) = model.metadata.extra.get("beta").and_then(Value::as_f64) {
            cfg.inference.beta = b;
        }
    }
    cfg.inference.validate(model.metadata.config.vocab_size)
}

fn generate_texts(model: &LoadedModel, inference: &InferenceConfig, clamp: &ClampMask, count: usize, trajectory: Option<&Path>) -> Result<Vec<String>> {
    let mut trajectories = Vec::with_capacity(count);
    let mut first = 0;
    if let Some(path) = trajectory {
        if count > 0 {
            let t = generate_from(&model.denoiser, inference, clamp, 0, 1, true)?;
            let text = model.vocab.decode(&t[0].tokens)?;
            t[0].write_csv(BufWriter::new(File::create(path)?), &text)?;
            trajectories.extend(t);
            first = 1;
        }
    }
    trajectories.extend(generate_from(&model.denoiser, inference, clamp, first as u64, count - first, false)?);
    trajectories.iter().map(|t| model.vocab.decode(&t.tokens)).collect()
}

fn parse_clamp(spec: &Option<String>, seq_len: usize, vocab_size: usize) -> Result<ClampMask> {
    let clamp = match spec {
        Some(s) => ClampMask::parse(s).map_err(|e| Error::config("generate.clamp", e.to_string()))?,
        None => ClampMask::default(),
    };
    clamp.validate(seq_len, vocab_size).map_err(|e| Error::config("generate.clamp", e.to_string()))?;
    Ok(clamp)
}

pub fn cmd_generate(resolved: Resolved) -> Result<()> {
    let mut cfg = resolved.config.clone();
    let ck = require_file("generate.checkpoint", &cfg.generate.checkpoint)?;
    cfg.generate.checkpoint = Some(ck.clone());
    let model = load_model(&ck, None)?;
    adapt_inference(&resolved, &mut cfg, &model)?;
    let clamp = parse_clamp(&cfg.generate.clamp, cfg.inference.seq_len, model.metadata.config.vocab_size)?;
    let out = prepare_output(&cfg)?;
    write_snapshot(&cfg, &out)?;
    let traj = cfg.generate.trajectory.then(|| out.join(TRAJECTORY_FILE));
    let texts = generate_texts(&model, &cfg.inference, &clamp, cfg.generate.count, traj.as_deref())?;
    write_lines(&out.join(SAMPLES_FILE), &texts)?;
    info!("wrote {} sequences to {}", texts.len(), out.join(SAMPLES_FILE).display());
    Ok(())
}

fn read_lines(field: &str, path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(field, format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Encode lines as one window each. Lines are truncated or padded to `seq_len`
/// and lines that cannot be padded are dropped.
fn corpus_from_lines(field: &str, lines: &[String], vocab: &Vocab, seq_len: usize) -> Result<CorpusStore> {
    let docs = lines
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| vocab.encode(l).map(|mut ids| {
            ids.truncate(seq_len);
            ids
        }))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::config(field, e.to_string()))?;
    let store = CorpusStore::from_documents(&docs, seq_len, vocab.size(), vocab.pad())?;
    if store.is_empty() {
        return Err(Error::config(field, "no usable sequences"));
    }
    Ok(store)
}

fn real_corpus(path: &Path, vocab: &Vocab, seq_len: usize) -> Result<CorpusStore> {
    let lines = read_lines("eval.real", path)?;
    let docs = lines
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| vocab.encode(l))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::config("eval.real", e.to_string()))?;
    let store = CorpusStore::from_documents(&docs, seq_len, vocab.size(), vocab.pad())?;
    if store.is_empty() {
        return Err(Error::config("eval.real", "no usable sequences"));
    }
    Ok(store)
}

fn append_line(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

pub fn cmd_eval(resolved: Resolved) -> Result<()> {
    let mut cfg = resolved.config;
    let generated = require_file("eval.generated", &cfg.eval.generated)?;
    cfg.eval.generated = Some(generated.clone());
    let (vocab, recorded_real) = match (&cfg.eval.vocab, &cfg.generate.checkpoint) {
        (Some(_), _) => {
            let p = require_file("eval.vocab", &cfg.eval.vocab)?;
            cfg.eval.vocab = Some(p.clone());
            (Vocab::load(&p)?, None)
        }
        (None, Some(_)) => {
            let p = require_file("generate.checkpoint", &cfg.generate.checkpoint)?;
            cfg.generate.checkpoint = Some(p.clone());
            let m = load_model(&p, None)?;
            (m.vocab, m.real)
        }
        (None, None) => return Err(Error::config("eval.vocab", "is required (or pass a checkpoint)")),
    };
    if cfg.eval.real.is_none() {
        cfg.eval.real = recorded_real;
    }
    let real_path = require_file("eval.real", &cfg.eval.real)?;
    cfg.eval.real = Some(real_path.clone());

    let lines = read_lines("eval.generated", &generated)?;
    let seq_len = match cfg.eval.seq_len {
        Some(0) => return Err(Error::config("eval.seq_len", "must be at least 1")),
        Some(s) => s,
        None => lines.iter().map(|l| vocab.encode(l).map(|v| v.len()).unwrap_or(0)).max().unwrap_or(0).max(1),
    };
    cfg.eval.seq_len = Some(seq_len);
    let gen = corpus_from_lines("eval.generated", &lines, &vocab, seq_len)?;
    let real = real_corpus(&real_path, &vocab, seq_len)?;
    let reference = ReferenceModel::fit(&real)?;
    let report = evaluate(&gen, &real, &reference)?;

    let out = prepare_output(&cfg)?;
    let csv = cfg.eval.csv_out.clone().unwrap_or_else(|| out.join(EVAL_CSV_FILE));
    write_snapshot(&cfg, &out)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join(EVAL_JSON_FILE), format!("{json}\n"))?;
    report.append_csv(&csv)?;
    println!("{json}");
    Ok(())
}

pub fn cmd_oracle_check(resolved: Resolved) -> Result<()> {
    let cfg = resolved.config;
    let out = prepare_output(&cfg)?;
    write_snapshot(&cfg, &out)?;
    let report = oracle_check(&cfg.oracle)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join(ORACLE_FILE), format!("{json}\n"))?;
    println!("{json}");
    if !report.pass {
        warn!("oracle check did not meet its thresholds");
    }
    Ok(())
}

/// Drop repeated values (keeping first occurrences) with a warning.
pub fn dedup_values(values: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        if out.iter().any(|&u| u == v) {
            warn!("sweep value {v} repeated; ignoring the duplicate");
        } else {
            out.push(v);
        }
    }
    out
}

fn as_count(v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::config("sweep.values", format!("{v} is not a positive integer")))
    }
}

pub fn cmd_sweep(resolved: Resolved) -> Result<()> {
    let mut cfg = resolved.config.clone();
    let axis = cfg.sweep.axis.ok_or_else(|| Error::config("sweep.axis", "is required (t_star, top_k or nfe)"))?;
    let values = dedup_values(&cfg.sweep.values);
    if values.len() < 2 {
        return Err(Error::config("sweep.values", "need at least two distinct values"));
    }
    cfg.sweep.values = values.clone();
    let ck = require_file("generate.checkpoint", &cfg.generate.checkpoint)?;
    cfg.generate.checkpoint = Some(ck.clone());
    let model = load_model(&ck, None)?;
    if axis == SweepAxis::TStar && cfg.inference.scheme != Scheme::Hybrid {
        info!("t_star only affects the hybrid scheme; switching to hybrid");
        cfg.inference.scheme = Scheme::Hybrid;
    }
    adapt_inference(&resolved, &mut cfg, &model)?;
    if cfg.eval.real.is_none() {
        cfg.eval.real = model.real.clone();
    }
    let real_path = require_file("eval.real", &cfg.eval.real)?;
    cfg.eval.real = Some(real_path.clone());
    let seq_len = cfg.inference.seq_len;
    let real = real_corpus(&real_path, &model.vocab, seq_len)?;
    let reference = ReferenceModel::fit(&real)?;
    let clamp = parse_clamp(&cfg.generate.clamp, seq_len, model.metadata.config.vocab_size)?;

    let mut runs = Vec::with_capacity(values.len());
    for &v in &values {
        let mut inf = cfg.inference.clone();
        match axis {
            SweepAxis::TStar => inf.t_star = v,
            SweepAxis::TopK => inf.top_k = as_count(v)?,
            SweepAxis::Nfe => inf.steps = as_count(v)?,
        }
        inf.validate(model.metadata.config.vocab_size).map_err(|e| Error::config("sweep.values", e.to_string()))?;
        runs.push(inf);
    }

    let out = prepare_output(&cfg)?;
    write_snapshot(&cfg, &out)?;
    let csv = out.join(SWEEP_FILE);
    for (v, inf) in values.iter().zip(&runs) {
        let texts = generate_texts(&model, inf, &clamp, cfg.sweep.count, None)?;
        let gen = corpus_from_lines("sweep", &texts, &model.vocab, seq_len)?;
        let r: EvalReport = evaluate(&gen, &real, &reference)?;
        info!("{}={v}: ref_perplexity {:.4}, bigram_tv {:.4}", axis.as_str(), r.ref_perplexity, r.bigram_tv);
        append_line(
            &csv,
            SWEEP_HEADER,
            &format!("{v},{},{},{},{}", r.entropy_nats, r.ref_perplexity, r.unigram_tv, r.bigram_tv),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"train": {"lr": 0.01, "steps": 5}, "inference": {"top_k": 3}}"#).unwrap();
        let r = resolve_config(Some(&file), &[("train.lr".into(), json!(0.5))]).unwrap();
        assert_eq!(r.config.train.lr, 0.5);
        assert_eq!(r.config.train.steps, 5);
        assert_eq!(r.config.inference.top_k, 3);
        assert_eq!(r.config.train.batch_size, TrainConfig::default().batch_size);
        assert!(r.is_set("train.steps"));
        assert!(!r.is_set("inference.seq_len"));
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        let err = resolve_config(None, &[("train.learning_rate".into(), json!(1))]).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_INPUT);
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn snapshot_round_trips() {
        let r = resolve_config(None, &[("inference.t_star".into(), json!(0.1 + 0.2))]).unwrap();
        let text = serde_json::to_string(&r.config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, text).unwrap();
        assert_eq!(resolve_config(Some(&p), &[]).unwrap().config, r.config);
    }

    #[test]
    fn assignments_parse_json_or_string() {
        assert_eq!(parse_assignment("a.b=3").unwrap(), ("a.b".into(), json!(3)));
        assert_eq!(parse_assignment("s=hybrid").unwrap(), ("s".into(), json!("hybrid")));
        assert!(parse_assignment("novalue").is_err());
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        assert_eq!(dedup_values(&[0.5, 0.25, 0.5, 1.0, 0.25]), vec![0.5, 0.25, 1.0]);
    }

    #[test]
    fn numeric_errors_map_to_three() {
        assert_eq!(exit_code(&Error::Diverged { step: 4, last_good: None }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::config("x", "y")), EXIT_INPUT);
        assert_eq!(exit_code(&Error::input("x")), EXIT_INPUT);
    }
}
