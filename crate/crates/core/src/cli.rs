//! Command-line front end.
//!
//! Every option lives in [`RunConfig`], which can be loaded from a TOML or
//! JSON file with `--config`; flags given on the command line override the
//! file. The resolved configuration is written to `run.json` in the output
//! directory of every run.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{generate_synthetic_corpus, k_core_filter, read_interactions, read_items, Corpus, SynthSpec};
use crate::error::{Error, Result};
use crate::evaluator::{
    ablation_study, evaluate, mask_ratio_study, reveal_study, robustness_study, write_reports, MetricsReport, Mode, PipelineConfig,
    Split, ABLATION_VARIANTS,
};
use crate::model::ModelConfig;
use crate::tokenizer::Vocabulary;
use crate::trainer::{encode_items, finetune, pretrain, BatchLog};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
pub const THREADS_ENV: &str = "JEPA4REC_THREADS";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RUN_FILE: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "jepa4rec", version = VERSION, about = "Text-based sequential recommendation with joint-embedding pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Filter raw items and interactions into a corpus directory.
    Ingest,
    /// Generate a synthetic corpus.
    Synth,
    /// Build the vocabulary of a corpus.
    BuildVocab,
    /// Pretrain (or resume pretraining) on one or more domains.
    Pretrain,
    /// Finetune on the target domain, from a checkpoint or from scratch.
    Finetune,
    /// Evaluate a checkpoint on the target domain.
    Eval,
    /// Evaluate a pretrained checkpoint on an unseen domain.
    Zeroshot,
    /// Rank with partially revealed next items.
    StudyReveal,
    /// Sweep the next-item mask rate of pretraining.
    StudyMaskRatio,
    /// Drop item tokens at several rates.
    StudyRobustness,
    /// Run a named ablation preset.
    StudyAblation,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth => "synth",
            Command::BuildVocab => "build-vocab",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Zeroshot => "zeroshot",
            Command::StudyReveal => "study-reveal",
            Command::StudyMaskRatio => "study-mask-ratio",
            Command::StudyRobustness => "study-robustness",
            Command::StudyAblation => "study-ablation",
        }
    }
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// TOML or JSON file with a full or partial run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to JEPA4REC_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Raw items file (JSON lines) for `ingest`.
    #[arg(long, global = true)]
    items: Option<PathBuf>,
    /// Raw interactions file (JSON lines) for `ingest`.
    #[arg(long, global = true)]
    interactions: Option<PathBuf>,
    #[arg(long, global = true)]
    min_core: Option<usize>,
    #[arg(long, global = true)]
    min_count: Option<usize>,
    /// Target domain for finetuning and evaluation.
    #[arg(long, global = true)]
    domain: Option<String>,
    /// Pretraining domains, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pretrain_domains: Option<Vec<String>>,
    #[arg(long, global = true, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long, global = true, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    drop_rates: Option<Vec<f64>>,
    #[arg(long, global = true)]
    variant: Option<String>,

    #[arg(long, global = true)]
    n_domains: Option<usize>,
    #[arg(long, global = true)]
    n_items: Option<usize>,
    #[arg(long, global = true)]
    n_users: Option<usize>,
    #[arg(long, global = true)]
    n_brands: Option<usize>,
    #[arg(long, global = true)]
    purity: Option<f64>,

    #[arg(long, global = true)]
    d_model: Option<usize>,
    #[arg(long, global = true)]
    n_layers: Option<usize>,
    #[arg(long, global = true)]
    n_heads: Option<usize>,
    #[arg(long, global = true)]
    d_ff: Option<usize>,
    #[arg(long, global = true)]
    window: Option<usize>,

    /// Epochs of the command's stage (both stages for pipeline studies).
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    finetune_epochs: Option<usize>,
    #[arg(long = "lr", global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    lambda_mlm: Option<f64>,
    #[arg(long, global = true)]
    lambda_map: Option<f64>,
    #[arg(long, global = true)]
    history_mask_rate: Option<f64>,
    #[arg(long, global = true)]
    next_mask_rate: Option<f64>,
    #[arg(long, global = true)]
    ema_decay: Option<f64>,
    #[arg(long, global = true)]
    token_drop_rate: Option<f64>,
    #[arg(long, global = true)]
    disable_mlm: bool,
    #[arg(long, global = true)]
    disable_token_type: bool,
    #[arg(long, global = true)]
    disable_token_position: bool,
    #[arg(long, global = true)]
    disable_contrastive: bool,
    #[arg(long, global = true)]
    use_bpr: bool,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}; expected train, val or test")),
    }
}

/// Everything a run needs; the file form of every flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub min_core: usize,
    pub min_count: usize,
    pub domain: Option<String>,
    pub pretrain_domains: Vec<String>,
    pub split: Split,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub drop_rates: Vec<f64>,
    pub variant: Option<String>,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            threads: None,
            seed: 0,
            corpus: None,
            vocab: None,
            checkpoint: None,
            items: None,
            interactions: None,
            min_core: 5,
            min_count: 1,
            domain: None,
            pretrain_domains: Vec::new(),
            split: Split::Test,
            ratios: Vec::new(),
            seeds: Vec::new(),
            drop_rates: vec![0.0, 0.2, 0.4, 0.6],
            variant: None,
            synth: SynthSpec::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML file, or JSON when the extension is `.json`. Keys the
    /// file leaves out keep their defaults, section by section.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
        let file: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
        } else {
            let t: toml::Table = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
            serde_json::to_value(t)?
        };
        let mut merged = serde_json::to_value(RunConfig::default())?;
        overlay(&mut merged, file);
        serde_json::from_value(merged).map_err(|e| bad(e.to_string()))
    }
}

fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

fn merge(mut c: RunConfig, f: &Flags, command: Command) -> RunConfig {
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(c.out, f.out);
    if f.threads.is_some() {
        c.threads = f.threads;
    }
    set!(c.seed, f.seed);
    for (dst, src) in [
        (&mut c.corpus, &f.corpus),
        (&mut c.vocab, &f.vocab),
        (&mut c.checkpoint, &f.checkpoint),
        (&mut c.items, &f.items),
        (&mut c.interactions, &f.interactions),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    set!(c.min_core, f.min_core);
    set!(c.min_count, f.min_count);
    if f.domain.is_some() {
        c.domain = f.domain.clone();
    }
    set!(c.pretrain_domains, f.pretrain_domains);
    set!(c.split, f.split);
    set!(c.ratios, f.ratios);
    set!(c.seeds, f.seeds);
    set!(c.drop_rates, f.drop_rates);
    if f.variant.is_some() {
        c.variant = f.variant.clone();
    }

    set!(c.synth.n_domains, f.n_domains);
    set!(c.synth.n_items, f.n_items);
    set!(c.synth.n_users, f.n_users);
    set!(c.synth.n_brands, f.n_brands);
    set!(c.synth.purity, f.purity);

    set!(c.model.d_model, f.d_model);
    set!(c.model.n_layers, f.n_layers);
    set!(c.model.n_heads, f.n_heads);
    set!(c.model.d_ff, f.d_ff);
    set!(c.model.window, f.window);

    let (pre, fine) = match command {
        Command::Pretrain => (true, false),
        Command::Finetune => (false, true),
        _ => (true, true),
    };
    for (on, t) in [(pre, &mut c.pretrain), (fine, &mut c.finetune)] {
        if !on {
            continue;
        }
        set!(t.epochs, f.epochs);
        set!(t.learning_rate, f.learning_rate);
        set!(t.batch_size, f.batch_size);
        set!(t.temperature, f.temperature);
        set!(t.token_drop_rate, f.token_drop_rate);
    }
    set!(c.pretrain.epochs, f.pretrain_epochs);
    set!(c.finetune.epochs, f.finetune_epochs);
    set!(c.pretrain.lambda_mlm, f.lambda_mlm);
    set!(c.pretrain.lambda_map, f.lambda_map);
    set!(c.pretrain.history_mask_rate, f.history_mask_rate);
    set!(c.pretrain.next_mask_rate, f.next_mask_rate);
    set!(c.pretrain.ema_decay, f.ema_decay);
    for t in [&mut c.pretrain, &mut c.finetune] {
        t.ablation.disable_mlm |= f.disable_mlm;
        t.ablation.disable_token_type |= f.disable_token_type;
        t.ablation.disable_token_position |= f.disable_token_position;
        t.ablation.disable_contrastive |= f.disable_contrastive;
    }
    c.finetune.ablation.use_bpr |= f.use_bpr;
    c.synth.seed = c.seed;
    c.pretrain.seed = c.seed;
    c.finetune.seed = c.seed;
    c
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, command: Command) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| Error::Config(format!("`{}` requires --{flag}", command.name())))
}

fn load_corpus(c: &RunConfig, command: Command) -> Result<Corpus> {
    Corpus::read_dir(required(&c.corpus, "corpus", command)?)
}

/// The vocabulary from `--vocab`, or a fresh one built from the corpus and
/// saved next to the other outputs.
fn load_vocab(c: &RunConfig, corpus: &Corpus) -> Result<Vocabulary> {
    match &c.vocab {
        Some(p) => Vocabulary::load(p),
        None => {
            let v = Vocabulary::build(corpus, c.min_count)?;
            v.save(&c.out.join(VOCAB_FILE))?;
            Ok(v)
        }
    }
}

fn target_domain(c: &RunConfig, corpus: &Corpus) -> Result<String> {
    match &c.domain {
        Some(d) if corpus.domains.contains(d) => Ok(d.clone()),
        Some(d) => Err(Error::Config(format!("domain {d:?} not in corpus (has {})", corpus.domains.join(", ")))),
        None if corpus.domains.len() == 1 => Ok(corpus.domains[0].clone()),
        None => Err(Error::Config(format!("corpus has several domains ({}); pass --domain", corpus.domains.join(", ")))),
    }
}

fn pipeline(c: &RunConfig, corpus: &Corpus) -> Result<PipelineConfig> {
    Ok(PipelineConfig {
        model: c.model.clone(),
        pretrain: c.pretrain.clone(),
        finetune: c.finetune.clone(),
        pretrain_domains: c.pretrain_domains.clone(),
        target_domain: target_domain(c, corpus)?,
        split: c.split,
        seed: c.seed,
    })
}

/// Runs `train` with a sink that appends each batch record to the JSONL log.
fn with_training_log(c: &RunConfig, train: impl FnOnce(&mut dyn FnMut(&BatchLog)) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(c.out.join(LOG_FILE))?);
    let mut io_err: Option<std::io::Error> = None;
    train(&mut |line| {
        let res = serde_json::to_writer(&mut w, line).map_err(std::io::Error::from).and_then(|_| w.write_all(b"\n"));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

fn fresh_or_loaded(c: &RunConfig, vocab: &Vocabulary, train: &TrainConfig) -> Result<Checkpoint> {
    match &c.checkpoint {
        Some(p) => Checkpoint::load(p, &vocab.hash()),
        None => {
            let mut model = ModelConfig { vocab_size: vocab.len(), ..c.model.clone() };
            train.apply_ablation(&mut model);
            Checkpoint::new(model, train.clone(), vocab.hash())
        }
    }
}

fn loaded(c: &RunConfig, vocab: &Vocabulary, command: Command) -> Result<Checkpoint> {
    Checkpoint::load(required(&c.checkpoint, "checkpoint", command)?, &vocab.hash())
}

fn execute(command: Command, c: &RunConfig) -> Result<()> {
    let out = &c.out;
    match command {
        Command::Synth => generate_synthetic_corpus(&c.synth)?.write_dir(out),
        Command::Ingest => {
            let items = read_items(required(&c.items, "items", command)?)?;
            let interactions = read_interactions(required(&c.interactions, "interactions", command)?)?;
            k_core_filter(items, interactions, c.min_core)?.write_dir(out)
        }
        Command::BuildVocab => {
            let corpus = load_corpus(c, command)?;
            Vocabulary::build(&corpus, c.min_count)?.save(&out.join(VOCAB_FILE))
        }
        Command::Pretrain => {
            let corpus = load_corpus(c, command)?;
            let vocab = load_vocab(c, &corpus)?;
            let mut ckpt = fresh_or_loaded(c, &vocab, &c.pretrain)?;
            let items = encode_items(&corpus, &vocab, c.pretrain.token_drop_rate, c.seed)?;
            with_training_log(c, |log| pretrain(&mut ckpt, &corpus, &items, &c.pretrain_domains, &c.pretrain, log))?;
            ckpt.save(&out.join(CHECKPOINT_FILE))
        }
        Command::Finetune => {
            let corpus = load_corpus(c, command)?;
            let vocab = load_vocab(c, &corpus)?;
            let domain = target_domain(c, &corpus)?;
            let mut ckpt = fresh_or_loaded(c, &vocab, &c.finetune)?;
            let items = encode_items(&corpus, &vocab, c.finetune.token_drop_rate, c.seed)?;
            with_training_log(c, |log| finetune(&mut ckpt, &corpus, &items, &domain, &c.finetune, log))?;
            ckpt.save(&out.join(CHECKPOINT_FILE))
        }
        Command::Eval | Command::Zeroshot => {
            let corpus = load_corpus(c, command)?;
            let vocab = load_vocab(c, &corpus)?;
            let domain = target_domain(c, &corpus)?;
            let ckpt = loaded(c, &vocab, command)?;
            let items = encode_items(&corpus, &vocab, c.finetune.token_drop_rate, c.seed)?;
            let mode = if command == Command::Zeroshot { Mode::ZeroShot } else { Mode::Standard };
            let report = evaluate(&ckpt.model, &ckpt.context, &corpus, &items, &domain, c.split, mode)?;
            write_reports(out, &[report])
        }
        Command::StudyReveal => {
            let corpus = load_corpus(c, command)?;
            let vocab = load_vocab(c, &corpus)?;
            let domain = target_domain(c, &corpus)?;
            let ckpt = loaded(c, &vocab, command)?;
            let items = encode_items(&corpus, &vocab, 0.0, c.seed)?;
            let ratios = if c.ratios.is_empty() { vec![0.0, 0.1, 0.25, 0.5] } else { c.ratios.clone() };
            write_reports(out, &reveal_study(&ckpt, &corpus, &items, &domain, c.split, &ratios, c.seed)?)
        }
        Command::StudyMaskRatio => {
            let corpus = load_corpus(c, command)?;
            let vocab = load_vocab(c, &corpus)?;
            let ratios = if c.ratios.is_empty() { vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8] } else { c.ratios.clone() };
            let seeds = if c.seeds.is_empty() { vec![c.seed] } else { c.seeds.clone() };
            write_reports(out, &mask_ratio_study(&corpus, &vocab, &pipeline(c, &corpus)?, &ratios, &seeds)?)
        }
        Command::StudyRobustness => {
            let corpus = load_corpus(c, command)?;
            let vocab = load_vocab(c, &corpus)?;
            write_reports(out, &robustness_study(&corpus, &vocab, &pipeline(c, &corpus)?, &c.drop_rates)?)
        }
        Command::StudyAblation => {
            let corpus = load_corpus(c, command)?;
            let vocab = load_vocab(c, &corpus)?;
            let base = pipeline(c, &corpus)?;
            let seeds = if c.seeds.is_empty() { vec![c.seed] } else { c.seeds.clone() };
            let variants: Vec<&str> = match &c.variant {
                Some(v) => vec![v.as_str()],
                None => ABLATION_VARIANTS.to_vec(),
            };
            let rows = variants.iter().map(|v| ablation_study(&corpus, &vocab, &base, v, &seeds)).collect::<Result<Vec<MetricsReport>>>()?;
            write_reports(out, &rows)
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.flags.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let c = merge(base, &cli.flags, cli.command);
    c.pretrain.validate()?;
    c.finetune.validate()?;
    for r in c.ratios.iter().chain(&c.drop_rates) {
        if !(0.0..=1.0).contains(r) {
            return Err(Error::Config(format!("ratio {r} outside [0, 1]")));
        }
    }
    if cli.command == Command::StudyMaskRatio {
        if let Some(r) = c.ratios.iter().find(|r| **r <= 0.0 || **r >= 1.0) {
            return Err(Error::Config(format!("mask ratio {r} outside (0, 1)")));
        }
    }
    for path in [&c.corpus, &c.vocab, &c.checkpoint, &c.items, &c.interactions].into_iter().flatten() {
        if !path.exists() {
            return Err(Error::Config(format!("{} does not exist", path.display())));
        }
    }
    Ok(c)
}

fn threads(c: &RunConfig) -> Result<usize> {
    if let Some(n) = c.threads {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn run_resolved(cli: &Cli) -> Result<()> {
    let c = resolve(cli)?;
    std::fs::create_dir_all(&c.out)?;
    let record = RunRecord { command: cli.command.name(), version: VERSION, seed: c.seed, config: &c };
    let mut json = serde_json::to_string_pretty(&record)?;
    json.push('\n');
    std::fs::write(c.out.join(RUN_FILE), json)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads(&c)?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| execute(cli.command, &c))
}

/// Runs the command line `argv` (program name first). Returns 0 on
/// success, 1 for usage or validation errors and 2 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_resolved(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                eprintln!("\n{}", Cli::command().render_usage());
                1
            } else {
                2
            }
        }
    }
}
