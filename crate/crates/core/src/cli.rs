//! Command-line front end.
//!
//! Every subcommand takes long flags; `--config FILE` supplies defaults from a
//! TOML file, and explicit flags win over it. Output files depend only on their
//! inputs and seeds. Timing goes to stderr.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_lexicon, generate_synthetic_corpus, read_tagged_corpus, tag_with_lexicon, EncodedCorpus, Lexicon,
    SyntheticGrammar, TagPolicy, BUNDLED_GRAMMAR,
};
use crate::decode::{generate_batch, prompts_from_corpus, GenerationLine, GenerationRecord, Prompt, SamplingConfig, StageStrategy};
use crate::heads::HeadKind;
use crate::metrics::{self, evaluate_texts, MetricsSettings, SelfBleuOptions, TextSet};
use crate::net::{self, load_checkpoint, save_checkpoint, Model, ModelConfig, OptimizerConfig, TrainError, TrainOptions};
use crate::oracle::{entropy_check, EntropyCheckConfig};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "posg", version, about = "POS-guided softmax language models")]
pub struct Cli {
    /// TOML file with defaults for any subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a lexicon from a tagged corpus, optionally splitting off a test set.
    Ingest(IngestArgs),
    /// Write a tagged corpus sampled from a grammar.
    SynthCorpus(SynthArgs),
    /// Train a model and write a checkpoint plus a JSONL loss log.
    Train(TrainArgs),
    /// Continue prefixes from a held-out corpus and write JSONL.
    Generate(GenerateArgs),
    /// Compute diversity, quality and perplexity metrics.
    Evaluate(EvaluateArgs),
    /// Generate over a grid of stage strategies and write a CSV table.
    Sweep(SweepArgs),
    /// Scale one tag's probability and tabulate its effect.
    Control(ControlArgs),
    /// Monte-Carlo check of the truncated-sampling entropy bounds.
    EntropyCheck(EntropyArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub lexicon_out: PathBuf,
    /// Where to write the training part when splitting.
    #[arg(long, requires = "test_out")]
    pub train_out: Option<PathBuf>,
    /// Where to write the final `test_fraction` of sequences.
    #[arg(long, requires = "train_out")]
    pub test_out: Option<PathBuf>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grammar TOML; the bundled grammar when absent.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// `mle` or `posg`.
    #[arg(long)]
    pub head: HeadKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log; defaults to the checkpoint path with `.log.jsonl` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Validation corpus; otherwise the tail `valid_fraction` of the training corpus.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Held-out tagged corpus supplying prefixes and references.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    #[arg(long)]
    pub continuation_len: Option<usize>,
    #[arg(long)]
    pub max_prompts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// `pure`, `greedy`, `top_k:K`, `nucleus:A` or `temperature:T`.
    #[arg(long)]
    pub pos_stage: Option<StageStrategy>,
    #[arg(long)]
    pub token_stage: Option<StageStrategy>,
    /// `TAG=MULTIPLIER`; repeatable.
    #[arg(long = "control")]
    pub control: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSONL written by `generate`.
    #[arg(long)]
    pub generations: PathBuf,
    /// Tagged corpus or generation JSONL; otherwise each line's own reference.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Lexicon for tagging generations that carry no sampled tags.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// With `--test-corpus` and `--lexicon`, adds held-out perplexity.
    #[arg(long, requires_all = ["test_corpus", "lexicon"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub test_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated POS-stage strategies (ignored for an MLE checkpoint).
    #[arg(long, value_delimiter = ',', default_value = "top_k:1,top_k:5,top_k:20,pure")]
    pub pos_stages: Vec<StageStrategy>,
    /// Comma-separated token-stage strategies.
    #[arg(long, value_delimiter = ',', default_value = "nucleus:0.5,nucleus:0.9,top_k:20,pure")]
    pub token_stages: Vec<StageStrategy>,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tag: String,
    #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
    pub multipliers: Vec<f64>,
    #[arg(long)]
    pub pos_stage: Option<StageStrategy>,
    #[arg(long)]
    pub token_stage: Option<StageStrategy>,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub pos_count: Option<usize>,
    #[arg(long)]
    pub cell_size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Let tag cells share tokens.
    #[arg(long)]
    pub overlap: bool,
    /// Full JSON report; the summary is printed either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampling: SamplingSection,
    pub generation: GenerationSection,
    pub ingest: IngestSection,
    pub synth: SynthSection,
    pub entropy: EntropySection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub context_len: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub valid_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub pos_stage: Option<StageStrategy>,
    pub token_stage: Option<StageStrategy>,
    pub control: BTreeMap<String, f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub prefix_len: Option<usize>,
    pub continuation_len: Option<usize>,
    pub max_prompts: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub test_fraction: Option<f64>,
    pub max_vocab: Option<usize>,
    pub min_freq: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub sequences: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySection {
    pub trials: Option<usize>,
    pub pos_count: Option<usize>,
    pub cell_size: Option<usize>,
    pub k: Option<usize>,
}

/// Parses arguments, runs the command, reports errors on stderr, and returns the exit status.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Error> {
    let file = match &cli.config {
        Some(path) => {
            let text = read_text(path)?;
            toml::from_str(&text).map_err(|e| Error::data(path, e))?
        }
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Ingest(a) => ingest(a, &file),
        Command::SynthCorpus(a) => synth(a, &file),
        Command::Train(a) => train(a, &file),
        Command::Generate(a) => generate(a, &file),
        Command::Evaluate(a) => evaluate(a, &file),
        Command::Sweep(a) => sweep(a, &file),
        Command::Control(a) => control(a, &file),
        Command::EntropyCheck(a) => entropy(a, &file),
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn read_lexicon(path: &Path) -> Result<Lexicon, Error> {
    Lexicon::from_json(&read_text(path)?).map_err(|e| Error::data(path, e))
}

fn read_model(path: &Path) -> Result<Model, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes).map_err(|e| Error::data(path, e))
}

fn encode(lexicon: &Lexicon, path: &Path, policy: TagPolicy) -> Result<EncodedCorpus, Error> {
    let corpus = read_tagged_corpus(path)?;
    lexicon.encode(&corpus, policy).map_err(|e| Error::data(path, e))
}

fn fraction(value: f64, name: &str) -> Result<f64, Error> {
    if (0.0..1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::Usage(format!("{name} must lie in [0, 1), got {value}")))
    }
}

fn ingest(a: IngestArgs, file: &FileConfig) -> Result<(), Error> {
    let corpus = read_tagged_corpus(&a.corpus)?;
    let max_vocab = a.max_vocab.or(file.ingest.max_vocab).unwrap_or(50_000);
    let min_freq = a.min_freq.or(file.ingest.min_freq).unwrap_or(1);
    let train_part = match (&a.train_out, &a.test_out) {
        (Some(train_out), Some(test_out)) => {
            let frac = fraction(a.test_fraction.or(file.ingest.test_fraction).unwrap_or(0.1), "test_fraction")?;
            let (train, test) = corpus.split_tail(frac);
            let test = test.ok_or_else(|| Error::Usage("test split is empty; raise --test-fraction".into()))?;
            write_file(train_out, train.to_text())?;
            write_file(test_out, test.to_text())?;
            eprintln!("split {} train / {} test sequences", train.len(), test.len());
            train
        }
        _ => corpus,
    };
    let lexicon = build_lexicon(&train_part, max_vocab, min_freq).map_err(|e| Error::data(&a.corpus, e))?;
    write_file(&a.lexicon_out, lexicon.to_json())?;
    eprintln!(
        "lexicon: {} tokens, {} tags, {} training tokens",
        lexicon.vocab.len(),
        lexicon.inventory.len(),
        train_part.token_count()
    );
    Ok(())
}

fn synth(a: SynthArgs, file: &FileConfig) -> Result<(), Error> {
    let grammar = match &a.grammar {
        Some(path) => SyntheticGrammar::from_toml(&read_text(path)?).map_err(|e| Error::data(path, e))?,
        None => SyntheticGrammar::from_toml(BUNDLED_GRAMMAR).map_err(|e| Error::Runtime(e.to_string()))?,
    };
    let n = a.sequences.or(file.synth.sequences).unwrap_or(3400);
    if n == 0 {
        return Err(Error::Usage("--sequences must be positive".into()));
    }
    let corpus = generate_synthetic_corpus(&grammar, n, a.seed.or(file.seed).unwrap_or(0));
    write_file(&a.out, corpus.to_text())?;
    eprintln!("wrote {} sequences, {} tokens", corpus.len(), corpus.token_count());
    Ok(())
}

fn train(a: TrainArgs, file: &FileConfig) -> Result<(), Error> {
    let lexicon = read_lexicon(&a.lexicon)?;
    let corpus = read_tagged_corpus(&a.corpus)?;
    let (train_part, valid_part) = match &a.valid {
        Some(path) => (corpus, Some(read_tagged_corpus(path)?)),
        None => corpus.split_tail(fraction(
            a.valid_fraction.or(file.train.valid_fraction).unwrap_or(0.1),
            "valid_fraction",
        )?),
    };
    let train_set = lexicon.encode(&train_part, TagPolicy::Strict).map_err(|e| Error::data(&a.corpus, e))?;
    let valid_set = valid_part
        .map(|v| lexicon.encode(&v, TagPolicy::Coerce))
        .transpose()
        .map_err(|e| Error::data(a.valid.as_deref().unwrap_or(&a.corpus), e))?;

    let m = &file.model;
    let mut config = ModelConfig::desk_scale(lexicon.vocab.len(), lexicon.inventory.len());
    config.n_layers = a.model.n_layers.or(m.n_layers).unwrap_or(config.n_layers);
    config.n_heads = a.model.n_heads.or(m.n_heads).unwrap_or(config.n_heads);
    config.d_model = a.model.d_model.or(m.d_model).unwrap_or(config.d_model);
    config.d_ff = a.model.d_ff.or(m.d_ff).unwrap_or(config.d_ff);
    config.context_len = a.model.context_len.or(m.context_len).unwrap_or(config.context_len);
    config.dropout_rate = a.model.dropout.or(m.dropout).unwrap_or(config.dropout_rate);
    config.seed = a.seed.or(file.seed).unwrap_or(0);
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;

    let t = &file.train;
    let defaults = TrainOptions::default();
    let options = TrainOptions {
        epochs: a.epochs.or(t.epochs).unwrap_or(defaults.epochs),
        batch_size: a.batch_size.or(t.batch_size).unwrap_or(defaults.batch_size),
        optimizer: OptimizerConfig {
            learning_rate: a.learning_rate.or(t.learning_rate).unwrap_or(defaults.optimizer.learning_rate),
            weight_decay: a.weight_decay.or(t.weight_decay).unwrap_or(defaults.optimizer.weight_decay),
            grad_clip: a.grad_clip.or(t.grad_clip).unwrap_or(defaults.optimizer.grad_clip),
            ..defaults.optimizer
        },
    };
    if options.batch_size == 0 {
        return Err(Error::Usage("--batch-size must be positive".into()));
    }

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    eprintln!(
        "training {} head: {} parameters, {} training tokens",
        a.head,
        net::ModelParams::init(&config).parameter_count(),
        train_set.token_count()
    );
    let result = net::train(
        &config,
        Some(&lexicon.partition),
        &train_set,
        valid_set.as_ref(),
        a.head,
        &options,
        |log| {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            eprintln!(
                "epoch {} train {} valid {} ({:.1}s)",
                log.epoch,
                fmt(log.train_loss),
                fmt(log.valid_loss),
                log.wall_seconds
            );
        },
    );
    let write_log = |log: &[net::EpochLog]| -> Result<(), Error> {
        let mut text = String::new();
        for line in log {
            text.push_str(&serde_json::to_string(line).expect("serializable"));
            text.push('\n');
        }
        write_file(&log_path, text)
    };
    match result {
        Ok(outcome) => {
            write_file(&a.out, save_checkpoint(&outcome.params, &config, a.head))?;
            write_log(&outcome.log)
        }
        Err(TrainError::Diverged {
            epoch,
            step,
            last_good,
            log,
        }) => {
            write_file(&a.out, save_checkpoint(&last_good, &config, a.head))?;
            write_log(&log)?;
            Err(Error::Runtime(format!(
                "training diverged at epoch {epoch}, step {step}; last finite parameters saved to {}",
                a.out.display()
            )))
        }
        Err(TrainError::Net(e)) => Err(Error::Runtime(e.to_string())),
    }
}

struct PromptContext {
    model: Model,
    lexicon: Lexicon,
    prompts: Vec<Prompt>,
    continuation_len: usize,
    seed: u64,
}

fn load_prompts(a: &PromptArgs, file: &FileConfig) -> Result<PromptContext, Error> {
    let model = read_model(&a.checkpoint)?;
    let lexicon = read_lexicon(&a.lexicon)?;
    if model.config.vocab_size != lexicon.vocab.len() || model.config.pos_count != lexicon.inventory.len() {
        return Err(Error::data(
            &a.lexicon,
            format!(
                "lexicon has {} tokens and {} tags but the checkpoint expects {} and {}",
                lexicon.vocab.len(),
                lexicon.inventory.len(),
                model.config.vocab_size,
                model.config.pos_count
            ),
        ));
    }
    let g = &file.generation;
    let prefix_len = a.prefix_len.or(g.prefix_len).unwrap_or(50);
    let continuation_len = a.continuation_len.or(g.continuation_len).unwrap_or(100);
    let max_prompts = a.max_prompts.or(g.max_prompts).unwrap_or(200);
    if prefix_len == 0 || continuation_len == 0 || max_prompts == 0 {
        return Err(Error::Usage("prefix_len, continuation_len and max_prompts must be positive".into()));
    }
    let held_out = encode(&lexicon, &a.corpus, TagPolicy::Coerce)?;
    let mut prompts = prompts_from_corpus(&held_out, prefix_len, continuation_len);
    prompts.truncate(max_prompts);
    if prompts.is_empty() {
        return Err(Error::data(&a.corpus, format!("no sequence is longer than prefix_len {prefix_len}")));
    }
    Ok(PromptContext {
        model,
        lexicon,
        prompts,
        continuation_len,
        seed: a.seed.or(file.seed).unwrap_or(0),
    })
}

impl PromptContext {
    fn run(&self, config: &SamplingConfig) -> Result<Vec<GenerationRecord>, Error> {
        let prefixes: Vec<Vec<usize>> = self.prompts.iter().map(|p| p.prefix.clone()).collect();
        generate_batch(&self.model, Some(&self.lexicon.partition), &prefixes, self.continuation_len, config)
            .map_err(|e| Error::Usage(e.to_string()))
    }

    fn words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.lexicon.vocab.token(i).to_string()).collect()
    }

    fn tag_id(&self, tag: &str) -> Result<usize, Error> {
        self.lexicon
            .inventory
            .get(tag)
            .ok_or_else(|| Error::Usage(format!("unknown tag {tag:?}")))
    }

    /// Tag sequences of the generations: sampled tags when present, else lexicon tags.
    fn pos_of(&self, records: &[GenerationRecord]) -> Vec<Vec<usize>> {
        records
            .iter()
            .map(|r| match &r.sampled_pos {
                Some(p) => p.clone(),
                None => tag_with_lexicon(&self.lexicon.partition, &self.lexicon.tag_counts, &r.continuation),
            })
            .collect()
    }
}

fn sampling_config(
    pos_stage: Option<StageStrategy>,
    token_stage: Option<StageStrategy>,
    seed: u64,
    file: &FileConfig,
) -> SamplingConfig {
    let defaults = SamplingConfig::default();
    SamplingConfig {
        pos_stage: pos_stage.or(file.sampling.pos_stage).unwrap_or(defaults.pos_stage),
        token_stage: token_stage.or(file.sampling.token_stage).unwrap_or(defaults.token_stage),
        control: BTreeMap::new(),
        seed,
    }
}

fn parse_control(arg: &str) -> Result<(String, f64), Error> {
    let (tag, m) = arg
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--control expects TAG=MULTIPLIER, got {arg:?}")))?;
    let m: f64 = m
        .parse()
        .map_err(|_| Error::Usage(format!("bad control multiplier in {arg:?}")))?;
    Ok((tag.to_string(), m))
}

fn generate(a: GenerateArgs, file: &FileConfig) -> Result<(), Error> {
    let ctx = load_prompts(&a.prompts, file)?;
    let mut config = sampling_config(a.pos_stage, a.token_stage, ctx.seed, file);
    let mut control = file.sampling.control.clone();
    for arg in &a.control {
        let (tag, m) = parse_control(arg)?;
        control.insert(tag, m);
    }
    for (tag, m) in control {
        config.control.insert(ctx.tag_id(&tag)?, m);
    }
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let start = Instant::now();
    let records = ctx.run(&config)?;
    let mut text = String::new();
    for (record, prompt) in records.iter().zip(&ctx.prompts) {
        let mut line = GenerationLine::from_record(record, &ctx.lexicon, &config);
        line.reference = Some(ctx.words(&prompt.reference));
        text.push_str(&serde_json::to_string(&line).expect("serializable"));
        text.push('\n');
    }
    write_file(&a.out, text)?;
    eprintln!("generated {} continuations ({:.1}s)", records.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn read_generations(path: &Path) -> Result<Vec<GenerationLine>, Error> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn is_jsonl(text: &str) -> bool {
    text.lines().find(|l| !l.trim().is_empty()).is_some_and(|l| l.trim_start().starts_with('{'))
}

fn evaluate(a: EvaluateArgs, file: &FileConfig) -> Result<(), Error> {
    let lines = read_generations(&a.generations)?;
    if lines.is_empty() {
        return Err(Error::data(&a.generations, "no generations"));
    }
    let lexicon = a.lexicon.as_deref().map(read_lexicon).transpose()?;
    let texts: Vec<Vec<String>> = lines.iter().map(|l| l.continuation.clone()).collect();
    let pos: Option<Vec<Vec<String>>> = if lines.iter().all(|l| l.sampled_pos.is_some()) {
        Some(lines.iter().map(|l| l.sampled_pos.clone().unwrap_or_default()).collect())
    } else {
        lexicon.as_ref().map(|lex| {
            texts
                .iter()
                .map(|t| {
                    let ids: Vec<usize> = t.iter().map(|w| lex.vocab.id(w)).collect();
                    tag_with_lexicon(&lex.partition, &lex.tag_counts, &ids)
                        .into_iter()
                        .map(|r| lex.inventory.tag(r).to_string())
                        .collect()
                })
                .collect()
        })
    };

    let references: Option<Vec<Vec<String>>> = match &a.references {
        Some(path) => {
            let text = read_text(path)?;
            if is_jsonl(&text) {
                Some(read_generations(path)?.into_iter().map(|l| l.continuation).collect())
            } else {
                let corpus = crate::corpus::parse_tagged_corpus(&text).map_err(|e| Error::data(path, e))?;
                Some(
                    corpus
                        .sequences()
                        .iter()
                        .map(|s| s.iter().map(|t| t.surface().to_string()).collect())
                        .collect(),
                )
            }
        }
        None if lines.iter().all(|l| l.reference.is_some()) => {
            Some(lines.iter().map(|l| l.reference.clone().unwrap_or_default()).collect())
        }
        None => None,
    };

    let settings = MetricsSettings {
        self_bleu_seed: a.seed.or(file.seed).unwrap_or(0),
        ..MetricsSettings::default()
    };
    let generated = TextSet {
        texts: &texts,
        pos: pos.as_deref(),
    };
    let reference = references.as_deref().map(|r| TextSet { texts: r, pos: None });
    let mut report =
        evaluate_texts(&generated, reference.as_ref(), &settings).map_err(|e| Error::data(&a.generations, e))?;

    if let (Some(ckpt), Some(test), Some(lex)) = (&a.checkpoint, &a.test_corpus, &lexicon) {
        let model = read_model(ckpt)?;
        let held_out = encode(lex, test, TagPolicy::Coerce)?;
        let ppl = metrics::perplexity(&model, Some(&lex.partition), &held_out).map_err(|e| Error::data(test, e))?;
        report.metrics.insert("ppl".into(), ppl);
    }
    write_file(&a.out, to_json_pretty(&report))?;
    for (k, v) in &report.metrics {
        eprintln!("{k:>24} {v:.6}");
    }
    Ok(())
}

fn sweep(a: SweepArgs, file: &FileConfig) -> Result<(), Error> {
    let ctx = load_prompts(&a.prompts, file)?;
    if a.token_stages.is_empty() || (ctx.model.head == HeadKind::Posg && a.pos_stages.is_empty()) {
        return Err(Error::Usage("empty sweep grid".into()));
    }
    let pos_stages: Vec<Option<StageStrategy>> = match ctx.model.head {
        HeadKind::Posg => a.pos_stages.iter().cloned().map(Some).collect(),
        HeadKind::Mle => vec![None],
    };
    let held_out = encode(&ctx.lexicon, &a.prompts.corpus, TagPolicy::Coerce)?;
    let ppl = metrics::perplexity(&ctx.model, Some(&ctx.lexicon.partition), &held_out)
        .map_err(|e| Error::data(&a.prompts.corpus, e))?;
    let bleu = SelfBleuOptions {
        seed: ctx.seed,
        ..SelfBleuOptions::default()
    };

    let mut csv = String::from("head,pos_stage,token_stage,self_bleu4,distinct_2,rep,uniq,ppl\n");
    for pos_stage in &pos_stages {
        for token_stage in &a.token_stages {
            let config = sampling_config(*pos_stage, Some(*token_stage), ctx.seed, file);
            config.validate().map_err(|e| Error::Usage(e.to_string()))?;
            let records = ctx.run(&config)?;
            let texts: Vec<Vec<usize>> = records.iter().map(|r| r.continuation.clone()).collect();
            let metric_err = |e| Error::Runtime(format!("metrics: {e}"));
            let sb = if texts.len() >= 2 {
                metrics::self_bleu(&texts, &bleu).map_err(metric_err)?
            } else {
                f64::NAN
            };
            let d2 = metrics::distinct_n(&texts, 2).map_err(metric_err)?;
            let rep = metrics::rep(&texts, 10, 3).map_err(metric_err)?;
            let pos_label = pos_stage.as_ref().map_or("-".to_string(), |s| s.to_string());
            writeln!(
                csv,
                "{},{},{},{sb},{d2},{rep},{},{ppl}",
                ctx.model.head,
                pos_label,
                token_stage,
                metrics::uniq(&texts)
            )
            .expect("string write");
            eprintln!("{pos_label:>14} {token_stage:>14}  self_bleu4 {sb:.3}  distinct_2 {d2:.4}  rep {rep:.3}");
        }
    }
    write_file(&a.out, csv)
}

fn control(a: ControlArgs, file: &FileConfig) -> Result<(), Error> {
    let ctx = load_prompts(&a.prompts, file)?;
    if ctx.model.head != HeadKind::Posg {
        return Err(Error::Usage("control needs a posg checkpoint".into()));
    }
    let tag = ctx.tag_id(&a.tag)?;
    if a.multipliers.is_empty() {
        return Err(Error::Usage("no multipliers given".into()));
    }
    let bleu = SelfBleuOptions {
        seed: ctx.seed,
        ..SelfBleuOptions::default()
    };
    let mut csv = String::from("tag,multiplier,mean_tag_count,self_bleu4,bleu_vs_reference,distinct_2\n");
    for &m in &a.multipliers {
        let mut config = sampling_config(a.pos_stage, a.token_stage, ctx.seed, file);
        config.control.insert(tag, m);
        config.validate().map_err(|e| Error::Usage(e.to_string()))?;
        let records = ctx.run(&config)?;
        let stats = ControlRow::compute(&ctx, &records, tag, &bleu)?;
        writeln!(
            csv,
            "{},{m},{},{},{},{}",
            a.tag, stats.mean_tag_count, stats.self_bleu, stats.bleu_vs_reference, stats.distinct_2
        )
        .expect("string write");
        eprintln!(
            "x{m:<6} {} per continuation {:.3}  self_bleu4 {:.3}  bleu {:.3}",
            a.tag, stats.mean_tag_count, stats.self_bleu, stats.bleu_vs_reference
        );
    }
    write_file(&a.out, csv)
}

struct ControlRow {
    mean_tag_count: f64,
    self_bleu: f64,
    bleu_vs_reference: f64,
    distinct_2: f64,
}

impl ControlRow {
    fn compute(
        ctx: &PromptContext,
        records: &[GenerationRecord],
        tag: usize,
        bleu: &SelfBleuOptions,
    ) -> Result<Self, Error> {
        let metric_err = |e| Error::Runtime(format!("metrics: {e}"));
        let pos = ctx.pos_of(records);
        let n = records.len() as f64;
        let mean_tag_count = pos.iter().map(|p| p.iter().filter(|&&r| r == tag).count() as f64).sum::<f64>() / n;
        let texts: Vec<Vec<usize>> = records.iter().map(|r| r.continuation.clone()).collect();
        let self_bleu = if texts.len() >= 2 {
            metrics::self_bleu(&texts, bleu).map_err(metric_err)?
        } else {
            f64::NAN
        };
        let bleu_vs_reference = records
            .iter()
            .zip(&ctx.prompts)
            .map(|(r, p)| metrics::bleu(&r.continuation, &[p.reference.as_slice()], bleu.max_n))
            .sum::<f64>()
            / n;
        Ok(Self {
            mean_tag_count,
            self_bleu,
            bleu_vs_reference,
            distinct_2: metrics::distinct_n(&texts, 2).map_err(metric_err)?,
        })
    }
}

fn entropy(a: EntropyArgs, file: &FileConfig) -> Result<(), Error> {
    let e = &file.entropy;
    let defaults = EntropyCheckConfig::default();
    let config = EntropyCheckConfig {
        trials: a.trials.or(e.trials).unwrap_or(defaults.trials),
        pos_count: a.pos_count.or(e.pos_count).unwrap_or(defaults.pos_count),
        cell_size: a.cell_size.or(e.cell_size).unwrap_or(defaults.cell_size),
        k: a.k.or(e.k).unwrap_or(defaults.k),
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
        overlap: a.overlap,
        ..defaults
    };
    let report = entropy_check(&config).map_err(|e| Error::Usage(e.to_string()))?;
    if let Some(out) = &a.out {
        write_file(out, to_json_pretty(&report))?;
    }
    println!("{}", to_json_pretty(&report.summary).trim_end());
    if report.summary.all_hard_checks_hold {
        Ok(())
    } else {
        Err(Error::Assertion("an entropy bound failed; see the report".into()))
    }
}
