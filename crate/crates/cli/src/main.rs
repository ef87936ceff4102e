//! Command-line driver: corpus generation and statistics, tokenizer
//! training, data building, grammar audit, training, evaluation, and the
//! descriptor study.

mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, ColorChoice, Parser, Subcommand};
use serde_json::{json, Value};
use zeroshot::corpus::{
    compute_stats_sharded, generate_synthetic_corpus, read_corpus, tokenizer_texts, write_corpus, SyntheticSpec,
};
use zeroshot::encoding::{encode_example, EncoderConfig};
use zeroshot::evaluation::{descriptor_study, evaluate, gold_indices, Decoder, EvalOptions, ModelGenerator};
use zeroshot::grammar::TEMPLATES;
use zeroshot::rng::{stream_rng, Stream};
use zeroshot::sampler::{
    build_task_examples, distractor_pool_build, load_records, read_examples, sample_pretraining_example,
    write_examples, write_records, LabeledRecord, SampleOverrides, SamplerConfig, TaskSpec, TemplateChoice,
};
use zeroshot::tokenizer::{BpeTrainer, Vocabulary, DEFAULT_VOCAB_SIZE};
use zeroshot::training::{truncate_metrics, Checkpoint, RunConfig, TrainConfig, Trainer, METRICS_FILE};

use crate::manifest::{hash_paths, now, RunManifest};

#[derive(Parser)]
#[command(name = "zeroshot", version, about = "Zero-shot text classification by generative multiple-choice QA")]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, summarize, or derive tasks from corpora.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train or apply a byte-level BPE tokenizer.
    #[command(subcommand)]
    Tokenizer(TokenizerCommand),
    /// Inspect the question templates.
    #[command(subcommand)]
    Grammar(GrammarCommand),
    /// Build pretraining or task examples and inspect their encoding.
    #[command(subcommand)]
    Data(DataCommand),
    /// Pretrain a model on title prediction.
    Train(TrainArgs),
    /// Evaluate a checkpoint zero-shot on a classification task.
    Eval(EvalArgs),
    /// Compare descriptor variants of one task.
    Study(StudyArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output location; refused if it exists unless --force is given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Write a synthetic corpus with disjoint topic vocabularies.
    Generate {
        /// TOML file with generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of topics.
        #[arg(long)]
        topics: Option<usize>,
        /// Documents written per topic.
        #[arg(long)]
        docs_per_topic: Option<usize>,
        /// Content words in each topic vocabulary.
        #[arg(long)]
        words_per_topic: Option<usize>,
        /// Chance that a text word comes from the shared vocabulary.
        #[arg(long)]
        overlap: Option<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Label frequency statistics of a corpus.
    Stats {
        /// Corpus in JSON-lines form.
        #[arg(long)]
        corpus: PathBuf,
        /// Most frequent labels to list.
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        /// Count thresholds for the labels-above-threshold table.
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
        thresholds: Vec<u64>,
        /// Also show the reference corpus figures.
        #[arg(long)]
        reference: bool,
        /// Print the statistics as JSON.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Derive a held-out classification task from a synthetic corpus.
    Heldout {
        /// The `synthetic.toml` written by `corpus generate`.
        #[arg(long)]
        synthetic: PathBuf,
        /// Topic indices to turn into classes.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        topics: Vec<usize>,
        /// Records per class.
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Subcommand)]
enum TokenizerCommand {
    /// Fit merges on a corpus.
    Train {
        /// Corpus in JSON-lines form.
        #[arg(long)]
        corpus: PathBuf,
        /// Target vocabulary size, special tokens included.
        #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
        vocab_size: usize,
        /// Accept a smaller vocabulary when the corpus runs out of pairs.
        #[arg(long)]
        allow_undersized: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Print the tokens of a string.
    Encode {
        /// Tokenizer directory.
        #[arg(long)]
        tokenizer: PathBuf,
        /// Text to tokenize.
        text: String,
    },
}

#[derive(Subcommand)]
enum GrammarCommand {
    /// List every question template.
    Dump {
        /// Print the templates as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// One title-prediction example per corpus document.
    Pretrain {
        /// Corpus in JSON-lines form.
        #[arg(long)]
        corpus: PathBuf,
        /// Use only the first N documents.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// One multiple-choice example per labeled record.
    Task {
        /// Built-in task name or task file.
        #[arg(long)]
        task: String,
        /// Labeled records; defaults to the task's source.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Fixed template (1-26); random per example otherwise.
        #[arg(long)]
        template_id: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Encode examples and report lengths, truncation, and failures.
    Encode {
        /// Tokenizer directory.
        #[arg(long)]
        tokenizer: PathBuf,
        /// Examples in JSON-lines form, as written by `data pretrain` or `data task`.
        #[arg(long)]
        examples: PathBuf,
        /// Longest allowed sequence.
        #[arg(long, default_value_t = 256)]
        max_seq_len: usize,
        /// Tokens reserved for the answer.
        #[arg(long, default_value_t = 20)]
        max_answer_tokens: usize,
        /// Print token, segment, and position rows for the first N examples.
        #[arg(long, default_value_t = 0)]
        show: usize,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Pretraining corpus in JSON-lines form.
    #[arg(long)]
    corpus: PathBuf,
    /// Tokenizer directory; required unless resuming.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Run directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
    /// Hyperparameter preset: full, quarter, or desk.
    #[arg(long, default_value = "full")]
    preset: String,
    /// TOML run configuration, layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Peak learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Examples per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Passes over the training documents.
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop the schedule at this many steps instead of the epoch budget.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Held-back validation examples.
    #[arg(long)]
    validation_size: Option<usize>,
    /// Also write step-K checkpoints every K steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop after this step, leaving the run resumable.
    #[arg(long)]
    stop_at: Option<usize>,
    /// Continue from a checkpoint; its configuration is used unchanged.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TaskArgs {
    /// Built-in task name or task file.
    #[arg(long)]
    task: String,
    /// Labeled evaluation records; defaults to the task's source.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Evaluate only the first N records.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Model checkpoint (.safetensors).
    #[arg(long)]
    checkpoint: PathBuf,
    /// greedy, topk:K, or topp:P, optionally with @TEMPERATURE.
    #[arg(long, default_value = "greedy")]
    decoder: String,
    /// Fixed template (1-26); random per example otherwise.
    #[arg(long)]
    template_id: Option<usize>,
    /// Longest generated answer; defaults to the checkpoint's setting.
    #[arg(long)]
    max_answer_tokens: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    task: TaskArgs,
    /// Training records, for the majority-class baseline.
    #[arg(long)]
    train_records: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    task: TaskArgs,
    /// Further descriptor sets for the same labels.
    #[arg(long, required = true)]
    variant: Vec<String>,
    #[command(flatten)]
    out: OutArgs,
}

/// What a finished command reports for its manifest.
struct Outcome {
    config: Value,
    inputs: Vec<PathBuf>,
    out: Option<PathBuf>,
}

impl Outcome {
    fn new(config: Value, inputs: Vec<PathBuf>, out: Option<PathBuf>) -> Self {
        Outcome { config, inputs, out }
    }

    fn none() -> Self {
        Outcome::new(Value::Null, Vec::new(), None)
    }
}

fn main() -> ExitCode {
    let no_color = std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty());
    let matches = <Cli as clap::CommandFactory>::command()
        .color(if no_color { ColorChoice::Never } else { ColorChoice::Auto })
        .get_matches();
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Writes to stdout, returning write errors so a closed pipe ends the command.
macro_rules! out {
    ($($arg:tt)*) => {
        write!(std::io::stdout().lock(), $($arg)*)
    };
}

macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)
    };
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let started = now();
    let argv: Vec<String> = std::env::args().collect();
    let seed = cli.seed.unwrap_or(0);
    let (name, outcome) = match cli.command {
        Command::Corpus(c) => ("corpus", corpus(c, seed)?),
        Command::Tokenizer(c) => ("tokenizer", tokenizer(c)?),
        Command::Grammar(GrammarCommand::Dump { json }) => ("grammar", grammar_dump(json)?),
        Command::Data(c) => ("data", data(c, seed)?),
        Command::Train(a) => ("train", train(a, cli.seed)?),
        Command::Eval(a) => ("eval", eval(a, seed)?),
        Command::Study(a) => ("study", study(a, seed)?),
    };
    if let Some(out) = &outcome.out {
        let manifest = RunManifest {
            subcommand: name.to_string(),
            argv,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: outcome.config,
            inputs: hash_paths(&outcome.inputs)?,
            outputs: hash_paths(std::slice::from_ref(out))?,
            started_at: started,
            finished_at: now(),
        };
        let path = manifest.write(out)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

/// Clears the way for a new output, refusing to replace one without
/// `force`.
fn claim_output(path: &Path, force: bool, directory: bool) -> Result<()> {
    if path.exists() {
        if !force {
            bail!("{} already exists (pass --force to replace it)", path.display());
        }
        if path.is_dir() {
            fs::remove_dir_all(path)
        } else {
            fs::remove_file(path)
        }
        .with_context(|| format!("removing {}", path.display()))?;
    }
    if directory {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn required_out(out: &OutArgs, directory: bool) -> Result<PathBuf> {
    let path = out.out.clone().context("--out is required")?;
    claim_output(&path, out.force, directory)?;
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn corpus(cmd: CorpusCommand, seed: u64) -> Result<Outcome> {
    match cmd {
        CorpusCommand::Generate {
            config,
            topics,
            docs_per_topic,
            words_per_topic,
            overlap,
            out,
        } => {
            let mut spec = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => SyntheticSpec::default(),
            };
            spec.seed = seed;
            spec.topics = topics.unwrap_or(spec.topics);
            spec.docs_per_topic = docs_per_topic.unwrap_or(spec.docs_per_topic);
            spec.words_per_topic = words_per_topic.unwrap_or(spec.words_per_topic);
            spec.overlap = overlap.unwrap_or(spec.overlap);
            let dir = required_out(&out, true)?;
            let corpus = generate_synthetic_corpus(&spec)?;
            write_corpus(&dir.join("corpus.jsonl"), &corpus.documents)?;
            write_text(&dir.join("synthetic.toml"), &toml::to_string_pretty(&spec)?)?;
            write_text(
                &dir.join("topics.json"),
                &(serde_json::to_string_pretty(&corpus.topics)? + "\n"),
            )?;
            outln!(
                "{} documents over {} topics in {}",
                corpus.documents.len(),
                corpus.topics.len(),
                dir.display()
            )?;
            Ok(Outcome::new(serde_json::to_value(&spec)?, config.into_iter().collect(), Some(dir)))
        }
        CorpusCommand::Stats {
            corpus,
            top_k,
            thresholds,
            reference,
            json,
            out,
        } => {
            let docs = read_corpus(&corpus)?;
            let stats = compute_stats_sharded(&docs, rayon::current_num_threads(), top_k, &thresholds);
            let rendered = if json {
                serde_json::to_string_pretty(&stats)? + "\n"
            } else {
                stats.render_table(reference)
            };
            out!("{rendered}")?;
            let target = match &out.out {
                Some(path) => {
                    claim_output(path, out.force, false)?;
                    write_text(path, &rendered)?;
                    Some(path.clone())
                }
                None => None,
            };
            Ok(Outcome::new(json!({ "top_k": top_k, "thresholds": thresholds }), vec![corpus], target))
        }
        CorpusCommand::Heldout {
            synthetic,
            topics,
            per_class,
            out,
        } => {
            let text = fs::read_to_string(&synthetic).with_context(|| format!("reading {}", synthetic.display()))?;
            let spec: SyntheticSpec =
                toml::from_str(&text).with_context(|| format!("parsing {}", synthetic.display()))?;
            let corpus = generate_synthetic_corpus(&spec)?;
            let task = corpus.heldout_task(&topics, per_class, seed)?;
            let dir = required_out(&out, true)?;
            write_records(&dir.join("records.jsonl"), &task.records)?;
            for (file, spec) in [
                ("task.toml", &task.spec),
                ("task-stripped.toml", &task.stripped),
                ("task-truncated.toml", &task.truncated),
            ] {
                let mut spec = spec.clone();
                spec.source = Some(PathBuf::from("records.jsonl"));
                write_text(&dir.join(file), &spec.to_toml_string())?;
            }
            outln!("{} records, classes: {}", task.records.len(), task.spec.descriptors.join(" | "))?;
            Ok(Outcome::new(
                json!({ "topics": topics, "per_class": per_class }),
                vec![synthetic],
                Some(dir),
            ))
        }
    }
}

fn tokenizer(cmd: TokenizerCommand) -> Result<Outcome> {
    match cmd {
        TokenizerCommand::Train {
            corpus,
            vocab_size,
            allow_undersized,
            out,
        } => {
            let docs = read_corpus(&corpus)?;
            let dir = required_out(&out, true)?;
            let vocab = BpeTrainer::new(vocab_size)
                .allow_undersized(allow_undersized)
                .train(tokenizer_texts(&docs))?;
            vocab.save(&dir)?;
            outln!("vocabulary of {} tokens in {}", vocab.vocab_size(), dir.display())?;
            Ok(Outcome::new(
                json!({ "vocab_size": vocab_size, "allow_undersized": allow_undersized }),
                vec![corpus],
                Some(dir),
            ))
        }
        TokenizerCommand::Encode { tokenizer, text } => {
            let vocab = Vocabulary::load(&tokenizer)?;
            for id in vocab.encode(&text) {
                outln!("{id:>6}  {}", vocab.token_display(id).unwrap_or_default())?;
            }
            Ok(Outcome::none())
        }
    }
}

fn grammar_dump(json: bool) -> Result<Outcome> {
    if json {
        let list: Vec<Value> = TEMPLATES
            .iter()
            .map(|t| json!({ "id": t.id, "template": t.display(), "suffix_mode": t.suffix_mode }))
            .collect();
        outln!("{}", serde_json::to_string_pretty(&list)?)?;
    } else {
        for t in TEMPLATES.iter() {
            outln!("{:>2}. {}", t.id, t.display())?;
        }
    }
    Ok(Outcome::none())
}

fn load_task(name_or_path: &str) -> Result<TaskSpec> {
    let path = Path::new(name_or_path);
    if path.exists() {
        Ok(TaskSpec::load(path)?)
    } else {
        TaskSpec::builtin(name_or_path).with_context(|| format!("{name_or_path} is neither a file nor a built-in task"))
    }
}

fn task_records(spec: &TaskSpec, records: Option<&Path>, limit: Option<usize>) -> Result<(Vec<LabeledRecord>, PathBuf)> {
    let path = match records {
        Some(p) => p.to_path_buf(),
        None => spec
            .source
            .clone()
            .with_context(|| format!("task {} names no records; pass --records", spec.name))?,
    };
    let mut records = load_records(&path)?;
    if let Some(n) = limit {
        records.truncate(n);
    }
    Ok((records, path))
}

fn template_choice(id: Option<usize>) -> TemplateChoice {
    id.map_or(TemplateChoice::Random, TemplateChoice::Fixed)
}

fn data(cmd: DataCommand, seed: u64) -> Result<Outcome> {
    match cmd {
        DataCommand::Pretrain { corpus, limit, out } => {
            let docs = read_corpus(&corpus)?;
            let path = required_out(&out, false)?;
            let pool = distractor_pool_build(&docs);
            let cfg = SamplerConfig::default();
            let n = limit.unwrap_or(docs.len()).min(docs.len());
            let examples = docs[..n]
                .iter()
                .enumerate()
                .map(|(i, doc)| {
                    let mut rng = stream_rng(seed, Stream::Example, i as u64);
                    sample_pretraining_example(doc, Some(i), &pool, &cfg, &mut rng, SampleOverrides::default())
                })
                .collect::<zeroshot::Result<Vec<_>>>()?;
            write_examples(&path, &examples)?;
            outln!("{} examples in {}", examples.len(), path.display())?;
            Ok(Outcome::new(serde_json::to_value(&cfg)?, vec![corpus], Some(path)))
        }
        DataCommand::Task {
            task,
            records,
            template_id,
            out,
        } => {
            let spec = load_task(&task)?;
            let (records, records_path) = task_records(&spec, records.as_deref(), None)?;
            let path = required_out(&out, false)?;
            let examples = build_task_examples(&spec, &records, template_choice(template_id), seed)?;
            write_examples(&path, &examples)?;
            outln!("{} examples in {}", examples.len(), path.display())?;
            Ok(Outcome::new(
                json!({ "task": spec, "template_id": template_id }),
                vec![records_path],
                Some(path),
            ))
        }
        DataCommand::Encode {
            tokenizer,
            examples,
            max_seq_len,
            max_answer_tokens,
            show,
            out,
        } => {
            let vocab = Vocabulary::load(&tokenizer)?;
            let cfg = EncoderConfig {
                max_seq_len,
                max_answer_tokens,
            };
            cfg.validate()?;
            let list = read_examples(&examples)?;
            let target = match &out.out {
                Some(p) => {
                    claim_output(p, out.force, false)?;
                    Some(p.clone())
                }
                None => None,
            };
            let mut writer = match &target {
                Some(p) => Some(std::io::BufWriter::new(
                    fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
                )),
                None => None,
            };
            let (mut encoded, mut failed, mut truncated, mut tokens) = (0usize, 0usize, 0usize, 0usize);
            for (i, ex) in list.iter().enumerate() {
                match encode_example(ex, &vocab, &cfg) {
                    Ok(enc) => {
                        encoded += 1;
                        tokens += enc.len();
                        truncated += usize::from(enc.truncated > 0);
                        if i < show {
                            outln!("example {i}:\n{}", enc.render_table(&vocab))?;
                        }
                        if let Some(w) = writer.as_mut() {
                            let row = json!({
                                "token_ids": enc.token_ids,
                                "type_ids": enc.type_ids.iter().map(|s| s.id()).collect::<Vec<_>>(),
                                "position_ids": enc.position_ids,
                                "loss_mask": enc.loss_mask,
                                "answer_start": enc.answer_start,
                                "truncated": enc.truncated,
                            });
                            serde_json::to_writer(&mut *w, &row)?;
                            writeln!(w)?;
                        }
                    }
                    Err(e) => {
                        failed += 1;
                        log::warn!("example {i}: {e}");
                    }
                }
            }
            if let Some(mut w) = writer {
                w.flush()?;
            }
            outln!(
                "encoded {encoded}, unencodable {failed}, truncated {truncated}, mean length {:.1}",
                tokens as f64 / encoded.max(1) as f64
            )?;
            Ok(Outcome::new(
                serde_json::to_value(&cfg)?,
                vec![tokenizer, examples],
                target,
            ))
        }
    }
}

/// Overlays `top` onto `base`, table by table.
fn merge_toml(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge_toml(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Defaults, then the preset, then the config file, then flags.
fn resolve_run_config(args: &TrainArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig {
        train: TrainConfig::preset(&args.preset)?,
        ..RunConfig::default()
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut merged = toml::Value::try_from(&config)?;
        merge_toml(&mut merged, file);
        config = merged.try_into().with_context(|| format!("applying {}", path.display()))?;
    }
    let t = &mut config.train;
    t.seed = seed.unwrap_or(t.seed);
    t.learning_rate = args.learning_rate.unwrap_or(t.learning_rate);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.validation_size = args.validation_size.unwrap_or(t.validation_size);
    if args.max_steps.is_some() {
        t.max_steps = args.max_steps;
    }
    if args.checkpoint_every.is_some() {
        t.checkpoint_every = args.checkpoint_every;
    }
    Ok(config)
}

fn train(args: TrainArgs, seed: Option<u64>) -> Result<Outcome> {
    let docs = read_corpus(&args.corpus)?;
    let mut inputs = vec![args.corpus.clone()];
    let out = args.out.clone();
    let checkpoint = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let vocab = match (&checkpoint, &args.tokenizer) {
        (Some(c), _) => c.vocabulary()?,
        (None, Some(path)) => Vocabulary::load(path)?,
        (None, None) => bail!("--tokenizer is required unless resuming"),
    };
    let mut trainer = match checkpoint {
        Some(checkpoint) => {
            if args.force {
                claim_output(&out, true, true)?;
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            truncate_metrics(&out.join(METRICS_FILE), checkpoint.step)?;
            inputs.extend(args.resume.clone());
            let trainer = Trainer::resume(checkpoint, &vocab, docs)?;
            log::info!("resuming at step {} of {}", trainer.step(), trainer.total_steps());
            trainer
        }
        None => {
            let mut config = resolve_run_config(&args, seed)?;
            config.model.vocab_size = vocab.vocab_size();
            claim_output(&out, args.force, true)?;
            write_text(&out.join("config.toml"), &config.to_toml_string())?;
            inputs.extend(args.tokenizer.clone());
            let trainer = Trainer::new(config, &vocab, docs)?;
            log::info!(
                "{} parameters, {} training documents, {} validation examples, {} steps",
                trainer.config().model.count_params(),
                trainer.train_documents(),
                trainer.validation_examples(),
                trainer.total_steps()
            );
            trainer
        }
    };
    let report = trainer.run(Some(&out), args.stop_at)?;
    outln!(
        "trained to step {}/{} in {:.1}s; last loss {}; best validation {}",
        trainer.step(),
        trainer.total_steps(),
        report.wall_clock_secs,
        report
            .steps
            .iter()
            .rev()
            .find_map(|m| m.loss)
            .map_or("-".into(), |l| format!("{l:.4}")),
        report
            .validation
            .iter()
            .map(|v| v.loss)
            .reduce(f64::min)
            .map_or("-".into(), |l| format!("{l:.4}"))
    )?;
    if report.skipped_examples > 0 {
        outln!("skipped {} of {} unencodable examples", report.skipped_examples, report.seen_examples)?;
    }
    Ok(Outcome::new(serde_json::to_value(trainer.config())?, inputs, Some(out)))
}

struct Loaded {
    checkpoint: Checkpoint,
    vocab: Vocabulary,
    encoder: EncoderConfig,
    decoder: Decoder,
    max_answer_tokens: usize,
}

fn load_for_decoding(args: &DecodeArgs) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let vocab = checkpoint.vocabulary()?;
    let encoder = checkpoint.config.encoder.clone();
    let decoder: Decoder = args.decoder.parse()?;
    let max_answer_tokens = args.max_answer_tokens.unwrap_or(encoder.max_answer_tokens);
    Ok(Loaded {
        checkpoint,
        vocab,
        encoder,
        decoder,
        max_answer_tokens,
    })
}

impl Loaded {
    fn generator(&self, seed: u64) -> ModelGenerator<'_, f32> {
        ModelGenerator {
            model: &self.checkpoint.model,
            vocab: &self.vocab,
            encoder: self.encoder.clone(),
            decoder: self.decoder,
            max_answer_tokens: self.max_answer_tokens,
            seed,
        }
    }
}

fn eval(args: EvalArgs, seed: u64) -> Result<Outcome> {
    let loaded = load_for_decoding(&args.decode)?;
    let spec = load_task(&args.task.task)?;
    let (records, records_path) = task_records(&spec, args.task.records.as_deref(), args.task.limit)?;
    let dir = match &args.out.out {
        Some(_) => Some(required_out(&args.out, true)?),
        None => None,
    };
    let examples = build_task_examples(&spec, &records, template_choice(args.decode.template_id), seed)?;
    let mut inputs = vec![args.decode.checkpoint.clone(), records_path];
    let train_labels = match &args.train_records {
        Some(path) => {
            inputs.push(path.clone());
            let train = load_records(path)?;
            let examples = build_task_examples(&spec, &train, TemplateChoice::Fixed(1), seed)?;
            Some(gold_indices(&spec, &examples)?)
        }
        None => None,
    };
    let options = EvalOptions { train_labels, seed };
    let report = evaluate(&loaded.generator(seed), &spec, &examples, &options)?;
    let text = report.render_text();
    let json_text = serde_json::to_string_pretty(&report)? + "\n";
    if args.json {
        out!("{json_text}")?;
    } else {
        out!("{text}")?;
    }
    if let Some(dir) = &dir {
        write_text(&dir.join("report.txt"), &text)?;
        write_text(&dir.join("report.json"), &json_text)?;
        write_text(&dir.join("confusion.csv"), &report.confusion_csv()?)?;
        write_text(&dir.join("confusion.svg"), &report.heatmap_svg())?;
    }
    Ok(Outcome::new(
        json!({
            "task": spec,
            "decoder": loaded.decoder,
            "template_id": args.decode.template_id,
            "max_answer_tokens": loaded.max_answer_tokens,
            "limit": args.task.limit,
        }),
        inputs,
        dir,
    ))
}

fn study(args: StudyArgs, seed: u64) -> Result<Outcome> {
    let loaded = load_for_decoding(&args.decode)?;
    let base = load_task(&args.task.task)?;
    let (records, records_path) = task_records(&base, args.task.records.as_deref(), args.task.limit)?;
    let mut variants = vec![base];
    for v in &args.variant {
        variants.push(load_task(v)?);
    }
    let dir = match &args.out.out {
        Some(_) => Some(required_out(&args.out, true)?),
        None => None,
    };
    let options = EvalOptions {
        train_labels: None,
        seed,
    };
    let report = descriptor_study(
        &loaded.generator(seed),
        &loaded.vocab,
        &variants,
        &records,
        template_choice(args.decode.template_id),
        &options,
    )?;
    let text = report.render_text();
    out!("{text}")?;
    if let Some(dir) = &dir {
        write_text(&dir.join("study.txt"), &text)?;
        write_text(&dir.join("study.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(Outcome::new(
        json!({
            "tasks": variants,
            "decoder": loaded.decoder,
            "template_id": args.decode.template_id,
            "limit": args.task.limit,
        }),
        vec![args.decode.checkpoint.clone(), records_path],
        dir,
    ))
}
