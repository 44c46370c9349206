//! Command-line front end: transduction, generation, LM training,
//! evaluation, dataset generation, and a mock LM server.
//!
//! Every command is deterministic given its flags. Stdout carries only
//! JSON/JSONL data; diagnostics go to stderr. Error classes map to distinct
//! exit codes:
//!   2 usage/config, 3 I/O, 4 parse (graph/rules), 5 execution,
//!   6 transduction/coverage, 7 grammar/decoding, 8 language model,
//!   9 evaluation/alignment.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use flowgen::dataset::{
    generate_dataset, run_experiment, ExperimentConfig, SyntheticDataset, SyntheticExample,
    CALENDAR_RULES,
};
use flowgen::decoder::{generate, DecodeConfig, DecodeError, DecodeMode, GenerateConfig};
use flowgen::eval::{evaluate, ScoredExample};
use flowgen::graph::DataflowGraph;
use flowgen::lm::{build_prompt, LmError, LmScorer, NgramModel, PromptFlags, UniformScorer};
use flowgen::qcfg::Qcfg;
use flowgen::registry::{Calendar, ExecEnv, FunctionRegistry};
use flowgen::remote::{serve_loop, MockBehavior, RemoteScorer};
use flowgen::rules::parse_rules;
use flowgen::tokenizer::Tokenizer;
use flowgen::transducer::{TransduceError, TransduceOptions, Transducer};

#[derive(Parser)]
#[command(name = "flowgen", about = "Grammar-constrained response generation from dataflow graphs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transduce a dataflow graph into its response grammar (JSON).
    Transduce(TransduceArgs),
    /// Generate ranked responses for a graph (JSON lines).
    Generate(GenerateArgs),
    /// Write the tokenizer the generate command would use (JSON).
    Vocab(VocabArgs),
    /// Train an n-gram model on a text corpus (one sentence per line).
    TrainLm(TrainLmArgs),
    /// Score predictions against a dataset (MetricReport JSON).
    Evaluate(EvaluateArgs),
    /// Run one generation mode over the bundled synthetic dataset.
    RunExperiment(RunExperimentArgs),
    /// Write the bundled synthetic dataset to a directory.
    GenDataset(GenDatasetArgs),
    /// Serve the remote LM wire protocol with a uniform distribution.
    ServeMockLm(ServeMockLmArgs),
}

#[derive(Args)]
struct GraphEnvArgs {
    /// Dataflow graph file (S-expression).
    #[arg(long)]
    graph: PathBuf,
    /// Transduction rule pack; defaults to the bundled calendar rules.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Reference timestamp, ISO-8601 (e.g. 2022-03-14T09:00).
    #[arg(long)]
    now: String,
    /// Calendar fixture (JSON list of events); defaults to empty.
    #[arg(long)]
    calendar: Option<PathBuf>,
    /// Maximum transduction/derivation depth.
    #[arg(long, default_value_t = 64)]
    max_depth: usize,
}

#[derive(Args)]
struct TransduceArgs {
    #[command(flatten)]
    env: GraphEnvArgs,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Constrained,
    Unconstrained,
    Sample,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Constrained => DecodeMode::Constrained,
            ModeArg::Unconstrained => DecodeMode::Unconstrained,
            ModeArg::Sample => DecodeMode::Sample,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    env: GraphEnvArgs,
    /// LM spec: uniform | ngram:PATH | remote:URL.
    #[arg(long, default_value = "uniform")]
    lm: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Constrained)]
    mode: ModeArg,
    /// Beam size K (sample mode: number of samples).
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 48)]
    max_len: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated prompt parts: utterance,computation,result.
    #[arg(long, default_value = "computation,result")]
    prompt_parts: String,
    /// User utterance for the prompt's utterance part.
    #[arg(long)]
    utterance: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VocabArgs {
    #[command(flatten)]
    env: GraphEnvArgs,
    #[arg(long, default_value = "computation,result")]
    prompt_parts: String,
    #[arg(long)]
    utterance: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainLmArgs {
    /// Text corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 4)]
    order: usize,
    /// Add-k smoothing constant.
    #[arg(long, default_value_t = 0.1)]
    k: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset JSONL: {"id", "gold", ...} per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Predictions JSONL: {"id", "candidates": [[text, score], ...]}.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunExperimentArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Constrained)]
    mode: ModeArg,
    #[arg(long, default_value = "computation,result")]
    prompt_parts: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset generation seed.
    #[arg(long, default_value_t = 11)]
    dataset_seed: u64,
    #[arg(long, default_value_t = 180)]
    train: usize,
    #[arg(long, default_value_t = 80)]
    val: usize,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDatasetArgs {
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long, default_value_t = 180)]
    train: usize,
    #[arg(long, default_value_t = 80)]
    val: usize,
    /// Output directory; will contain dataset JSONL plus graph/calendar files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ServeMockLmArgs {
    /// Tokenizer JSON file defining the served vocabulary and digest.
    #[arg(long)]
    vocab: PathBuf,
    /// Port to bind on 127.0.0.1 (0 picks an ephemeral port).
    #[arg(long, default_value_t = 0)]
    port: u16,
}

// ---------------------------------------------------------------------------
// Error → exit code mapping

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(3, format!("i/o error: {e}"))
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        CliError::new(8, format!("language model error: {e}"))
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        let code = match &e {
            DecodeError::Graph(_) => 5,
            DecodeError::Transduce(_) => 6,
            DecodeError::Lm(_) => 8,
            DecodeError::Tokenize(_) => 8,
            _ => 7,
        };
        CliError::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Transduce(a) => cmd_transduce(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Vocab(a) => cmd_vocab(a),
        Command::TrainLm(a) => cmd_train_lm(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::RunExperiment(a) => cmd_run_experiment(a),
        Command::GenDataset(a) => cmd_gen_dataset(a),
        Command::ServeMockLm(a) => cmd_serve_mock_lm(a),
    }
}

fn emit(out: Option<&Path>, data: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, data)?,
        None => print!("{data}"),
    }
    Ok(())
}

fn parse_now(text: &str) -> Result<NaiveDateTime, CliError> {
    NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M"))
        .map_err(|_| CliError::new(2, format!("--now `{text}` is not ISO-8601 (YYYY-MM-DDTHH:MM[:SS])")))
}

fn parse_prompt_parts(text: &str) -> Result<PromptFlags, CliError> {
    let mut flags = PromptFlags {
        include_utterance: false,
        include_computation: false,
        include_result: false,
    };
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "utterance" => flags.include_utterance = true,
            "computation" => flags.include_computation = true,
            "result" => flags.include_result = true,
            other => {
                return Err(CliError::new(
                    2,
                    format!("unknown prompt part `{other}` (expected utterance, computation, result)"),
                ))
            }
        }
    }
    Ok(flags)
}

/// Load graph + rules + environment and execute the graph.
struct Loaded {
    graph: DataflowGraph,
    transducer: Transducer,
    env: ExecEnv,
    max_depth: usize,
}

fn load(env_args: &GraphEnvArgs) -> Result<Loaded, CliError> {
    let registry = FunctionRegistry::calendar_domain();
    let rules_text = match &env_args.rules {
        Some(path) => fs::read_to_string(path)?,
        None => CALENDAR_RULES.to_string(),
    };
    let pack = parse_rules(&rules_text, Some(&registry))
        .map_err(|e| CliError::new(4, format!("rule parse error: {e}")))?;
    let graph_text = fs::read_to_string(&env_args.graph)?;
    let graph = DataflowGraph::parse(&graph_text, Some(&registry))
        .map_err(|e| CliError::new(4, format!("graph parse error: {e}")))?;
    let calendar = match &env_args.calendar {
        Some(path) => Calendar::from_json(&fs::read_to_string(path)?)
            .map_err(|e| CliError::new(4, format!("calendar parse error: {e}")))?,
        None => Calendar::default(),
    };
    let env = ExecEnv { now: parse_now(&env_args.now)?, calendar };
    let mut graph = graph;
    graph
        .execute(&registry, &env)
        .map_err(|e| CliError::new(5, format!("execution error: {e}")))?;
    Ok(Loaded {
        graph,
        transducer: Transducer::new(pack, registry),
        env,
        max_depth: env_args.max_depth,
    })
}

fn transduce_loaded(loaded: &Loaded) -> Result<Qcfg, CliError> {
    let opts = TransduceOptions { max_depth: loaded.max_depth };
    match loaded.transducer.transduce(&loaded.graph, &loaded.env, opts) {
        Ok((_, grammar)) => Ok(grammar),
        Err(e @ TransduceError::Coverage(_)) => {
            Err(CliError::new(6, format!("coverage error: {e}")))
        }
        Err(e) => Err(CliError::new(6, format!("transduction error: {e}"))),
    }
}

fn cmd_transduce(a: TransduceArgs) -> Result<(), CliError> {
    let loaded = load(&a.env)?;
    let grammar = transduce_loaded(&loaded)?;
    emit(a.out.as_deref(), &format!("{}\n", grammar.to_json()))
}

/// Tokenizer shared by generate/vocab: grammar terminals (when rules apply)
/// plus every prompt word.
fn build_tokenizer(
    loaded: &Loaded,
    flags: PromptFlags,
    utterance: Option<&str>,
    with_grammar: bool,
) -> Result<Tokenizer, CliError> {
    let mut words: Vec<String> = Vec::new();
    if with_grammar {
        words.extend(transduce_loaded(loaded)?.sigma());
    }
    let prompt = build_prompt(&loaded.graph, flags, utterance)
        .map_err(|e| CliError::new(5, e.to_string()))?;
    words.extend(prompt.rendered.split_whitespace().map(String::from));
    Ok(Tokenizer::from_words(words))
}

/// Stored n-gram model file: the tokenizer plus the counts.
#[derive(Serialize, Deserialize)]
struct NgramFile {
    tokenizer: serde_json::Value,
    ngram: serde_json::Value,
}

enum LmSpec {
    Uniform,
    Ngram(PathBuf),
    Remote(String),
}

fn parse_lm_spec(text: &str) -> Result<LmSpec, CliError> {
    if text == "uniform" {
        Ok(LmSpec::Uniform)
    } else if let Some(path) = text.strip_prefix("ngram:") {
        Ok(LmSpec::Ngram(PathBuf::from(path)))
    } else if let Some(url) = text.strip_prefix("remote:") {
        Ok(LmSpec::Remote(url.to_string()))
    } else {
        Err(CliError::new(2, format!("bad --lm `{text}` (expected uniform | ngram:PATH | remote:URL)")))
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let loaded = load(&a.env)?;
    let flags = parse_prompt_parts(&a.prompt_parts)?;
    let mode: DecodeMode = a.mode.into();
    let with_grammar = mode != DecodeMode::Unconstrained;

    // ngram models carry their own tokenizer; the others use the
    // grammar+prompt vocabulary
    let (tokenizer, scorer): (Tokenizer, Box<dyn LmScorer>) = match parse_lm_spec(&a.lm)? {
        LmSpec::Uniform => {
            let t = build_tokenizer(&loaded, flags, a.utterance.as_deref(), with_grammar)?;
            let s = UniformScorer { vocab_size: t.vocab_size() };
            (t, Box::new(s))
        }
        LmSpec::Ngram(path) => {
            let file: NgramFile = serde_json::from_str(&fs::read_to_string(&path)?)
                .map_err(|e| CliError::new(8, format!("bad model file: {e}")))?;
            let t = Tokenizer::from_json(&file.tokenizer.to_string())
                .map_err(|e| CliError::new(8, format!("bad model tokenizer: {e}")))?;
            let m = NgramModel::from_json(&file.ngram.to_string())?;
            (t, Box::new(m))
        }
        LmSpec::Remote(url) => {
            let t = build_tokenizer(&loaded, flags, a.utterance.as_deref(), with_grammar)?;
            let s = RemoteScorer::connect(&url, &t.digest())?;
            (t, Box::new(s))
        }
    };

    let cfg = GenerateConfig {
        mode,
        decode: DecodeConfig { beam: a.beam, max_len: a.max_len, ..DecodeConfig::default() },
        prompt_flags: flags,
        utterance: a.utterance.clone(),
        seed: a.seed,
        max_depth: a.env.max_depth,
    };
    let result = generate(&loaded.graph, &loaded.transducer, scorer.as_ref(), &tokenizer, &loaded.env, &cfg)?;

    let mut lines = String::new();
    for (rank, c) in result.candidates.iter().enumerate() {
        let mut row = json!({"rank": rank + 1, "text": c.text, "score": c.score});
        if mode == DecodeMode::Constrained {
            row["grammar_size"] = json!(result.diagnostics.grammar_productions);
        }
        lines.push_str(&serde_json::to_string(&row).expect("row serializes"));
        lines.push('\n');
    }
    emit(a.out.as_deref(), &lines)
}

fn cmd_vocab(a: VocabArgs) -> Result<(), CliError> {
    let loaded = load(&a.env)?;
    let flags = parse_prompt_parts(&a.prompt_parts)?;
    let tokenizer = build_tokenizer(&loaded, flags, a.utterance.as_deref(), true)?;
    emit(a.out.as_deref(), &format!("{}\n", tokenizer.to_json()))
}

fn cmd_train_lm(a: TrainLmArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.corpus)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let tokenizer = Tokenizer::from_words(lines.iter().flat_map(|l| l.split_whitespace()));
    let corpus: Vec<Vec<u32>> = lines
        .iter()
        .map(|l| tokenizer.encode_text(l))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::new(8, e.to_string()))?;
    let model = NgramModel::train(&corpus, a.order, a.k, tokenizer.vocab_size())?;
    let file = NgramFile {
        tokenizer: serde_json::from_str(&tokenizer.to_json()).expect("tokenizer json"),
        ngram: serde_json::from_str(&model.to_json()).expect("model json"),
    };
    emit(
        a.out.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&file).expect("file serializes")),
    )
}

#[derive(Deserialize)]
struct DatasetLine {
    id: String,
    gold: String,
}

#[derive(Deserialize)]
struct PredictionLine {
    id: String,
    candidates: Vec<(String, f64)>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let parse_jsonl = |path: &Path, what: &str| -> Result<Vec<serde_json::Value>, CliError> {
        fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| CliError::new(9, format!("bad {what} line: {e}")))
            })
            .collect()
    };
    let dataset: Vec<DatasetLine> = parse_jsonl(&a.dataset, "dataset")?
        .into_iter()
        .map(|v| serde_json::from_value(v).map_err(|e| CliError::new(9, format!("bad dataset line: {e}"))))
        .collect::<Result<_, _>>()?;
    let predictions: Vec<PredictionLine> = parse_jsonl(&a.predictions, "predictions")?
        .into_iter()
        .map(|v| serde_json::from_value(v).map_err(|e| CliError::new(9, format!("bad prediction line: {e}"))))
        .collect::<Result<_, _>>()?;
    if dataset.len() != predictions.len() {
        return Err(CliError::new(
            9,
            format!("alignment error: {} dataset lines vs {} prediction lines", dataset.len(), predictions.len()),
        ));
    }
    let examples: Vec<ScoredExample> = dataset
        .iter()
        .zip(&predictions)
        .map(|(d, p)| {
            if d.id != p.id {
                return Err(CliError::new(
                    9,
                    format!("alignment error: dataset id `{}` vs prediction id `{}`", d.id, p.id),
                ));
            }
            Ok(ScoredExample { gold: d.gold.clone(), candidates: p.candidates.clone() })
        })
        .collect::<Result<_, _>>()?;
    let report = evaluate(&examples).map_err(|e| CliError::new(9, e.to_string()))?;
    emit(
        a.out.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")),
    )
}

fn cmd_run_experiment(a: RunExperimentArgs) -> Result<(), CliError> {
    let ds = generate_dataset(a.dataset_seed, a.train, a.val);
    let cfg = ExperimentConfig {
        mode: a.mode.into(),
        prompt_flags: parse_prompt_parts(&a.prompt_parts)?,
        beam: a.beam,
        seed: a.seed,
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&ds, &cfg).map_err(|e| CliError::new(7, e.to_string()))?;
    emit(
        a.out.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")),
    )
}

fn cmd_gen_dataset(a: GenDatasetArgs) -> Result<(), CliError> {
    let ds = generate_dataset(a.seed, a.train, a.val);
    fs::create_dir_all(a.out_dir.join("graphs"))?;
    fs::create_dir_all(a.out_dir.join("calendars"))?;
    let write_split = |name: &str, examples: &[SyntheticExample], ds: &SyntheticDataset| -> Result<(), CliError> {
        let mut lines = String::new();
        for ex in examples {
            let graph_rel = format!("graphs/{}.graph", ex.id);
            let calendar_rel = format!("calendars/{}.json", ex.id);
            fs::write(a.out_dir.join(&graph_rel), format!("{}\n", ex.graph))?;
            fs::write(
                a.out_dir.join(&calendar_rel),
                format!("{}\n", serde_json::to_string_pretty(&ex.calendar.events).expect("events serialize")),
            )?;
            let row = json!({
                "id": ex.id,
                "graph": graph_rel,
                "utterance": ex.utterance,
                "gold": ex.gold,
                "calendar": calendar_rel,
                "now": ds.now.format("%Y-%m-%dT%H:%M").to_string(),
            });
            lines.push_str(&serde_json::to_string(&row).expect("row serializes"));
            lines.push('\n');
        }
        fs::write(a.out_dir.join(format!("{name}.jsonl")), lines)?;
        Ok(())
    };
    write_split("train", &ds.train, &ds)?;
    write_split("val", &ds.val, &ds)?;
    Ok(())
}

fn cmd_serve_mock_lm(a: ServeMockLmArgs) -> Result<(), CliError> {
    let tokenizer = Tokenizer::from_json(&fs::read_to_string(&a.vocab)?)
        .map_err(|e| CliError::new(8, format!("bad tokenizer file: {e}")))?;
    let listener = TcpListener::bind(("127.0.0.1", a.port))?;
    listener.set_nonblocking(true)?;
    eprintln!("serving mock LM on http://{}", listener.local_addr()?);
    serve_loop(
        listener,
        tokenizer.digest(),
        tokenizer.vocab_size(),
        MockBehavior::Uniform,
        Arc::new(AtomicBool::new(false)),
    );
    Ok(())
}
