//! Deterministic synthetic calendar dataset and the experiment harness that
//! runs a generation mode over it and reports metrics.
//!
//! The validation split uses meeting times drawn from an hour pool that is
//! disjoint from the training pool, so a plain n-gram LM cannot have
//! memorized the correct time words and must either read them from the
//! prompt (it cannot, beyond its order) or be forced to them by the grammar.

use chrono::{Datelike, Days, NaiveDateTime};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{generate, DecodeConfig, DecodeError, DecodeMode, GenerateConfig};
use crate::eval::{evaluate, EvalError, MetricReport, ScoredExample};
use crate::graph::DataflowGraph;
use crate::lm::{build_prompt, NgramModel, PromptFlags};
use crate::registry::{time_span_words, month_name, Calendar, CalendarEvent, ExecEnv, FunctionRegistry};
use crate::rules::parse_rules;
use crate::tokenizer::Tokenizer;
use crate::transducer::{TransduceOptions, Transducer};

/// Rule pack used by the synthetic dataset and the worked examples.
pub const CALENDAR_RULES: &str = include_str!("../fixtures/calendar.rules");

/// The running example computation: "do I have anything tomorrow?".
pub const FIG2_GRAPH: &str = include_str!("../fixtures/fig2.graph");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub id: String,
    /// S-expression source of the computation.
    pub graph: String,
    pub utterance: String,
    pub gold: String,
    pub calendar: Calendar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub now: NaiveDateTime,
    pub train: Vec<SyntheticExample>,
    pub val: Vec<SyntheticExample>,
}

impl SyntheticDataset {
    pub fn env_for(&self, ex: &SyntheticExample) -> ExecEnv {
        ExecEnv { now: self.now, calendar: ex.calendar.clone() }
    }
}

const SUBJECTS: [&str; 4] = ["standup", "review", "planning", "sync"];
const ATTENDEES: [&str; 3] = ["Adam", "Beth", "Carol"];
/// Meeting start hours, partitioned by split (see module docs).
const TRAIN_HOURS: [u32; 5] = [8, 9, 10, 13, 14];
const VAL_HOURS: [u32; 3] = [11, 15, 16];

/// Deterministic dataset: `seed` fixes every random choice; equal arguments
/// always produce byte-identical datasets.
pub fn generate_dataset(seed: u64, n_train: usize, n_val: usize) -> SyntheticDataset {
    let now = NaiveDateTime::parse_from_str("2022-03-14T09:00", "%Y-%m-%dT%H:%M")
        .expect("fixed reference timestamp parses");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |split: &str, count: usize, hours: &[u32]| -> Vec<SyntheticExample> {
        (0..count)
            .map(|i| {
                let offset = rng.gen_range(0..=6u64);
                // class mix: one event is the majority class, so an n-gram
                // LM with the execution result ablated falls back to the
                // one-event response and pays for it on the other classes
                let n_events = match rng.gen_range(0..10u32) {
                    0..=2 => 0usize,
                    3..=7 => 1,
                    _ => 2,
                };
                let date = now.date() + Days::new(offset);
                let pp_relative = match offset {
                    0 => "today".to_string(),
                    1 => "tomorrow".to_string(),
                    _ => format!("on {} {}", month_name(date.month()), date.day()),
                };
                let graph = match offset {
                    0 => "(size (findEventsOnDate (today)))".to_string(),
                    1 => "(size (findEventsOnDate (tomorrow)))".to_string(),
                    k => format!("(size (findEventsOnDate (addDays (today) (Integer {k}))))"),
                };
                let mut event_hours: Vec<u32> = hours.to_vec();
                event_hours.shuffle(&mut rng);
                event_hours.truncate(n_events);
                event_hours.sort_unstable();
                let events: Vec<CalendarEvent> = event_hours
                    .iter()
                    .enumerate()
                    .map(|(j, &hour)| CalendarEvent {
                        id: format!("{split}-{i}-{j}"),
                        subject: SUBJECTS.choose(&mut rng).unwrap().to_string(),
                        start: date.and_hms_opt(hour, 0, 0).unwrap(),
                        end: date.and_hms_opt(hour + 1, 0, 0).unwrap(),
                        attendees: vec![ATTENDEES.choose(&mut rng).unwrap().to_string()],
                    })
                    .collect();
                let span_of = |e: &CalendarEvent| time_span_words(e.start.time(), e.end.time());
                let gold = match events.len() {
                    0 => "Your calendar is clear .".to_string(),
                    1 => "One event is on your calendar .".to_string(),
                    _ => format!(
                        "Two events are scheduled . The first runs from {} and the second runs from {} .",
                        span_of(&events[0]),
                        span_of(&events[1]),
                    ),
                };
                SyntheticExample {
                    id: format!("{split}-{i:03}"),
                    graph,
                    utterance: format!("how many events do I have {pp_relative} ?"),
                    gold,
                    calendar: Calendar { events },
                }
            })
            .collect()
    };
    let train = make("train", n_train, &TRAIN_HOURS);
    let val = make("val", n_val, &VAL_HOURS);
    SyntheticDataset { now, train, val }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("fixture error: {0}")]
    Fixture(String),
}

use thiserror::Error;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: DecodeMode,
    pub prompt_flags: PromptFlags,
    pub beam: usize,
    pub ngram_order: usize,
    pub ngram_k: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: DecodeMode::Constrained,
            prompt_flags: PromptFlags::default(),
            beam: 5,
            ngram_order: 4,
            ngram_k: 0.1,
            seed: 0,
        }
    }
}

/// Train an n-gram LM on the train split (prompt + gold), decode every
/// validation example in the configured mode, and score the results.
pub fn run_experiment(
    ds: &SyntheticDataset,
    cfg: &ExperimentConfig,
) -> Result<MetricReport, ExperimentError> {
    let registry = FunctionRegistry::calendar_domain();
    let pack = parse_rules(CALENDAR_RULES, Some(&registry))
        .map_err(|e| ExperimentError::Fixture(e.to_string()))?;
    let transducer = Transducer::new(pack, registry.clone());

    // Execute every graph once; collect prompt/gold words and grammar
    // terminals into one shared vocabulary.
    let mut words: Vec<String> = Vec::new();
    let mut prepared: Vec<(&SyntheticExample, DataflowGraph, ExecEnv, String)> = Vec::new();
    for ex in ds.train.iter().chain(&ds.val) {
        let env = ds.env_for(ex);
        let mut graph = DataflowGraph::parse(&ex.graph, Some(&registry))
            .map_err(|e| ExperimentError::Fixture(format!("{}: {e}", ex.id)))?;
        graph
            .execute(&registry, &env)
            .map_err(|e| ExperimentError::Fixture(format!("{}: {e}", ex.id)))?;
        let prompt = build_prompt(&graph, cfg.prompt_flags, Some(&ex.utterance))
            .map_err(DecodeError::from)?;
        let (_, grammar) = transducer
            .transduce(&graph, &env, TransduceOptions::default())
            .map_err(DecodeError::from)?;
        words.extend(grammar.sigma());
        words.extend(prompt.rendered.split_whitespace().map(String::from));
        words.extend(ex.gold.split_whitespace().map(String::from));
        prepared.push((ex, graph, env, prompt.rendered));
    }
    let tokenizer = Tokenizer::from_words(words);

    let n_train = ds.train.len();
    let corpus: Vec<Vec<crate::tokenizer::TokenId>> = prepared[..n_train]
        .iter()
        .map(|(ex, _, _, prompt)| {
            let mut seq = tokenizer.encode_text(prompt).map_err(DecodeError::from)?;
            seq.extend(tokenizer.encode_text(&ex.gold).map_err(DecodeError::from)?);
            Ok::<_, ExperimentError>(seq)
        })
        .collect::<Result<_, _>>()?;
    let lm = NgramModel::train(&corpus, cfg.ngram_order, cfg.ngram_k, tokenizer.vocab_size())
        .map_err(DecodeError::from)?;

    let mut scored = Vec::with_capacity(ds.val.len());
    for (i, (ex, graph, env, _)) in prepared[n_train..].iter().enumerate() {
        let gen_cfg = GenerateConfig {
            mode: cfg.mode,
            decode: DecodeConfig { beam: cfg.beam, ..DecodeConfig::default() },
            prompt_flags: cfg.prompt_flags,
            utterance: Some(ex.utterance.clone()),
            seed: cfg.seed.wrapping_add(i as u64 * 1000),
            max_depth: 64,
        };
        let result = generate(graph, &transducer, &lm, &tokenizer, env, &gen_cfg)?;
        scored.push(ScoredExample {
            gold: ex.gold.clone(),
            candidates: result.candidates.iter().map(|c| (c.text.clone(), c.score)).collect(),
        });
    }
    Ok(evaluate(&scored)?)
}
