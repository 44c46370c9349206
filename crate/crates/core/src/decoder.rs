//! The three generation modes: grammar-constrained beam search, plain
//! (unconstrained) beam search, and random sampling from the grammar.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::earley::{DecoderState, EarleyError};
use crate::graph::{DataflowGraph, GraphError};
use crate::lm::{build_prompt, LmError, LmScorer, PromptFlags, ScoreMask};
use crate::qcfg::{Qcfg, QcfgError, TokenGrammar};
use crate::registry::ExecEnv;
use crate::tokenizer::{TokenId, TokenizeError, Tokenizer};
use crate::transducer::{TransduceError, TransduceOptions, Transducer};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("no hypothesis finished within the length limit")]
    NoCompletion,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Earley(#[from] EarleyError),
    #[error(transparent)]
    Transduce(#[from] TransduceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Grammar(#[from] QcfgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Constrained,
    Unconstrained,
    Sample,
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    /// Beam size K; in sample mode, the number of samples drawn.
    pub beam: usize,
    pub max_len: usize,
    /// Score = Σ logprobs / length^length_norm; 0 keeps pure log-probability.
    pub length_norm: f64,
    /// Renormalize the scorer's distribution over the allowed set.
    pub renormalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 5, max_len: 48, length_norm: 0.0, renormalize: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub steps: usize,
    pub pruned: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grammar_productions: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeResult {
    pub mode: DecodeMode,
    /// Ranked best-first; scores non-increasing.
    pub candidates: Vec<Candidate>,
    pub diagnostics: Diagnostics,
}

struct Hypothesis {
    tokens: Vec<TokenId>,
    logprob: f64,
    /// Present in constrained mode only.
    state: Option<DecoderState>,
}

impl Hypothesis {
    fn normalized(&self, length_norm: f64) -> f64 {
        if length_norm == 0.0 || self.tokens.is_empty() {
            self.logprob
        } else {
            self.logprob / (self.tokens.len() as f64).powf(length_norm)
        }
    }
}

/// Order hypotheses best-first: higher normalized score wins, ties broken
/// lexicographically by detokenized string for determinism.
fn rank(hyps: &mut Vec<Hypothesis>, length_norm: f64, tokenizer: &Tokenizer) {
    hyps.sort_by(|a, b| {
        b.normalized(length_norm)
            .total_cmp(&a.normalized(length_norm))
            .then_with(|| {
                let ta = tokenizer.decode(&a.tokens).unwrap_or_default();
                let tb = tokenizer.decode(&b.tokens).unwrap_or_default();
                ta.cmp(&tb)
            })
    });
}

fn truncate_ranked(
    hyps: &mut Vec<Hypothesis>,
    keep: usize,
    length_norm: f64,
    tokenizer: &Tokenizer,
    pruned: &mut usize,
) {
    rank(hyps, length_norm, tokenizer);
    if hyps.len() > keep {
        *pruned += hyps.len() - keep;
        hyps.truncate(keep);
    }
}

/// Beam search over the intersection of the grammar and the LM. At every
/// step each hypothesis may only extend with tokens its Earley state allows,
/// and EOS competes only when the state accepts, so every returned string is
/// derivable from the grammar by construction.
pub fn constrained_beam_search(
    grammar: &Arc<TokenGrammar>,
    scorer: &dyn LmScorer,
    tokenizer: &Tokenizer,
    prompt_tokens: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    assert!(cfg.beam >= 1, "beam size must be >= 1");
    let init = DecoderState::init(Arc::clone(grammar))?;
    let mut live = vec![Hypothesis { tokens: Vec::new(), logprob: 0.0, state: Some(init) }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut diag = Diagnostics {
        grammar_productions: Some(grammar.productions().len()),
        ..Diagnostics::default()
    };

    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        diag.steps += 1;
        let mut next: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let state = hyp.state.as_ref().expect("constrained hypothesis has a state");
            let allowed = state.allowed_next().clone();
            let mask = ScoreMask { tokens: allowed.tokens.clone(), eos: allowed.eos };
            let mut context = Vec::with_capacity(prompt_tokens.len() + hyp.tokens.len());
            context.extend_from_slice(prompt_tokens);
            context.extend_from_slice(&hyp.tokens);
            let lp = scorer.next_logprobs(&context, Some(&mask), cfg.renormalize)?;
            for &t in &allowed.tokens {
                let inc = lp.tokens[t as usize];
                if inc == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(t);
                next.push(Hypothesis {
                    tokens,
                    logprob: hyp.logprob + inc,
                    state: Some(state.advance(t)?),
                });
            }
            if allowed.eos && lp.eos > f64::NEG_INFINITY {
                finished.push(Hypothesis {
                    tokens: hyp.tokens.clone(),
                    logprob: hyp.logprob + lp.eos,
                    state: None,
                });
            }
        }
        // Finished hypotheses are held aside and compete at the end; only the
        // top K can ever be returned, so cap the pool.
        truncate_ranked(&mut finished, cfg.beam, cfg.length_norm, tokenizer, &mut diag.pruned);
        truncate_ranked(&mut next, cfg.beam, cfg.length_norm, tokenizer, &mut diag.pruned);
        live = next;
    }

    if finished.is_empty() {
        return Err(DecodeError::NoCompletion);
    }
    rank(&mut finished, cfg.length_norm, tokenizer);
    finished.truncate(cfg.beam);
    let candidates = finished
        .iter()
        .map(|h| {
            Ok(Candidate {
                text: tokenizer.decode(&h.tokens)?,
                score: h.normalized(cfg.length_norm),
            })
        })
        .collect::<Result<_, TokenizeError>>()?;
    Ok(DecodeResult { mode: DecodeMode::Constrained, candidates, diagnostics: diag })
}

/// Standard beam search over the full vocabulary plus EOS. No grammar is
/// involved; hypotheses still alive at the length limit finish as-is.
pub fn unconstrained_beam_search(
    scorer: &dyn LmScorer,
    tokenizer: &Tokenizer,
    prompt_tokens: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    assert!(cfg.beam >= 1, "beam size must be >= 1");
    let mut live = vec![Hypothesis { tokens: Vec::new(), logprob: 0.0, state: None }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut diag = Diagnostics::default();

    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        diag.steps += 1;
        let mut next: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let mut context = Vec::with_capacity(prompt_tokens.len() + hyp.tokens.len());
            context.extend_from_slice(prompt_tokens);
            context.extend_from_slice(&hyp.tokens);
            let lp = scorer.next_logprobs(&context, None, false)?;
            for (t, &inc) in lp.tokens.iter().enumerate() {
                if inc == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(t as TokenId);
                next.push(Hypothesis { tokens, logprob: hyp.logprob + inc, state: None });
            }
            if lp.eos > f64::NEG_INFINITY {
                finished.push(Hypothesis {
                    tokens: hyp.tokens.clone(),
                    logprob: hyp.logprob + lp.eos,
                    state: None,
                });
            }
        }
        truncate_ranked(&mut finished, cfg.beam, cfg.length_norm, tokenizer, &mut diag.pruned);
        truncate_ranked(&mut next, cfg.beam, cfg.length_norm, tokenizer, &mut diag.pruned);
        live = next;
    }

    // truncation finishes whatever is still alive
    finished.append(&mut live);
    rank(&mut finished, cfg.length_norm, tokenizer);
    finished.truncate(cfg.beam);
    let candidates = finished
        .iter()
        .map(|h| {
            Ok(Candidate {
                text: tokenizer.decode(&h.tokens)?,
                score: h.normalized(cfg.length_norm),
            })
        })
        .collect::<Result<_, TokenizeError>>()?;
    Ok(DecodeResult { mode: DecodeMode::Unconstrained, candidates, diagnostics: diag })
}

/// Draw `cfg.beam` random derivations from the grammar. Scores are all zero:
/// sampling ranks nothing.
pub fn sample_from_grammar(
    grammar: &Qcfg,
    seed: u64,
    max_depth: usize,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    let mut candidates = Vec::with_capacity(cfg.beam);
    for i in 0..cfg.beam {
        let text = grammar.sample(seed.wrapping_add(i as u64), max_depth)?;
        candidates.push(Candidate { text, score: 0.0 });
    }
    Ok(DecodeResult {
        mode: DecodeMode::Sample,
        candidates,
        diagnostics: Diagnostics {
            steps: cfg.beam,
            pruned: 0,
            grammar_productions: Some(grammar.productions.len()),
        },
    })
}

/// End-to-end generation settings beyond the per-step decode knobs.
#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub mode: DecodeMode,
    pub decode: DecodeConfig,
    pub prompt_flags: PromptFlags,
    pub utterance: Option<String>,
    /// Sampling seed (sample mode).
    pub seed: u64,
    pub max_depth: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            mode: DecodeMode::Constrained,
            decode: DecodeConfig::default(),
            prompt_flags: PromptFlags::default(),
            utterance: None,
            seed: 0,
            max_depth: 64,
        }
    }
}

/// Execute → transduce → compile → decode (or sample), per the selected
/// mode. Unconstrained mode ignores the rules entirely; sample mode ignores
/// the scorer.
pub fn generate(
    graph: &DataflowGraph,
    transducer: &Transducer,
    scorer: &dyn LmScorer,
    tokenizer: &Tokenizer,
    env: &ExecEnv,
    cfg: &GenerateConfig,
) -> Result<DecodeResult, DecodeError> {
    let mut graph = graph.clone();
    if !graph.is_executed() {
        graph.execute(&transducer.registry, env)?;
    }
    let prompt_tokens = |t: &Tokenizer| -> Result<Vec<TokenId>, DecodeError> {
        let prompt = build_prompt(&graph, cfg.prompt_flags, cfg.utterance.as_deref())?;
        Ok(t.encode_text(&prompt.rendered)?)
    };

    match cfg.mode {
        DecodeMode::Unconstrained => {
            unconstrained_beam_search(scorer, tokenizer, &prompt_tokens(tokenizer)?, &cfg.decode)
        }
        DecodeMode::Sample => {
            let opts = TransduceOptions { max_depth: cfg.max_depth };
            let (_, grammar) = transducer.transduce(&graph, env, opts)?;
            sample_from_grammar(&grammar, cfg.seed, cfg.max_depth, &cfg.decode)
        }
        DecodeMode::Constrained => {
            let opts = TransduceOptions { max_depth: cfg.max_depth };
            let (_, grammar) = transducer.transduce(&graph, env, opts)?;
            let token_grammar = Arc::new(grammar.compile_tokens(tokenizer)?);
            constrained_beam_search(
                &token_grammar,
                scorer,
                tokenizer,
                &prompt_tokens(tokenizer)?,
                &cfg.decode,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LogProbs, NgramModel, UniformScorer};
    use crate::qcfg::{QcfgNonterminal, QcfgProduction, Symbol};
    use crate::registry::{Calendar, CalendarEvent, FunctionRegistry};
    use crate::rules::parse_rules;
    use chrono::{NaiveDate, NaiveDateTime};

    fn tiny_qcfg(rhss: &[&[&str]]) -> Qcfg {
        let s = QcfgNonterminal { ty: "S".into(), node: "v0".into() };
        Qcfg {
            start: s.clone(),
            productions: rhss
                .iter()
                .map(|rhs| QcfgProduction {
                    lhs: s.clone(),
                    rhs: rhs.iter().map(|w| Symbol::t(w)).collect(),
                })
                .collect(),
        }
    }

    struct Scripted {
        vocab_size: usize,
        f: Box<dyn Fn(&[TokenId]) -> LogProbs + Send + Sync>,
    }

    impl LmScorer for Scripted {
        fn vocab_size(&self) -> usize {
            self.vocab_size
        }
        fn raw_logprobs(&self, context: &[TokenId]) -> Result<LogProbs, LmError> {
            Ok((self.f)(context))
        }
    }

    #[test]
    fn forced_argmax_picks_preferred_terminal() {
        let g = tiny_qcfg(&[&["a"], &["b"]]);
        let tok = Tokenizer::from_words(["a", "b"]);
        let b_id = tok.id_of("b").unwrap() as usize;
        let scripted = Scripted {
            vocab_size: 2,
            f: Box::new(move |_| {
                let mut tokens = vec![(0.05f64).ln(); 2];
                tokens[b_id] = (0.9f64).ln();
                LogProbs { tokens, eos: (0.05f64).ln() }
            }),
        };
        let tg = Arc::new(g.compile_tokens(&tok).unwrap());
        let r =
            constrained_beam_search(&tg, &scripted, &tok, &[], &DecodeConfig::default()).unwrap();
        assert_eq!(r.candidates[0].text, "b");
        assert_eq!(r.candidates.len(), 2);
        assert!(r.candidates[0].score >= r.candidates[1].score);
    }

    #[test]
    fn renormalized_uniform_ties_break_lexicographically() {
        // "a" and "a b" both have probability 1/2 under renormalized uniform
        let g = tiny_qcfg(&[&["a"], &["a", "b"]]);
        let tok = Tokenizer::from_words(["a", "b"]);
        let tg = Arc::new(g.compile_tokens(&tok).unwrap());
        let scorer = UniformScorer { vocab_size: tok.vocab_size() };
        let r = constrained_beam_search(&tg, &scorer, &tok, &[], &DecodeConfig::default()).unwrap();
        let texts: Vec<&str> = r.candidates.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["a", "a b"]);
        assert!((r.candidates[0].score - r.candidates[1].score).abs() < 1e-9);
    }

    #[test]
    fn no_completion_when_max_len_too_short() {
        let g = tiny_qcfg(&[&["a", "b", "c"]]);
        let tok = Tokenizer::from_words(["a", "b", "c"]);
        let tg = Arc::new(g.compile_tokens(&tok).unwrap());
        let scorer = UniformScorer { vocab_size: tok.vocab_size() };
        let cfg = DecodeConfig { max_len: 2, ..DecodeConfig::default() };
        assert!(matches!(
            constrained_beam_search(&tg, &scorer, &tok, &[], &cfg),
            Err(DecodeError::NoCompletion)
        ));
    }

    #[test]
    fn unconstrained_greedy_follows_scripted_chain() {
        // script: emit tokens 2, 0, 1 then EOS, regardless of prompt
        let tok = Tokenizer::from_words(["x", "y", "z"]);
        let scripted = Scripted {
            vocab_size: 3,
            f: Box::new(|ctx| {
                let plan = [2u32, 0, 1];
                let step = ctx.len();
                let mut tokens = vec![(0.01f64).ln(); 3];
                let mut eos = (0.01f64).ln();
                if step < plan.len() {
                    tokens[plan[step] as usize] = (0.97f64).ln();
                } else {
                    eos = (0.97f64).ln();
                }
                LogProbs { tokens, eos }
            }),
        };
        let cfg = DecodeConfig { beam: 1, ..DecodeConfig::default() };
        let r = unconstrained_beam_search(&scripted, &tok, &[], &cfg).unwrap();
        assert_eq!(r.candidates[0].text, "z x y");
    }

    #[test]
    fn beam_one_equals_greedy_argmax_chain() {
        let tok = Tokenizer::from_words(["p", "q"]);
        // always prefer q, then EOS after two tokens
        let scripted = Scripted {
            vocab_size: 2,
            f: Box::new(|ctx| {
                let mut tokens = vec![(0.1f64).ln(); 2];
                let mut eos = (0.1f64).ln();
                if ctx.len() < 2 {
                    tokens[1] = (0.8f64).ln();
                } else {
                    eos = (0.8f64).ln();
                }
                LogProbs { tokens, eos }
            }),
        };
        let cfg = DecodeConfig { beam: 1, ..DecodeConfig::default() };
        let r = unconstrained_beam_search(&scripted, &tok, &[], &cfg).unwrap();
        assert_eq!(r.candidates[0].text, "q q");
    }

    fn fig2_setup() -> (DataflowGraph, Transducer, ExecEnv) {
        let reg = FunctionRegistry::calendar_domain();
        let now = NaiveDateTime::parse_from_str("2022-03-14T09:00", "%Y-%m-%dT%H:%M").unwrap();
        let calendar = Calendar {
            events: vec![CalendarEvent {
            id: "e1".into(),
            subject: "kickoff".into(),
            start: NaiveDate::from_ymd_opt(2022, 3, 15).unwrap().and_hms_opt(10, 0, 0).unwrap(),
            end: NaiveDate::from_ymd_opt(2022, 3, 15).unwrap().and_hms_opt(11, 0, 0).unwrap(),
                attendees: vec!["adam".into()],
            }],
        };
        let env = ExecEnv { now, calendar };
        let src = r#"
start S
nonterminals S PP EVENT LEX

rule S on nonEmpty(list) where nonEmpty(list) == true
  let n = size(list)
  let e = first(list)
  let d = eventDate(e)
  say "Yes , I found {LEX <n>} event {PP <d>} . {EVENT <e>} ."

rule S on nonEmpty(list) where nonEmpty(list) == false
  say "No , I did not find anything ."

rule PP on _
  say "{LEX <self>}"

rule EVENT on e
  let span = eventTimeSpan(e)
  say "It 's {LEX <span>}"
"#;
        let pack = parse_rules(src, Some(&reg)).unwrap();
        let td = Transducer::new(pack, reg.clone());
        let g =
            DataflowGraph::parse("(nonEmpty (findEventsOnDate (tomorrow)))", Some(&reg)).unwrap();
        (g, td, env)
    }

    fn vocab_for(grammar_sigma: impl IntoIterator<Item = String>, prompt: &str) -> Tokenizer {
        let mut words: Vec<String> = grammar_sigma.into_iter().collect();
        words.extend(prompt.split_whitespace().map(String::from));
        Tokenizer::from_words(words)
    }

    #[test]
    fn generate_constrained_outputs_are_grammar_members() {
        let (g, td, env) = fig2_setup();
        let mut executed = g.clone();
        executed.execute(&td.registry, &env).unwrap();
        let (_, grammar) = td.transduce(&executed, &env, TransduceOptions::default()).unwrap();
        let prompt = build_prompt(&executed, PromptFlags::default(), None).unwrap();
        let tok = vocab_for(grammar.sigma(), &prompt.rendered);
        let scorer = UniformScorer { vocab_size: tok.vocab_size() };
        let cfg = GenerateConfig::default();
        let r = generate(&g, &td, &scorer, &tok, &env, &cfg).unwrap();
        assert!(!r.candidates.is_empty());
        for c in &r.candidates {
            assert!(grammar.contains_str(&c.text).is_some(), "not in grammar: {}", c.text);
        }
    }

    #[test]
    fn generate_constrained_with_ngram_prefers_trained_response() {
        let (g, td, env) = fig2_setup();
        let mut executed = g.clone();
        executed.execute(&td.registry, &env).unwrap();
        let (_, grammar) = td.transduce(&executed, &env, TransduceOptions::default()).unwrap();
        let prompt = build_prompt(&executed, PromptFlags::default(), None).unwrap();
        let gold = "Yes , I found one event tomorrow . It 's 10 - 11 am .";
        let tok = vocab_for(grammar.sigma(), &format!("{} {}", prompt.rendered, gold));
        let mut seq = tok.encode_text(&prompt.rendered).unwrap();
        seq.extend(tok.encode_text(gold).unwrap());
        let lm = NgramModel::train(&[seq], 3, 0.1, tok.vocab_size()).unwrap();
        let r = generate(&g, &td, &lm, &tok, &env, &GenerateConfig::default()).unwrap();
        assert_eq!(r.candidates[0].text, gold);
    }

    #[test]
    fn sample_mode_is_seed_deterministic_and_ignores_scorer() {
        let (g, td, env) = fig2_setup();
        let tok = Tokenizer::from_words(["unused"]);
        let scorer = UniformScorer { vocab_size: 1 };
        let cfg = GenerateConfig {
            mode: DecodeMode::Sample,
            prompt_flags: PromptFlags {
                include_utterance: false,
                include_computation: false,
                include_result: false,
            },
            seed: 7,
            ..GenerateConfig::default()
        };
        let a = generate(&g, &td, &scorer, &tok, &env, &cfg).unwrap();
        let b = generate(&g, &td, &scorer, &tok, &env, &cfg).unwrap();
        let ta: Vec<&str> = a.candidates.iter().map(|c| c.text.as_str()).collect();
        let tb: Vec<&str> = b.candidates.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 5);
    }

    #[test]
    fn unconstrained_mode_ignores_rules() {
        let (g, td, env) = fig2_setup();
        let mut executed = g.clone();
        executed.execute(&td.registry, &env).unwrap();
        let prompt = build_prompt(&executed, PromptFlags::default(), None).unwrap();
        let tok = vocab_for(["hello".to_string()], &prompt.rendered);
        let scorer = UniformScorer { vocab_size: tok.vocab_size() };
        let cfg = GenerateConfig {
            mode: DecodeMode::Unconstrained,
            decode: DecodeConfig { beam: 2, max_len: 3, ..DecodeConfig::default() },
            ..GenerateConfig::default()
        };
        let r = generate(&g, &td, &scorer, &tok, &env, &cfg).unwrap();
        assert_eq!(r.mode, DecodeMode::Unconstrained);
        assert!(!r.candidates.is_empty());
    }
}
