//! Pluggable next-token scoring and prompt construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DataflowGraph, GraphError};
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("context token {0} out of vocabulary")]
    OutOfVocab(TokenId),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("bad model file: {0}")]
    BadModel(String),
    #[error("remote transport: {0}")]
    Transport(String),
    #[error("remote protocol: {0}")]
    Protocol(String),
    #[error("vocabulary digest mismatch: local {local}, remote {remote}")]
    DigestMismatch { local: String, remote: String },
}

/// Log-probabilities for every vocabulary token plus end-of-sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbs {
    pub tokens: Vec<f64>,
    pub eos: f64,
}

/// Allowed-token restriction applied to a distribution.
#[derive(Debug, Clone, Default)]
pub struct ScoreMask {
    pub tokens: BTreeSet<TokenId>,
    pub eos: bool,
}

/// Set masked entries to -inf; optionally renormalize the survivors.
pub fn apply_mask(lp: &mut LogProbs, mask: &ScoreMask, renormalize: bool) {
    for (i, v) in lp.tokens.iter_mut().enumerate() {
        if !mask.tokens.contains(&(i as TokenId)) {
            *v = f64::NEG_INFINITY;
        }
    }
    if !mask.eos {
        lp.eos = f64::NEG_INFINITY;
    }
    if renormalize {
        let log_z = log_sum_exp(lp.tokens.iter().copied().chain([lp.eos]));
        if log_z.is_finite() {
            for v in lp.tokens.iter_mut() {
                *v -= log_z;
            }
            lp.eos -= log_z;
        }
    }
}

fn log_sum_exp(vals: impl IntoIterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = vals.into_iter().filter(|v| v.is_finite()).collect();
    let Some(max) = vals.iter().copied().fold(None::<f64>, |acc, v| {
        Some(acc.map_or(v, |a| a.max(v)))
    }) else {
        return f64::NEG_INFINITY;
    };
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Abstract next-token log-probability provider. Implementations must be
/// safe for concurrent calls.
pub trait LmScorer: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Unmasked distribution; must sum to 1 over tokens + EOS.
    fn raw_logprobs(&self, context: &[TokenId]) -> Result<LogProbs, LmError>;

    fn next_logprobs(
        &self,
        context: &[TokenId],
        mask: Option<&ScoreMask>,
        renormalize: bool,
    ) -> Result<LogProbs, LmError> {
        let mut lp = self.raw_logprobs(context)?;
        if let Some(mask) = mask {
            apply_mask(&mut lp, mask, renormalize);
        }
        Ok(lp)
    }
}

/// Uniform distribution over the vocabulary plus EOS.
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl LmScorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn raw_logprobs(&self, context: &[TokenId]) -> Result<LogProbs, LmError> {
        for &t in context {
            if t as usize >= self.vocab_size {
                return Err(LmError::OutOfVocab(t));
            }
        }
        let lp = -((self.vocab_size as f64 + 1.0).ln());
        Ok(LogProbs { tokens: vec![lp; self.vocab_size], eos: lp })
    }
}

const BOS: TokenId = TokenId::MAX;

/// Add-k smoothed n-gram model over token ids. EOS is modeled as outcome
/// index `vocab_size`; contexts are padded with a BOS sentinel.
#[derive(Debug, Clone)]
pub struct NgramModel {
    pub order: usize,
    pub k: f64,
    pub vocab_size: usize,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    by_outcome: HashMap<u32, u64>,
}

impl NgramModel {
    /// Count n-grams over the corpus with add-k smoothing parameters.
    pub fn train(
        corpus: &[Vec<TokenId>],
        order: usize,
        k: f64,
        vocab_size: usize,
    ) -> Result<Self, LmError> {
        if corpus.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        assert!(order >= 1, "order must be >= 1");
        assert!(k > 0.0, "add-k smoothing requires k > 0");
        let mut model = NgramModel { order, k, vocab_size, counts: HashMap::new() };
        for seq in corpus {
            for &t in seq {
                if t as usize >= vocab_size {
                    return Err(LmError::OutOfVocab(t));
                }
            }
            // outcomes: each token, then EOS
            for i in 0..=seq.len() {
                let ctx = model.context_key(seq, i);
                let outcome = if i == seq.len() { vocab_size as u32 } else { seq[i] };
                let entry = model.counts.entry(ctx).or_default();
                entry.total += 1;
                *entry.by_outcome.entry(outcome).or_insert(0) += 1;
            }
        }
        Ok(model)
    }

    fn context_key(&self, seq: &[TokenId], pos: usize) -> Vec<TokenId> {
        let want = self.order - 1;
        let mut key = Vec::with_capacity(want);
        for back in (1..=want).rev() {
            if pos >= back {
                key.push(seq[pos - back]);
            } else {
                key.push(BOS);
            }
        }
        key
    }

    /// P(outcome | ctx) with add-k smoothing; outcome `vocab_size` is EOS.
    fn prob(&self, ctx: &[TokenId], outcome: u32) -> f64 {
        let outcomes = self.vocab_size as f64 + 1.0;
        let (total, count) = match self.counts.get(ctx) {
            Some(c) => (c.total, c.by_outcome.get(&outcome).copied().unwrap_or(0)),
            None => (0, 0),
        };
        (count as f64 + self.k) / (total as f64 + self.k * outcomes)
    }

    pub fn to_json(&self) -> String {
        let wire = WireModel {
            order: self.order,
            k: self.k,
            vocab_size: self.vocab_size,
            contexts: self
                .counts
                .iter()
                .map(|(ctx, c)| {
                    (
                        ctx.iter()
                            .map(|&t| if t == BOS { -1 } else { t as i64 })
                            .collect::<Vec<_>>()
                            .iter()
                            .map(|v| v.to_string())
                            .collect::<Vec<_>>()
                            .join(","),
                        c.by_outcome
                            .iter()
                            .map(|(&o, &n)| (o, n))
                            .collect::<BTreeMap<u32, u64>>(),
                    )
                })
                .collect::<BTreeMap<String, BTreeMap<u32, u64>>>(),
        };
        serde_json::to_string_pretty(&wire).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let wire: WireModel =
            serde_json::from_str(text).map_err(|e| LmError::BadModel(e.to_string()))?;
        let mut counts = HashMap::new();
        for (ctx_str, by_outcome) in wire.contexts {
            let ctx: Vec<TokenId> = if ctx_str.is_empty() {
                Vec::new()
            } else {
                ctx_str
                    .split(',')
                    .map(|s| {
                        let v: i64 =
                            s.parse().map_err(|_| LmError::BadModel(format!("bad ctx `{s}`")))?;
                        Ok(if v < 0 { BOS } else { v as TokenId })
                    })
                    .collect::<Result<_, LmError>>()?
            };
            let total = by_outcome.values().sum();
            counts.insert(
                ctx,
                ContextCounts { total, by_outcome: by_outcome.into_iter().collect() },
            );
        }
        Ok(NgramModel { order: wire.order, k: wire.k, vocab_size: wire.vocab_size, counts })
    }
}

#[derive(Serialize, Deserialize)]
struct WireModel {
    order: usize,
    k: f64,
    vocab_size: usize,
    /// context key "t1,t2" (BOS as -1) → outcome id → count
    contexts: BTreeMap<String, BTreeMap<u32, u64>>,
}

impl LmScorer for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn raw_logprobs(&self, context: &[TokenId]) -> Result<LogProbs, LmError> {
        for &t in context {
            if t != BOS && t as usize >= self.vocab_size {
                return Err(LmError::OutOfVocab(t));
            }
        }
        let ctx = self.context_key(context, context.len());
        let tokens = (0..self.vocab_size as u32)
            .map(|t| self.prob(&ctx, t).ln())
            .collect();
        let eos = self.prob(&ctx, self.vocab_size as u32).ln();
        Ok(LogProbs { tokens, eos })
    }
}

// ---------------------------------------------------------------------------
// Prompt construction

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFlags {
    pub include_utterance: bool,
    pub include_computation: bool,
    pub include_result: bool,
}

impl Default for PromptFlags {
    fn default() -> Self {
        // computation + result, the main-results setup
        PromptFlags { include_utterance: false, include_computation: true, include_result: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub flags: PromptFlags,
    pub rendered: String,
}

pub const UTTERANCE_SENTINEL: &str = "<utterance>";
pub const COMPUTATION_SENTINEL: &str = "<computation>";
pub const RESULT_SENTINEL: &str = "<result>";
pub const RESPONSE_SENTINEL: &str = "<response>";

/// Deterministic prompt rendering: enabled parts in utterance, computation,
/// result order, each introduced by its sentinel word, ending with the
/// response sentinel.
pub fn build_prompt(
    graph: &DataflowGraph,
    flags: PromptFlags,
    utterance: Option<&str>,
) -> Result<Prompt, GraphError> {
    let mut parts: Vec<String> = Vec::new();
    if flags.include_utterance {
        if let Some(u) = utterance {
            parts.push(format!(
                "{UTTERANCE_SENTINEL} {}",
                u.split_whitespace().collect::<Vec<_>>().join(" ")
            ));
        }
    }
    if flags.include_computation {
        parts.push(format!("{COMPUTATION_SENTINEL} {}", pad_structural(&graph.serialize())));
    }
    if flags.include_result {
        parts.push(format!("{RESULT_SENTINEL} {}", pad_structural(&graph.render_result_json()?)));
    }
    parts.push(RESPONSE_SENTINEL.to_string());
    Ok(Prompt { flags, rendered: parts.join(" ") })
}

/// Space out structural characters so whitespace tokenization yields small
/// reusable tokens instead of one token per whole expression.
fn pad_structural(text: &str) -> String {
    let mut out = String::with_capacity(text.len() * 2);
    for c in text.chars() {
        match c {
            '(' | ')' | '{' | '}' | '[' | ']' | ',' | ':' | '"' => {
                out.push(' ');
                out.push(c);
                out.push(' ');
            }
            c => out.push(c),
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}
