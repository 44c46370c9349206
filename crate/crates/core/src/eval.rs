//! Automatic metrics: corpus BLEU-4, ROUGE-L F1, and exact-match recall at
//! K, all over a shared string normalization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("candidates and references differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty corpus")]
    EmptyCorpus,
}

/// Epsilon substituted for zero n-gram precision numerators.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Lowercase, collapse whitespace runs to single spaces, trim.
pub fn normalize(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tokens(s: &str) -> Vec<String> {
    normalize(s).split_whitespace().map(String::from).collect()
}

/// Corpus-level BLEU with n ≤ 4 modified precisions, geometric mean, and
/// brevity penalty. Orders whose candidate n-gram count is zero everywhere
/// (denominator 0) are excluded from the geometric mean; zero numerators are
/// smoothed to [`BLEU_EPSILON`].
pub fn bleu4(candidates: &[String], references: &[String]) -> Result<f64, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (c, r) in candidates.iter().zip(references) {
        let ct = tokens(c);
        let rt = tokens(r);
        cand_len += ct.len() as u64;
        ref_len += rt.len() as u64;
        for n in 1..=4usize {
            let c_counts = ngram_counts(&ct, n);
            let r_counts = ngram_counts(&rt, n);
            for (gram, &cc) in &c_counts {
                total[n - 1] += cc;
                let rc = r_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += cc.min(rc);
            }
        }
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..4 {
        if total[n] == 0 {
            continue;
        }
        orders += 1;
        let p = if matched[n] == 0 {
            BLEU_EPSILON
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let geo = (log_sum / orders as f64).exp();
    let bp = if cand_len >= ref_len || cand_len == 0 {
        if cand_len == 0 {
            0.0
        } else {
            1.0
        }
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * geo)
}

fn ngram_counts(toks: &[String], n: usize) -> std::collections::HashMap<&[String], u64> {
    let mut counts = std::collections::HashMap::new();
    if toks.len() >= n {
        for i in 0..=toks.len() - n {
            *counts.entry(&toks[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// LCS-based ROUGE-L F1 on normalized token sequences.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    if c.is_empty() || r.is_empty() {
        return if c.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// One evaluated example: the gold response plus ranked candidates
/// (best first, scores non-increasing).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredExample {
    pub gold: String,
    /// (text, score) sorted by score descending.
    pub candidates: Vec<(String, f64)>,
}

/// Fraction of examples where a top-k candidate exactly matches the gold
/// response after normalization.
pub fn recall_at_k(examples: &[ScoredExample], k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples
        .iter()
        .filter(|e| {
            let gold = normalize(&e.gold);
            e.candidates.iter().take(k).any(|(c, _)| normalize(c) == gold)
        })
        .count();
    hits as f64 / examples.len() as f64
}

/// Corpus metrics; `bert_score` is reserved and always null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub bert_score: Option<f64>,
    pub smoothing: SmoothingInfo,
    pub examples: Vec<PerExample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothingInfo {
    pub bleu_epsilon: f64,
    pub zero_denominator_orders: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerExample {
    pub gold: String,
    pub top1: String,
    pub rouge_l: f64,
    /// 1-based rank of the first exact match, if any.
    pub match_rank: Option<usize>,
}

/// Score a corpus: BLEU-4 and mean ROUGE-L over top-1 candidates, plus
/// R@1/R@5 over the full candidate lists.
pub fn evaluate(examples: &[ScoredExample]) -> Result<MetricReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let top1: Vec<String> = examples
        .iter()
        .map(|e| e.candidates.first().map(|(t, _)| t.clone()).unwrap_or_default())
        .collect();
    let golds: Vec<String> = examples.iter().map(|e| e.gold.clone()).collect();
    let bleu = bleu4(&top1, &golds)?;
    let per: Vec<PerExample> = examples
        .iter()
        .zip(&top1)
        .map(|(e, t1)| {
            let gold_n = normalize(&e.gold);
            PerExample {
                gold: e.gold.clone(),
                top1: t1.clone(),
                rouge_l: rouge_l(t1, &e.gold),
                match_rank: e
                    .candidates
                    .iter()
                    .position(|(c, _)| normalize(c) == gold_n)
                    .map(|i| i + 1),
            }
        })
        .collect();
    let rouge = per.iter().map(|p| p.rouge_l).sum::<f64>() / per.len() as f64;
    Ok(MetricReport {
        bleu4: bleu,
        rouge_l: rouge,
        r_at_1: recall_at_k(examples, 1),
        r_at_5: recall_at_k(examples, 5),
        bert_score: None,
        smoothing: SmoothingInfo {
            bleu_epsilon: BLEU_EPSILON,
            zero_denominator_orders: "excluded".into(),
        },
        examples: per,
    })
}
