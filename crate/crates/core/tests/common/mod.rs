//! Shared helpers for integration tests: a random finite-grammar generator
//! and enumeration-based oracles that never touch the Earley machinery.
//!
//! Each integration-test binary compiles its own copy of this module, and
//! not every binary uses every helper.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use flowgen::lm::LmScorer;
use flowgen::qcfg::{Qcfg, QcfgNonterminal, QcfgProduction, Symbol};
use flowgen::tokenizer::{TokenId, Tokenizer};

/// Random small grammar with a finite language: nonterminal i may only
/// reference nonterminals j > i, so derivations cannot recurse.
pub fn random_finite_grammar(seed: u64) -> Qcfg {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terminals = ["a", "b", "c", "d", "e", "f"];
    let n_nts = rng.gen_range(2..=4usize);
    let nts: Vec<QcfgNonterminal> = (0..n_nts)
        .map(|i| QcfgNonterminal { ty: format!("N{i}").as_str().into(), node: format!("v{i}").as_str().into() })
        .collect();
    let mut productions = Vec::new();
    for i in 0..n_nts {
        let n_prods = rng.gen_range(1..=3usize);
        for _ in 0..n_prods {
            let len = rng.gen_range(1..=3usize);
            let rhs: Vec<Symbol> = (0..len)
                .map(|_| {
                    // bias toward terminals; nonterminal refs only go forward
                    if i + 1 < n_nts && rng.gen_bool(0.35) {
                        let j = rng.gen_range(i + 1..n_nts);
                        Symbol::Nonterminal(nts[j].clone())
                    } else {
                        Symbol::t(terminals[rng.gen_range(0..terminals.len())])
                    }
                })
                .collect();
            productions.push(QcfgProduction { lhs: nts[i].clone(), rhs });
        }
    }
    Qcfg { start: nts[0].clone(), productions }
}

/// Token-sequence trie over an enumerated language: the independent oracle
/// for prefix-extension sets, membership, and renormalized scoring.
pub struct LanguageTrie {
    children: BTreeMap<Vec<TokenId>, TrieNode>,
}

#[derive(Default)]
struct TrieNode {
    /// Token ids that extend this prefix.
    next: BTreeSet<TokenId>,
    /// Whether this prefix is a complete language string.
    terminal: bool,
}

impl LanguageTrie {
    /// Build from full word strings, encoding each through the tokenizer.
    pub fn build(strings: &[String], tokenizer: &Tokenizer) -> Self {
        let mut children: BTreeMap<Vec<TokenId>, TrieNode> = BTreeMap::new();
        children.entry(Vec::new()).or_default();
        for s in strings {
            let toks = tokenizer.encode_text(s).expect("language covered by tokenizer");
            for i in 0..toks.len() {
                children.entry(toks[..i].to_vec()).or_default().next.insert(toks[i]);
                children.entry(toks[..=i].to_vec()).or_default();
            }
            children.entry(toks.clone()).or_default().terminal = true;
        }
        LanguageTrie { children }
    }

    pub fn allowed(&self, prefix: &[TokenId]) -> (BTreeSet<TokenId>, bool) {
        let node = self.children.get(prefix).expect("known prefix");
        (node.next.clone(), node.terminal)
    }

    /// Score a full token sequence exactly as the constrained decoder does
    /// with renormalization on: each step's raw distribution is restricted
    /// to this trie's allowed set and renormalized.
    pub fn score(
        &self,
        toks: &[TokenId],
        scorer: &dyn LmScorer,
        prompt: &[TokenId],
    ) -> f64 {
        let mut total = 0.0;
        let mut context: Vec<TokenId> = prompt.to_vec();
        for i in 0..=toks.len() {
            let prefix = &toks[..i];
            let (allowed, terminal) = self.allowed(prefix);
            let lp = scorer.raw_logprobs(&context).expect("scorer succeeds");
            let mut mass = 0.0;
            for &t in &allowed {
                mass += lp.tokens[t as usize].exp();
            }
            if terminal {
                mass += lp.eos.exp();
            }
            if i < toks.len() {
                total += lp.tokens[toks[i] as usize].exp().ln() - mass.ln();
                context.push(toks[i]);
            } else {
                assert!(terminal, "scored sequence must be in the language");
                total += lp.eos.exp().ln() - mass.ln();
            }
        }
        total
    }
}

/// Brute-force top-K: score every language string, rank by score descending
/// with lexicographic tie-break on the detokenized text.
pub fn brute_force_top_k(
    strings: &[String],
    tokenizer: &Tokenizer,
    scorer: &dyn LmScorer,
    prompt: &[TokenId],
    k: usize,
) -> Vec<(String, f64)> {
    let trie = LanguageTrie::build(strings, tokenizer);
    let mut scored: Vec<(String, f64)> = strings
        .iter()
        .map(|s| {
            let toks = tokenizer.encode_text(s).expect("covered");
            (s.clone(), trie.score(&toks, scorer, prompt))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}
