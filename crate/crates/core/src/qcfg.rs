//! Per-input grammars over node-aligned nonterminals: sampling, bounded
//! enumeration, membership testing, and compilation to token-level terminals.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::NodeId;
use crate::rules::NonterminalType;
use crate::tokenizer::{TokenId, TokenizeError, Tokenizer};

/// A grammar nonterminal: a (type, node) pair aligned to the expanded graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QcfgNonterminal {
    pub ty: NonterminalType,
    pub node: NodeId,
}

impl QcfgNonterminal {
    pub fn new(ty: impl Into<String>, node: impl Into<String>) -> Self {
        QcfgNonterminal { ty: NonterminalType(ty.into()), node: NodeId(node.into()) }
    }
}

impl fmt::Display for QcfgNonterminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.ty, self.node)
    }
}

impl std::str::FromStr for QcfgNonterminal {
    type Err = QcfgError;

    fn from_str(s: &str) -> Result<Self, QcfgError> {
        let (ty, node) = s
            .split_once('@')
            .ok_or_else(|| QcfgError::BadNonterminal(s.to_string()))?;
        if ty.is_empty() || node.is_empty() {
            return Err(QcfgError::BadNonterminal(s.to_string()));
        }
        Ok(QcfgNonterminal::new(ty, node))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Symbol {
    Terminal(String),
    Nonterminal(QcfgNonterminal),
}

impl Symbol {
    pub fn t(word: &str) -> Symbol {
        Symbol::Terminal(word.to_string())
    }

    pub fn nt(ty: &str, node: &str) -> Symbol {
        Symbol::Nonterminal(QcfgNonterminal::new(ty, node))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcfgProduction {
    pub lhs: QcfgNonterminal,
    pub rhs: Vec<Symbol>,
}

#[derive(Debug, Error)]
pub enum QcfgError {
    #[error("bad nonterminal `{0}`, expected TYPE@node")]
    BadNonterminal(String),
    #[error("production for `{0}` has an empty right-hand side")]
    EmptyRhs(QcfgNonterminal),
    #[error("nonterminals with no production: {}", format_nts(.0))]
    Unproducible(Vec<QcfgNonterminal>),
    #[error("start nonterminal `{0}` has no production")]
    NoStartProduction(QcfgNonterminal),
    #[error("derivation depth exceeded bound {0}")]
    DepthExceeded(usize),
    #[error("grammar json: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_nts(nts: &[QcfgNonterminal]) -> String {
    nts.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", ")
}

/// A per-input grammar. Immutable after construction; every operation here
/// is read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct Qcfg {
    pub start: QcfgNonterminal,
    pub productions: Vec<QcfgProduction>,
}

impl Qcfg {
    pub fn new(start: QcfgNonterminal, productions: Vec<QcfgProduction>) -> Self {
        Qcfg { start, productions }
    }

    /// Terminal vocabulary Σ, derived from the productions.
    pub fn sigma(&self) -> BTreeSet<String> {
        self.productions
            .iter()
            .flat_map(|p| p.rhs.iter())
            .filter_map(|s| match s {
                Symbol::Terminal(w) => Some(w.clone()),
                _ => None,
            })
            .collect()
    }

    fn prods_by_lhs(&self) -> HashMap<&QcfgNonterminal, Vec<usize>> {
        let mut map: HashMap<&QcfgNonterminal, Vec<usize>> = HashMap::new();
        for (i, p) in self.productions.iter().enumerate() {
            map.entry(&p.lhs).or_default().push(i);
        }
        map
    }

    /// Reject grammars with empty right-hand sides or reachable nonterminals
    /// that have no production.
    pub fn validate(&self) -> Result<(), QcfgError> {
        let index = self.prods_by_lhs();
        if !index.contains_key(&self.start) {
            return Err(QcfgError::NoStartProduction(self.start.clone()));
        }
        let mut missing = BTreeSet::new();
        for p in &self.productions {
            if p.rhs.is_empty() {
                return Err(QcfgError::EmptyRhs(p.lhs.clone()));
            }
            for s in &p.rhs {
                if let Symbol::Nonterminal(nt) = s {
                    if !index.contains_key(nt) {
                        missing.insert(nt.clone());
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(QcfgError::Unproducible(missing.into_iter().collect()));
        }
        Ok(())
    }

    /// Minimum derivation depth per nonterminal (fixpoint); `None` means the
    /// nonterminal cannot derive any finite string.
    fn min_depths(&self) -> HashMap<QcfgNonterminal, usize> {
        let mut depths: HashMap<QcfgNonterminal, usize> = HashMap::new();
        loop {
            let mut changed = false;
            for p in &self.productions {
                let mut worst = 0usize;
                let mut ok = true;
                for s in &p.rhs {
                    if let Symbol::Nonterminal(nt) = s {
                        match depths.get(nt) {
                            Some(&d) => worst = worst.max(d),
                            None => {
                                ok = false;
                                break;
                            }
                        }
                    }
                }
                if ok {
                    let cand = worst + 1;
                    let cur = depths.get(&p.lhs).copied();
                    if cur.map_or(true, |c| cand < c) {
                        depths.insert(p.lhs.clone(), cand);
                        changed = true;
                    }
                }
            }
            if !changed {
                return depths;
            }
        }
    }

    /// Minimum yield length (in words) per nonterminal.
    fn min_lengths(&self) -> HashMap<QcfgNonterminal, usize> {
        let mut lens: HashMap<QcfgNonterminal, usize> = HashMap::new();
        loop {
            let mut changed = false;
            for p in &self.productions {
                let mut total = 0usize;
                let mut ok = true;
                for s in &p.rhs {
                    match s {
                        Symbol::Terminal(_) => total += 1,
                        Symbol::Nonterminal(nt) => match lens.get(nt) {
                            Some(&l) => total += l,
                            None => {
                                ok = false;
                                break;
                            }
                        },
                    }
                }
                if ok {
                    let cur = lens.get(&p.lhs).copied();
                    if cur.map_or(true, |c| total < c) {
                        lens.insert(p.lhs.clone(), total);
                        changed = true;
                    }
                }
            }
            if !changed {
                return lens;
            }
        }
    }

    /// Yield of a random derivation: uniform choice among the (depth-feasible)
    /// productions of each expanded nonterminal, deterministic given the seed.
    pub fn sample(&self, seed: u64, max_depth: usize) -> Result<String, QcfgError> {
        let index = self.prods_by_lhs();
        let depths = self.min_depths();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = Vec::new();
        self.sample_nt(&self.start, max_depth, &index, &depths, &mut rng, &mut words)?;
        Ok(words.join(" "))
    }

    fn sample_nt(
        &self,
        nt: &QcfgNonterminal,
        budget: usize,
        index: &HashMap<&QcfgNonterminal, Vec<usize>>,
        depths: &HashMap<QcfgNonterminal, usize>,
        rng: &mut ChaCha8Rng,
        words: &mut Vec<String>,
    ) -> Result<(), QcfgError> {
        let empty = Vec::new();
        let candidates = index.get(nt).unwrap_or(&empty);
        let feasible: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| {
                self.productions[i].rhs.iter().all(|s| match s {
                    Symbol::Terminal(_) => true,
                    Symbol::Nonterminal(child) => {
                        depths.get(child).map_or(false, |&d| d + 1 <= budget)
                    }
                }) && budget >= 1
            })
            .collect();
        let Some(&choice) = feasible.choose(rng) else {
            return Err(QcfgError::DepthExceeded(budget));
        };
        for s in &self.productions[choice].rhs {
            match s {
                Symbol::Terminal(w) => words.push(w.clone()),
                Symbol::Nonterminal(child) => {
                    self.sample_nt(child, budget - 1, index, depths, rng, words)?
                }
            }
        }
        Ok(())
    }

    /// Distinct strings of the language in length-lexicographic order, up to
    /// `limit`. Exhaustive when the language is finite and fits the limit.
    pub fn enumerate(&self, limit: usize) -> Vec<String> {
        self.enumerate_with_steps(limit, 5_000_000)
    }

    pub fn enumerate_with_steps(&self, limit: usize, max_steps: usize) -> Vec<String> {
        #[derive(PartialEq, Eq)]
        struct Partial {
            min_len: usize,
            words: Vec<String>,
            rest: Vec<Symbol>,
        }
        impl Ord for Partial {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                (self.min_len, &self.words).cmp(&(other.min_len, &other.words))
            }
        }
        impl PartialOrd for Partial {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }

        let index = self.prods_by_lhs();
        let lens = self.min_lengths();
        let min_len_of = |rest: &[Symbol], words: usize| -> Option<usize> {
            let mut total = words;
            for s in rest {
                match s {
                    Symbol::Terminal(_) => total += 1,
                    Symbol::Nonterminal(nt) => total += *lens.get(nt)?,
                }
            }
            Some(total)
        };
        // shift leading terminals out of the sentential form
        let normalize = |mut words: Vec<String>, mut rest: Vec<Symbol>| {
            let mut split = 0;
            for s in rest.iter() {
                match s {
                    Symbol::Terminal(w) => {
                        words.push(w.clone());
                        split += 1;
                    }
                    Symbol::Nonterminal(_) => break,
                }
            }
            rest.drain(..split);
            (words, rest)
        };

        let mut heap: BinaryHeap<Reverse<Partial>> = BinaryHeap::new();
        let init = vec![Symbol::Nonterminal(self.start.clone())];
        if let Some(min_len) = min_len_of(&init, 0) {
            let (words, rest) = normalize(Vec::new(), init);
            heap.push(Reverse(Partial { min_len, words, rest }));
        }

        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut steps = 0usize;
        while let Some(Reverse(p)) = heap.pop() {
            if out.len() >= limit || steps >= max_steps {
                break;
            }
            steps += 1;
            if p.rest.is_empty() {
                let s = p.words.join(" ");
                if seen.insert(s.clone()) {
                    out.push(s);
                }
                continue;
            }
            let Symbol::Nonterminal(nt) = &p.rest[0] else { unreachable!() };
            let empty = Vec::new();
            for &i in index.get(nt).unwrap_or(&empty) {
                let mut rest: Vec<Symbol> = self.productions[i].rhs.clone();
                rest.extend_from_slice(&p.rest[1..]);
                if let Some(min_len) = min_len_of(&rest, p.words.len()) {
                    let (words, rest) = normalize(p.words.clone(), rest);
                    heap.push(Reverse(Partial { min_len, words, rest }));
                }
            }
        }
        out
    }

    /// Word-level membership test; returns a derivation on success.
    pub fn contains(&self, words: &[&str]) -> Option<Derivation> {
        recognize(self, words)
    }

    pub fn contains_str(&self, text: &str) -> Option<Derivation> {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.contains(&words)
    }

    /// Compile word-level terminals down to token-id sequences.
    pub fn compile_tokens(&self, tokenizer: &Tokenizer) -> Result<TokenGrammar, TokenizeError> {
        TokenGrammar::compile(self, tokenizer)
    }

    pub fn to_json(&self) -> String {
        let wire = WireGrammar {
            start: self.start.to_string(),
            productions: self
                .productions
                .iter()
                .map(|p| WireProduction {
                    lhs: p.lhs.to_string(),
                    rhs: p
                        .rhs
                        .iter()
                        .map(|s| match s {
                            Symbol::Terminal(w) => WireSymbol::T { t: w.clone() },
                            Symbol::Nonterminal(nt) => WireSymbol::Nt { nt: nt.to_string() },
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("grammar serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, QcfgError> {
        let wire: WireGrammar = serde_json::from_str(text)?;
        let start: QcfgNonterminal = wire.start.parse()?;
        let mut productions = Vec::with_capacity(wire.productions.len());
        for p in wire.productions {
            let lhs: QcfgNonterminal = p.lhs.parse()?;
            let mut rhs = Vec::with_capacity(p.rhs.len());
            for s in p.rhs {
                rhs.push(match s {
                    WireSymbol::T { t } => Symbol::Terminal(t),
                    WireSymbol::Nt { nt } => Symbol::Nonterminal(nt.parse()?),
                });
            }
            productions.push(QcfgProduction { lhs, rhs });
        }
        Ok(Qcfg { start, productions })
    }
}

#[derive(Serialize, Deserialize)]
struct WireGrammar {
    start: String,
    productions: Vec<WireProduction>,
}

#[derive(Serialize, Deserialize)]
struct WireProduction {
    lhs: String,
    rhs: Vec<WireSymbol>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WireSymbol {
    T { t: String },
    Nt { nt: String },
}

// ---------------------------------------------------------------------------
// Token-level grammar

pub type NtId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenSymbol {
    /// A word-level terminal expanded to its token-id sequence (never empty).
    Terminal(Vec<TokenId>),
    Nonterminal(NtId),
}

#[derive(Debug, Clone)]
pub struct TokenProduction {
    pub lhs: NtId,
    pub rhs: Vec<TokenSymbol>,
}

/// Same shape as [`Qcfg`] with terminals compiled to token ids; the decoder
/// works on this form.
#[derive(Debug, Clone)]
pub struct TokenGrammar {
    nonterminals: Vec<QcfgNonterminal>,
    start: NtId,
    productions: Vec<TokenProduction>,
    prods_by_lhs: Vec<Vec<usize>>,
    vocab_size: usize,
}

impl TokenGrammar {
    fn compile(grammar: &Qcfg, tokenizer: &Tokenizer) -> Result<Self, TokenizeError> {
        let mut nonterminals = Vec::new();
        let mut ids: HashMap<&QcfgNonterminal, NtId> = HashMap::new();
        let intern = |nt: &QcfgNonterminal,
                          nonterminals: &mut Vec<QcfgNonterminal>,
                          ids: &mut HashMap<&QcfgNonterminal, NtId>|
         -> NtId {
            if let Some(&id) = ids.get(nt) {
                return id;
            }
            let id = nonterminals.len();
            nonterminals.push(nt.clone());
            id
        };
        // two passes so the borrow into `ids` stays simple
        let mut seen: Vec<&QcfgNonterminal> = Vec::new();
        for nt in std::iter::once(&grammar.start).chain(grammar.productions.iter().flat_map(|p| {
            std::iter::once(&p.lhs).chain(p.rhs.iter().filter_map(|s| match s {
                Symbol::Nonterminal(nt) => Some(nt),
                _ => None,
            }))
        })) {
            if !ids.contains_key(nt) {
                let id = intern(nt, &mut nonterminals, &mut ids);
                seen.push(nt);
                ids.insert(seen[seen.len() - 1], id);
            }
        }

        let start = ids[&grammar.start];
        let mut productions = Vec::with_capacity(grammar.productions.len());
        for p in &grammar.productions {
            let mut rhs = Vec::with_capacity(p.rhs.len());
            for s in &p.rhs {
                rhs.push(match s {
                    Symbol::Terminal(w) => TokenSymbol::Terminal(tokenizer.encode_word(w)?),
                    Symbol::Nonterminal(nt) => TokenSymbol::Nonterminal(ids[nt]),
                });
            }
            productions.push(TokenProduction { lhs: ids[&p.lhs], rhs });
        }
        let mut prods_by_lhs = vec![Vec::new(); nonterminals.len()];
        for (i, p) in productions.iter().enumerate() {
            prods_by_lhs[p.lhs].push(i);
        }
        Ok(TokenGrammar {
            nonterminals,
            start,
            productions,
            prods_by_lhs,
            vocab_size: tokenizer.vocab_size(),
        })
    }

    pub fn start(&self) -> NtId {
        self.start
    }

    pub fn nonterminal(&self, id: NtId) -> &QcfgNonterminal {
        &self.nonterminals[id]
    }

    pub fn num_nonterminals(&self) -> usize {
        self.nonterminals.len()
    }

    pub fn productions(&self) -> &[TokenProduction] {
        &self.productions
    }

    pub fn prods_of(&self, nt: NtId) -> &[usize] {
        &self.prods_by_lhs[nt]
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

// ---------------------------------------------------------------------------
// Word-level Earley recognition with derivation extraction

/// One derivation step: which nonterminal expanded into which children.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivation {
    pub nonterminal: QcfgNonterminal,
    pub children: Vec<DerivationChild>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DerivationChild {
    Terminal(String),
    Node(Derivation),
}

impl Derivation {
    pub fn yield_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_words(&mut out);
        out
    }

    fn collect_words(&self, out: &mut Vec<String>) {
        for c in &self.children {
            match c {
                DerivationChild::Terminal(w) => out.push(w.clone()),
                DerivationChild::Node(d) => d.collect_words(out),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Item {
    prod: usize,
    dot: usize,
    origin: usize,
}

#[derive(Debug, Clone, Copy)]
enum Cause {
    Seed,
    Scan { parent: (usize, usize) },
    Complete { parent: (usize, usize), child: (usize, usize) },
}

#[derive(Default)]
struct Column {
    items: Vec<Item>,
    map: HashMap<Item, usize>,
    causes: Vec<Cause>,
}

impl Column {
    fn add(&mut self, item: Item, cause: Cause) -> Option<usize> {
        if self.map.contains_key(&item) {
            return None;
        }
        let idx = self.items.len();
        self.map.insert(item, idx);
        self.items.push(item);
        self.causes.push(cause);
        Some(idx)
    }
}

fn recognize(grammar: &Qcfg, words: &[&str]) -> Option<Derivation> {
    let index = grammar.prods_by_lhs();
    let n = words.len();
    let mut cols: Vec<Column> = (0..=n).map(|_| Column::default()).collect();

    let empty = Vec::new();
    for &p in index.get(&grammar.start).unwrap_or(&empty) {
        cols[0].add(Item { prod: p, dot: 0, origin: 0 }, Cause::Seed);
    }

    for i in 0..=n {
        let mut idx = 0;
        while idx < cols[i].items.len() {
            let item = cols[i].items[idx];
            let prod = &grammar.productions[item.prod];
            if item.dot < prod.rhs.len() {
                if let Symbol::Nonterminal(nt) = &prod.rhs[item.dot] {
                    for &p in index.get(nt).unwrap_or(&empty) {
                        cols[i].add(Item { prod: p, dot: 0, origin: i }, Cause::Seed);
                    }
                }
            } else {
                // complete: origin < i because no production yields epsilon
                let lhs = prod.lhs.clone();
                let parents: Vec<(usize, Item)> = cols[item.origin]
                    .items
                    .iter()
                    .enumerate()
                    .filter(|(_, it)| {
                        let p2 = &grammar.productions[it.prod];
                        it.dot < p2.rhs.len()
                            && matches!(&p2.rhs[it.dot], Symbol::Nonterminal(nt) if *nt == lhs)
                    })
                    .map(|(j, it)| (j, *it))
                    .collect();
                for (j, parent) in parents {
                    cols[i].add(
                        Item { prod: parent.prod, dot: parent.dot + 1, origin: parent.origin },
                        Cause::Complete { parent: (item.origin, j), child: (i, idx) },
                    );
                }
            }
            idx += 1;
        }
        if i < n {
            let scans: Vec<(usize, Item)> = cols[i]
                .items
                .iter()
                .enumerate()
                .filter(|(_, it)| {
                    let p = &grammar.productions[it.prod];
                    it.dot < p.rhs.len()
                        && matches!(&p.rhs[it.dot], Symbol::Terminal(w) if w == words[i])
                })
                .map(|(j, it)| (j, *it))
                .collect();
            for (j, it) in scans {
                let (before, after) = cols.split_at_mut(i + 1);
                let _ = before;
                after[0].add(
                    Item { prod: it.prod, dot: it.dot + 1, origin: it.origin },
                    Cause::Scan { parent: (i, j) },
                );
            }
        }
    }

    let final_col = &cols[n];
    let accept = final_col.items.iter().position(|it| {
        let p = &grammar.productions[it.prod];
        it.origin == 0 && it.dot == p.rhs.len() && p.lhs == grammar.start
    })?;
    Some(build_derivation(grammar, &cols, n, accept))
}

fn build_derivation(grammar: &Qcfg, cols: &[Column], col: usize, idx: usize) -> Derivation {
    let item = cols[col].items[idx];
    let prod = &grammar.productions[item.prod];
    let mut children = Vec::with_capacity(prod.rhs.len());
    let mut cur = (col, idx);
    loop {
        let it = cols[cur.0].items[cur.1];
        if it.dot == 0 {
            break;
        }
        match cols[cur.0].causes[cur.1] {
            Cause::Seed => break,
            Cause::Scan { parent } => {
                let Symbol::Terminal(w) = &prod.rhs[it.dot - 1] else { unreachable!() };
                children.push(DerivationChild::Terminal(w.clone()));
                cur = parent;
            }
            Cause::Complete { parent, child } => {
                children.push(DerivationChild::Node(build_derivation(
                    grammar, cols, child.0, child.1,
                )));
                cur = parent;
            }
        }
    }
    children.reverse();
    Derivation { nonterminal: prod.lhs.clone(), children }
}
