//! Incremental Earley recognition over token sequences.
//!
//! A [`DecoderState`] is an immutable value: advancing returns a new state
//! that shares all earlier chart columns with its parent, so beam hypotheses
//! can branch freely.

use std::collections::{BTreeSet, HashSet};
use std::sync::{Arc, OnceLock};

use thiserror::Error;

use crate::qcfg::{TokenGrammar, TokenSymbol};
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum EarleyError {
    #[error("grammar derives no string")]
    EmptyLanguage,
    #[error("token {0} is not grammatical here")]
    IllegalToken(TokenId),
}

/// Dotted item with a within-terminal token offset for multi-token terminals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EarleyItem {
    pub prod: usize,
    pub dot: usize,
    pub origin: usize,
    pub tok_off: usize,
}

#[derive(Debug, Default)]
struct Column {
    items: Vec<EarleyItem>,
    set: HashSet<EarleyItem>,
}

impl Column {
    fn add(&mut self, item: EarleyItem) -> bool {
        if self.set.insert(item) {
            self.items.push(item);
            true
        } else {
            false
        }
    }
}

/// What token ids may come next, and whether the consumed prefix is already a
/// complete sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct AllowedNext {
    pub tokens: BTreeSet<TokenId>,
    pub eos: bool,
}

#[derive(Debug)]
pub struct DecoderState {
    grammar: Arc<TokenGrammar>,
    columns: Vec<Arc<Column>>,
    consumed: Vec<TokenId>,
    allowed: OnceLock<AllowedNext>,
}

impl Clone for DecoderState {
    fn clone(&self) -> Self {
        let allowed = OnceLock::new();
        if let Some(a) = self.allowed.get() {
            let _ = allowed.set(a.clone());
        }
        DecoderState {
            grammar: Arc::clone(&self.grammar),
            columns: self.columns.clone(),
            consumed: self.consumed.clone(),
            allowed,
        }
    }
}

impl DecoderState {
    /// Column 0: predict the start nonterminal and close. Errors if nothing
    /// can ever be emitted.
    pub fn init(grammar: Arc<TokenGrammar>) -> Result<Self, EarleyError> {
        let mut col = Column::default();
        for &p in grammar.prods_of(grammar.start()) {
            col.add(EarleyItem { prod: p, dot: 0, origin: 0, tok_off: 0 });
        }
        close_column(&grammar, &mut col, &[], 0);
        let state = DecoderState {
            grammar,
            columns: vec![Arc::new(col)],
            consumed: Vec::new(),
            allowed: OnceLock::new(),
        };
        let allowed = state.allowed_next();
        if allowed.tokens.is_empty() && !allowed.eos {
            return Err(EarleyError::EmptyLanguage);
        }
        Ok(state)
    }

    pub fn consumed(&self) -> &[TokenId] {
        &self.consumed
    }

    pub fn grammar(&self) -> &Arc<TokenGrammar> {
        &self.grammar
    }

    /// Total chart items across all columns (for complexity checks).
    pub fn chart_items(&self) -> usize {
        self.columns.iter().map(|c| c.items.len()).sum()
    }

    /// The token set that can grammatically extend the consumed prefix, and
    /// whether the prefix is a complete sentence. Cached per state.
    pub fn allowed_next(&self) -> &AllowedNext {
        self.allowed.get_or_init(|| {
            let col = self.columns.last().expect("at least one column");
            let mut tokens = BTreeSet::new();
            for item in &col.items {
                if let Some(tok) = self.expected_token(item) {
                    tokens.insert(tok);
                }
            }
            let pos = self.consumed.len();
            let eos = col.items.iter().any(|it| {
                let p = &self.grammar.productions()[it.prod];
                it.origin == 0
                    && it.dot == p.rhs.len()
                    && p.lhs == self.grammar.start()
                    && pos > 0
            });
            AllowedNext { tokens, eos }
        })
    }

    fn expected_token(&self, item: &EarleyItem) -> Option<TokenId> {
        let p = &self.grammar.productions()[item.prod];
        match p.rhs.get(item.dot) {
            Some(TokenSymbol::Terminal(toks)) => toks.get(item.tok_off).copied(),
            _ => None,
        }
    }

    /// Accepting iff the consumed prefix is in the grammar's language.
    pub fn accepts(&self) -> bool {
        self.allowed_next().eos
    }

    /// Consume one token, returning a new state. The original is unchanged.
    pub fn advance(&self, token: TokenId) -> Result<Self, EarleyError> {
        if !self.allowed_next().tokens.contains(&token) {
            return Err(EarleyError::IllegalToken(token));
        }
        let last = self.columns.last().expect("at least one column");
        let mut next = Column::default();
        for item in &last.items {
            if self.expected_token(item) != Some(token) {
                continue;
            }
            let p = &self.grammar.productions()[item.prod];
            let TokenSymbol::Terminal(toks) = &p.rhs[item.dot] else { unreachable!() };
            let advanced = if item.tok_off + 1 == toks.len() {
                EarleyItem { prod: item.prod, dot: item.dot + 1, origin: item.origin, tok_off: 0 }
            } else {
                EarleyItem { tok_off: item.tok_off + 1, ..*item }
            };
            next.add(advanced);
        }
        let pos = self.columns.len();
        close_column(&self.grammar, &mut next, &self.columns, pos);

        let mut columns = self.columns.clone();
        columns.push(Arc::new(next));
        let mut consumed = self.consumed.clone();
        consumed.push(token);
        Ok(DecoderState {
            grammar: Arc::clone(&self.grammar),
            columns,
            consumed,
            allowed: OnceLock::new(),
        })
    }
}

/// Predict/complete closure for the column at `pos`; earlier columns are
/// read-only.
fn close_column(grammar: &TokenGrammar, col: &mut Column, earlier: &[Arc<Column>], pos: usize) {
    let mut idx = 0;
    while idx < col.items.len() {
        let item = col.items[idx];
        let p = &grammar.productions()[item.prod];
        if item.dot < p.rhs.len() {
            if item.tok_off == 0 {
                if let TokenSymbol::Nonterminal(nt) = p.rhs[item.dot] {
                    for &np in grammar.prods_of(nt) {
                        col.add(EarleyItem { prod: np, dot: 0, origin: pos, tok_off: 0 });
                    }
                }
            }
        } else {
            // complete; origin < pos because every production consumes tokens
            let lhs = p.lhs;
            let parent_items: Vec<EarleyItem> = if item.origin == pos {
                Vec::new()
            } else {
                earlier[item.origin]
                    .items
                    .iter()
                    .filter(|it| {
                        let pp = &grammar.productions()[it.prod];
                        it.tok_off == 0
                            && matches!(pp.rhs.get(it.dot), Some(TokenSymbol::Nonterminal(nt)) if *nt == lhs)
                    })
                    .copied()
                    .collect()
            };
            for parent in parent_items {
                col.add(EarleyItem {
                    prod: parent.prod,
                    dot: parent.dot + 1,
                    origin: parent.origin,
                    tok_off: 0,
                });
            }
        }
        idx += 1;
    }
}
