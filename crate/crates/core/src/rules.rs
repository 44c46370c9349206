//! The declarative transduction-rule DSL.
//!
//! Rule files look like:
//!
//! ```text
//! # comment
//! start S
//! nonterminals S PP EVENT LEX
//!
//! rule S on findEventsOnDate(date)
//!   where size(self) == 1
//!   let num = size(self)
//!   let event = first(self)
//!   say "I found {LEX <num>} event {PP <date>} . {EVENT <event>} ."
//! ```
//!
//! A pattern captures nodes into variables; the matched node itself is always
//! bound to `self`. Guards are evaluated over node values and may call
//! registry functions. Lets build new graph nodes whose values become
//! available to the template.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use thiserror::Error;

use crate::registry::FunctionRegistry;
use crate::value::Value;

/// A nonterminal type from the transducer's declared set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NonterminalType(pub String);

impl fmt::Display for NonterminalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NonterminalType {
    fn from(s: &str) -> Self {
        NonterminalType(s.to_string())
    }
}

/// Tree pattern over node op names with variable captures.
#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    /// Bare variable: matches any node and binds it.
    Var(String),
    /// `_`: matches any node without binding.
    Wildcard,
    /// `op(arg, ...)`, optionally `var@op(arg, ...)` to also bind the node.
    Op { name: String, binding: Option<String>, args: Vec<Pattern> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// Expression over captured node values, used in guards and lets.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var(String),
    Lit(Value),
    Call(String, Vec<Expr>),
    Cmp { op: CmpOp, lhs: Box<Expr>, rhs: Box<Expr> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemplateItem {
    Terminal(String),
    NontermRef { ty: NonterminalType, var: String },
}

#[derive(Debug, Clone)]
pub struct TransductionRule {
    /// Human-readable label used in error reports, e.g. `S#3`.
    pub name: String,
    pub head: NonterminalType,
    pub pattern: Pattern,
    pub guards: Vec<Expr>,
    pub lets: Vec<(String, Expr)>,
    pub template: Vec<TemplateItem>,
}

/// A parsed rule file: start symbol, declared nonterminal set, rules in
/// file order.
#[derive(Debug, Clone)]
pub struct RulePack {
    pub start: NonterminalType,
    pub nonterminals: BTreeSet<NonterminalType>,
    pub rules: Vec<TransductionRule>,
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{rule}: unknown nonterminal `{ty}`")]
    UnknownNonterminal { rule: String, ty: NonterminalType },
    #[error("{rule}: unbound variable `{var}`")]
    UnboundVariable { rule: String, var: String },
    #[error("{rule}: unknown function `{name}` in guard or let")]
    UnknownFunction { rule: String, name: String },
    #[error("{rule}: empty response template")]
    EmptyTemplate { rule: String },
}

/// Parse a rule file. If a registry is supplied, guard and let function
/// names are validated against it.
pub fn parse_rules(text: &str, registry: Option<&FunctionRegistry>) -> Result<RulePack, RuleError> {
    let mut lexer = Lexer::new(text);
    let tokens = lexer.tokenize()?;
    let mut parser = RuleParser { tokens, pos: 0 };
    let mut start: Option<NonterminalType> = None;
    let mut declared: Option<BTreeSet<NonterminalType>> = None;
    let mut rules = Vec::new();

    while !parser.at_end() {
        match parser.peek_kw() {
            Some("start") => {
                parser.bump();
                let name = parser.expect_ident("start symbol")?;
                start = Some(NonterminalType(name));
            }
            Some("nonterminals") => {
                let directive_line = parser.line();
                parser.bump();
                let mut set = declared.unwrap_or_default();
                // the list ends at the end of the directive's line
                while let Some(Tok { kind: TokKind::Ident(_), line }) = parser.peek() {
                    if *line != directive_line {
                        break;
                    }
                    set.insert(NonterminalType(parser.expect_ident("nonterminal")?));
                }
                declared = Some(set);
            }
            Some("rule") => {
                let index = rules.len();
                rules.push(parser.parse_rule(index)?);
            }
            _ => {
                let line = parser.peek().map(|t| t.line).unwrap_or(0);
                return Err(RuleError::Syntax {
                    line,
                    msg: "expected `rule`, `start`, or `nonterminals`".into(),
                });
            }
        }
    }

    let start = start.unwrap_or_else(|| NonterminalType("S".into()));
    // default nonterminal set: every head and template type, plus LEX
    let nonterminals = declared.unwrap_or_else(|| {
        let mut set: BTreeSet<NonterminalType> = BTreeSet::new();
        set.insert(start.clone());
        set.insert(NonterminalType("LEX".into()));
        for r in &rules {
            set.insert(r.head.clone());
            for item in &r.template {
                if let TemplateItem::NontermRef { ty, .. } = item {
                    set.insert(ty.clone());
                }
            }
        }
        set
    });

    let pack = RulePack { start, nonterminals, rules };
    check_rules(&pack, registry)?;
    Ok(pack)
}

fn check_rules(pack: &RulePack, registry: Option<&FunctionRegistry>) -> Result<(), RuleError> {
    for rule in &pack.rules {
        if !pack.nonterminals.contains(&rule.head) {
            return Err(RuleError::UnknownNonterminal {
                rule: rule.name.clone(),
                ty: rule.head.clone(),
            });
        }
        if rule.template.is_empty() {
            return Err(RuleError::EmptyTemplate { rule: rule.name.clone() });
        }

        let mut bound: HashSet<String> = HashSet::new();
        bound.insert("self".to_string());
        collect_pattern_vars(&rule.pattern, &mut bound);

        for guard in &rule.guards {
            check_expr(guard, &bound, rule, registry)?;
        }
        for (var, expr) in &rule.lets {
            check_expr(expr, &bound, rule, registry)?;
            bound.insert(var.clone());
        }
        for item in &rule.template {
            if let TemplateItem::NontermRef { ty, var } = item {
                if !pack.nonterminals.contains(ty) {
                    return Err(RuleError::UnknownNonterminal {
                        rule: rule.name.clone(),
                        ty: ty.clone(),
                    });
                }
                if !bound.contains(var) {
                    return Err(RuleError::UnboundVariable {
                        rule: rule.name.clone(),
                        var: var.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn collect_pattern_vars(pattern: &Pattern, out: &mut HashSet<String>) {
    match pattern {
        Pattern::Var(v) => {
            out.insert(v.clone());
        }
        Pattern::Wildcard => {}
        Pattern::Op { binding, args, .. } => {
            if let Some(b) = binding {
                out.insert(b.clone());
            }
            for a in args {
                collect_pattern_vars(a, out);
            }
        }
    }
}

fn check_expr(
    expr: &Expr,
    bound: &HashSet<String>,
    rule: &TransductionRule,
    registry: Option<&FunctionRegistry>,
) -> Result<(), RuleError> {
    match expr {
        Expr::Var(v) => {
            if !bound.contains(v) {
                return Err(RuleError::UnboundVariable {
                    rule: rule.name.clone(),
                    var: v.clone(),
                });
            }
        }
        Expr::Lit(_) => {}
        Expr::Call(name, args) => {
            if let Some(reg) = registry {
                if !reg.contains(name) {
                    return Err(RuleError::UnknownFunction {
                        rule: rule.name.clone(),
                        name: name.clone(),
                    });
                }
            }
            for a in args {
                check_expr(a, bound, rule, registry)?;
            }
        }
        Expr::Cmp { lhs, rhs, .. } => {
            check_expr(lhs, bound, rule, registry)?;
            check_expr(rhs, bound, rule, registry)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Lexing

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    LParen,
    RParen,
    Comma,
    At,
    Underscore,
    Assign,
    Cmp(CmpOp),
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    line: usize,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer { chars: text.chars().peekable(), line: 1 }
    }

    fn err(&self, msg: impl Into<String>) -> RuleError {
        RuleError::Syntax { line: self.line, msg: msg.into() }
    }

    fn tokenize(&mut self) -> Result<Vec<Tok>, RuleError> {
        let mut out = Vec::new();
        while let Some(&c) = self.chars.peek() {
            match c {
                '\n' => {
                    self.line += 1;
                    self.chars.next();
                }
                c if c.is_whitespace() => {
                    self.chars.next();
                }
                '#' => {
                    while let Some(&c) = self.chars.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.chars.next();
                    }
                }
                '(' => self.push_simple(&mut out, TokKind::LParen),
                ')' => self.push_simple(&mut out, TokKind::RParen),
                ',' => self.push_simple(&mut out, TokKind::Comma),
                '@' => self.push_simple(&mut out, TokKind::At),
                '"' => {
                    self.chars.next();
                    let mut s = String::new();
                    loop {
                        match self.chars.next() {
                            Some('"') => break,
                            Some('\\') => match self.chars.next() {
                                Some('"') => s.push('"'),
                                Some('\\') => s.push('\\'),
                                Some(c) => return Err(self.err(format!("bad escape `\\{c}`"))),
                                None => return Err(self.err("unterminated string")),
                            },
                            Some('\n') => return Err(self.err("newline in string")),
                            Some(c) => s.push(c),
                            None => return Err(self.err("unterminated string")),
                        }
                    }
                    out.push(Tok { kind: TokKind::Str(s), line: self.line });
                }
                '=' | '!' | '<' | '>' => {
                    self.chars.next();
                    let two = self.chars.peek() == Some(&'=');
                    let kind = match (c, two) {
                        ('=', true) => TokKind::Cmp(CmpOp::Eq),
                        ('!', true) => TokKind::Cmp(CmpOp::Ne),
                        ('<', true) => TokKind::Cmp(CmpOp::Le),
                        ('>', true) => TokKind::Cmp(CmpOp::Ge),
                        ('=', false) => TokKind::Assign,
                        ('<', false) => TokKind::Cmp(CmpOp::Lt),
                        ('>', false) => TokKind::Cmp(CmpOp::Gt),
                        ('!', false) => return Err(self.err("expected `!=`")),
                        _ => unreachable!(),
                    };
                    if two {
                        self.chars.next();
                    }
                    out.push(Tok { kind, line: self.line });
                }
                c if c.is_ascii_digit() || c == '-' => {
                    let mut s = String::new();
                    s.push(c);
                    self.chars.next();
                    while let Some(&c) = self.chars.peek() {
                        if c.is_ascii_digit() || c == '.' {
                            s.push(c);
                            self.chars.next();
                        } else {
                            break;
                        }
                    }
                    let kind = if s.contains('.') {
                        TokKind::Float(
                            s.parse().map_err(|_| self.err(format!("bad number `{s}`")))?,
                        )
                    } else {
                        TokKind::Int(s.parse().map_err(|_| self.err(format!("bad number `{s}`")))?)
                    };
                    out.push(Tok { kind, line: self.line });
                }
                '_' => {
                    self.chars.next();
                    if matches!(self.chars.peek(), Some(c) if c.is_alphanumeric() || *c == '_') {
                        let mut s = String::from("_");
                        self.lex_ident_rest(&mut s);
                        out.push(Tok { kind: TokKind::Ident(s), line: self.line });
                    } else {
                        out.push(Tok { kind: TokKind::Underscore, line: self.line });
                    }
                }
                c if c.is_alphabetic() => {
                    let mut s = String::new();
                    self.lex_ident_rest(&mut s);
                    out.push(Tok { kind: TokKind::Ident(s), line: self.line });
                }
                c => return Err(self.err(format!("unexpected character `{c}`"))),
            }
        }
        Ok(out)
    }

    fn lex_ident_rest(&mut self, s: &mut String) {
        while let Some(&c) = self.chars.peek() {
            if c.is_alphanumeric() || c == '_' {
                s.push(c);
                self.chars.next();
            } else {
                break;
            }
        }
    }

    fn push_simple(&mut self, out: &mut Vec<Tok>, kind: TokKind) {
        self.chars.next();
        out.push(Tok { kind, line: self.line });
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct RuleParser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl RuleParser {
    fn at_end(&self) -> bool {
        self.pos >= self.tokens.len()
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn peek_kw(&self) -> Option<&str> {
        match self.peek() {
            Some(Tok { kind: TokKind::Ident(s), .. }) => Some(s.as_str()),
            _ => None,
        }
    }

    fn bump(&mut self) -> Option<&Tok> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn line(&self) -> usize {
        self.peek()
            .map(|t| t.line)
            .or_else(|| self.tokens.last().map(|t| t.line))
            .unwrap_or(0)
    }

    fn err(&self, msg: impl Into<String>) -> RuleError {
        RuleError::Syntax { line: self.line(), msg: msg.into() }
    }

    fn expect_ident(&mut self, what: &str) -> Result<String, RuleError> {
        match self.bump().map(|t| t.kind.clone()) {
            Some(TokKind::Ident(s)) => Ok(s),
            _ => Err(RuleError::Syntax {
                line: self.line(),
                msg: format!("expected {what}"),
            }),
        }
    }

    fn eat(&mut self, kind: &TokKind) -> bool {
        if self.peek().map(|t| &t.kind) == Some(kind) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, kind: TokKind, what: &str) -> Result<(), RuleError> {
        if self.eat(&kind) {
            Ok(())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }

    fn parse_rule(&mut self, index: usize) -> Result<TransductionRule, RuleError> {
        self.expect_kw("rule")?;
        let head = NonterminalType(self.expect_ident("rule head nonterminal")?);
        let name = format!("{head}#{index}");
        self.expect_kw("on")?;
        let pattern = self.parse_pattern()?;

        let mut guards = Vec::new();
        if self.peek_kw() == Some("where") {
            self.bump();
            guards.push(self.parse_guard()?);
            while self.peek_kw() == Some("and") {
                self.bump();
                guards.push(self.parse_guard()?);
            }
        }

        let mut lets = Vec::new();
        while self.peek_kw() == Some("let") {
            self.bump();
            let var = self.expect_ident("let variable")?;
            self.expect(TokKind::Assign, "`=`")?;
            let expr = self.parse_expr()?;
            lets.push((var, expr));
        }

        self.expect_kw("say")?;
        let template_line = self.line();
        let template_src = match self.bump().map(|t| t.kind.clone()) {
            Some(TokKind::Str(s)) => s,
            _ => {
                return Err(RuleError::Syntax {
                    line: template_line,
                    msg: "expected quoted template after `say`".into(),
                })
            }
        };
        let template = parse_template(&template_src, template_line)?;

        Ok(TransductionRule { name, head, pattern, guards, lets, template })
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), RuleError> {
        if self.peek_kw() == Some(kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.err(format!("expected `{kw}`")))
        }
    }

    fn parse_pattern(&mut self) -> Result<Pattern, RuleError> {
        if self.eat(&TokKind::Underscore) {
            return Ok(Pattern::Wildcard);
        }
        let name = self.expect_ident("pattern")?;
        if self.eat(&TokKind::At) {
            // var@op(args)
            let op = self.expect_ident("op name after `@`")?;
            let args = self.parse_pattern_args()?;
            return Ok(Pattern::Op { name: op, binding: Some(name), args });
        }
        if self.peek().map(|t| &t.kind) == Some(&TokKind::LParen) {
            let args = self.parse_pattern_args()?;
            Ok(Pattern::Op { name, binding: None, args })
        } else {
            Ok(Pattern::Var(name))
        }
    }

    fn parse_pattern_args(&mut self) -> Result<Vec<Pattern>, RuleError> {
        self.expect(TokKind::LParen, "`(`")?;
        let mut args = Vec::new();
        if self.eat(&TokKind::RParen) {
            return Ok(args);
        }
        loop {
            args.push(self.parse_pattern()?);
            if self.eat(&TokKind::Comma) {
                continue;
            }
            self.expect(TokKind::RParen, "`)` or `,`")?;
            return Ok(args);
        }
    }

    fn parse_guard(&mut self) -> Result<Expr, RuleError> {
        let lhs = self.parse_expr()?;
        if let Some(Tok { kind: TokKind::Cmp(op), .. }) = self.peek() {
            let op = *op;
            self.bump();
            let rhs = self.parse_expr()?;
            Ok(Expr::Cmp { op, lhs: Box::new(lhs), rhs: Box::new(rhs) })
        } else {
            Ok(lhs)
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, RuleError> {
        match self.bump().map(|t| t.kind.clone()) {
            Some(TokKind::Int(n)) => Ok(Expr::Lit(Value::Integer(n))),
            Some(TokKind::Float(x)) => Ok(Expr::Lit(Value::Number(x))),
            Some(TokKind::Str(s)) => Ok(Expr::Lit(Value::Text(s))),
            Some(TokKind::Ident(name)) => {
                if name == "true" {
                    return Ok(Expr::Lit(Value::Boolean(true)));
                }
                if name == "false" {
                    return Ok(Expr::Lit(Value::Boolean(false)));
                }
                if self.peek().map(|t| &t.kind) == Some(&TokKind::LParen) {
                    self.bump();
                    let mut args = Vec::new();
                    if !self.eat(&TokKind::RParen) {
                        loop {
                            args.push(self.parse_expr()?);
                            if self.eat(&TokKind::Comma) {
                                continue;
                            }
                            self.expect(TokKind::RParen, "`)` or `,`")?;
                            break;
                        }
                    }
                    Ok(Expr::Call(name, args))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            _ => Err(self.err("expected an expression")),
        }
    }
}

fn parse_template(src: &str, line: usize) -> Result<Vec<TemplateItem>, RuleError> {
    let mut items = Vec::new();
    let mut rest = src;
    while !rest.is_empty() {
        if let Some(open) = rest.find('{') {
            for word in rest[..open].split_whitespace() {
                items.push(TemplateItem::Terminal(word.to_string()));
            }
            let close = rest[open..].find('}').ok_or(RuleError::Syntax {
                line,
                msg: "unclosed `{` in template".into(),
            })?;
            let inner = &rest[open + 1..open + close];
            let (ty, var) = parse_nonterm_ref(inner).ok_or_else(|| RuleError::Syntax {
                line,
                msg: format!("bad template nonterminal `{{{inner}}}`, expected `{{TYPE <var>}}`"),
            })?;
            items.push(TemplateItem::NontermRef {
                ty: NonterminalType(ty.to_string()),
                var: var.to_string(),
            });
            rest = &rest[open + close + 1..];
        } else {
            for word in rest.split_whitespace() {
                items.push(TemplateItem::Terminal(word.to_string()));
            }
            break;
        }
    }
    Ok(items)
}

fn parse_nonterm_ref(inner: &str) -> Option<(&str, &str)> {
    let mut parts = inner.split_whitespace();
    let ty = parts.next()?;
    let var = parts.next()?;
    if parts.next().is_some() {
        return None;
    }
    let var = var.strip_prefix('<')?.strip_suffix('>')?;
    if ty.is_empty() || var.is_empty() {
        return None;
    }
    Some((ty, var))
}
