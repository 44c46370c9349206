//! Applies transduction rules to an executed dataflow graph, expanding it and
//! emitting a per-input QCFG.

use std::collections::{HashMap, HashSet, VecDeque};

use chrono::{Datelike, Days};
use thiserror::Error;

use crate::graph::{DataflowGraph, GraphError, NodeId, NodeOp};
use crate::qcfg::{Qcfg, QcfgError, QcfgNonterminal, QcfgProduction, Symbol};
use crate::registry::{month_name, time_words, ExecEnv, FunctionRegistry};
use crate::rules::{CmpOp, Expr, Pattern, RulePack, TemplateItem, TransductionRule};
use crate::value::Value;

#[derive(Debug, Error)]
pub enum TransduceError {
    #[error("graph has not been executed")]
    Unexecuted,
    #[error("coverage error: no applicable rule for {}",
            .0.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", "))]
    Coverage(Vec<QcfgNonterminal>),
    #[error("expansion depth exceeded bound {0}")]
    DepthExceeded(usize),
    #[error("rule {rule} at node {node}: {msg}")]
    RuleRuntime { rule: String, node: NodeId, msg: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Grammar(#[from] QcfgError),
}

#[derive(Debug, Clone, Copy)]
pub struct TransduceOptions {
    /// Bound on worklist expansion depth; recursive rule packs terminate here.
    pub max_depth: usize,
}

impl Default for TransduceOptions {
    fn default() -> Self {
        TransduceOptions { max_depth: 64 }
    }
}

/// The dataflow transducer: nonterminal set, rules, start symbol, and the
/// function registry rule bodies may call. Immutable and shareable.
pub struct Transducer {
    pub pack: RulePack,
    pub registry: FunctionRegistry,
}

/// Memo of nodes added by rule bodies within one transduction, keyed by the
/// expression that built them. Keeps added-node ids independent of how many
/// rules request the same computation.
#[derive(Default)]
pub struct LetMemo {
    calls: HashMap<(String, Vec<NodeId>), NodeId>,
    literals: HashMap<String, NodeId>,
}

impl Transducer {
    pub fn new(pack: RulePack, registry: FunctionRegistry) -> Self {
        Transducer { pack, registry }
    }

    /// Try one rule against one node. On a match the graph is extended by the
    /// rule's lets and a single production is returned; otherwise the graph
    /// is left untouched.
    pub fn apply_rule(
        &self,
        rule: &TransductionRule,
        graph: &mut DataflowGraph,
        node: &NodeId,
        env: &ExecEnv,
    ) -> Result<Option<QcfgProduction>, TransduceError> {
        let mut memo = LetMemo::default();
        self.apply_rule_memo(rule, graph, node, env, &mut memo)
    }

    pub fn apply_rule_memo(
        &self,
        rule: &TransductionRule,
        graph: &mut DataflowGraph,
        node: &NodeId,
        env: &ExecEnv,
        memo: &mut LetMemo,
    ) -> Result<Option<QcfgProduction>, TransduceError> {
        if !graph.is_executed() {
            return Err(TransduceError::Unexecuted);
        }
        let mut bindings: HashMap<String, NodeId> = HashMap::new();
        bindings.insert("self".to_string(), node.clone());
        if !match_pattern(&rule.pattern, graph, node, &mut bindings) {
            return Ok(None);
        }

        // guards run before lets, so a failed guard leaves the graph unchanged
        for guard in &rule.guards {
            let v = self
                .eval_value(guard, graph, &bindings, env)
                .map_err(|msg| self.runtime_err(rule, node, msg))?;
            match v {
                Value::Boolean(true) => {}
                Value::Boolean(false) => return Ok(None),
                other => {
                    return Err(self.runtime_err(
                        rule,
                        node,
                        format!("guard evaluated to {} instead of a boolean", other.tag()),
                    ))
                }
            }
        }

        for (var, expr) in &rule.lets {
            let id = self
                .eval_node_expr(expr, graph, &bindings, env, memo)
                .map_err(|msg| self.runtime_err(rule, node, msg))?;
            bindings.insert(var.clone(), id);
        }

        let mut rhs = Vec::with_capacity(rule.template.len());
        for item in &rule.template {
            match item {
                TemplateItem::Terminal(w) => rhs.push(Symbol::Terminal(w.clone())),
                TemplateItem::NontermRef { ty, var } => {
                    let target = bindings
                        .get(var)
                        .cloned()
                        .ok_or_else(|| self.runtime_err(rule, node, format!("unbound `{var}`")))?;
                    rhs.push(Symbol::Nonterminal(QcfgNonterminal {
                        ty: ty.clone(),
                        node: target,
                    }));
                }
            }
        }
        Ok(Some(QcfgProduction {
            lhs: QcfgNonterminal { ty: rule.head.clone(), node: node.clone() },
            rhs,
        }))
    }

    fn runtime_err(&self, rule: &TransductionRule, node: &NodeId, msg: String) -> TransduceError {
        TransduceError::RuleRuntime { rule: rule.name.clone(), node: node.clone(), msg }
    }

    /// Evaluate a guard expression down to a value.
    fn eval_value(
        &self,
        expr: &Expr,
        graph: &DataflowGraph,
        bindings: &HashMap<String, NodeId>,
        env: &ExecEnv,
    ) -> Result<Value, String> {
        match expr {
            Expr::Lit(v) => Ok(v.clone()),
            Expr::Var(name) => {
                let id = bindings.get(name).ok_or_else(|| format!("unbound `{name}`"))?;
                graph
                    .value(id)
                    .cloned()
                    .ok_or_else(|| format!("node {id} has no value"))
            }
            Expr::Call(name, args) => {
                let vals: Vec<Value> = args
                    .iter()
                    .map(|a| self.eval_value(a, graph, bindings, env))
                    .collect::<Result<_, _>>()?;
                self.registry.call(name, &vals, env).map_err(|e| e.to_string())
            }
            Expr::Cmp { op, lhs, rhs } => {
                let a = self.eval_value(lhs, graph, bindings, env)?;
                let b = self.eval_value(rhs, graph, bindings, env)?;
                compare(*op, &a, &b).map(Value::Boolean)
            }
        }
    }

    /// Evaluate a let expression into a graph node, adding nodes as needed.
    fn eval_node_expr(
        &self,
        expr: &Expr,
        graph: &mut DataflowGraph,
        bindings: &HashMap<String, NodeId>,
        env: &ExecEnv,
        memo: &mut LetMemo,
    ) -> Result<NodeId, String> {
        match expr {
            Expr::Var(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| format!("unbound `{name}`")),
            Expr::Lit(v) => {
                let key = format!("{:?}", v);
                if let Some(id) = memo.literals.get(&key) {
                    return Ok(id.clone());
                }
                let id = graph.add_literal(v.clone());
                memo.literals.insert(key, id.clone());
                Ok(id)
            }
            Expr::Call(name, args) => {
                let arg_ids: Vec<NodeId> = args
                    .iter()
                    .map(|a| self.eval_node_expr(a, graph, bindings, env, memo))
                    .collect::<Result<_, _>>()?;
                let key = (name.clone(), arg_ids.clone());
                if let Some(id) = memo.calls.get(&key) {
                    return Ok(id.clone());
                }
                let id = graph
                    .add_node(name, arg_ids, &self.registry, env)
                    .map_err(|e| e.to_string())?;
                memo.calls.insert(key, id.clone());
                Ok(id)
            }
            Expr::Cmp { .. } => Err("comparison is not allowed in a let".to_string()),
        }
    }

    /// Transduce an executed graph into an expanded graph plus its QCFG.
    ///
    /// The worklist starts at (start, root); each (type, node) pair is
    /// expanded at most once. A reachable pair with zero productions is a
    /// hard coverage error.
    pub fn transduce(
        &self,
        graph: &DataflowGraph,
        env: &ExecEnv,
        opts: TransduceOptions,
    ) -> Result<(DataflowGraph, Qcfg), TransduceError> {
        if !graph.is_executed() {
            return Err(TransduceError::Unexecuted);
        }
        let mut graph = graph.clone();
        let mut memo = LetMemo::default();
        let start = QcfgNonterminal {
            ty: self.pack.start.clone(),
            node: graph.root().clone(),
        };

        let mut productions: Vec<QcfgProduction> = Vec::new();
        let mut expanded: HashSet<QcfgNonterminal> = HashSet::new();
        let mut gaps: Vec<QcfgNonterminal> = Vec::new();
        let mut worklist: VecDeque<(QcfgNonterminal, usize)> = VecDeque::new();
        worklist.push_back((start.clone(), 0));
        expanded.insert(start.clone());

        while let Some((nt, depth)) = worklist.pop_front() {
            if depth > opts.max_depth {
                return Err(TransduceError::DepthExceeded(opts.max_depth));
            }
            let mut local: Vec<QcfgProduction> = Vec::new();
            for rule in self.pack.rules.iter().filter(|r| r.head == nt.ty) {
                if let Some(p) =
                    self.apply_rule_memo(rule, &mut graph, &nt.node, env, &mut memo)?
                {
                    local.push(p);
                }
            }
            if nt.ty.0 == "LEX" {
                if let Some(value) = graph.value(&nt.node) {
                    for rhs in lexicalize(value, env) {
                        local.push(QcfgProduction { lhs: nt.clone(), rhs });
                    }
                }
            }
            if local.is_empty() {
                gaps.push(nt.clone());
                continue;
            }
            for p in &local {
                for s in &p.rhs {
                    if let Symbol::Nonterminal(child) = s {
                        if expanded.insert(child.clone()) {
                            worklist.push_back((child.clone(), depth + 1));
                        }
                    }
                }
            }
            productions.extend(local);
        }

        if !gaps.is_empty() {
            gaps.sort();
            return Err(TransduceError::Coverage(gaps));
        }
        let grammar = Qcfg::new(start, productions);
        grammar.validate()?;
        Ok((graph, grammar))
    }
}

fn match_pattern(
    pattern: &Pattern,
    graph: &DataflowGraph,
    node: &NodeId,
    bindings: &mut HashMap<String, NodeId>,
) -> bool {
    let bind = |bindings: &mut HashMap<String, NodeId>, var: &str| -> bool {
        match bindings.get(var) {
            Some(existing) => existing == node,
            None => {
                bindings.insert(var.to_string(), node.clone());
                true
            }
        }
    };
    match pattern {
        Pattern::Wildcard => true,
        Pattern::Var(v) => bind(bindings, v),
        Pattern::Op { name, binding, args } => {
            let Some(n) = graph.node(node) else { return false };
            let op_matches = match &n.op {
                NodeOp::Call(call) => call == name,
                // a zero-arg op pattern may name a literal marker
                NodeOp::Literal(marker) => marker == name && args.is_empty(),
            };
            if !op_matches || n.args.len() != args.len() {
                return false;
            }
            if let Some(b) = binding {
                if !bind(bindings, b) {
                    return false;
                }
            }
            let child_ids = n.args.clone();
            args.iter()
                .zip(child_ids.iter())
                .all(|(pat, child)| match_pattern(pat, graph, child, bindings))
        }
    }
}

fn compare(op: CmpOp, a: &Value, b: &Value) -> Result<bool, String> {
    use std::cmp::Ordering;
    let ord: Option<Ordering> = match (a, b) {
        (Value::Integer(x), Value::Integer(y)) => Some(x.cmp(y)),
        (Value::Number(x), Value::Number(y)) => x.partial_cmp(y),
        (Value::Integer(x), Value::Number(y)) => (*x as f64).partial_cmp(y),
        (Value::Number(x), Value::Integer(y)) => x.partial_cmp(&(*y as f64)),
        (Value::Text(x), Value::Text(y)) => Some(x.cmp(y)),
        (Value::Boolean(x), Value::Boolean(y)) => Some(x.cmp(y)),
        (Value::Date(x), Value::Date(y)) => Some(x.cmp(y)),
        (Value::Time(x), Value::Time(y)) => Some(x.cmp(y)),
        (Value::DateTime(x), Value::DateTime(y)) => Some(x.cmp(y)),
        _ => None,
    };
    match (op, ord) {
        (CmpOp::Eq, _) => Ok(a == b),
        (CmpOp::Ne, _) => Ok(a != b),
        (_, None) => Err(format!(
            "cannot order {} against {}",
            a.tag(),
            b.tag()
        )),
        (CmpOp::Lt, Some(o)) => Ok(o == Ordering::Less),
        (CmpOp::Le, Some(o)) => Ok(o != Ordering::Greater),
        (CmpOp::Gt, Some(o)) => Ok(o == Ordering::Greater),
        (CmpOp::Ge, Some(o)) => Ok(o != Ordering::Less),
    }
}

/// Built-in lexicalizations for primitive values under `LEX` nonterminals.
/// Each returned sequence is one alternative production body.
pub fn lexicalize(value: &Value, env: &ExecEnv) -> Vec<Vec<Symbol>> {
    const SMALL: [&str; 12] = [
        "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
        "twelve",
    ];
    let words = |s: &str| -> Vec<Symbol> {
        s.split_whitespace().map(Symbol::t).collect()
    };
    match value {
        Value::Integer(n) => {
            let mut out = vec![words(&n.to_string())];
            if (1..=12).contains(n) {
                out.push(words(SMALL[(*n - 1) as usize]));
            }
            out
        }
        Value::Number(_) | Value::Boolean(_) => vec![words(&value.render_text())],
        Value::Text(s) => {
            let w = words(s);
            if w.is_empty() {
                vec![]
            } else {
                vec![w]
            }
        }
        Value::Date(d) => {
            let absolute = format!("on {} {}", month_name(d.month()), d.day());
            let today = env.now.date();
            let relative = if *d == today {
                Some("today")
            } else if *d == today + Days::new(1) {
                Some("tomorrow")
            } else {
                None
            };
            let mut out = Vec::new();
            if let Some(rel) = relative {
                out.push(words(rel));
            }
            out.push(words(&absolute));
            out
        }
        Value::Time(t) => vec![words(&time_words(*t))],
        Value::DateTime(dt) => {
            let d = dt.date();
            vec![words(&format!(
                "on {} {} at {}",
                month_name(d.month()),
                d.day(),
                time_words(dt.time())
            ))]
        }
        _ => vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Calendar;
    use crate::rules::parse_rules;
    use chrono::NaiveDateTime;

    fn env() -> ExecEnv {
        let calendar = Calendar::from_json(
            r#"[{"id":"e1","subject":"planning meeting",
                 "start":"2022-03-15T10:00:00","end":"2022-03-15T11:00:00",
                 "attendees":["Adam","Dan"]}]"#,
        )
        .unwrap();
        ExecEnv {
            now: NaiveDateTime::parse_from_str("2022-03-14T09:00", "%Y-%m-%dT%H:%M").unwrap(),
            calendar,
        }
    }

    fn fig2_graph(reg: &FunctionRegistry, env: &ExecEnv) -> DataflowGraph {
        let mut g =
            DataflowGraph::parse("(nonEmpty (findEventsOnDate (tomorrow)))", Some(reg)).unwrap();
        g.execute(reg, env).unwrap();
        g
    }

    const FIG3_RULE: &str = r#"
rule S on findEventsOnDate(date)
  let num = size(self)
  let event = first(self)
  say "I found {LEX <num>} event {PP <date>} . {EVENT <event>} ."
"#;

    #[test]
    fn apply_fig3_rule_to_fig2_graph() {
        let reg = FunctionRegistry::calendar_domain();
        let env = env();
        let pack = parse_rules(FIG3_RULE, Some(&reg)).unwrap();
        let td = Transducer::new(pack, reg.clone());
        let mut g = fig2_graph(&reg, &env);

        let prod = td
            .apply_rule(&td.pack.rules[0], &mut g, &"v1".into(), &env)
            .unwrap()
            .expect("rule should match v1");
        assert_eq!(prod.lhs, QcfgNonterminal::new("S", "v1"));
        assert_eq!(
            prod.rhs,
            vec![
                Symbol::t("I"),
                Symbol::t("found"),
                Symbol::nt("LEX", "v3"),
                Symbol::t("event"),
                Symbol::nt("PP", "v2"),
                Symbol::t("."),
                Symbol::nt("EVENT", "v4"),
                Symbol::t("."),
            ]
        );
        // new nodes v3 (size) and v4 (first) were added and executed
        assert_eq!(g.value(&"v3".into()), Some(&Value::Integer(1)));
        assert!(g.value(&"v4".into()).is_some());
    }

    #[test]
    fn rule_does_not_match_wrong_op() {
        let reg = FunctionRegistry::calendar_domain();
        let env = env();
        let pack = parse_rules(FIG3_RULE, Some(&reg)).unwrap();
        let td = Transducer::new(pack, reg.clone());
        let mut g = fig2_graph(&reg, &env);
        let before = g.len();
        let out = td
            .apply_rule(&td.pack.rules[0], &mut g, &"v2".into(), &env)
            .unwrap();
        assert!(out.is_none());
        assert_eq!(g.len(), before, "failed match must not extend the graph");
    }

    #[test]
    fn failing_guard_yields_none_without_extension() {
        let reg = FunctionRegistry::calendar_domain();
        let env = env();
        let src = r#"
rule S on findEventsOnDate(date)
  where size(self) == 2
  let event = first(self)
  say "two events {PP <date>} {EVENT <event>}"
"#;
        let pack = parse_rules(src, Some(&reg)).unwrap();
        let td = Transducer::new(pack, reg.clone());
        let mut g = fig2_graph(&reg, &env);
        let before = g.len();
        // fixture has exactly 1 event tomorrow, guard wants 2
        let out = td
            .apply_rule(&td.pack.rules[0], &mut g, &"v1".into(), &env)
            .unwrap();
        assert!(out.is_none());
        assert_eq!(g.len(), before);
    }

    #[test]
    fn transduce_minimal_rule() {
        let reg = FunctionRegistry::calendar_domain();
        let env = env();
        let pack = parse_rules("rule S on _ say \"ok\"", Some(&reg)).unwrap();
        let td = Transducer::new(pack, reg.clone());
        let g = fig2_graph(&reg, &env);
        let (_, grammar) = td.transduce(&g, &env, TransduceOptions::default()).unwrap();
        assert_eq!(grammar.productions.len(), 1);
        assert_eq!(grammar.enumerate(10), vec!["ok"]);
    }

    #[test]
    fn transduce_coverage_error_names_missing_pair() {
        let reg = FunctionRegistry::calendar_domain();
        let env = env();
        // EVENT has no rule anywhere
        let src = r#"
rule S on nonEmpty(list)
  let event = first(list)
  say "found {EVENT <event>}"
"#;
        let pack = parse_rules(src, Some(&reg)).unwrap();
        let td = Transducer::new(pack, reg.clone());
        let g = fig2_graph(&reg, &env);
        match td.transduce(&g, &env, TransduceOptions::default()) {
            Err(TransduceError::Coverage(nts)) => {
                assert_eq!(nts.len(), 1);
                assert_eq!(nts[0].ty.0, "EVENT");
            }
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn date_lexicalization_gives_relative_and_absolute() {
        let env = env();
        let tomorrow = Value::Date(env.now.date() + Days::new(1));
        let alts = lexicalize(&tomorrow, &env);
        let rendered: Vec<String> = alts
            .iter()
            .map(|rhs| {
                rhs.iter()
                    .map(|s| match s {
                        Symbol::Terminal(w) => w.clone(),
                        _ => unreachable!(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        assert_eq!(rendered, vec!["tomorrow", "on March 15"]);
    }

    #[test]
    fn integer_lexicalization() {
        let env = env();
        assert_eq!(lexicalize(&Value::Integer(1), &env).len(), 2);
        assert_eq!(lexicalize(&Value::Integer(37), &env).len(), 1);
    }

    #[test]
    fn transduce_alternatives_multiply_language() {
        let reg = FunctionRegistry::calendar_domain();
        let env = env();
        let src = r#"
rule S on nonEmpty(list)
  let event = first(list)
  say "found {EVENT <event>}"
rule EVENT on e say "a meeting"
rule EVENT on e
  let subject = eventSubject(e)
  say "the {LEX <subject>} event"
"#;
        let pack = parse_rules(src, Some(&reg)).unwrap();
        let td = Transducer::new(pack, reg.clone());
        let g = fig2_graph(&reg, &env);
        let (gbar, grammar) = td.transduce(&g, &env, TransduceOptions::default()).unwrap();
        let lang = grammar.enumerate(100);
        assert_eq!(lang.len(), 2);
        assert!(lang.contains(&"found a meeting".to_string()));
        assert!(lang.contains(&"found the planning meeting event".to_string()));
        // expanded graph keeps original nodes and values
        for node in g.nodes() {
            assert_eq!(gbar.value(&node.id), node.value.as_ref());
        }
        assert!(gbar.len() > g.len());
    }

    #[test]
    fn transduce_depth_bound_cuts_recursion() {
        let reg = FunctionRegistry::calendar_domain();
        let env = env();
        // S describes itself forever
        let src = "rule S on x say \"again {S <x>}\"";
        let pack = parse_rules(src, Some(&reg)).unwrap();
        let td = Transducer::new(pack, reg.clone());
        let g = fig2_graph(&reg, &env);
        // memoization keeps (S, v0) expanded once, so this terminates fine
        let (_, grammar) = td.transduce(&g, &env, TransduceOptions::default()).unwrap();
        assert_eq!(grammar.productions.len(), 1);
    }

    #[test]
    fn transduce_is_deterministic() {
        let reg = FunctionRegistry::calendar_domain();
        let env = env();
        let src = r#"
rule S on nonEmpty(list)
  let num = size(list)
  say "you have {LEX <num>} event"
"#;
        let pack = parse_rules(src, Some(&reg)).unwrap();
        let td = Transducer::new(pack, reg.clone());
        let g = fig2_graph(&reg, &env);
        let (_, g1) = td.transduce(&g, &env, TransduceOptions::default()).unwrap();
        let (_, g2) = td.transduce(&g, &env, TransduceOptions::default()).unwrap();
        assert_eq!(g1.to_json(), g2.to_json());
    }
}
