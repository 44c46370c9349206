//! Executable dataflow graphs: S-expression parsing, execution, extension,
//! and serialization.

use std::collections::{HashMap, HashSet};
use std::fmt;

use chrono::NaiveDate;
use thiserror::Error;

use crate::registry::{ExecEnv, FnError, FunctionRegistry};
use crate::value::{Value, ValueTag};

/// Stable node identifier, e.g. `v0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub String);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

/// Node label: a registry function call, or a literal marker as written
/// in the source text (`Number`, `Integer`, `Text`, `Boolean`, `Date`).
#[derive(Debug, Clone, PartialEq)]
pub enum NodeOp {
    Call(String),
    Literal(String),
}

impl NodeOp {
    pub fn call_name(&self) -> Option<&str> {
        match self {
            NodeOp::Call(name) => Some(name),
            NodeOp::Literal(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub op: NodeOp,
    pub args: Vec<NodeId>,
    pub value: Option<Value>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("syntax error at line {line}, col {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown function `{name}`")]
    UnknownFunction { name: String },
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("duplicate node id `{0}`")]
    DuplicateId(NodeId),
    #[error("graph contains a cycle through `{0}`")]
    Cycle(NodeId),
    #[error("node {node}: {source}")]
    Execution { node: NodeId, source: FnError },
    #[error("graph has not been executed")]
    Unexecuted,
    #[error("literal node `{0}` has no value")]
    LiteralWithoutValue(NodeId),
}

/// A computation DAG. Nodes are stored in insertion order; fresh ids added
/// by transduction continue the `v`-numbering of the host graph.
#[derive(Debug, Clone)]
pub struct DataflowGraph {
    nodes: Vec<Node>,
    index: HashMap<NodeId, usize>,
    root: NodeId,
    executed: bool,
}

impl DataflowGraph {
    pub fn root(&self) -> &NodeId {
        &self.root
    }

    pub fn is_executed(&self) -> bool {
        self.executed
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: &NodeId) -> Option<&Value> {
        self.node(id).and_then(|n| n.value.as_ref())
    }

    fn insert(&mut self, node: Node) -> Result<(), GraphError> {
        if self.index.contains_key(&node.id) {
            return Err(GraphError::DuplicateId(node.id));
        }
        self.index.insert(node.id.clone(), self.nodes.len());
        self.nodes.push(node);
        Ok(())
    }

    /// Smallest `vN` not yet taken.
    fn fresh_id(&self) -> NodeId {
        let mut n = self.nodes.len();
        loop {
            let id = NodeId(format!("v{n}"));
            if !self.index.contains_key(&id) {
                return id;
            }
            n += 1;
        }
    }

    /// Parse an S-expression into an unexecuted graph. Node ids are assigned
    /// in pre-order (`v0`, `v1`, ...) unless written explicitly as `op@vN`.
    /// If a registry is supplied, call names are validated against it.
    pub fn parse(text: &str, registry: Option<&FunctionRegistry>) -> Result<Self, GraphError> {
        let mut parser = SexprParser::new(text);
        let tree = parser.parse_expr()?;
        parser.expect_end()?;

        let mut graph = DataflowGraph {
            nodes: Vec::new(),
            index: HashMap::new(),
            root: NodeId("v0".into()),
            executed: false,
        };
        let explicit: HashSet<NodeId> = collect_explicit_ids(&tree);
        let mut counter = 0usize;
        let root = build_nodes(&tree, &mut graph, &explicit, &mut counter, registry)?;
        graph.root = root;
        Ok(graph)
    }

    /// Execute every node reachable from the root, in topological order.
    pub fn execute(&mut self, registry: &FunctionRegistry, env: &ExecEnv) -> Result<(), GraphError> {
        let order = self.topo_order_from(&self.root.clone())?;
        for id in order {
            self.eval_node(&id, registry, env)?;
        }
        self.executed = true;
        Ok(())
    }

    fn eval_node(
        &mut self,
        id: &NodeId,
        registry: &FunctionRegistry,
        env: &ExecEnv,
    ) -> Result<(), GraphError> {
        let idx = *self.index.get(id).ok_or_else(|| GraphError::UnknownNode(id.clone()))?;
        if self.nodes[idx].value.is_some() {
            return Ok(());
        }
        match self.nodes[idx].op.clone() {
            NodeOp::Literal(_) => Err(GraphError::LiteralWithoutValue(id.clone())),
            NodeOp::Call(name) => {
                let args: Vec<Value> = self.nodes[idx]
                    .args
                    .clone()
                    .iter()
                    .map(|a| {
                        self.value(a)
                            .cloned()
                            .ok_or_else(|| GraphError::UnknownNode(a.clone()))
                    })
                    .collect::<Result<_, _>>()?;
                let value = registry
                    .call(&name, &args, env)
                    .map_err(|source| GraphError::Execution { node: id.clone(), source })?;
                self.nodes[idx].value = Some(value);
                Ok(())
            }
        }
    }

    /// Append a fresh function-call node. On an executed graph the node is
    /// evaluated immediately (its arguments are evaluated on demand).
    pub fn add_node(
        &mut self,
        op: &str,
        args: Vec<NodeId>,
        registry: &FunctionRegistry,
        env: &ExecEnv,
    ) -> Result<NodeId, GraphError> {
        let entry = registry
            .entry(op)
            .ok_or_else(|| GraphError::UnknownFunction { name: op.to_string() })?;
        if args.len() != entry.arity {
            return Err(GraphError::Execution {
                node: self.fresh_id(),
                source: FnError::Arity {
                    name: op.to_string(),
                    expected: entry.arity,
                    got: args.len(),
                },
            });
        }
        for a in &args {
            if !self.index.contains_key(a) {
                return Err(GraphError::UnknownNode(a.clone()));
            }
        }
        let id = self.fresh_id();
        self.insert(Node {
            id: id.clone(),
            op: NodeOp::Call(op.to_string()),
            args: args.clone(),
            value: None,
        })?;
        if self.executed {
            for a in &args {
                self.eval_node(&a.clone(), registry, env)?;
            }
            self.eval_node(&id, registry, env)?;
        }
        Ok(id)
    }

    /// Append a fresh literal node with a pre-set value.
    pub fn add_literal(&mut self, value: Value) -> NodeId {
        let id = self.fresh_id();
        let marker = literal_marker(&value);
        self.insert(Node {
            id: id.clone(),
            op: NodeOp::Literal(marker.to_string()),
            args: vec![],
            value: Some(value),
        })
        .expect("fresh id cannot collide");
        id
    }

    fn topo_order_from(&self, start: &NodeId) -> Result<Vec<NodeId>, GraphError> {
        // post-order DFS with an explicit on-stack set for cycle detection
        let mut order = Vec::new();
        let mut done: HashSet<NodeId> = HashSet::new();
        let mut on_stack: HashSet<NodeId> = HashSet::new();
        let mut stack: Vec<(NodeId, usize)> = vec![(start.clone(), 0)];
        on_stack.insert(start.clone());
        while let Some((id, child)) = stack.pop() {
            let node = self.node(&id).ok_or_else(|| GraphError::UnknownNode(id.clone()))?;
            if child < node.args.len() {
                let next = node.args[child].clone();
                stack.push((id.clone(), child + 1));
                if on_stack.contains(&next) {
                    return Err(GraphError::Cycle(next));
                }
                if !done.contains(&next) {
                    on_stack.insert(next.clone());
                    stack.push((next, 0));
                }
            } else {
                on_stack.remove(&id);
                if done.insert(id.clone()) {
                    order.push(id);
                }
            }
        }
        Ok(order)
    }

    /// Render the expression tree rooted at the graph root back to an
    /// S-expression. `parse(serialize(g))` is isomorphic to `g` for parsed
    /// graphs.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        self.write_sexpr(&self.root, &mut out);
        out
    }

    fn write_sexpr(&self, id: &NodeId, out: &mut String) {
        let node = self.node(id).expect("serialize: dangling node id");
        out.push('(');
        match &node.op {
            NodeOp::Literal(marker) => {
                out.push_str(marker);
                out.push(' ');
                out.push_str(&render_literal(node.value.as_ref().expect("literal value")));
            }
            NodeOp::Call(name) => {
                out.push_str(name);
                for a in &node.args {
                    out.push(' ');
                    self.write_sexpr(a, out);
                }
            }
        }
        out.push(')');
    }

    /// Canonical JSON rendering of the root's execution result.
    pub fn render_result_json(&self) -> Result<String, GraphError> {
        if !self.executed {
            return Err(GraphError::Unexecuted);
        }
        let v = self.value(&self.root).ok_or(GraphError::Unexecuted)?;
        Ok(serde_json::to_string(&v.to_json()).expect("canonical json"))
    }
}

fn literal_marker(value: &Value) -> &'static str {
    match value.tag() {
        ValueTag::Number => "Number",
        ValueTag::Integer => "Integer",
        ValueTag::Text => "Text",
        ValueTag::Boolean => "Boolean",
        ValueTag::Date => "Date",
        _ => "Text",
    }
}

fn render_literal(value: &Value) -> String {
    match value {
        Value::Text(s) => {
            let mut out = String::from("\"");
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    c => out.push(c),
                }
            }
            out.push('"');
            out
        }
        Value::Number(x) => {
            let s = format!("{x}");
            if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
                s
            } else {
                format!("{s}.0")
            }
        }
        other => other.render_text(),
    }
}

// ---------------------------------------------------------------------------
// S-expression parsing

const LITERAL_MARKERS: [&str; 5] = ["Number", "Integer", "Text", "Boolean", "Date"];

#[derive(Debug)]
enum Tree {
    Call { name: String, id: Option<NodeId>, args: Vec<Tree> },
    Literal { marker: String, id: Option<NodeId>, value: Value },
}

fn collect_explicit_ids(tree: &Tree) -> HashSet<NodeId> {
    let mut out = HashSet::new();
    let mut stack = vec![tree];
    while let Some(t) = stack.pop() {
        match t {
            Tree::Call { id, args, .. } => {
                if let Some(id) = id {
                    out.insert(id.clone());
                }
                stack.extend(args.iter());
            }
            Tree::Literal { id, .. } => {
                if let Some(id) = id {
                    out.insert(id.clone());
                }
            }
        }
    }
    out
}

fn build_nodes(
    tree: &Tree,
    graph: &mut DataflowGraph,
    explicit: &HashSet<NodeId>,
    counter: &mut usize,
    registry: Option<&FunctionRegistry>,
) -> Result<NodeId, GraphError> {
    let assign = |counter: &mut usize, id: &Option<NodeId>| -> NodeId {
        if let Some(id) = id {
            return id.clone();
        }
        loop {
            let cand = NodeId(format!("v{counter}"));
            *counter += 1;
            if !explicit.contains(&cand) {
                return cand;
            }
        }
    };
    match tree {
        Tree::Literal { marker, id, value } => {
            let id = assign(counter, id);
            graph.insert(Node {
                id: id.clone(),
                op: NodeOp::Literal(marker.clone()),
                args: vec![],
                value: Some(value.clone()),
            })?;
            Ok(id)
        }
        Tree::Call { name, id, args } => {
            if let Some(reg) = registry {
                if !reg.contains(name) {
                    return Err(GraphError::UnknownFunction { name: name.clone() });
                }
            }
            let id = assign(counter, id);
            // pre-order: parent id before children
            graph.insert(Node {
                id: id.clone(),
                op: NodeOp::Call(name.clone()),
                args: vec![],
                value: None,
            })?;
            let mut arg_ids = Vec::with_capacity(args.len());
            for a in args {
                arg_ids.push(build_nodes(a, graph, explicit, counter, registry)?);
            }
            let idx = graph.index[&id];
            graph.nodes[idx].args = arg_ids;
            Ok(id)
        }
    }
}

struct SexprParser<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
}

impl<'a> SexprParser<'a> {
    fn new(text: &'a str) -> Self {
        SexprParser { chars: text.chars().peekable(), line: 1, col: 1 }
    }

    fn err(&self, msg: impl Into<String>) -> GraphError {
        GraphError::Syntax { line: self.line, col: self.col, msg: msg.into() }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next();
        match c {
            Some('\n') => {
                self.line += 1;
                self.col = 1;
            }
            Some(_) => self.col += 1,
            None => {}
        }
        c
    }

    fn skip_ws(&mut self) {
        while matches!(self.chars.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn parse_expr(&mut self) -> Result<Tree, GraphError> {
        self.skip_ws();
        match self.bump() {
            Some('(') => {}
            Some(c) => return Err(self.err(format!("expected `(`, found `{c}`"))),
            None => return Err(self.err("unexpected end of input")),
        }
        self.skip_ws();
        let head = self.parse_atom()?;
        let (name, id) = match head.split_once('@') {
            Some((name, id)) => (name.to_string(), Some(NodeId(id.to_string()))),
            None => (head, None),
        };
        if name.is_empty() {
            return Err(self.err("empty operator name"));
        }
        if LITERAL_MARKERS.contains(&name.as_str()) {
            self.skip_ws();
            let value = self.parse_literal(&name)?;
            self.skip_ws();
            match self.bump() {
                Some(')') => Ok(Tree::Literal { marker: name, id, value }),
                _ => Err(self.err("expected `)` after literal")),
            }
        } else {
            let mut args = Vec::new();
            loop {
                self.skip_ws();
                match self.chars.peek() {
                    Some(')') => {
                        self.bump();
                        return Ok(Tree::Call { name, id, args });
                    }
                    Some('(') => args.push(self.parse_expr()?),
                    Some(c) => {
                        let c = *c;
                        return Err(self.err(format!("expected `(` or `)`, found `{c}`")));
                    }
                    None => return Err(self.err("unclosed `(`")),
                }
            }
        }
    }

    fn parse_atom(&mut self) -> Result<String, GraphError> {
        let mut out = String::new();
        while let Some(&c) = self.chars.peek() {
            if c.is_whitespace() || c == '(' || c == ')' || c == '"' {
                break;
            }
            out.push(c);
            self.bump();
        }
        if out.is_empty() {
            return Err(self.err("expected an atom"));
        }
        Ok(out)
    }

    fn parse_string(&mut self) -> Result<String, GraphError> {
        match self.bump() {
            Some('"') => {}
            _ => return Err(self.err("expected `\"`")),
        }
        let mut out = String::new();
        loop {
            match self.bump() {
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some(c) => return Err(self.err(format!("bad escape `\\{c}`"))),
                    None => return Err(self.err("unterminated string")),
                },
                Some(c) => out.push(c),
                None => return Err(self.err("unterminated string")),
            }
        }
    }

    fn parse_literal(&mut self, marker: &str) -> Result<Value, GraphError> {
        match marker {
            "Text" => Ok(Value::Text(self.parse_string()?)),
            "Number" => {
                let atom = self.parse_atom()?;
                // integral spelling of a Number yields an Integer value
                if let Ok(n) = atom.parse::<i64>() {
                    return Ok(Value::Integer(n));
                }
                atom.parse::<f64>()
                    .map(Value::Number)
                    .map_err(|_| self.err(format!("bad number `{atom}`")))
            }
            "Integer" => {
                let atom = self.parse_atom()?;
                atom.parse::<i64>()
                    .map(Value::Integer)
                    .map_err(|_| self.err(format!("bad integer `{atom}`")))
            }
            "Boolean" => {
                let atom = self.parse_atom()?;
                match atom.as_str() {
                    "true" => Ok(Value::Boolean(true)),
                    "false" => Ok(Value::Boolean(false)),
                    _ => Err(self.err(format!("bad boolean `{atom}`"))),
                }
            }
            "Date" => {
                let atom = self.parse_atom()?;
                NaiveDate::parse_from_str(&atom, "%Y-%m-%d")
                    .map(Value::Date)
                    .map_err(|_| self.err(format!("bad date `{atom}`, expected YYYY-MM-DD")))
            }
            _ => unreachable!("not a literal marker"),
        }
    }

    fn expect_end(&mut self) -> Result<(), GraphError> {
        self.skip_ws();
        match self.chars.peek() {
            None => Ok(()),
            Some(c) => {
                let c = *c;
                Err(self.err(format!("trailing input starting at `{c}`")))
            }
        }
    }
}
