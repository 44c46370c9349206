//! Runtime values carried by dataflow graph nodes.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde_json::json;

/// A value produced by executing a dataflow node.
///
/// Lists are homogeneous in their outermost tag; record fields are kept
/// sorted so that JSON rendering is canonical.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Integer(i64),
    Text(String),
    Boolean(bool),
    Date(NaiveDate),
    Time(NaiveTime),
    DateTime(NaiveDateTime),
    List(Vec<Value>),
    Record { tag: String, fields: BTreeMap<String, Value> },
    Null,
}

/// Outermost type tag of a value, used for list homogeneity and signature checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueTag {
    Number,
    Integer,
    Text,
    Boolean,
    Date,
    Time,
    DateTime,
    List,
    Record,
    Null,
}

impl fmt::Display for ValueTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueTag::Number => "Number",
            ValueTag::Integer => "Integer",
            ValueTag::Text => "Text",
            ValueTag::Boolean => "Boolean",
            ValueTag::Date => "Date",
            ValueTag::Time => "Time",
            ValueTag::DateTime => "DateTime",
            ValueTag::List => "List",
            ValueTag::Record => "Record",
            ValueTag::Null => "Null",
        };
        f.write_str(s)
    }
}

impl Value {
    pub fn tag(&self) -> ValueTag {
        match self {
            Value::Number(_) => ValueTag::Number,
            Value::Integer(_) => ValueTag::Integer,
            Value::Text(_) => ValueTag::Text,
            Value::Boolean(_) => ValueTag::Boolean,
            Value::Date(_) => ValueTag::Date,
            Value::Time(_) => ValueTag::Time,
            Value::DateTime(_) => ValueTag::DateTime,
            Value::List(_) => ValueTag::List,
            Value::Record { .. } => ValueTag::Record,
            Value::Null => ValueTag::Null,
        }
    }

    /// True for values that the built-in lexicalization rules can describe.
    pub fn is_primitive(&self) -> bool {
        matches!(
            self,
            Value::Number(_)
                | Value::Integer(_)
                | Value::Text(_)
                | Value::Boolean(_)
                | Value::Date(_)
                | Value::Time(_)
                | Value::DateTime(_)
        )
    }

    /// Canonical JSON rendering: record keys sorted, dates ISO-8601.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Number(x) => json!(x),
            Value::Integer(n) => json!(n),
            Value::Text(s) => json!(s),
            Value::Boolean(b) => json!(b),
            Value::Date(d) => json!(d.format("%Y-%m-%d").to_string()),
            Value::Time(t) => json!(t.format("%H:%M").to_string()),
            Value::DateTime(dt) => json!(dt.format("%Y-%m-%dT%H:%M").to_string()),
            Value::List(items) => {
                serde_json::Value::Array(items.iter().map(Value::to_json).collect())
            }
            Value::Record { tag, fields } => {
                let mut map = serde_json::Map::new();
                map.insert("type".to_string(), json!(tag));
                for (k, v) in fields {
                    map.insert(k.clone(), v.to_json());
                }
                serde_json::Value::Object(map)
            }
            Value::Null => serde_json::Value::Null,
        }
    }

    /// Plain-text rendering used when a value is copied verbatim into a
    /// response. Matches `to_json` for scalars modulo string quoting.
    pub fn render_text(&self) -> String {
        match self {
            Value::Text(s) => s.clone(),
            Value::Number(x) => format!("{x}"),
            Value::Integer(n) => format!("{n}"),
            Value::Boolean(b) => format!("{b}"),
            Value::Date(d) => d.format("%Y-%m-%d").to_string(),
            Value::Time(t) => t.format("%H:%M").to_string(),
            Value::DateTime(dt) => dt.format("%Y-%m-%dT%H:%M").to_string(),
            other => other.to_json().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_json_has_sorted_keys() {
        let mut fields = BTreeMap::new();
        fields.insert("subject".to_string(), Value::Text("standup".into()));
        fields.insert("id".to_string(), Value::Text("e1".into()));
        let v = Value::Record { tag: "Event".into(), fields };
        let rendered = serde_json::to_string(&v.to_json()).unwrap();
        assert_eq!(rendered, r#"{"id":"e1","subject":"standup","type":"Event"}"#);
    }

    #[test]
    fn date_renders_iso() {
        let d = Value::Date(NaiveDate::from_ymd_opt(2022, 3, 15).unwrap());
        assert_eq!(d.render_text(), "2022-03-15");
        assert_eq!(d.to_json(), json!("2022-03-15"));
    }
}
