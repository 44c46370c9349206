//! Domain function registry and the in-memory calendar environment.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{Value, ValueTag};

#[derive(Debug, Error)]
pub enum FnError {
    #[error("arity mismatch: {name} expects {expected} args, got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("type mismatch: {name} arg {index} expects {expected}, got {got}")]
    Type { name: String, index: usize, expected: ValueTag, got: ValueTag },
    #[error("unknown function `{0}`")]
    Unknown(String),
    #[error("{0}")]
    Runtime(String),
}

/// One calendar event from the fixture database.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CalendarEvent {
    pub id: String,
    pub subject: String,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    pub attendees: Vec<String>,
}

/// The fixture calendar the domain functions query.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Calendar {
    pub events: Vec<CalendarEvent>,
}

impl Calendar {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let events: Vec<CalendarEvent> = serde_json::from_str(text)?;
        Ok(Calendar { events })
    }

    pub fn events_on(&self, date: NaiveDate) -> Vec<&CalendarEvent> {
        self.events.iter().filter(|e| e.start.date() == date).collect()
    }
}

/// Execution context: the reference timestamp and the fixture database.
/// `now` is always explicit so that date-relative functions are reproducible.
#[derive(Debug, Clone)]
pub struct ExecEnv {
    pub now: NaiveDateTime,
    pub calendar: Calendar,
}

type DomainFn = Arc<dyn Fn(&[Value], &ExecEnv) -> Result<Value, FnError> + Send + Sync>;

#[derive(Clone)]
pub struct FunctionEntry {
    pub arity: usize,
    /// Expected outermost tag per argument; `None` accepts any tag.
    pub arg_tags: Vec<Option<ValueTag>>,
    pub result_tag: ValueTag,
    func: DomainFn,
}

/// Immutable name → implementation table; shared read-only once built.
#[derive(Clone, Default)]
pub struct FunctionRegistry {
    entries: BTreeMap<String, FunctionEntry>,
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(
        &mut self,
        name: &str,
        arg_tags: Vec<Option<ValueTag>>,
        result_tag: ValueTag,
        func: F,
    ) where
        F: Fn(&[Value], &ExecEnv) -> Result<Value, FnError> + Send + Sync + 'static,
    {
        self.entries.insert(
            name.to_string(),
            FunctionEntry {
                arity: arg_tags.len(),
                arg_tags,
                result_tag,
                func: Arc::new(func),
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&FunctionEntry> {
        self.entries.get(name)
    }

    pub fn call(&self, name: &str, args: &[Value], env: &ExecEnv) -> Result<Value, FnError> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| FnError::Unknown(name.to_string()))?;
        if args.len() != entry.arity {
            return Err(FnError::Arity {
                name: name.to_string(),
                expected: entry.arity,
                got: args.len(),
            });
        }
        for (i, (arg, want)) in args.iter().zip(&entry.arg_tags).enumerate() {
            if let Some(want) = want {
                if arg.tag() != *want {
                    return Err(FnError::Type {
                        name: name.to_string(),
                        index: i,
                        expected: *want,
                        got: arg.tag(),
                    });
                }
            }
        }
        (entry.func)(args, env)
    }

    /// The calendar-domain function pack.
    pub fn calendar_domain() -> Self {
        use ValueTag as T;
        let mut reg = FunctionRegistry::new();

        reg.register("today", vec![], T::Date, |_, env| {
            Ok(Value::Date(env.now.date()))
        });
        reg.register("tomorrow", vec![], T::Date, |_, env| {
            Ok(Value::Date(env.now.date() + chrono::Days::new(1)))
        });
        reg.register(
            "addDays",
            vec![Some(T::Date), Some(T::Integer)],
            T::Date,
            |args, _| {
                let (Value::Date(d), Value::Integer(n)) = (&args[0], &args[1]) else {
                    unreachable!()
                };
                let shifted = if *n >= 0 {
                    *d + chrono::Days::new(*n as u64)
                } else {
                    *d - chrono::Days::new((-n) as u64)
                };
                Ok(Value::Date(shifted))
            },
        );
        reg.register("findEventsOnDate", vec![Some(T::Date)], T::List, |args, env| {
            let Value::Date(d) = &args[0] else { unreachable!() };
            let events = env
                .calendar
                .events_on(*d)
                .into_iter()
                .map(event_record)
                .collect();
            Ok(Value::List(events))
        });
        reg.register("nonEmpty", vec![Some(T::List)], T::Boolean, |args, _| {
            let Value::List(xs) = &args[0] else { unreachable!() };
            Ok(Value::Boolean(!xs.is_empty()))
        });
        reg.register("size", vec![Some(T::List)], T::Integer, |args, _| {
            let Value::List(xs) = &args[0] else { unreachable!() };
            Ok(Value::Integer(xs.len() as i64))
        });
        reg.register("first", vec![Some(T::List)], T::Record, |args, _| {
            let Value::List(xs) = &args[0] else { unreachable!() };
            xs.first()
                .cloned()
                .ok_or_else(|| FnError::Runtime("first() on empty list".into()))
        });
        reg.register("rest", vec![Some(T::List)], T::List, |args, _| {
            let Value::List(xs) = &args[0] else { unreachable!() };
            if xs.is_empty() {
                return Err(FnError::Runtime("rest() on empty list".into()));
            }
            Ok(Value::List(xs[1..].to_vec()))
        });
        reg.register("identity", vec![None], T::Null, |args, _| Ok(args[0].clone()));

        reg.register("eventSubject", vec![Some(T::Record)], T::Text, |args, _| {
            event_field(&args[0], "subject")
        });
        reg.register("eventStart", vec![Some(T::Record)], T::DateTime, |args, _| {
            event_field(&args[0], "start")
        });
        reg.register("eventEnd", vec![Some(T::Record)], T::DateTime, |args, _| {
            event_field(&args[0], "end")
        });
        reg.register("eventDate", vec![Some(T::Record)], T::Date, |args, _| {
            match event_field(&args[0], "start")? {
                Value::DateTime(dt) => Ok(Value::Date(dt.date())),
                other => Err(FnError::Runtime(format!(
                    "event start is {}, not a datetime",
                    other.tag()
                ))),
            }
        });
        reg.register("eventAttendees", vec![Some(T::Record)], T::List, |args, _| {
            event_field(&args[0], "attendees")
        });
        reg.register("eventTimeSpan", vec![Some(T::Record)], T::Text, |args, _| {
            let (start, end) = match (
                event_field(&args[0], "start")?,
                event_field(&args[0], "end")?,
            ) {
                (Value::DateTime(s), Value::DateTime(e)) => (s, e),
                _ => return Err(FnError::Runtime("event start/end are not datetimes".into())),
            };
            Ok(Value::Text(time_span_words(start.time(), end.time())))
        });
        reg.register(
            "createEvent",
            vec![Some(T::Text), Some(T::DateTime), Some(T::DateTime)],
            T::Record,
            |args, _| {
                let (Value::Text(subject), Value::DateTime(start), Value::DateTime(end)) =
                    (&args[0], &args[1], &args[2])
                else {
                    unreachable!()
                };
                let mut fields = BTreeMap::new();
                fields.insert("id".to_string(), Value::Text("new".into()));
                fields.insert("subject".to_string(), Value::Text(subject.clone()));
                fields.insert("start".to_string(), Value::DateTime(*start));
                fields.insert("end".to_string(), Value::DateTime(*end));
                fields.insert("attendees".to_string(), Value::List(vec![]));
                Ok(Value::Record { tag: "Event".into(), fields })
            },
        );

        reg
    }
}

fn event_record(e: &CalendarEvent) -> Value {
    let mut fields = BTreeMap::new();
    fields.insert("id".to_string(), Value::Text(e.id.clone()));
    fields.insert("subject".to_string(), Value::Text(e.subject.clone()));
    fields.insert("start".to_string(), Value::DateTime(e.start));
    fields.insert("end".to_string(), Value::DateTime(e.end));
    fields.insert(
        "attendees".to_string(),
        Value::List(e.attendees.iter().map(|a| Value::Text(a.clone())).collect()),
    );
    Value::Record { tag: "Event".into(), fields }
}

fn event_field(v: &Value, field: &str) -> Result<Value, FnError> {
    match v {
        Value::Record { tag, fields } if tag == "Event" => fields
            .get(field)
            .cloned()
            .ok_or_else(|| FnError::Runtime(format!("Event record missing field `{field}`"))),
        other => Err(FnError::Runtime(format!(
            "expected an Event record, got {}",
            other.tag()
        ))),
    }
}

/// Spoken rendering of a clock time: "10 am", "1 : 30 pm".
pub fn time_words(t: chrono::NaiveTime) -> String {
    let (is_pm, hr12) = t.hour12();
    let meridiem = if is_pm { "pm" } else { "am" };
    if t.minute() == 0 {
        format!("{hr12} {meridiem}")
    } else {
        format!("{hr12} : {:02} {meridiem}", t.minute())
    }
}

/// Spoken rendering of a time span: "10 - 11 am" when the meridiem is shared
/// and both ends are on the hour, otherwise both ends spelled in full.
pub fn time_span_words(start: chrono::NaiveTime, end: chrono::NaiveTime) -> String {
    let (s_pm, s_hr) = start.hour12();
    let (e_pm, e_hr) = end.hour12();
    if s_pm == e_pm && start.minute() == 0 && end.minute() == 0 {
        let meridiem = if s_pm { "pm" } else { "am" };
        format!("{s_hr} - {e_hr} {meridiem}")
    } else {
        format!("{} - {}", time_words(start), time_words(end))
    }
}

pub fn month_name(month: u32) -> &'static str {
    [
        "January", "February", "March", "April", "May", "June", "July", "August", "September",
        "October", "November", "December",
    ][(month - 1) as usize]
}
