use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// One logged interaction with raw (unmapped) identifiers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub user: String,
    pub item: String,
    pub category: String,
    pub timestamp: i64,
    pub event: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BehaviorLog {
    pub records: Vec<Record>,
}

impl BehaviorLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Column layout of a text log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormatSpec {
    pub delimiter: char,
    pub user_col: usize,
    pub item_col: usize,
    pub category_col: usize,
    pub timestamp_col: usize,
    pub event_col: Option<usize>,
    /// Event values kept as clicks. Empty keeps every event.
    pub click_events: Vec<String>,
}

impl Default for FormatSpec {
    fn default() -> Self {
        Self {
            delimiter: '\t',
            user_col: 0,
            item_col: 1,
            category_col: 2,
            timestamp_col: 3,
            event_col: None,
            click_events: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParsedLog {
    pub log: BehaviorLog,
    pub malformed: usize,
    /// Non-empty lines seen, including malformed and filtered ones.
    pub lines: usize,
    /// Well-formed lines whose event was not a click.
    pub dropped_events: usize,
}

/// Largest tolerated share of malformed lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;
const MALFORMED_SAMPLES: usize = 5;

pub fn parse_behavior_log(path: &Path, spec: &FormatSpec) -> Result<ParsedLog> {
    let text = fs::read_to_string(path)?;
    parse_behavior_str(&text, spec)
}

pub fn parse_behavior_str(text: &str, spec: &FormatSpec) -> Result<ParsedLog> {
    let mut out = ParsedLog::default();
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        out.lines += 1;
        match parse_line(line, spec) {
            Some(rec) => {
                let keep = spec.click_events.is_empty()
                    || rec.event.as_ref().is_some_and(|e| spec.click_events.iter().any(|c| c == e));
                if keep {
                    out.log.records.push(rec);
                } else {
                    out.dropped_events += 1;
                }
            }
            None => {
                out.malformed += 1;
                if samples.len() < MALFORMED_SAMPLES {
                    samples.push(format!("line {}: {line}", lineno + 1));
                }
            }
        }
    }
    if out.malformed as f64 > MAX_MALFORMED_FRACTION * out.lines as f64 {
        return Err(Error::Parse {
            malformed: out.malformed,
            total: out.lines,
            samples,
        });
    }
    Ok(out)
}

fn parse_line(line: &str, spec: &FormatSpec) -> Option<Record> {
    let fields: Vec<&str> = line.split(spec.delimiter).map(str::trim).collect();
    if fields.len() < 4 {
        return None;
    }
    let get = |c: usize| fields.get(c).copied().filter(|f| !f.is_empty());
    let event = match spec.event_col {
        Some(c) => Some(get(c)?.to_string()),
        None => None,
    };
    Some(Record {
        user: get(spec.user_col)?.to_string(),
        item: get(spec.item_col)?.to_string(),
        category: get(spec.category_col)?.to_string(),
        timestamp: get(spec.timestamp_col)?.parse().ok()?,
        event,
    })
}
