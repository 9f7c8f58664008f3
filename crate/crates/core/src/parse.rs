//! Structured-completion parser with three fallback strategies: direct parse,
//! first fenced code block, and the longest balanced brace span.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::{Map, Value};

use crate::model::{
    citations, parse_iso_date, Completion, EvidenceItem, ParseFailure, ParseFailureReason, PredictionValue,
    TaskKind,
};

fn fence_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"```[A-Za-z0-9_+-]*[ \t]*\r?\n?([\s\S]*?)```").expect("valid regex"))
}

/// Contents of the first fenced code block, if any.
pub fn first_fenced_block(raw: &str) -> Option<&str> {
    fence_regex().captures(raw).and_then(|c| c.get(1)).map(|m| m.as_str())
}

/// Longest balanced `{...}` span, ignoring braces inside JSON strings.
pub fn longest_brace_span(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut best: Option<(usize, usize)> = None;
    let mut start = 0;
    while let Some(off) = raw[start..].find('{') {
        let s = start + off;
        match balanced_end(bytes, s) {
            Some(e) => {
                if best.is_none_or(|(bs, be)| e - s > be - bs) {
                    best = Some((s, e));
                }
                start = e + 1;
            }
            None => start = s + 1,
        }
    }
    best.map(|(s, e)| &raw[s..=e])
}

fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_str {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn as_object(text: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(text.trim()) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

/// Parse raw model output into a [`Completion`].
pub fn parse_completion(raw: &str, task_kind: TaskKind) -> Result<Completion, ParseFailure> {
    let raw_length = raw.chars().count();
    let fail = |reason, detail: String| ParseFailure { reason, raw_length, detail };

    let object = as_object(raw)
        .or_else(|| first_fenced_block(raw).and_then(as_object))
        .or_else(|| longest_brace_span(raw).and_then(as_object));

    let Some(object) = object else {
        return Err(if raw.contains('{') {
            fail(ParseFailureReason::Malformed, "no strategy produced a JSON object".into())
        } else {
            fail(ParseFailureReason::NoObjectFound, "no brace-delimited object".into())
        });
    };

    validate(&object, task_kind, raw_length).map_err(|d| fail(ParseFailureReason::SchemaViolation, d))
}

fn validate(obj: &Map<String, Value>, kind: TaskKind, raw_length: usize) -> Result<Completion, String> {
    let evidence_raw = obj
        .get("evidence")
        .and_then(Value::as_array)
        .ok_or("missing `evidence` array")?;

    let mut seen = HashSet::new();
    let mut evidence = Vec::with_capacity(evidence_raw.len());
    for (pos, item) in evidence_raw.iter().enumerate() {
        let item = item.as_object().ok_or_else(|| format!("evidence[{pos}] is not an object"))?;
        let index = item
            .get("id")
            .and_then(Value::as_u64)
            .filter(|&i| i >= 1 && i <= u32::MAX as u64)
            .ok_or_else(|| format!("evidence[{pos}].id must be a positive integer"))? as u32;
        if !seen.insert(index) {
            return Err(format!("duplicate evidence id {index}"));
        }
        let fact = item
            .get("fact")
            .and_then(Value::as_str)
            .ok_or_else(|| format!("evidence[{pos}].fact must be a string"))?
            .to_owned();
        let declared_date = match item.get("source_date") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => parse_iso_date(s),
            Some(_) => return Err(format!("evidence[{pos}].source_date must be a string or null")),
        };
        evidence.push(EvidenceItem { index, fact, declared_date });
    }

    let reasoning = obj
        .get("reasoning")
        .and_then(Value::as_str)
        .ok_or("missing `reasoning` string")?
        .to_owned();

    let present: Vec<_> = TaskKind::ALL_PREDICTION_KEYS
        .iter()
        .filter(|k| obj.contains_key(**k))
        .collect();
    if present.len() > 1 {
        return Err(format!("multiple prediction fields present: {present:?}"));
    }
    let key = kind.prediction_key();
    let raw_pred = obj.get(key).ok_or_else(|| format!("missing `{key}` for {kind}"))?;
    let prediction = PredictionValue::from_wire(kind, raw_pred).map_err(|e| e.to_string())?;

    let dangling_citations = citations(&reasoning)
        .into_iter()
        .filter(|c| !seen.contains(c))
        .collect();

    Ok(Completion { evidence, reasoning, prediction, raw_length, dangling_citations })
}

/// Render a completion in the wire format (inverse of [`parse_completion`]).
pub fn to_wire_json(completion: &Completion, kind: TaskKind) -> String {
    let evidence: Vec<Value> = completion
        .evidence
        .iter()
        .map(|e| {
            serde_json::json!({
                "id": e.index,
                "fact": e.fact,
                "source_date": e.declared_date.map(|d| d.format("%Y-%m-%d").to_string()),
            })
        })
        .collect();
    let mut obj = Map::new();
    obj.insert("evidence".into(), Value::from(evidence));
    obj.insert("reasoning".into(), Value::from(completion.reasoning.clone()));
    obj.insert(kind.prediction_key().into(), completion.prediction.to_wire());
    Value::Object(obj).to_string()
}
