//! Domain types shared by every stage of the pipeline: prediction instances,
//! parsed completions, and sampled groups.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Stock,
    Salary,
    Legal,
    Synthetic,
}

impl TaskKind {
    /// Name of the prediction field in the structured-completion wire format.
    pub fn prediction_key(self) -> &'static str {
        match self {
            TaskKind::Stock => "ranking",
            TaskKind::Salary => "predicted_salary",
            TaskKind::Legal => "probability_petitioner",
            TaskKind::Synthetic => "prediction",
        }
    }

    pub const ALL_PREDICTION_KEYS: [&'static str; 4] =
        ["ranking", "predicted_salary", "probability_petitioner", "prediction"];
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Stock => "stock",
            TaskKind::Salary => "salary",
            TaskKind::Legal => "legal",
            TaskKind::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stock" => Ok(TaskKind::Stock),
            "salary" => Ok(TaskKind::Salary),
            "legal" => Ok(TaskKind::Legal),
            "synthetic" => Ok(TaskKind::Synthetic),
            other => Err(Error::InvalidInput(format!("unknown task kind `{other}`"))),
        }
    }
}

/// A model prediction or ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionValue {
    /// Ordered list of distinct tickers, best first.
    Ranking(Vec<String>),
    /// Positive currency amount (USD/year).
    Amount(f64),
    /// Probability in [0, 1]. Legal labels use exactly 0 or 1.
    Probability(f64),
    /// Scalar in [0, 1].
    Scalar(f64),
}

impl PredictionValue {
    pub fn validate(&self) -> Result<()> {
        match self {
            PredictionValue::Ranking(items) => {
                let mut seen = HashSet::new();
                for t in items {
                    if !seen.insert(t.as_str()) {
                        return Err(Error::InvalidInput(format!("duplicate ticker `{t}`")));
                    }
                }
                Ok(())
            }
            PredictionValue::Amount(a) => {
                if a.is_finite() && *a > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(format!("amount must be positive, got {a}")))
                }
            }
            PredictionValue::Probability(p) | PredictionValue::Scalar(p) => {
                if (0.0..=1.0).contains(p) {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(format!("value must lie in [0,1], got {p}")))
                }
            }
        }
    }

    pub fn matches(&self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (PredictionValue::Ranking(_), TaskKind::Stock)
                | (PredictionValue::Amount(_), TaskKind::Salary)
                | (PredictionValue::Probability(_), TaskKind::Legal)
                | (PredictionValue::Scalar(_), TaskKind::Synthetic)
        )
    }

    /// Decode the wire representation for `kind` (array for stock, number otherwise).
    pub fn from_wire(kind: TaskKind, value: &Value) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("`{}` has the wrong type for {kind}", kind.prediction_key()));
        let v = match kind {
            TaskKind::Stock => {
                let arr = value.as_array().ok_or_else(bad)?;
                let items = arr
                    .iter()
                    .map(|v| v.as_str().map(str::to_owned).ok_or_else(bad))
                    .collect::<Result<Vec<_>>>()?;
                PredictionValue::Ranking(items)
            }
            TaskKind::Salary => PredictionValue::Amount(value.as_f64().ok_or_else(bad)?),
            TaskKind::Legal => PredictionValue::Probability(value.as_f64().ok_or_else(bad)?),
            TaskKind::Synthetic => PredictionValue::Scalar(value.as_f64().ok_or_else(bad)?),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn to_wire(&self) -> Value {
        match self {
            PredictionValue::Ranking(items) => Value::from(items.clone()),
            PredictionValue::Amount(x) | PredictionValue::Probability(x) | PredictionValue::Scalar(x) => {
                Value::from(*x)
            }
        }
    }
}

/// A prediction task item: prompt reference, cutoff, and resolved label.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub cutoff: NaiveDate,
    pub task_kind: TaskKind,
    pub label: PredictionValue,
}

#[derive(Serialize, Deserialize)]
struct InstanceWire {
    id: String,
    cutoff: String,
    task_kind: TaskKind,
    label: Value,
}

impl Instance {
    pub fn new(id: impl Into<String>, cutoff: NaiveDate, task_kind: TaskKind, label: PredictionValue) -> Result<Self> {
        let inst = Instance { id: id.into(), cutoff, task_kind, label };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.label.matches(self.task_kind) {
            return Err(Error::InvalidInput(format!(
                "label variant does not match task kind {} for instance {}",
                self.task_kind, self.id
            )));
        }
        self.label.validate()?;
        if let PredictionValue::Probability(p) = self.label {
            if p != 0.0 && p != 1.0 {
                return Err(Error::InvalidInput(format!("legal label must be 0 or 1, got {p}")));
            }
        }
        Ok(())
    }

    /// Parse one line of an instance-labels file.
    pub fn from_json_line(line: &str) -> Result<Self> {
        let wire: InstanceWire = serde_json::from_str(line)?;
        let cutoff = parse_iso_date(&wire.cutoff)
            .ok_or_else(|| Error::InvalidInput(format!("cutoff `{}` is not YYYY-MM-DD", wire.cutoff)))?;
        let label = PredictionValue::from_wire(wire.task_kind, &wire.label)?;
        Instance::new(wire.id, cutoff, wire.task_kind, label)
    }

    pub fn to_json_line(&self) -> String {
        let wire = InstanceWire {
            id: self.id.clone(),
            cutoff: self.cutoff.format("%Y-%m-%d").to_string(),
            task_kind: self.task_kind,
            label: self.label.to_wire(),
        };
        serde_json::to_string(&wire).expect("instance serializes")
    }
}

/// Strict ISO `YYYY-MM-DD`; anything else is treated as absent.
pub fn parse_iso_date(s: &str) -> Option<NaiveDate> {
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return None;
    }
    if !b.iter().enumerate().all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit()) {
        return None;
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub index: u32,
    pub fact: String,
    pub declared_date: Option<NaiveDate>,
}

/// A successfully parsed structured completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub evidence: Vec<EvidenceItem>,
    pub reasoning: String,
    pub prediction: PredictionValue,
    /// Character count of the source text.
    pub raw_length: usize,
    /// Citations in the reasoning that name no evidence index.
    pub dangling_citations: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailureReason {
    NoObjectFound,
    Malformed,
    SchemaViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: ParseFailureReason,
    pub raw_length: usize,
    pub detail: String,
}

/// One member of a sampled group.
pub type Member = std::result::Result<Completion, ParseFailure>;

pub fn member_raw_length(m: &Member) -> usize {
    match m {
        Ok(c) => c.raw_length,
        Err(f) => f.raw_length,
    }
}

#[derive(Debug, Clone)]
pub struct CompletionGroup {
    /// Index of the instance inside its environment or dataset.
    pub instance: usize,
    pub members: Vec<Member>,
    /// Universe index of each sampled member, when drawn from a tabular policy.
    pub outcomes: Vec<usize>,
    /// Log-probability of each member under the sampling distribution.
    pub old_logprobs: Vec<f64>,
    pub sampling_seed: u64,
}

impl CompletionGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// An atomic claim taken from an evidence list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Claim {
    pub text: String,
    pub declared_date: Option<NaiveDate>,
}

/// Deduplicate claims by case-folded text, keeping the first occurrence.
pub fn dedup_claims<I>(claims: I) -> Vec<Claim>
where
    I: IntoIterator<Item = Claim>,
{
    let mut seen = HashSet::new();
    claims
        .into_iter()
        .filter(|c| seen.insert(c.text.to_lowercase()))
        .collect()
}

pub fn extract_claims(completion: &Completion) -> Vec<Claim> {
    dedup_claims(completion.evidence.iter().map(|e| Claim {
        text: e.fact.clone(),
        declared_date: e.declared_date,
    }))
}

fn citation_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+)\]").expect("valid regex"))
}

/// Every `[k]` citation in `text`, in order of appearance.
pub fn citations(text: &str) -> Vec<u32> {
    citation_regex()
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

/// Fraction of evidence items cited at least once in the reasoning.
/// Zero evidence items yield 0.
pub fn citation_coverage(completion: &Completion) -> f64 {
    if completion.evidence.is_empty() {
        return 0.0;
    }
    let cited: HashSet<u32> = citations(&completion.reasoning).into_iter().collect();
    let hit = completion.evidence.iter().filter(|e| cited.contains(&e.index)).count();
    hit as f64 / completion.evidence.len() as f64
}

/// Whitespace-delimited token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(index: u32, fact: &str) -> EvidenceItem {
        EvidenceItem { index, fact: fact.into(), declared_date: parse_iso_date("2020-01-01") }
    }

    fn completion(evidence: Vec<EvidenceItem>, reasoning: &str) -> Completion {
        Completion {
            evidence,
            reasoning: reasoning.into(),
            prediction: PredictionValue::Scalar(0.5),
            raw_length: 0,
            dangling_citations: vec![],
        }
    }

    #[test]
    fn dedup_is_case_insensitive() {
        let c = completion(vec![ev(1, "Revenue rose"), ev(2, "revenue rose")], "");
        assert_eq!(extract_claims(&c).len(), 1);
        assert_eq!(extract_claims(&c)[0].text, "Revenue rose");
    }

    #[test]
    fn extract_claims_keeps_order() {
        let c = completion(vec![ev(1, "a"), ev(2, "b"), ev(3, "c")], "");
        let texts: Vec<_> = extract_claims(&c).into_iter().map(|c| c.text).collect();
        assert_eq!(texts, ["a", "b", "c"]);
        assert!(extract_claims(&completion(vec![], "")).is_empty());
    }

    #[test]
    fn coverage_examples() {
        let four: Vec<_> = (1..=4).map(|i| ev(i, &format!("f{i}"))).collect();
        assert_eq!(citation_coverage(&completion(four, "see [1][3]")), 0.5);
        let ten: Vec<_> = (1..=10).map(|i| ev(i, &format!("f{i}"))).collect();
        let all: String = (1..=10).map(|i| format!("[{i}], ")).collect();
        assert_eq!(citation_coverage(&completion(ten, &all)), 1.0);
        assert_eq!(citation_coverage(&completion(vec![], "[1]")), 0.0);
    }

    #[test]
    fn strict_dates() {
        assert!(parse_iso_date("2020-02-29").is_some());
        assert!(parse_iso_date("2019-02-29").is_none());
        assert!(parse_iso_date("2020-1-05").is_none());
        assert!(parse_iso_date("05/01/2020").is_none());
        assert!(parse_iso_date("").is_none());
    }

    #[test]
    fn instance_round_trip_and_label_checks() {
        let inst = Instance::new(
            "case-1",
            parse_iso_date("2019-12-01").unwrap(),
            TaskKind::Legal,
            PredictionValue::Probability(1.0),
        )
        .unwrap();
        assert_eq!(Instance::from_json_line(&inst.to_json_line()).unwrap(), inst);
        assert!(Instance::new("x", inst.cutoff, TaskKind::Legal, PredictionValue::Probability(0.4)).is_err());
        assert!(Instance::new("x", inst.cutoff, TaskKind::Salary, PredictionValue::Scalar(0.4)).is_err());
        assert!(Instance::new("x", inst.cutoff, TaskKind::Salary, PredictionValue::Amount(-1.0)).is_err());
    }

    #[test]
    fn word_count_is_whitespace_tokens() {
        assert_eq!(word_count("  a b\n c\t[1] "), 4);
        assert_eq!(word_count(""), 0);
    }
}
