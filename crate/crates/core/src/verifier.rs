//! Effective source dates and leaked-claim counting.
//!
//! A claim leaks when its effective date is strictly after the cutoff. The
//! effective date is the declared date, unless a verifier backend judges the
//! declared date implausible for the kind of fact the claim describes, in
//! which case the backend supplies a strictly later corrected date.
//!
//! Three backends are provided:
//! - [`RuleEngine`]: ordered keyword rules, deterministic, loadable from TOML.
//! - [`OracleVerifier`]: known availability dates (synthetic universes).
//! - [`StubVerifier`]: replayed verdicts from a newline-delimited file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use chrono::{Duration, NaiveDate};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{parse_iso_date, Completion, Member};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierVerdict {
    pub claim_index: u32,
    pub plausible: bool,
    pub effective_date: Option<NaiveDate>,
    pub reason: String,
}

impl VerifierVerdict {
    fn plausible(claim_index: u32, declared: NaiveDate, reason: impl Into<String>) -> Self {
        VerifierVerdict { claim_index, plausible: true, effective_date: Some(declared), reason: reason.into() }
    }

    fn corrected(claim_index: u32, corrected: NaiveDate, reason: impl Into<String>) -> Self {
        VerifierVerdict { claim_index, plausible: false, effective_date: Some(corrected), reason: reason.into() }
    }
}

/// A date-plausibility backend. Implementations must uphold: a corrected
/// date is strictly later than the declared date.
pub trait DateVerifier: Send + Sync {
    fn verify(&self, claim_index: u32, claim_text: &str, declared: NaiveDate) -> VerifierVerdict;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimCategory {
    /// Annual report filing (10-K).
    Filing,
    QuarterlyResult,
    FullYearResult,
    PriceQuote,
    Acquisition,
    Signing,
    CourtDecision,
}

/// One row of the rule table: claims matching `pattern` describe a period
/// of kind `category`, and cannot be known before period end + offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRule {
    pub pattern: String,
    pub category: ClaimCategory,
    pub offset_days: i64,
}

#[derive(Debug)]
struct CompiledRule {
    rule: DateRule,
    regex: Regex,
}

/// Ordered keyword rule engine; the first rule that matches and can locate
/// the described period decides the verdict.
#[derive(Debug)]
pub struct RuleEngine {
    rules: Vec<CompiledRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    rule: Vec<DateRule>,
}

impl RuleEngine {
    pub fn new(rules: Vec<DateRule>) -> Result<Self> {
        let rules = rules
            .into_iter()
            .map(|rule| {
                if rule.offset_days < 0 {
                    return Err(Error::Config(format!("rule `{}` has a negative offset", rule.pattern)));
                }
                let regex = Regex::new(&rule.pattern)
                    .map_err(|e| Error::Config(format!("bad rule pattern `{}`: {e}", rule.pattern)))?;
                Ok(CompiledRule { rule, regex })
            })
            .collect::<Result<_>>()?;
        Ok(RuleEngine { rules })
    }

    /// Full-year results: Jan 31 of Y+1. Quarterly: 45 days after quarter
    /// end. 10-K: 60 days after fiscal year end. Dated events: same day.
    pub fn default_rules() -> Vec<DateRule> {
        let r = |pattern: &str, category, offset_days| DateRule { pattern: pattern.into(), category, offset_days };
        vec![
            r(r"(?i)\b10-?K\b|\bannual report\b", ClaimCategory::Filing, 60),
            r(
                r"(?i)\bQ[1-4]\b|\b(first|second|third|fourth)[- ]quarter\b|\bquarterly\b",
                ClaimCategory::QuarterlyResult,
                45,
            ),
            r(
                r"(?i)\bfull[- ]year\b|\bfiscal(\s+year)?\s*\d{4}\b|\bFY\s*'?\d{2,4}\b|\bannual\s+(revenue|results|earnings|sales|profit|net income|eps)\b",
                ClaimCategory::FullYearResult,
                31,
            ),
            r(
                r"(?i)\b(closed|opened|traded|trading|share price|stock price|close[d]? at)\b",
                ClaimCategory::PriceQuote,
                0,
            ),
            r(r"(?i)\b(acquir\w*|acquisition|merger|merge[sd]?)\b", ClaimCategory::Acquisition, 0),
            r(r"(?i)\b(sign\w*|contract|extension)\b", ClaimCategory::Signing, 0),
            r(
                r"(?i)\b(court|ruled|ruling|decision|opinion|affirmed|reversed|vacated)\b",
                ClaimCategory::CourtDecision,
                0,
            ),
        ]
    }

    pub fn with_defaults() -> Self {
        RuleEngine::new(Self::default_rules()).expect("default rules compile")
    }

    /// Load `[[rule]]` tables (`pattern`, `category`, `offset_days`) from TOML.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: RuleFile = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        RuleEngine::new(file.rule)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// The earliest plausible publication date for the claim, and the rule
    /// category that produced it. `None` when no rule applies.
    pub fn earliest_plausible(&self, claim_text: &str) -> Option<(NaiveDate, ClaimCategory)> {
        self.rules.iter().find_map(|r| {
            if !r.regex.is_match(claim_text) {
                return None;
            }
            let end = period_end(r.rule.category, claim_text)?;
            Some((end + Duration::days(r.rule.offset_days), r.rule.category))
        })
    }
}

impl DateVerifier for RuleEngine {
    fn verify(&self, claim_index: u32, claim_text: &str, declared: NaiveDate) -> VerifierVerdict {
        match self.earliest_plausible(claim_text) {
            Some((earliest, cat)) if declared < earliest => {
                VerifierVerdict::corrected(claim_index, earliest, format!("{cat:?} not available before {earliest}"))
            }
            Some((_, cat)) => VerifierVerdict::plausible(claim_index, declared, format!("{cat:?} date plausible")),
            None => VerifierVerdict::plausible(claim_index, declared, "unclassified"),
        }
    }
}

fn year_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[^0-9])((?:19|20)\d{2})(?:[^0-9]|$)").expect("valid regex"))
}

fn quarter_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bQ([1-4])\b|\b(first|second|third|fourth)[- ]quarter\b").expect("valid regex"))
}

fn iso_in_text_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(\d{4}-\d{2}-\d{2})\b").expect("valid regex"))
}

fn long_date_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(jan|feb|mar|apr|may|jun|jul|aug|sep|oct|nov|dec)[a-z]*\.?\s+(\d{1,2}),?\s+(\d{4})\b")
            .expect("valid regex")
    })
}

fn first_year(text: &str) -> Option<i32> {
    year_regex().captures(text).and_then(|c| c[1].parse().ok())
}

/// First explicit calendar date mentioned in `text`.
pub fn date_in_text(text: &str) -> Option<NaiveDate> {
    let iso = iso_in_text_regex()
        .captures_iter(text)
        .find_map(|c| parse_iso_date(&c[1]).map(|d| (c.get(0).unwrap().start(), d)));
    let long = long_date_regex().captures_iter(text).find_map(|c| {
        let month = match c[1].to_ascii_lowercase().as_str() {
            "jan" => 1,
            "feb" => 2,
            "mar" => 3,
            "apr" => 4,
            "may" => 5,
            "jun" => 6,
            "jul" => 7,
            "aug" => 8,
            "sep" => 9,
            "oct" => 10,
            "nov" => 11,
            _ => 12,
        };
        let day = c[2].parse().ok()?;
        let year = c[3].parse().ok()?;
        NaiveDate::from_ymd_opt(year, month, day).map(|d| (c.get(0).unwrap().start(), d))
    });
    match (iso, long) {
        (Some(a), Some(b)) => Some(if a.0 <= b.0 { a.1 } else { b.1 }),
        (a, b) => a.or(b).map(|x| x.1),
    }
}

fn period_end(category: ClaimCategory, text: &str) -> Option<NaiveDate> {
    match category {
        ClaimCategory::Filing | ClaimCategory::FullYearResult => {
            first_year(text).and_then(|y| NaiveDate::from_ymd_opt(y, 12, 31))
        }
        ClaimCategory::QuarterlyResult => {
            let caps = quarter_regex().captures(text)?;
            let q: u32 = match (caps.get(1), caps.get(2)) {
                (Some(n), _) => n.as_str().parse().ok()?,
                (None, Some(w)) => match w.as_str().to_ascii_lowercase().as_str() {
                    "first" => 1,
                    "second" => 2,
                    "third" => 3,
                    _ => 4,
                },
                _ => return None,
            };
            let year = first_year(text)?;
            let first_of_next = if q == 4 {
                NaiveDate::from_ymd_opt(year + 1, 1, 1)?
            } else {
                NaiveDate::from_ymd_opt(year, q * 3 + 1, 1)?
            };
            first_of_next.pred_opt()
        }
        ClaimCategory::PriceQuote
        | ClaimCategory::Acquisition
        | ClaimCategory::Signing
        | ClaimCategory::CourtDecision => date_in_text(text),
    }
}

/// Verifier for synthetic universes where each claim's true availability
/// date is known.
#[derive(Debug, Default, Clone)]
pub struct OracleVerifier {
    available: HashMap<String, NaiveDate>,
}

impl OracleVerifier {
    pub fn new(available: HashMap<String, NaiveDate>) -> Self {
        OracleVerifier { available }
    }

    pub fn insert(&mut self, claim: impl Into<String>, date: NaiveDate) {
        self.available.insert(claim.into(), date);
    }
}

impl DateVerifier for OracleVerifier {
    fn verify(&self, claim_index: u32, claim_text: &str, declared: NaiveDate) -> VerifierVerdict {
        match self.available.get(claim_text) {
            Some(&avail) if declared < avail => {
                VerifierVerdict::corrected(claim_index, avail, "declared before true availability")
            }
            Some(_) => VerifierVerdict::plausible(claim_index, declared, "oracle"),
            None => VerifierVerdict::plausible(claim_index, declared, "unknown claim"),
        }
    }
}

#[derive(Debug, Deserialize)]
struct StubRow {
    claim: String,
    plausible: bool,
    corrected_date: Option<String>,
}

/// Replays verdicts recorded by an external verifier, keyed by exact claim text.
#[derive(Debug, Default, Clone)]
pub struct StubVerifier {
    verdicts: HashMap<String, (bool, Option<NaiveDate>)>,
}

impl StubVerifier {
    pub fn from_ndjson(text: &str) -> Result<Self> {
        let mut verdicts = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: StubRow = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("stub verdict line {}: {e}", n + 1)))?;
            let corrected = match row.corrected_date.as_deref() {
                None => None,
                Some(s) => Some(parse_iso_date(s).ok_or_else(|| {
                    Error::Config(format!("stub verdict line {}: bad corrected_date `{s}`", n + 1))
                })?),
            };
            verdicts.insert(row.claim, (row.plausible, corrected));
        }
        Ok(StubVerifier { verdicts })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_ndjson(&fs::read_to_string(path)?)
    }
}

impl DateVerifier for StubVerifier {
    fn verify(&self, claim_index: u32, claim_text: &str, declared: NaiveDate) -> VerifierVerdict {
        match self.verdicts.get(claim_text) {
            Some((false, Some(c))) if *c > declared => {
                VerifierVerdict::corrected(claim_index, *c, "replayed correction")
            }
            Some((false, _)) => {
                VerifierVerdict::plausible(claim_index, declared, "replayed correction not later than declared")
            }
            Some((true, _)) => VerifierVerdict::plausible(claim_index, declared, "replayed"),
            None => VerifierVerdict::plausible(claim_index, declared, "no replayed verdict"),
        }
    }
}

/// Per-completion audit result.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionAudit {
    /// Distinct claims (case-folded text) with an effective date after the cutoff.
    pub n_leak: u32,
    /// Distinct claims carrying at least one declared date.
    pub n_dated: u32,
    pub verdicts: Vec<VerifierVerdict>,
}

/// Audit one completion. Claims are deduplicated by case-folded text; a
/// deduplicated claim leaks if any of its dated occurrences leaks. Claims
/// without a declared date never leak.
pub fn audit_completion(completion: &Completion, cutoff: NaiveDate, verifier: &dyn DateVerifier) -> CompletionAudit {
    let mut order: Vec<String> = Vec::new();
    let mut status: HashMap<String, (bool, bool)> = HashMap::new();
    let mut verdicts = Vec::new();
    for item in &completion.evidence {
        let key = item.fact.to_lowercase();
        let entry = status.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (false, false)
        });
        if let Some(declared) = item.declared_date {
            let v = verifier.verify(item.index, &item.fact, declared);
            entry.0 = true;
            if v.effective_date.is_some_and(|d| d > cutoff) {
                entry.1 = true;
            }
            verdicts.push(v);
        }
    }
    let n_dated = status.values().filter(|s| s.0).count() as u32;
    let n_leak = status.values().filter(|s| s.1).count() as u32;
    CompletionAudit { n_leak, n_dated, verdicts }
}

pub fn leak_count(completion: &Completion, cutoff: NaiveDate, verifier: &dyn DateVerifier) -> u32 {
    audit_completion(completion, cutoff, verifier).n_leak
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakAudit {
    pub counts: Vec<u32>,
    pub failed: Vec<bool>,
    /// Group leakage indicator: some member has a positive count.
    pub any_leak: bool,
}

pub fn audit_group(members: &[Member], cutoff: NaiveDate, verifier: &dyn DateVerifier) -> LeakAudit {
    let (counts, failed): (Vec<u32>, Vec<bool>) = members
        .iter()
        .map(|m| match m {
            Ok(c) => (leak_count(c, cutoff, verifier), false),
            Err(_) => (0, true),
        })
        .unzip();
    let any_leak = counts.iter().any(|&c| c > 0);
    LeakAudit { counts, failed, any_leak }
}
