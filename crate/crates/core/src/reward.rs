//! Two-mode reward stack: a group-level gate routes every member either to
//! the leakage reward (exponential in the leak count, plus small quality
//! bonuses for clean members) or to the performance reward attenuated by
//! multiplicative coverage, diversity and reasoning-depth gates. Parse
//! failures are handled separately through a format penalty on advantages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{citation_coverage, word_count, Completion, Member, PredictionValue};
use crate::verifier::LeakAudit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub leak_decay: f64,
    pub coverage_floor: f64,
    /// Carried for completeness; no current reward term reads it.
    pub coverage_target: f64,
    pub evidence_target: u32,
    pub reasoning_target_words: u32,
    pub w_cov_leak: f64,
    pub w_qual_leak: f64,
    pub format_margin: f64,
    pub format_ratio_cap: f64,
    pub overlong_decay: f64,
    pub overlong_floor: f64,
    pub max_text_chars: u32,
    /// Replace the mode gate with a cosine-annealed linear blend of the
    /// leakage and performance rewards (legacy ablation).
    pub legacy_linear_blend: bool,
    pub leak_weight_start: f64,
    pub leak_weight_end: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            leak_decay: 0.5,
            coverage_floor: 0.20,
            coverage_target: 0.80,
            evidence_target: 8,
            reasoning_target_words: 120,
            w_cov_leak: 0.05,
            w_qual_leak: 0.02,
            format_margin: 1.0,
            format_ratio_cap: 5.0,
            overlong_decay: 0.5,
            overlong_floor: 0.3,
            max_text_chars: 32_000,
            legacy_linear_blend: false,
            leak_weight_start: 0.95,
            leak_weight_end: 0.80,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("leak_decay", self.leak_decay),
            ("coverage_target", self.coverage_target),
            ("evidence_target", self.evidence_target as f64),
            ("reasoning_target_words", self.reasoning_target_words as f64),
            ("w_cov_leak", self.w_cov_leak),
            ("w_qual_leak", self.w_qual_leak),
            ("format_margin", self.format_margin),
            ("overlong_decay", self.overlong_decay),
            ("max_text_chars", self.max_text_chars as f64),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("reward.{name} must be strictly positive, got {v}")));
            }
        }
        for (name, v) in [("coverage_floor", self.coverage_floor), ("overlong_floor", self.overlong_floor)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("reward.{name} must lie in (0, 1], got {v}")));
            }
        }
        if !(self.format_ratio_cap >= 1.0) {
            return Err(Error::Config(format!(
                "reward.format_ratio_cap must be >= 1, got {}",
                self.format_ratio_cap
            )));
        }
        Ok(())
    }

    /// Leakage weight of the legacy blend at training progress `t ∈ [0,1]`.
    pub fn leak_weight_at(&self, progress: f64) -> f64 {
        let t = progress.clamp(0.0, 1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.leak_weight_end + (self.leak_weight_start - self.leak_weight_end) * cos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Leakage,
    Performance,
}

/// Performance mode iff every count is zero.
pub fn select_mode(leak_counts: &[u32]) -> Result<Mode> {
    if leak_counts.is_empty() {
        return Err(Error::EmptyGroup);
    }
    Ok(if leak_counts.iter().all(|&c| c == 0) { Mode::Performance } else { Mode::Leakage })
}

pub fn leakage_reward(n_leak: u32, cfg: &RewardConfig) -> f64 {
    (-cfg.leak_decay * n_leak as f64).exp()
}

pub fn coverage_gate(cov: f64, cfg: &RewardConfig) -> f64 {
    cov.max(cfg.coverage_floor)
}

pub fn diversity_gate(evidence_count: usize, cfg: &RewardConfig) -> f64 {
    (evidence_count as f64 / cfg.evidence_target as f64).min(1.0)
}

pub fn reasoning_gate(words: usize, cfg: &RewardConfig) -> f64 {
    (words as f64 / cfg.reasoning_target_words as f64).min(1.0)
}

pub fn effective_reward(r_perf: f64, cov: f64, evidence_count: usize, words: usize, cfg: &RewardConfig) -> f64 {
    r_perf * coverage_gate(cov, cfg) * diversity_gate(evidence_count, cfg) * reasoning_gate(words, cfg)
}

/// Clean-member bonuses in leakage mode: `(b_cov, b_qual)`. The reasoning
/// gate is not part of the leakage-mode bonus.
pub fn leak_mode_bonuses(is_clean: bool, cov: f64, evidence_count: usize, cfg: &RewardConfig) -> (f64, f64) {
    if !is_clean {
        return (0.0, 0.0);
    }
    (cfg.w_cov_leak * coverage_gate(cov, cfg), cfg.w_qual_leak * diversity_gate(evidence_count, cfg))
}

pub fn leak_mode_total(n_leak: u32, is_clean: bool, cov: f64, evidence_count: usize, cfg: &RewardConfig) -> f64 {
    let (b_cov, b_qual) = leak_mode_bonuses(is_clean, cov, evidence_count, cfg);
    leakage_reward(n_leak, cfg) + b_cov + b_qual
}

/// How parse failures in a group are treated, given the valid members'
/// advantages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FormatPenalty {
    /// No valid member: the whole group contributes no gradient.
    SkipGroup,
    /// One valid member: it gets advantage 0, failures get `failure_advantage`.
    SingleValid { failure_advantage: f64 },
    /// Two or more valid members: failures get the derived penalty.
    Derived(f64),
}

impl FormatPenalty {
    pub fn failure_advantage(self) -> f64 {
        match self {
            FormatPenalty::SkipGroup => 0.0,
            FormatPenalty::SingleValid { failure_advantage } => failure_advantage,
            FormatPenalty::Derived(v) => v,
        }
    }
}

/// `max(min(a) − m, −α·max(a))` for two or more valid advantages.
pub fn format_penalty(valid_advantages: &[f64], cfg: &RewardConfig) -> FormatPenalty {
    match valid_advantages.len() {
        0 => FormatPenalty::SkipGroup,
        1 => FormatPenalty::SingleValid { failure_advantage: -cfg.format_margin },
        _ => {
            let min = valid_advantages.iter().copied().fold(f64::INFINITY, f64::min);
            let max = valid_advantages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            FormatPenalty::Derived((min - cfg.format_margin).max(-cfg.format_ratio_cap * max))
        }
    }
}

/// Length-dependent attenuation factor for a parse failure's advantage.
pub fn overlong_factor(text_chars: usize, cfg: &RewardConfig) -> f64 {
    let ell = (text_chars as f64 / cfg.max_text_chars as f64).min(1.0);
    (1.0 - cfg.overlong_decay * ell).max(cfg.overlong_floor)
}

pub fn overlong_scale(advantage: f64, text_chars: usize, cfg: &RewardConfig) -> f64 {
    advantage * overlong_factor(text_chars, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub mode: Mode,
    pub n_leak: u32,
    pub r_leak: f64,
    pub bonuses: (f64, f64),
    /// Coverage, diversity and reasoning gates.
    pub gates: (f64, f64, f64),
    pub r_perf: f64,
    pub r_eff: f64,
    pub final_reward: f64,
    pub is_parse_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupScore {
    /// `None` when every member failed to parse.
    pub mode: Option<Mode>,
    pub breakdowns: Vec<RewardBreakdown>,
}

impl GroupScore {
    pub fn all_failed(&self) -> bool {
        self.mode.is_none()
    }

    pub fn valid_rewards(&self) -> Vec<f64> {
        self.breakdowns
            .iter()
            .filter(|b| !b.is_parse_failure)
            .map(|b| b.final_reward)
            .collect()
    }
}

/// Score an audited group. Mode selection looks only at parsed members.
/// `progress` is only read by the legacy linear blend.
pub fn score_group<F>(
    members: &[Member],
    audit: &LeakAudit,
    label: &PredictionValue,
    perf_scorer: F,
    cfg: &RewardConfig,
    progress: f64,
) -> GroupScore
where
    F: Fn(&PredictionValue, &PredictionValue) -> f64,
{
    let valid_counts: Vec<u32> = members
        .iter()
        .zip(&audit.counts)
        .filter(|(m, _)| m.is_ok())
        .map(|(_, &c)| c)
        .collect();
    let mode = select_mode(&valid_counts).ok();

    let breakdowns = members
        .iter()
        .zip(&audit.counts)
        .map(|(m, &n_leak)| match (m, mode) {
            (Ok(c), Some(mode)) => score_member(c, n_leak, mode, label, &perf_scorer, cfg, progress),
            _ => RewardBreakdown {
                mode: mode.unwrap_or(Mode::Leakage),
                n_leak: 0,
                r_leak: 1.0,
                bonuses: (0.0, 0.0),
                gates: (cfg.coverage_floor, 0.0, 0.0),
                r_perf: 0.0,
                r_eff: 0.0,
                final_reward: 0.0,
                is_parse_failure: true,
            },
        })
        .collect();
    GroupScore { mode, breakdowns }
}

fn score_member<F>(
    c: &Completion,
    n_leak: u32,
    mode: Mode,
    label: &PredictionValue,
    perf_scorer: &F,
    cfg: &RewardConfig,
    progress: f64,
) -> RewardBreakdown
where
    F: Fn(&PredictionValue, &PredictionValue) -> f64,
{
    let cov = citation_coverage(c);
    let count = c.evidence.len();
    let words = word_count(&c.reasoning);
    let gates = (coverage_gate(cov, cfg), diversity_gate(count, cfg), reasoning_gate(words, cfg));
    let r_perf = perf_scorer(&c.prediction, label).clamp(0.0, 1.0);
    let r_eff = r_perf * gates.0 * gates.1 * gates.2;
    let r_leak = leakage_reward(n_leak, cfg);
    let clean = n_leak == 0;
    let bonuses = match mode {
        Mode::Leakage => leak_mode_bonuses(clean, cov, count, cfg),
        Mode::Performance => (0.0, 0.0),
    };
    let final_reward = if cfg.legacy_linear_blend {
        let w = cfg.leak_weight_at(progress);
        w * r_leak + (1.0 - w) * r_eff
    } else {
        match mode {
            Mode::Leakage => r_leak + bonuses.0 + bonuses.1,
            Mode::Performance => r_eff,
        }
    };
    RewardBreakdown { mode, n_leak, r_leak, bonuses, gates, r_perf, r_eff, final_reward, is_parse_failure: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_iso_date, EvidenceItem, ParseFailure, ParseFailureReason};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    #[test]
    fn mode_gate() {
        assert_eq!(select_mode(&[0, 0, 0, 0]).unwrap(), Mode::Performance);
        assert_eq!(select_mode(&[0, 1, 0]).unwrap(), Mode::Leakage);
        assert_eq!(select_mode(&[3]).unwrap(), Mode::Leakage);
        assert!(matches!(select_mode(&[]), Err(Error::EmptyGroup)));
    }

    #[test]
    fn leakage_reward_values() {
        assert_eq!(leakage_reward(0, &cfg()), 1.0);
        assert_abs_diff_eq!(leakage_reward(1, &cfg()), 0.6065, epsilon = 5e-5);
        assert_abs_diff_eq!(leakage_reward(4, &cfg()), (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(leakage_reward(4, &cfg()), 0.1353, epsilon = 5e-5);
    }

    #[test]
    fn gates() {
        let c = cfg();
        assert_eq!(coverage_gate(0.0, &c), 0.20);
        assert_eq!(coverage_gate(0.5, &c), 0.5);
        assert_eq!(coverage_gate(1.0, &c), 1.0);
        assert_eq!(diversity_gate(4, &c), 0.5);
        assert_eq!(diversity_gate(8, &c), 1.0);
        assert_eq!(diversity_gate(12, &c), 1.0);
        assert_eq!(reasoning_gate(120, &c), 1.0);
        assert_eq!(reasoning_gate(60, &c), 0.5);
        assert_eq!(reasoning_gate(300, &c), 1.0);
    }

    #[test]
    fn effective_reward_examples() {
        let c = cfg();
        assert_eq!(effective_reward(1.0, 1.0, 8, 120, &c), 1.0);
        assert_abs_diff_eq!(effective_reward(0.8, 0.0, 4, 60, &c), 0.8 * 0.2 * 0.5 * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(effective_reward(0.8, 0.0, 4, 60, &c), 0.04, epsilon = 1e-15);
        assert_eq!(effective_reward(0.0, 0.7, 3, 10, &c), 0.0);
    }

    #[test]
    fn leak_mode_totals() {
        let c = cfg();
        assert_abs_diff_eq!(leak_mode_total(0, true, 1.0, 8, &c), 1.07, epsilon = 1e-12);
        assert_abs_diff_eq!(leak_mode_total(2, false, 1.0, 8, &c), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(leak_mode_total(0, true, 0.0, 0, &c), 1.01, epsilon = 1e-12);
    }

    #[test]
    fn format_penalty_cases() {
        let c = cfg();
        assert_eq!(format_penalty(&[], &c), FormatPenalty::SkipGroup);
        assert_eq!(format_penalty(&[0.3], &c), FormatPenalty::SingleValid { failure_advantage: -1.0 });
        assert_eq!(format_penalty(&[-0.5, 0.5], &c), FormatPenalty::Derived(-1.5));
        match format_penalty(&[0.01, 0.02], &c) {
            FormatPenalty::Derived(v) => assert_abs_diff_eq!(v, -0.1, epsilon = 1e-15),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlong_examples() {
        let c = cfg();
        assert_eq!(overlong_scale(-1.0, 0, &c), -1.0);
        assert_eq!(overlong_scale(-1.0, 32_000, &c), -0.5);
        assert_eq!(overlong_scale(-1.0, 16_000, &c), -0.75);
        assert_eq!(overlong_scale(-1.0, 1_000_000, &c), -0.5);
    }

    #[test]
    fn cosine_leak_weight() {
        let c = cfg();
        assert_abs_diff_eq!(c.leak_weight_at(0.0), 0.95, epsilon = 1e-15);
        assert_abs_diff_eq!(c.leak_weight_at(1.0), 0.80, epsilon = 1e-15);
        assert_abs_diff_eq!(c.leak_weight_at(0.5), 0.875, epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = RewardConfig { coverage_floor: 0.0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = RewardConfig { format_ratio_cap: 0.5, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = RewardConfig { w_cov_leak: -1.0, ..cfg() };
        assert!(bad.validate().is_err());
    }

    fn member(n_items: u32, cited: u32, words: usize, p: f64) -> Member {
        let evidence = (1..=n_items)
            .map(|i| EvidenceItem { index: i, fact: format!("f{i}"), declared_date: parse_iso_date("2019-01-01") })
            .collect();
        let mut reasoning: Vec<String> = (1..=cited).map(|i| format!("[{i}]")).collect();
        while reasoning.len() < words {
            reasoning.push("word".into());
        }
        Ok(Completion {
            evidence,
            reasoning: reasoning.join(" "),
            prediction: PredictionValue::Scalar(p),
            raw_length: 10,
            dangling_citations: vec![],
        })
    }

    fn scalar_perf(p: &PredictionValue, y: &PredictionValue) -> f64 {
        match (p, y) {
            (PredictionValue::Scalar(a), PredictionValue::Scalar(b)) => 1.0 - (a - b).abs(),
            _ => 0.0,
        }
    }

    fn audit(counts: Vec<u32>, members: &[Member]) -> LeakAudit {
        let failed = members.iter().map(|m| m.is_err()).collect();
        let any_leak = counts.iter().any(|&c| c > 0);
        LeakAudit { counts, failed, any_leak }
    }

    #[test]
    fn score_group_performance_and_leakage() {
        let c = cfg();
        let label = PredictionValue::Scalar(1.0);
        let ms = vec![member(8, 8, 120, 1.0), member(8, 8, 120, 1.0)];
        let s = score_group(&ms, &audit(vec![0, 0], &ms), &label, scalar_perf, &c, 0.0);
        assert_eq!(s.mode, Some(Mode::Performance));
        assert!(s.breakdowns.iter().all(|b| b.final_reward == 1.0));

        let s = score_group(&ms, &audit(vec![0, 1], &ms), &label, scalar_perf, &c, 0.0);
        assert_eq!(s.mode, Some(Mode::Leakage));
        assert_abs_diff_eq!(s.breakdowns[0].final_reward, 1.07, epsilon = 1e-12);
        assert_abs_diff_eq!(s.breakdowns[1].final_reward, 0.6065, epsilon = 5e-5);

        let fail = ParseFailure { reason: ParseFailureReason::Malformed, raw_length: 5, detail: String::new() };
        let ms = vec![Err(fail.clone()), Err(fail)];
        let s = score_group(&ms, &audit(vec![0, 0], &ms), &label, scalar_perf, &c, 0.0);
        assert!(s.all_failed());
        assert!(s.breakdowns.iter().all(|b| b.is_parse_failure));
    }

    #[test]
    fn failures_do_not_affect_mode() {
        let c = cfg();
        let fail = ParseFailure { reason: ParseFailureReason::Malformed, raw_length: 5, detail: String::new() };
        let ms = vec![member(8, 8, 120, 0.5), Err(fail)];
        let s = score_group(&ms, &audit(vec![0, 0], &ms), &PredictionValue::Scalar(1.0), scalar_perf, &c, 0.0);
        assert_eq!(s.mode, Some(Mode::Performance));
        assert_eq!(s.valid_rewards(), vec![0.5]);
    }

    #[test]
    fn legacy_blend_ignores_gate() {
        let c = RewardConfig { legacy_linear_blend: true, ..cfg() };
        let label = PredictionValue::Scalar(1.0);
        let ms = vec![member(8, 8, 120, 1.0), member(8, 8, 120, 0.0)];
        let s = score_group(&ms, &audit(vec![0, 2], &ms), &label, scalar_perf, &c, 0.0);
        assert_abs_diff_eq!(s.breakdowns[0].final_reward, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.breakdowns[1].final_reward, 0.95 * (-1.0f64).exp(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn hard_gate_ignores_performance(
            preds in proptest::collection::vec(0.0f64..=1.0, 3),
            other in proptest::collection::vec(0.0f64..=1.0, 3),
            leak_at in 0usize..3,
            n in 1u32..6,
        ) {
            let c = cfg();
            let label = PredictionValue::Scalar(1.0);
            let a: Vec<Member> = preds.iter().map(|&p| member(6, 3, 50, p)).collect();
            let b: Vec<Member> = other.iter().map(|&p| member(6, 3, 50, p)).collect();
            let mut counts = vec![0, 0, 0];
            counts[leak_at] = n;
            let sa = score_group(&a, &audit(counts.clone(), &a), &label, scalar_perf, &c, 0.0);
            let sb = score_group(&b, &audit(counts.clone(), &b), &label, scalar_perf, &c, 0.0);
            let ra: Vec<f64> = sa.breakdowns.iter().map(|x| x.final_reward).collect();
            let rb: Vec<f64> = sb.breakdowns.iter().map(|x| x.final_reward).collect();
            prop_assert_eq!(ra, rb);
        }

        #[test]
        fn leak_reward_strictly_decreasing(n in 0u32..40) {
            let c = cfg();
            prop_assert!(leak_mode_total(n + 1, false, 0.5, 4, &c) < leak_mode_total(n, false, 0.5, 4, &c));
            prop_assert!(leak_mode_total(0, true, 0.0, 0, &c) >= 1.0);
            prop_assert!(leak_mode_total(n + 1, false, 1.0, 8, &c) < 1.0);
        }

        #[test]
        fn gates_bound_effective_reward(r in 0.0f64..=1.0, cov in 0.0f64..=1.0, count in 0usize..20, words in 0usize..300) {
            let c = cfg();
            let e = effective_reward(r, cov, count, words, &c);
            prop_assert!(e <= r);
            prop_assert!((0.0..=1.0).contains(&e));
            if cov == 1.0 && count >= 8 && words >= 120 {
                prop_assert_eq!(e, r);
            }
            let (b_cov, b_qual) = leak_mode_bonuses(true, cov, count, &c);
            prop_assert!(b_cov + b_qual <= 0.07 + 1e-15);
        }

        #[test]
        fn overlong_factor_bounded_and_monotone(a in 0usize..100_000, b in 0usize..100_000) {
            let c = cfg();
            let (lo, hi) = (a.min(b), a.max(b));
            let (flo, fhi) = (overlong_factor(lo, &c), overlong_factor(hi, &c));
            prop_assert!(fhi <= flo);
            prop_assert!((c.overlong_floor..=1.0).contains(&fhi));
        }
    }
}
