//! Synthetic environments: finite completion universes with known leak
//! counts and performance scores, plus exact value functions and gradients.
//!
//! Every candidate also renders as a structured completion with dated
//! claims, so training can run the full parse, audit and reward path.

use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::substream;
use crate::model::{Completion, EvidenceItem, Instance, Member, PredictionValue, TaskKind};
use crate::parse::{parse_completion, to_wire_json};
use crate::policy::SoftmaxPolicy;
use crate::reward::{effective_reward, leakage_reward, RewardConfig};
use crate::verifier::OracleVerifier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    pub num_instances: usize,
    pub universe_size: usize,
    pub universe_cap: usize,
    /// Probability that a candidate is clean.
    pub zero_mass: f64,
    /// Geometric ratio of the leak-count tail on `1..=max_leak`.
    pub leak_ratio: f64,
    pub max_leak: u32,
    /// Correlation knob between leak count and performance. Positive values
    /// make leaked candidates score higher.
    pub rho_cp: f64,
    /// Fixed performance for every leaked candidate (adversarial setting).
    pub leaked_perf: Option<f64>,
    /// Fraction of candidates rendered as truncated, unparseable text.
    pub malformed_rate: f64,
    /// Every candidate saturates the quality gates (full citation coverage,
    /// at least 8 evidence items, at least 120 words).
    pub full_quality: bool,
    pub seed: u64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            num_instances: 16,
            universe_size: 16,
            universe_cap: 64,
            zero_mass: 0.3,
            leak_ratio: 0.6,
            max_leak: 6,
            rho_cp: 0.0,
            leaked_perf: None,
            malformed_rate: 0.0,
            full_quality: false,
            seed: 0,
        }
    }
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.num_instances == 0 {
            return bad("num_instances must be positive".into());
        }
        if self.universe_size < 2 || self.universe_size > self.universe_cap {
            return bad(format!("universe_size {} outside [2, {}]", self.universe_size, self.universe_cap));
        }
        if !(0.0..=1.0).contains(&self.zero_mass) {
            return bad("zero_mass must lie in [0, 1]".into());
        }
        if self.zero_mass < 1.0 && (self.max_leak == 0 || !(self.leak_ratio > 0.0 && self.leak_ratio <= 1.0)) {
            return bad("leaky mass needs max_leak >= 1 and leak_ratio in (0, 1]".into());
        }
        if !(-1.0..=1.0).contains(&self.rho_cp) {
            return bad("rho_cp must lie in [-1, 1]".into());
        }
        if self.leaked_perf.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
            return bad("leaked_perf must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.malformed_rate) {
            return bad("malformed_rate must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Probability of each leak count `0..=max_leak`.
    pub fn leak_distribution(&self) -> Vec<f64> {
        let tail: Vec<f64> = (1..=self.max_leak).map(|c| self.leak_ratio.powi(c as i32 - 1)).collect();
        let z: f64 = tail.iter().sum();
        std::iter::once(self.zero_mass)
            .chain(tail.iter().map(|t| (1.0 - self.zero_mass) * t / z))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClaim {
    pub text: String,
    pub declared: NaiveDate,
    /// True availability date, known to the oracle verifier.
    pub available: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub leak_count: u32,
    pub perf: f64,
    pub evidence_count: usize,
    pub cited_count: usize,
    pub word_count: usize,
    pub malformed: bool,
    pub claims: Vec<SynthClaim>,
}

impl Candidate {
    pub fn coverage(&self) -> f64 {
        self.cited_count as f64 / self.evidence_count.max(1) as f64
    }

    pub fn r_eff(&self, cfg: &RewardConfig) -> f64 {
        effective_reward(self.perf, self.coverage(), self.evidence_count, self.word_count, cfg)
    }

    pub fn completion(&self) -> Completion {
        let evidence = self
            .claims
            .iter()
            .enumerate()
            .map(|(j, c)| EvidenceItem { index: j as u32 + 1, fact: c.text.clone(), declared_date: Some(c.declared) })
            .collect();
        let cites = (1..=self.cited_count).map(|k| format!("[{k}]"));
        let filler = std::iter::repeat_n("signal".to_string(), self.word_count - self.cited_count);
        let reasoning = cites.chain(filler).collect::<Vec<_>>().join(" ");
        Completion {
            evidence,
            reasoning,
            prediction: PredictionValue::Scalar(self.perf),
            raw_length: 0,
            dangling_citations: vec![],
        }
    }

    /// Raw model text for this candidate; malformed candidates are cut short.
    pub fn render(&self) -> String {
        let text = to_wire_json(&self.completion(), TaskKind::Synthetic);
        if self.malformed {
            text.chars().take(text.chars().count() / 2).collect()
        } else {
            text
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub id: String,
    pub cutoff: NaiveDate,
    pub candidates: Vec<Candidate>,
}

impl SyntheticInstance {
    /// Synthetic label: the prediction is scored as `1 − |ŷ − 1|`, i.e. the
    /// candidate's own performance value.
    pub fn instance(&self) -> Instance {
        Instance {
            id: self.id.clone(),
            cutoff: self.cutoff,
            task_kind: TaskKind::Synthetic,
            label: PredictionValue::Scalar(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUniverse {
    pub spec: EnvSpec,
    pub instances: Vec<SyntheticInstance>,
}

fn days(n: u64) -> Days {
    Days::new(n)
}

pub fn generate_env(spec: &EnvSpec) -> Result<SyntheticUniverse> {
    spec.validate()?;
    let weights = spec.leak_distribution();
    let leak_dist = WeightedIndex::new(&weights).map_err(|e| Error::InfeasibleSpec(e.to_string()))?;
    let base = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");

    let instances = (0..spec.num_instances)
        .map(|i| {
            let mut rng = substream(spec.seed, 0x454E56, i as u64);
            let cutoff = base + days(7 * i as u64);
            let n = spec.universe_size;

            let mut counts: Vec<u32> = (0..n).map(|_| leak_dist.sample(&mut rng) as u32).collect();
            if counts.iter().all(|&c| c > 0) {
                let k = rng.random_range(0..n);
                counts[k] = 0;
            }
            let mut malformed: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < spec.malformed_rate).collect();
            if let Some(k) = counts.iter().position(|&c| c == 0) {
                if (0..n).all(|j| counts[j] > 0 || malformed[j]) {
                    malformed[k] = false;
                }
            }

            let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n as f64;
            let sd = (counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let rho = spec.rho_cp;

            let candidates = (0..n)
                .map(|k| {
                    let c = counts[k];
                    let z = if sd > 0.0 { (c as f64 - mean) / sd } else { 0.0 };
                    let eps: f64 = rng.sample(StandardNormal);
                    let mut perf = 1.0 / (1.0 + (-2.0 * (rho * z + (1.0 - rho * rho).sqrt() * eps)).exp());
                    if c > 0 {
                        perf = spec.leaked_perf.unwrap_or(perf);
                    }
                    let lo = if spec.full_quality { 8 } else { (c as usize).max(1) };
                    let evidence_count = rng.random_range(lo.max(c as usize)..=12.max(c as usize));
                    let cited_count =
                        if spec.full_quality { evidence_count } else { rng.random_range(0..=evidence_count) };
                    let word_count = rng.random_range(if spec.full_quality { 120 } else { 40 }..=200);
                    let claims = (0..evidence_count)
                        .map(|j| {
                            let text = format!("synthetic fact {i}.{k}.{j}: indicator moved");
                            if j < c as usize {
                                let available = cutoff + days(rng.random_range(1..=365));
                                let declared = if j % 2 == 0 {
                                    available
                                } else {
                                    cutoff - days(rng.random_range(0..=180))
                                };
                                SynthClaim { text, declared, available }
                            } else {
                                let d = cutoff - days(rng.random_range(1..=365));
                                SynthClaim { text, declared: d, available: d }
                            }
                        })
                        .collect();
                    Candidate {
                        leak_count: c,
                        perf,
                        evidence_count,
                        cited_count,
                        word_count,
                        malformed: malformed[k],
                        claims,
                    }
                })
                .collect();
            SyntheticInstance { id: format!("syn-{i:04}"), cutoff, candidates }
        })
        .collect();
    Ok(SyntheticUniverse { spec: spec.clone(), instances })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvSummary {
    pub num_instances: usize,
    pub num_candidates: usize,
    pub mean_leak_count: f64,
    pub clean_fraction: f64,
    pub malformed_fraction: f64,
}

impl SyntheticUniverse {
    pub fn sizes(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.candidates.len()).collect()
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.instances.iter().flat_map(|i| &i.candidates)
    }

    pub fn summary(&self) -> EnvSummary {
        let n = self.candidates().count();
        let nf = n as f64;
        EnvSummary {
            num_instances: self.instances.len(),
            num_candidates: n,
            mean_leak_count: self.candidates().map(|c| c.leak_count as f64).sum::<f64>() / nf,
            clean_fraction: self.candidates().filter(|c| c.leak_count == 0).count() as f64 / nf,
            malformed_fraction: self.candidates().filter(|c| c.malformed).count() as f64 / nf,
        }
    }

    /// Verifier that knows every claim's true availability date.
    pub fn oracle(&self) -> OracleVerifier {
        let mut v = OracleVerifier::default();
        for c in self.candidates().flat_map(|c| &c.claims) {
            v.insert(c.text.clone(), c.available);
        }
        v
    }

    /// Parse every rendered candidate once.
    pub fn parsed_members(&self) -> Vec<Vec<Member>> {
        self.instances
            .iter()
            .map(|inst| inst.candidates.iter().map(|c| parse_completion(&c.render(), TaskKind::Synthetic)).collect())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("universe serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let u: SyntheticUniverse = serde_json::from_str(s)?;
        u.validate()?;
        Ok(u)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::NoInstances);
        }
        for inst in &self.instances {
            let n = inst.candidates.len();
            if n < 2 || n > self.spec.universe_cap {
                return Err(Error::InfeasibleSpec(format!("instance {} has {n} candidates", inst.id)));
            }
            if !inst.candidates.iter().any(|c| c.leak_count == 0) {
                return Err(Error::InfeasibleSpec(format!("instance {} has no clean candidate", inst.id)));
            }
        }
        Ok(())
    }

    /// Policy with logits drawn i.i.d. normal with the given scale.
    pub fn random_policy(&self, scale: f64, rng: &mut impl Rng) -> SoftmaxPolicy {
        let logits = self
            .sizes()
            .iter()
            .map(|&n| (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        SoftmaxPolicy::new(logits).expect("universe is non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueKind {
    Vc,
    Vf,
    VrClean,
}

/// Per-candidate quantities the exact computations need.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    pub c: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    pub r_eff: Vec<Vec<f64>>,
}

impl ValueTables {
    pub fn new(universe: &SyntheticUniverse, cfg: &RewardConfig) -> Self {
        let map = |g: &dyn Fn(&Candidate) -> f64| -> Vec<Vec<f64>> {
            universe.instances.iter().map(|i| i.candidates.iter().map(g).collect()).collect()
        };
        ValueTables {
            c: map(&|c| c.leak_count as f64),
            f: map(&|c| leakage_reward(c.leak_count, cfg)),
            r_eff: map(&|c| c.r_eff(cfg)),
        }
    }

    /// Build directly from leak counts and effective rewards.
    pub fn from_parts(c: Vec<Vec<u32>>, r_eff: Vec<Vec<f64>>, cfg: &RewardConfig) -> Self {
        let f = c.iter().map(|row| row.iter().map(|&n| leakage_reward(n, cfg)).collect()).collect();
        let c = c.iter().map(|row| row.iter().map(|&n| n as f64).collect()).collect();
        ValueTables { c, f, r_eff }
    }

    pub fn num_instances(&self) -> usize {
        self.c.len()
    }

    fn table(&self, kind: ValueKind) -> &[Vec<f64>] {
        match kind {
            ValueKind::Vc => &self.c,
            ValueKind::Vf => &self.f,
            ValueKind::VrClean => &self.r_eff,
        }
    }

    pub fn is_clean(&self, i: usize, k: usize) -> bool {
        self.c[i][k] == 0.0
    }

    /// Probability mass on clean candidates.
    pub fn clean_mass(&self, i: usize, p: &[f64]) -> f64 {
        p.iter().enumerate().filter(|&(k, _)| self.is_clean(i, k)).map(|(_, pk)| pk).sum()
    }

    /// Per-instance expectation of `kind`. For `VrClean` this is the
    /// expectation under the clean-conditional policy, `None` when the
    /// clean mass is zero.
    pub fn instance_value(&self, kind: ValueKind, i: usize, p: &[f64]) -> Option<f64> {
        let x = &self.table(kind)[i];
        match kind {
            ValueKind::VrClean => {
                let mass = self.clean_mass(i, p);
                (mass > 0.0).then(|| {
                    p.iter().zip(x).enumerate().filter(|&(k, _)| self.is_clean(i, k)).map(|(_, (pk, xk))| pk * xk).sum::<f64>()
                        / mass
                })
            }
            _ => Some(p.iter().zip(x).map(|(pk, xk)| pk * xk).sum()),
        }
    }

    /// Per-instance gradient with respect to that instance's logits.
    pub fn instance_gradient(&self, kind: ValueKind, i: usize, p: &[f64]) -> Vec<f64> {
        let x = &self.table(kind)[i];
        match kind {
            ValueKind::VrClean => {
                let mass = self.clean_mass(i, p);
                if mass <= 0.0 {
                    return vec![0.0; p.len()];
                }
                let mean = self.instance_value(kind, i, p).unwrap_or(0.0);
                (0..p.len())
                    .map(|k| if self.is_clean(i, k) { p[k] / mass * (x[k] - mean) } else { 0.0 })
                    .collect()
            }
            _ => {
                let mean: f64 = p.iter().zip(x).map(|(pk, xk)| pk * xk).sum();
                p.iter().zip(x).map(|(pk, xk)| pk * (xk - mean)).collect()
            }
        }
    }

    /// Standard deviation of `kind` under the policy (clean-conditional for
    /// `VrClean`).
    pub fn instance_std(&self, kind: ValueKind, i: usize, p: &[f64]) -> f64 {
        let x = &self.table(kind)[i];
        let Some(mean) = self.instance_value(kind, i, p) else { return 0.0 };
        let (num, den) = p.iter().zip(x).enumerate().fold((0.0, 0.0), |(n, d), (k, (pk, xk))| {
            if kind == ValueKind::VrClean && !self.is_clean(i, k) {
                (n, d)
            } else {
                (n + pk * (xk - mean).powi(2), d + pk)
            }
        });
        if den > 0.0 {
            (num / den).sqrt()
        } else {
            0.0
        }
    }
}

/// Exact `V_r` with a flag counting instances whose clean mass is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CleanValue {
    pub value: f64,
    pub undefined_instances: usize,
}

/// Dataset-mean exact value. Undefined `V_r` instances contribute 0 and
/// are counted in the flag.
pub fn exact_value(kind: ValueKind, probs: &[Vec<f64>], tables: &ValueTables) -> CleanValue {
    let n = probs.len() as f64;
    let mut undefined = 0;
    let sum: f64 = probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            tables.instance_value(kind, i, p).unwrap_or_else(|| {
                undefined += 1;
                0.0
            })
        })
        .sum();
    CleanValue { value: sum / n, undefined_instances: undefined }
}

pub fn exact_vc(policy: &SoftmaxPolicy, tables: &ValueTables) -> f64 {
    exact_value(ValueKind::Vc, &policy.all_probs(), tables).value
}

pub fn exact_vf(policy: &SoftmaxPolicy, tables: &ValueTables) -> f64 {
    exact_value(ValueKind::Vf, &policy.all_probs(), tables).value
}

pub fn exact_vr_clean(policy: &SoftmaxPolicy, tables: &ValueTables) -> CleanValue {
    exact_value(ValueKind::VrClean, &policy.all_probs(), tables)
}

/// Exact score-function gradient of the dataset-mean value.
pub fn exact_policy_gradient(kind: ValueKind, policy: &SoftmaxPolicy, tables: &ValueTables) -> Vec<Vec<f64>> {
    let n = policy.num_instances() as f64;
    policy
        .all_probs()
        .iter()
        .enumerate()
        .map(|(i, p)| tables.instance_gradient(kind, i, p).into_iter().map(|g| g / n).collect())
        .collect()
}

/// Central differences per logit.
pub fn finite_diff_gradient<F>(value_fn: F, policy: &SoftmaxPolicy, h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&SoftmaxPolicy) -> f64,
{
    let mut work = policy.clone();
    policy
        .sizes()
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            (0..n)
                .map(|k| {
                    let z = policy.logits[i][k];
                    work.logits[i][k] = z + h;
                    let up = value_fn(&work);
                    work.logits[i][k] = z - h;
                    let down = value_fn(&work);
                    work.logits[i][k] = z;
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Probability mass on leaky candidates per instance.
pub fn leak_mass(probs: &[Vec<f64>], tables: &ValueTables) -> Vec<f64> {
    probs.iter().enumerate().map(|(i, p)| 1.0 - tables.clean_mass(i, p)).collect()
}

/// Per-instance `(1 − q)^G` and its mean.
pub fn clean_group_prob(probs: &[Vec<f64>], tables: &ValueTables, group_size: usize) -> (Vec<f64>, f64) {
    let per: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| tables.clean_mass(i, p).clamp(0.0, 1.0).powi(group_size as i32))
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    (per, mean)
}

/// Frobenius norm of the exact `V_c` Hessian, block-diagonal over
/// instances, at the given policy.
pub fn vc_hessian_norm(probs: &[Vec<f64>], tables: &ValueTables) -> f64 {
    let n = probs.len() as f64;
    let mut total = 0.0;
    for (i, p) in probs.iter().enumerate() {
        let c = &tables.c[i];
        let mean: f64 = p.iter().zip(c).map(|(pk, ck)| pk * ck).sum();
        let u: Vec<f64> = p.iter().zip(c).map(|(pk, ck)| pk * (ck - mean)).collect();
        for j in 0..p.len() {
            for k in 0..p.len() {
                let diag = if j == k { u[j] } else { 0.0 };
                let h = (diag - u[j] * p[k] - p[j] * u[k]) / n;
                total += h * h;
            }
        }
    }
    total.sqrt()
}

pub fn dot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[Vec<f64>]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tables(c: Vec<Vec<u32>>) -> ValueTables {
        let r = c.iter().map(|row| row.iter().map(|_| 0.5).collect()).collect();
        ValueTables::from_parts(c, r, &RewardConfig::default())
    }

    #[test]
    fn exact_value_examples() {
        let t = tables(vec![vec![0, 1, 2]]);
        let peaked = vec![vec![1.0, 0.0, 0.0]];
        assert_eq!(exact_value(ValueKind::Vc, &peaked, &t).value, 0.0);
        assert_eq!(exact_value(ValueKind::Vf, &peaked, &t).value, 1.0);

        let uniform = vec![vec![1.0 / 3.0; 3]];
        assert_abs_diff_eq!(exact_value(ValueKind::Vc, &uniform, &t).value, 1.0, epsilon = 1e-15);
        let direct = (1.0 + (-0.5f64).exp() + (-1.0f64).exp()) / 3.0;
        assert_abs_diff_eq!(exact_value(ValueKind::Vf, &uniform, &t).value, direct, epsilon = 1e-15);
        assert_abs_diff_eq!(direct, 0.658, epsilon = 5e-4);

        let t2 = tables(vec![vec![0, 1]]);
        let half = vec![vec![0.5, 0.5]];
        assert_abs_diff_eq!(exact_value(ValueKind::Vc, &half, &t2).value, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(exact_value(ValueKind::Vf, &half, &t2).value, 0.8033, epsilon = 5e-5);

        let no_clean_mass = vec![vec![0.0, 1.0]];
        let v = exact_value(ValueKind::VrClean, &no_clean_mass, &t2);
        assert_eq!(v.undefined_instances, 1);
    }

    #[test]
    fn clean_group_prob_examples() {
        let t = tables(vec![vec![0, 1]]);
        assert_eq!(clean_group_prob(&[vec![1.0, 0.0]], &t, 12).1, 1.0);
        assert_abs_diff_eq!(clean_group_prob(&[vec![0.5, 0.5]], &t, 2).1, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(clean_group_prob(&[vec![0.9, 0.1]], &t, 12).1, 0.2824, epsilon = 5e-5);
    }

    #[test]
    fn constant_value_has_zero_gradient() {
        let t = tables(vec![vec![2, 2, 2]]);
        let p = SoftmaxPolicy::new(vec![vec![0.3, -1.0, 2.0]]).unwrap();
        assert!(exact_policy_gradient(ValueKind::Vc, &p, &t)[0].iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn two_outcome_gradient_matches_finite_differences() {
        let t = tables(vec![vec![0, 1]]);
        let p = SoftmaxPolicy::uniform(&[2]).unwrap();
        let g = exact_policy_gradient(ValueKind::Vc, &p, &t);
        assert_abs_diff_eq!(g[0][1], 0.25, epsilon = 1e-15);
        let fd = finite_diff_gradient(|q| exact_vc(q, &t), &p, 1e-5);
        for (a, b) in g[0].iter().zip(&fd[0]) {
            assert!((a - b).abs() / a.abs() < 1e-6);
        }
    }

    #[test]
    fn finite_differences_are_second_order() {
        let t = tables(vec![vec![0, 3, 1, 5]]);
        let p = SoftmaxPolicy::new(vec![vec![0.2, -0.4, 1.1, 0.3]]).unwrap();
        let exact = exact_policy_gradient(ValueKind::Vf, &p, &t);
        let err = |h: f64| {
            let fd = finite_diff_gradient(|q| exact_vf(q, &t), &p, h);
            exact[0].iter().zip(&fd[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        // Linear in one logit: softmax-free toy value.
        let lin = finite_diff_gradient(|q| 3.0 * q.logits[0][2], &p, 1e-3);
        assert_abs_diff_eq!(lin[0][2], 3.0, epsilon = 1e-9);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let spec = EnvSpec { seed: 5, malformed_rate: 0.2, ..Default::default() };
        let a = generate_env(&spec).unwrap();
        assert_eq!(a, generate_env(&spec).unwrap());
        a.validate().unwrap();
        assert_eq!(SyntheticUniverse::from_json(&a.to_json()).unwrap(), a);
        for inst in &a.instances {
            assert!(inst.candidates.iter().any(|c| c.leak_count == 0 && !c.malformed));
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        for spec in [
            EnvSpec { universe_size: 1, ..Default::default() },
            EnvSpec { universe_size: 65, ..Default::default() },
            EnvSpec { rho_cp: 1.5, ..Default::default() },
            EnvSpec { num_instances: 0, ..Default::default() },
        ] {
            assert!(matches!(generate_env(&spec), Err(Error::InfeasibleSpec(_))));
        }
    }

    #[test]
    fn full_quality_saturates_gates() {
        let u = generate_env(&EnvSpec { full_quality: true, ..Default::default() }).unwrap();
        let cfg = RewardConfig::default();
        assert!(u.candidates().all(|c| (c.r_eff(&cfg) - c.perf).abs() < 1e-15));
    }

    #[test]
    fn all_zero_leak_distribution_is_clean() {
        let u = generate_env(&EnvSpec { zero_mass: 1.0, ..Default::default() }).unwrap();
        assert_eq!(u.summary().clean_fraction, 1.0);
    }

    #[test]
    fn positive_correlation_knob() {
        let u = generate_env(&EnvSpec { rho_cp: 0.9, num_instances: 40, ..Default::default() }).unwrap();
        let pairs: Vec<(f64, f64)> = u.candidates().map(|c| (c.leak_count as f64, c.perf)).collect();
        let n = pairs.len() as f64;
        let (mx, my) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
        let cov: f64 = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        assert!(cov > 0.0);
    }

    #[test]
    fn rendered_candidates_reproduce_leak_counts() {
        let u = generate_env(&EnvSpec { seed: 11, num_instances: 4, ..Default::default() }).unwrap();
        let oracle = u.oracle();
        let members = u.parsed_members();
        for (inst, row) in u.instances.iter().zip(&members) {
            for (cand, m) in inst.candidates.iter().zip(row) {
                let c = m.as_ref().unwrap();
                assert_eq!(crate::verifier::leak_count(c, inst.cutoff, &oracle), cand.leak_count);
                assert_eq!(crate::model::citation_coverage(c), cand.coverage());
                assert_eq!(crate::model::word_count(&c.reasoning), cand.word_count);
            }
        }
    }

    proptest! {
        #[test]
        fn value_ranges(seed in 0u64..500, scale in 0.0f64..4.0) {
            let u = generate_env(&EnvSpec { seed, num_instances: 3, universe_size: 6, ..Default::default() }).unwrap();
            let t = ValueTables::new(&u, &RewardConfig::default());
            let p = u.random_policy(scale, &mut substream(seed, 1, 2));
            let vc = exact_vc(&p, &t);
            let vf = exact_vf(&p, &t);
            prop_assert!(vc >= 0.0);
            prop_assert!(vf > 0.0 && vf <= 1.0 + 1e-15);
            prop_assert_eq!(vf >= 1.0 - 1e-15, vc <= 1e-15);
            let probs = p.all_probs();
            let (_, p0) = clean_group_prob(&probs, &t, 12);
            let q = leak_mass(&probs, &t);
            let q_bar = q.iter().sum::<f64>() / q.len() as f64;
            prop_assert!(p0 >= (1.0 - q_bar).powi(12) - 1e-12);
            if vc <= 1.0 {
                prop_assert!((1.0 - q_bar).powi(12) >= (1.0 - vc).powi(12) - 1e-12);
            }
        }

        #[test]
        fn gradients_match_finite_differences(seed in 0u64..500) {
            let u = generate_env(&EnvSpec { seed, num_instances: 2, universe_size: 5, ..Default::default() }).unwrap();
            let cfg = RewardConfig::default();
            let t = ValueTables::new(&u, &cfg);
            let p = u.random_policy(1.0, &mut substream(seed, 3, 4));
            for kind in [ValueKind::Vc, ValueKind::Vf, ValueKind::VrClean] {
                let exact = exact_policy_gradient(kind, &p, &t);
                let fd = finite_diff_gradient(|q| exact_value(kind, &q.all_probs(), &t).value, &p, 1e-5);
                let diff: Vec<Vec<f64>> = exact.iter().zip(&fd).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
                // Constant-value instances have an exact zero gradient; central
                // differences there only see rounding noise.
                prop_assert!(norm(&diff) <= 1e-5 * norm(&exact) + 1e-9);
            }
        }
    }
}
