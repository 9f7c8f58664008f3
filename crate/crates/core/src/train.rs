//! The training loop: sample groups, audit, score, shape advantages and
//! apply the clipped update, recording one trace row per step.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::env::{clean_group_prob, exact_value, SyntheticUniverse, ValueKind, ValueTables};
use crate::error::{Error, Result};
use crate::grpo::{
    batch_baseline, clipped_surrogate_gradient, kl_adjust, sample_group, substream, zscore_advantages, GradientSource,
    Optimizer, SurrogateTerm, TrainerConfig,
};
use crate::metrics::{mode_transition_stats, task_perf, ModeTransition};
use crate::model::{member_raw_length, Member};
use crate::policy::SoftmaxPolicy;
use crate::reward::{format_penalty, overlong_factor, score_group, FormatPenalty, GroupScore, Mode, RewardConfig};
use crate::trace::TraceRow;
use crate::verifier::{audit_group, DateVerifier};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const INIT_STREAM: u64 = 0x494E_4954;

/// Starting policy: uniform, or normal logits when `init_logit_std > 0`.
pub fn initial_policy(cfg: &TrainerConfig, universe: &SyntheticUniverse) -> SoftmaxPolicy {
    let mut rng = substream(cfg.seed, INIT_STREAM, 0);
    let logits = universe
        .sizes()
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| if cfg.init_logit_std > 0.0 { cfg.init_logit_std * Distribution::<f64>::sample(&StandardNormal, &mut rng) } else { 0.0 })
                .collect()
        })
        .collect();
    SoftmaxPolicy::new(logits).expect("universe validated")
}

/// A sampled, scored group before advantage shaping.
struct ScoredGroup {
    instance: usize,
    outcomes: Vec<usize>,
    old_logprobs: Vec<f64>,
    raw_lengths: Vec<usize>,
    score: GroupScore,
}

/// Advantages for one group: valid members get z-scores plus the batch
/// baseline; failures get the derived format penalty scaled by length.
fn group_advantages(g: &ScoredGroup, cfg: &TrainerConfig, reward_cfg: &RewardConfig, mode_mean: f64) -> Result<Option<Vec<f64>>> {
    let valid_rewards = g.score.valid_rewards();
    let z = match valid_rewards.len() {
        0 => return Ok(None),
        1 => vec![0.0],
        _ => zscore_advantages(&valid_rewards, cfg.advantage_zclip)?,
    };
    let fpen = format_penalty(&z, reward_cfg);
    if fpen == FormatPenalty::SkipGroup {
        return Ok(None);
    }
    let shaped = batch_baseline(&z, &valid_rewards, mode_mean, cfg.batch_baseline);
    let mut shaped = shaped.into_iter();
    let adv = g
        .score
        .breakdowns
        .iter()
        .zip(&g.raw_lengths)
        .map(|(b, &len)| {
            if b.is_parse_failure {
                fpen.failure_advantage() * overlong_factor(len, reward_cfg)
            } else {
                shaped.next().expect("one shaped advantage per valid member")
            }
        })
        .collect();
    Ok(Some(adv))
}

pub struct Trainer<'a> {
    pub cfg: TrainerConfig,
    pub reward_cfg: RewardConfig,
    pub universe: &'a SyntheticUniverse,
    pub verifier: &'a dyn DateVerifier,
    tables: ValueTables,
    members: Vec<Vec<Member>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub learning_rate: f64,
    pub initial: TraceRow,
    #[serde(rename = "final")]
    pub last: TraceRow,
    pub mode_transition: ModeTransition,
    pub policy_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: SoftmaxPolicy,
    pub rows: Vec<TraceRow>,
}

impl TrainOutcome {
    pub fn summary(&self, lr: f64) -> Result<TrainSummary> {
        Ok(TrainSummary {
            steps: self.rows.len().saturating_sub(1),
            learning_rate: lr,
            initial: self.rows.first().cloned().unwrap_or_default(),
            last: self.rows.last().cloned().unwrap_or_default(),
            mode_transition: mode_transition_stats(&self.rows)?,
            policy_hash: self.policy.snapshot_hash(),
        })
    }
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainerConfig,
        reward_cfg: RewardConfig,
        universe: &'a SyntheticUniverse,
        verifier: &'a dyn DateVerifier,
    ) -> Result<Self> {
        cfg.validate()?;
        reward_cfg.validate()?;
        universe.validate()?;
        let tables = ValueTables::new(universe, &reward_cfg);
        let members = universe.parsed_members();
        Ok(Trainer { cfg, reward_cfg, universe, verifier, tables, members })
    }

    pub fn tables(&self) -> &ValueTables {
        &self.tables
    }

    /// Train from the configured initial policy.
    pub fn run(&self, sink: &mut dyn FnMut(&TraceRow) -> Result<()>, stop: Option<&AtomicBool>) -> Result<TrainOutcome> {
        self.run_from(initial_policy(&self.cfg, self.universe), sink, stop)
    }

    pub fn run_from(
        &self,
        mut policy: SoftmaxPolicy,
        sink: &mut dyn FnMut(&TraceRow) -> Result<()>,
        stop: Option<&AtomicBool>,
    ) -> Result<TrainOutcome> {
        if policy.sizes() != self.universe.sizes() {
            return Err(Error::InvalidInput("policy shape does not match the universe".into()));
        }
        let mut opt = Optimizer::from_config(&self.cfg, &policy.sizes());
        let mut order: Vec<usize> = Vec::new();
        let mut epoch = 0u64;
        let mut rows = Vec::with_capacity(self.cfg.steps + 1);
        let log_every = (self.cfg.steps / 10).max(1);

        for step in 0..=self.cfg.steps {
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                return Err(Error::Interrupted(step));
            }
            let (row, grad) = match self.cfg.gradient {
                GradientSource::Exact => self.exact_step(step, &policy),
                GradientSource::Sampled => {
                    let batch = self.next_batch(&mut order, &mut epoch);
                    self.sampled_step(step, &policy, &batch)?
                }
            };
            sink(&row)?;
            if step % log_every == 0 {
                log::info!(
                    "step {step}: mode {:.3} V_c {:.4e} p0 {:.3} reward {:.4}",
                    row.mode_fraction,
                    row.v_c,
                    row.p0_bar,
                    row.mean_reward
                );
            }
            rows.push(row);
            if step == self.cfg.steps {
                break;
            }
            match grad {
                Some(Update::Exact(g)) => opt.step(&mut policy.logits, &g)?,
                Some(Update::Surrogate(terms)) => {
                    for _ in 0..self.cfg.update_epochs {
                        let g = clipped_surrogate_gradient(
                            &policy,
                            &terms,
                            self.cfg.temperature,
                            self.cfg.clip_low,
                            self.cfg.clip_high,
                        )?;
                        opt.step(&mut policy.logits, &g)?;
                    }
                }
                None => {}
            }
        }
        Ok(TrainOutcome { policy, rows })
    }

    fn next_batch(&self, order: &mut Vec<usize>, epoch: &mut u64) -> Vec<usize> {
        let n = self.universe.instances.len();
        (0..self.cfg.batch_size)
            .map(|_| {
                if order.is_empty() {
                    *order = (0..n).collect();
                    order.shuffle(&mut substream(self.cfg.seed, SHUFFLE_STREAM, *epoch));
                    order.reverse();
                    *epoch += 1;
                }
                order.pop().expect("refilled above")
            })
            .collect()
    }

    fn exact_row_values(&self, step: usize, probs: &[Vec<f64>]) -> (TraceRow, Vec<f64>) {
        let (p0, p0_bar) = clean_group_prob(probs, &self.tables, self.cfg.group_size);
        let row = TraceRow {
            step,
            mode_fraction: 0.0,
            v_c: exact_value(ValueKind::Vc, probs, &self.tables).value,
            v_f: exact_value(ValueKind::Vf, probs, &self.tables).value,
            v_r_clean: exact_value(ValueKind::VrClean, probs, &self.tables).value,
            p0_bar,
            mean_reward: 0.0,
            parse_fail_rate: 0.0,
        };
        (row, p0)
    }

    /// Expected-mode gradient `(1 − p0_i) ∇V_f + p0_i ∇V_r` per instance.
    fn exact_step(&self, step: usize, policy: &SoftmaxPolicy) -> (TraceRow, Option<Update>) {
        let probs = policy.all_probs();
        let (mut row, p0) = self.exact_row_values(step, &probs);
        let n = probs.len() as f64;
        let mut expected_reward = 0.0;
        let grad = probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let vf = self.tables.instance_value(ValueKind::Vf, i, p).unwrap_or(0.0);
                let vr = self.tables.instance_value(ValueKind::VrClean, i, p).unwrap_or(0.0);
                expected_reward += p0[i] * vr + (1.0 - p0[i]) * vf;
                let gf = self.tables.instance_gradient(ValueKind::Vf, i, p);
                let gr = self.tables.instance_gradient(ValueKind::VrClean, i, p);
                gf.iter().zip(&gr).map(|(a, b)| ((1.0 - p0[i]) * a + p0[i] * b) / n).collect()
            })
            .collect();
        row.mode_fraction = row.p0_bar;
        row.mean_reward = expected_reward / n;
        (row, Some(Update::Exact(grad)))
    }

    fn sampled_step(&self, step: usize, policy: &SoftmaxPolicy, batch: &[usize]) -> Result<(TraceRow, Option<Update>)> {
        let progress = step as f64 / self.cfg.steps.max(1) as f64;
        let groups: Vec<ScoredGroup> = batch
            .par_iter()
            .enumerate()
            .map(|(g, &i)| {
                let mut rng = substream(self.cfg.seed, step as u64, g as u64);
                let (outcomes, old_logprobs) =
                    sample_group(policy, i, self.cfg.group_size, self.cfg.temperature, &mut rng);
                let members: Vec<Member> = outcomes.iter().map(|&k| self.members[i][k].clone()).collect();
                let inst = self.universe.instances[i].instance();
                let audit = audit_group(&members, inst.cutoff, self.verifier);
                let score = score_group(&members, &audit, &inst.label, task_perf, &self.reward_cfg, progress);
                let raw_lengths = members.iter().map(member_raw_length).collect();
                ScoredGroup { instance: i, outcomes, old_logprobs, raw_lengths, score }
            })
            .collect();

        let mode_mean = |mode: Mode| -> f64 {
            let r: Vec<f64> = groups.iter().filter(|g| g.score.mode == Some(mode)).flat_map(|g| g.score.valid_rewards()).collect();
            if r.is_empty() {
                0.0
            } else {
                r.iter().sum::<f64>() / r.len() as f64
            }
        };
        let means = [mode_mean(Mode::Leakage), mode_mean(Mode::Performance)];

        let mut terms = Vec::new();
        let mut new_lp = Vec::new();
        let mut ref_lp = Vec::new();
        for g in &groups {
            let Some(mode) = g.score.mode else { continue };
            let mean = means[(mode == Mode::Performance) as usize];
            let Some(adv) = group_advantages(g, &self.cfg, &self.reward_cfg, mean)? else { continue };
            for ((&k, &old), a) in g.outcomes.iter().zip(&g.old_logprobs).zip(adv) {
                terms.push(SurrogateTerm { instance: g.instance, outcome: k, advantage: a, old_logprob: old });
                new_lp.push(policy.log_prob(g.instance, k, self.cfg.temperature));
                ref_lp.push(policy.ref_log_prob(g.instance, k, self.cfg.temperature));
            }
        }
        let advantages: Vec<f64> = terms.iter().map(|t| t.advantage).collect();
        let mask = vec![1.0; terms.len()];
        let adjusted = kl_adjust(&advantages, &new_lp, &ref_lp, &mask, self.cfg.kl_coeff);
        for (t, a) in terms.iter_mut().zip(adjusted) {
            t.advantage = a;
        }

        let probs = policy.all_probs();
        let (mut row, _) = self.exact_row_values(step, &probs);
        let n_groups = groups.len() as f64;
        row.mode_fraction = groups.iter().filter(|g| g.score.mode == Some(Mode::Performance)).count() as f64 / n_groups;
        let valid: Vec<f64> = groups.iter().flat_map(|g| g.score.valid_rewards()).collect();
        row.mean_reward = if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
        let total: usize = groups.iter().map(|g| g.outcomes.len()).sum();
        let failed: usize = groups.iter().map(|g| g.score.breakdowns.iter().filter(|b| b.is_parse_failure).count()).sum();
        row.parse_fail_rate = failed as f64 / total as f64;

        Ok((row, (!terms.is_empty()).then_some(Update::Surrogate(terms))))
    }
}

enum Update {
    Exact(Vec<Vec<f64>>),
    Surrogate(Vec<SurrogateTerm>),
}
