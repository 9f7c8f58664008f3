//! The full theory suite as driven by a [`RunConfig`].

use crate::config::RunConfig;
use crate::env::{generate_env, EnvSpec, ValueTables};
use crate::error::Result;
use crate::grpo::{GradientSource, OptimizerKind};
use crate::policy::SoftmaxPolicy;
use crate::theory::{
    adversarial_policies, alignment_suite, check_curriculum, check_exact_penalty, check_linear_convergence,
    check_mixed_descent, check_noise_floor, check_scale_dominance, descent_suite, gradient_suite,
    scale_dominance_suite, ExactRun, TheoryReport,
};
use crate::train::Trainer;

pub const FD_STEP: f64 = 1e-5;
pub const DESCENT_STOP: f64 = 1e-6;
pub const CONVERGENCE_RATIO: f64 = 1e-4;
pub const NOISE_FLOOR_RATIO: f64 = 0.7;
pub const HIGH_LEAK_FRACTION: f64 = 0.2;

fn seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| base.wrapping_add(k)).collect()
}

/// Leaked candidates score perfectly and every candidate passes the
/// quality gates, so leaking is the only route to higher raw performance.
pub fn adversarial_spec(base: &EnvSpec) -> EnvSpec {
    EnvSpec { full_quality: true, leaked_perf: Some(1.0), rho_cp: 0.0, ..base.clone() }
}

/// Every check, in report order. `cfg` must already be resolved.
pub fn run_suite(cfg: &RunConfig) -> Result<TheoryReport> {
    let th = &cfg.theory;
    let root = cfg.env.seed;
    let exact = ExactRun { optimizer: OptimizerKind::Adam, learning_rate: 0.05, max_steps: th.descent_max_steps };
    let mut checks = vec![];

    checks.push(alignment_suite(&cfg.env, &cfg.reward, &seeds(root, th.alignment_trials), 1.0)?);
    checks.push(gradient_suite(&cfg.env, &cfg.reward, &seeds(root, th.gradient_trials), FD_STEP)?);
    checks.push(descent_suite(&cfg.env, &cfg.reward, &seeds(root, th.descent_envs), &exact, DESCENT_STOP)?);

    let universe = cfg.universe()?;
    let tables = ValueTables::new(&universe, &cfg.reward);
    let uniform = SoftmaxPolicy::uniform(&universe.sizes())?;
    let mixed = ExactRun { learning_rate: th.mixed_learning_rate, ..exact };
    let mut entry = check_mixed_descent(&tables, &uniform, th.mixed_alpha, &mixed, DESCENT_STOP)?;
    entry.env_seed = Some(root);
    entry.trajectory.clear();
    checks.push(entry);

    let conv = ExactRun { max_steps: th.convergence_max_steps, ..exact };
    let mut entry = check_linear_convergence(&tables, &uniform, &conv, CONVERGENCE_RATIO)?;
    entry.env_seed = Some(root);
    entry.trajectory.clear();
    checks.push(entry);

    let verifier = cfg.verifier(&universe)?;
    let sampled = crate::grpo::TrainerConfig {
        steps: th.noise_floor_steps,
        gradient: GradientSource::Sampled,
        ..cfg.trainer.clone()
    };
    let floor_seeds = seeds(cfg.trainer.seed, th.noise_floor_seeds);
    let mut entry = check_noise_floor(&universe, verifier.as_ref(), &sampled, &cfg.reward, &floor_seeds, NOISE_FLOOR_RATIO)?;
    entry.env_seed = Some(root);
    checks.push(entry);

    let curriculum_cfg = crate::grpo::TrainerConfig { steps: th.curriculum_steps, ..cfg.trainer.clone() };
    let out = Trainer::new(curriculum_cfg, cfg.reward.clone(), &universe, verifier.as_ref())?.run(&mut |_| Ok(()), None)?;
    let mut entry = check_curriculum(&out.rows, cfg.trainer.group_size, HIGH_LEAK_FRACTION);
    entry.env_seed = Some(root);
    entry.policy_hash = Some(out.policy.snapshot_hash());
    checks.push(entry);

    checks.push(scale_dominance_suite(th.scale_trials, cfg.trainer.group_size, root));
    let leak = [1.0, 0.0, 1.0, 0.0];
    let perf: Vec<f64> = leak.iter().map(|v| 100.0 * (1.0 - v)).collect();
    let mut entry = check_scale_dominance(&leak, &perf, 0.5);
    entry.name = "scale_dominance_ratio".into();
    checks.push(entry);

    let adv = generate_env(&adversarial_spec(&cfg.env))?;
    let adv_tables = ValueTables::new(&adv, &cfg.reward);
    let (clean, leaky) = adversarial_policies(&adv_tables, th.penalty_leak_mass);
    let mut entry = check_exact_penalty(&adv_tables, &clean, &leaky, &th.penalty_group_sizes);
    entry.env_seed = Some(root);
    checks.push(entry);

    Ok(TheoryReport { checks })
}
